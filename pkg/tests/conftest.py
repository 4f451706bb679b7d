import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gapolab import denoiser as net
from gapolab.diffusion import build_schedule
from gapolab.losses import PreferencePair
from gapolab.scenes import generate_scene

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# A reduced clip size keeps gradient checks and training smoke runs fast.
SMALL = dict(frames=4, height=8, width=8)


@pytest.fixture(scope="session")
def small_layout():
    return net.Layout(frames=4, height=8, width=8, timesteps=16, hidden=12)


@pytest.fixture(scope="session")
def small_schedule():
    return build_schedule(16)


@pytest.fixture(scope="session")
def small_scenes():
    return [generate_scene(s, **SMALL) for s in range(6)]


def random_params(layout, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return net.DenoiserParams(scale * rng.normal(0, 0.3, layout.param_count), layout)


def fd_check(f, x, grad, coords, h=1e-5, stencil=2):
    """Worst relative error of ``grad`` against central differences; a
    four-point stencil cancels the cubic term for sharply curved losses."""
    def at(i, step):
        xs = x.copy()
        xs[i] += step
        return f(xs)

    errs = []
    for i in coords:
        num = (at(i, h) - at(i, -h)) / (2 * h)
        if stencil == 4:
            num = (8 * (at(i, h) - at(i, -h)) - (at(i, 2 * h) - at(i, -2 * h))) / (12 * h)
        errs.append(abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-6))
    return max(errs)


def make_pair(scene, rng, rw=0.8, rl=0.3):
    shape = scene.gt_video.shape
    return PreferencePair(scene.initial_frame, scene.condition,
                          np.clip(scene.gt_video + rng.normal(0, 0.05, shape), 0, 1),
                          np.clip(scene.gt_video + rng.normal(0, 0.2, shape), 0, 1), rw, rl,
                          scene_seed=scene.seed)


# -- acceptance report ---------------------------------------------------------------

ACCEPTANCE = []


def report(number, title, ok, detail=""):
    """Record and print one acceptance line, then fail the calling test if needed."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
