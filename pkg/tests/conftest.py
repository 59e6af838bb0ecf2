import numpy as np
import pytest

from flowpose.geometry import N_POSE, ModelState, build_skeleton
from flowpose.raster import Camera

WORLD_TO_CAM = np.diag([1.0, -1.0, -1.0])


def make_camera(size: int = 64, focal: float | None = None, distance: float = 3.6) -> Camera:
    """Camera looking at the origin from +z, image y pointing down."""
    focal = 230.0 * size / 128 if focal is None else focal
    return Camera(focal, size / 2, size / 2, size, size, WORLD_TO_CAM, np.array([0.0, -0.1, distance]))


def random_state(rng, scale: float = 0.25, gender: str = "male", frame: int = 0,
                 sigma_scale: float = 0.05) -> ModelState:
    theta = rng.uniform(-scale, scale, N_POSE)
    theta[:3] += np.array([0.0, 0.6, 0.0])
    # arms down-ish so the body stays compact in the image
    theta[3 * 16 + 2] -= 1.1
    theta[3 * 17 + 2] += 1.1
    return ModelState(gender, np.zeros(10), theta, rng.normal(0, sigma_scale, 3), frame)


def perturb(state: ModelState, rng, scale: float = 0.02, frame: int | None = None) -> ModelState:
    return state.with_motion(state.motion + rng.uniform(-scale, scale, state.motion.size),
                             frame=state.frame + 1 if frame is None else frame)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def male():
    return build_skeleton("male")


@pytest.fixture(scope="session")
def cam64():
    return make_camera(64)


@pytest.fixture(scope="session")
def cam128():
    return make_camera(128)


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
