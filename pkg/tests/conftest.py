import numpy as np
import pytest

from oracles import DEFAULT_K, camera_facing_origin, matrix_exp_se3
from probslam.ba import BAProblem, Landmark, Observation
from probslam.geometry import Pose


def make_problem(seed, n_frames=3, n_landmarks=30, noise=1.0, weights="random",
                 full=False, n_fixed_landmarks=3, perturb=0.05):
    """Random BA problem with cameras around a unit cube of landmarks.

    Returns ``(problem, truth_poses)``. Pose-only unless ``full``; a full
    problem keeps ``n_fixed_landmarks`` landmarks fixed so the optimum is
    unique.
    """
    rng = np.random.default_rng(seed)
    K = DEFAULT_K
    pts = rng.uniform(-1.0, 1.0, size=(n_landmarks, 3))
    truth = {f: camera_facing_origin(rng) for f in range(n_frames)}
    obs = []
    for f, pose in truth.items():
        Xc = pose.transform(pts)
        for i, x in enumerate(Xc):
            u = K.fx * x[0] / x[2] + K.cx + rng.normal(scale=noise)
            v = K.fy * x[1] / x[2] + K.cy + rng.normal(scale=noise)
            w = rng.uniform(0.05, 1.0) if weights == "random" else 1.0
            obs.append(Observation(f, i, (u, v), w))
    init = {}
    for f, pose in truth.items():
        xi = rng.normal(size=6)
        xi *= perturb / np.linalg.norm(xi)
        init[f] = Pose.from_matrix(matrix_exp_se3(xi) @ pose.matrix())
    if full:
        lms = {i: Landmark(i, p + rng.normal(scale=0.02, size=3)) for i, p in enumerate(pts)}
        lms.update({i: Landmark(i, pts[i]) for i in range(n_fixed_landmarks)})
        fixed = set(range(n_fixed_landmarks))
    else:
        lms = {i: Landmark(i, p) for i, p in enumerate(pts)}
        fixed = set(lms)
    return BAProblem(K, init, lms, obs, (), fixed), truth


@pytest.fixture
def problem_factory():
    return make_problem


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
