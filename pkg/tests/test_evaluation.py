import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from oracles import direct_ate_rmse, direct_rpe, pose_from_rt, random_pose
from probslam.dataset import Trajectory
from probslam.errors import DegenerateConfiguration, EmptySeries, InsufficientPairs
from probslam.evaluation import (
    align_umeyama,
    ate,
    format_series_csv,
    format_summary_csv,
    rpe,
    summarize,
)
from probslam.geometry import Pose, rotation_angle


def smooth_trajectory(seed, n=100):
    rng = np.random.default_rng(seed)
    stamps = np.arange(n) / 30.0
    poses, t = [], np.zeros(3)
    rv = np.zeros(3)
    for _ in range(n):
        t = t + rng.normal(scale=0.05, size=3)
        rv = rv + rng.normal(scale=0.02, size=3)
        poses.append(pose_from_rt(Rotation.from_rotvec(rv).as_matrix(), t))
    return Trajectory(stamps, poses)


def test_umeyama_identity():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    s, R, t = align_umeyama(pts, pts, with_scale=True)
    assert math.isclose(s, 1.0, rel_tol=1e-12)
    assert np.allclose(R, np.eye(3), atol=1e-12) and np.allclose(t, 0.0, atol=1e-12)


def test_umeyama_recovers_rigid_inverse():
    ref = np.random.default_rng(1).normal(size=(30, 3))
    Rz = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    est = ref @ Rz.T + [1.0, 2.0, 3.0]
    s, R, t = align_umeyama(ref, est)
    assert s == 1.0
    assert rotation_angle(R @ Rz) < 1e-9
    assert np.max(np.abs(est @ R.T + t - ref)) <= 1e-9


def test_umeyama_recovers_scale():
    ref = np.random.default_rng(2).normal(size=(30, 3))
    s, R, t = align_umeyama(ref, 2.0 * ref, with_scale=True)
    assert abs(s - 0.5) < 1e-9


def test_umeyama_handles_reflection_and_degeneracy():
    rng = np.random.default_rng(3)
    ref = rng.normal(size=(20, 3))
    _, R, _ = align_umeyama(ref, ref * [1.0, 1.0, -1.0])
    assert np.isclose(np.linalg.det(R), 1.0)
    with pytest.raises(DegenerateConfiguration):
        align_umeyama(ref[:2], ref[:2])
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        align_umeyama(line, line)


def test_ate_self_and_offset():
    traj = smooth_trajectory(0)
    _, summary = ate(traj, traj)
    assert summary.rmse == pytest.approx(0.0, abs=1e-12)
    shifted = traj.transformed(Pose((1.0, 0, 0, 0), (0.1, 0.0, 0.0)))
    assert ate(traj, shifted)[1].rmse < 1e-12


def test_ate_one_perturbed_pose_matches_direct_formula():
    traj = smooth_trajectory(1)
    poses = list(traj.poses)
    poses[37] = Pose(poses[37].rotation, poses[37].translation + [0.05, 0.0, 0.0])
    est = Trajectory(traj.timestamps, poses)
    series, summary = ate(traj, est)
    s, R, t = align_umeyama(traj.positions(), est.positions())
    assert math.isclose(summary.rmse, direct_ate_rmse(traj.positions(), est.positions(), R, t),
                        rel_tol=1e-12)
    assert 0.0 < summary.rmse < 0.05


def test_ate_gauge_invariance():
    rng = np.random.default_rng(4)
    ref = smooth_trajectory(2)
    noisy = Trajectory(ref.timestamps, [
        Pose(p.rotation, p.translation + rng.normal(scale=0.02, size=3)) for p in ref.poses
    ])
    base = ate(ref, noisy)[1].rmse
    for _ in range(10):
        g = random_pose(rng, scale=10.0)
        assert abs(ate(ref, noisy.transformed(g))[1].rmse - base) < 1e-9


def test_alignment_is_optimal():
    rng = np.random.default_rng(5)
    ref = smooth_trajectory(3)
    est = Trajectory(ref.timestamps, [
        Pose(p.rotation, p.translation + rng.normal(scale=0.05, size=3)) for p in ref.poses
    ])
    a, b = ref.positions(), est.positions()
    _, R, t = align_umeyama(a, b)
    best = np.sum((a - (b @ R.T + t)) ** 2)
    for _ in range(100):
        xi = rng.normal(size=6)
        xi *= 1e-3 / np.linalg.norm(xi)
        dR = Rotation.from_rotvec(xi[:3]).as_matrix()
        sq = np.sum((a - (b @ (dR @ R).T + dR @ t + xi[3:])) ** 2)
        assert sq >= best


def test_rpe_zero_for_identical_and_global_transform():
    traj = smooth_trajectory(6)
    (ts, tsum), (rs, rsum) = rpe(traj, traj)
    assert tsum.max < 1e-12 and rsum.max < 1e-7
    g = random_pose(np.random.default_rng(6), scale=5.0)
    (_, t2), (_, r2) = rpe(traj, traj.transformed(g))
    assert t2.max < 1e-9 and r2.max < 1e-7


def test_rpe_invariant_under_global_transforms():
    rng = np.random.default_rng(7)
    ref = smooth_trajectory(7)
    est = smooth_trajectory(8)
    (_, t0), (_, r0) = rpe(ref, est, 2)
    for _ in range(5):
        g, h = random_pose(rng), random_pose(rng)
        (_, t1), (_, r1) = rpe(ref.transformed(g), est.transformed(h), 2)
        assert abs(t1.rmse - t0.rmse) < 1e-9 and abs(r1.rmse - r0.rmse) < 1e-9


@pytest.mark.parametrize("delta", [1, 3])
def test_rpe_matches_direct_formula(delta):
    ref, est = smooth_trajectory(9, 40), smooth_trajectory(10, 40)
    (ts, _), (rs, _) = rpe(ref, est, delta)
    dt, dr = direct_rpe([p.matrix() for p in ref.poses], [p.matrix() for p in est.poses], delta)
    assert np.allclose(ts.errors, dt, atol=1e-12)
    assert np.allclose(rs.errors, dr, atol=1e-9)


def test_rpe_needs_enough_pairs():
    traj = smooth_trajectory(11, 3)
    with pytest.raises(InsufficientPairs):
        rpe(traj, traj, 3)


def test_summary_hand_evaluated():
    s = summarize([3.0, 4.0])
    assert math.isclose(s.rmse, math.sqrt(12.5)) and s.mean == 3.5 and s.std == 0.5
    s = summarize([2.5])
    assert s.rmse == s.mean == s.median == 2.5 and s.std == 0.0
    s = summarize([0.0, 0.0, 0.0])
    assert (s.rmse, s.mean, s.median, s.std, s.min, s.max) == (0.0,) * 6
    assert summarize([5.0, 1.0, 3.0, 2.0]).median == 2.0
    with pytest.raises(EmptySeries):
        summarize([])


def test_summary_identities():
    rng = np.random.default_rng(12)
    for _ in range(50):
        e = rng.exponential(size=rng.integers(1, 50))
        s = summarize(e)
        assert s.rmse >= s.mean
        assert abs(s.rmse ** 2 - (s.mean ** 2 + s.std ** 2)) < 1e-12


def test_csv_formats():
    traj = smooth_trajectory(13, 5)
    series, summary = ate(traj, traj)
    lines = format_series_csv(series).splitlines()
    assert lines[0] == "timestamp,error" and len(lines) == 6
    assert lines[2].startswith("0.0333333333,")
    text = format_summary_csv([("ate", summary)])
    assert text.splitlines()[0] == "metric,n,rmse,mean,median,std,min,max"
    assert text.splitlines()[1].startswith("ate,5,0.000000")
