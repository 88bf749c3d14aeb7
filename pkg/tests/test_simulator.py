from dataclasses import replace

import numpy as np
import pytest

from probslam.ba import format_problem, solve
from probslam.dataset import format_detections, format_tum_trajectory
from probslam.errors import EmptyScene
from probslam.evaluation import ate
from probslam.geometry import CameraIntrinsics, project_many
from probslam.pipeline import estimated_trajectory, solve_frames
from probslam.simulator import (
    SceneConfig,
    build_problem,
    contaminate_as_static,
    format_config,
    generate,
    parse_config,
)

SMALL = SceneConfig(seed=3, n_frames=12, n_static_landmarks=100, n_dynamic_landmarks=20)


def scene_bytes(scene):
    return (
        format_tum_trajectory(scene.ground_truth)
        + format_detections(scene.detections)
        + format_problem(build_problem(contaminate_as_static(scene)))
    )


def test_same_seed_gives_identical_scenes():
    assert scene_bytes(generate(SMALL)) == scene_bytes(generate(SMALL))
    assert scene_bytes(generate(replace(SMALL, seed=4))) != scene_bytes(generate(SMALL))


@pytest.mark.parametrize("trajectory", ["orbit", "line", "arc"])
def test_observations_come_from_the_frustum(trajectory):
    cfg = replace(SMALL, trajectory=trajectory, pixel_noise_sigma=0.0)
    scene = generate(cfg)
    K = cfg.intrinsics
    n_obs = 0
    for f, obs in enumerate(scene.observations):
        pts = scene.positions_at(f)
        for o in obs:
            pix, depth = project_many(K, scene.poses[f], pts[o.landmark_id][None, :])
            assert depth[0] > 0
            assert 0 <= pix[0, 0] <= K.width - 1 and 0 <= pix[0, 1] <= K.height - 1
            assert np.allclose(pix[0], o.pixel, atol=1e-9)
            n_obs += 1
    assert n_obs > 0


def test_full_coverage_boxes_contain_their_clusters():
    cfg = replace(SMALL, detection_coverage=1.0, box_jitter_sigma=0.0, pixel_noise_sigma=0.0)
    scene = generate(cfg)
    for frame, obs in zip(scene.detections, scene.observations):
        boxes = {d.label: d.box for d in frame.detections}
        for o in obs:
            if scene.is_dynamic(o.landmark_id):
                continue
            box = boxes[f"object_{scene.cluster_of[o.landmark_id]}"]
            assert box.contains(o.pixel)


def test_dynamic_landmarks_never_get_boxes():
    scene = generate(SMALL)
    n_clusters = SMALL.n_clusters
    for frame in scene.detections:
        for d in frame.detections:
            assert d.is_static and int(d.label.split("_")[1]) < n_clusters


def test_partial_coverage_emits_a_subset():
    scene = generate(replace(SMALL, detection_coverage=0.5))
    labels = {d.label for fr in scene.detections for d in fr.detections}
    assert len(labels) == round(0.5 * SMALL.n_clusters)


def test_contaminating_a_static_scene_is_a_no_op():
    scene = generate(replace(SMALL, n_dynamic_landmarks=0))
    assert contaminate_as_static(scene) is scene


def test_contamination_adds_moving_points_at_their_first_position():
    scene = generate(SMALL)
    clean, dirty = build_problem(scene), build_problem(contaminate_as_static(scene))
    assert len(dirty.observations) > len(clean.observations)
    assert all(not scene.is_dynamic(o.landmark_id) for o in clean.observations)
    lid = scene.n_static + 3
    assert np.array_equal(dirty.landmarks[lid].position, scene.dynamic_start[3])


def test_ground_truth_ate_against_itself_is_zero():
    scene = generate(SceneConfig(radius=2.0, n_frames=60))
    assert ate(scene.ground_truth, scene.ground_truth)[1].rmse == pytest.approx(0.0, abs=1e-12)


def test_noiseless_static_world_converges_from_truth():
    cfg = replace(SMALL, n_dynamic_landmarks=0, pixel_noise_sigma=0.0)
    problem = build_problem(generate(cfg), initial=False)
    for fid, sub in problem.split_frames().items():
        _, report = solve(sub)
        assert report.final_cost <= 1e-18


def test_ground_truth_is_camera_to_world():
    scene = generate(SMALL)
    for pose, world in zip(scene.poses, scene.ground_truth.poses):
        assert np.allclose((pose @ world).matrix(), np.eye(4), atol=1e-12)


def test_config_text_roundtrip():
    cfg = replace(SMALL, trajectory="arc", box_jitter_sigma=0.5,
                  intrinsics=CameraIntrinsics(400.0, 410.0, 160.0, 120.0, 320, 240))
    assert parse_config(format_config(cfg)) == cfg
    assert parse_config("# defaults\n\nseed = 11  # trailing\n") == SceneConfig(seed=11)


@pytest.mark.parametrize("text", ["bogus = 1", "seed", "detection_coverage = 1.5",
                                  "n_frames = -1", "trajectory = spiral"])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_nothing_visible_is_an_empty_scene():
    far = CameraIntrinsics(500.0, 500.0, -5000.0, -5000.0, 64, 48)
    with pytest.raises(EmptyScene):
        generate(replace(SMALL, intrinsics=far))


def test_contamination_hurts_the_uniform_solve():
    # paired seeds: the same scene with and without the moving points
    worse = 0
    seeds = range(100)
    for seed in seeds:
        scene = generate(replace(SceneConfig(), seed=seed))
        errs = []
        for variant in (scene, contaminate_as_static(scene)):
            solved, _ = solve_frames(build_problem(variant))
            errs.append(ate(scene.ground_truth, estimated_trajectory(solved))[1].rmse)
        worse += errs[1] > errs[0]
    assert worse >= 0.95 * len(seeds)
