"""Synthetic scenes with ground truth for the weighted-BA pipeline.

A scene is a camera trajectory around a tabletop of static objects
(clusters of landmarks) plus independently moving dynamic landmarks.
Every frame carries noisy pixel observations and detection boxes around
the static objects; moving landmarks never get a box.

Random draws come from :class:`probslam.rng.Xoshiro256` seeded with
``config.seed`` in this order:

1. cluster centres, 3 uniforms each;
2. static landmarks, a gaussian direction (3 normals) and a radius
   uniform per landmark;
3. dynamic landmarks, 3 uniforms for the start then 3 normals for the
   velocity per landmark;
4. the detected clusters, a Fisher-Yates shuffle of cluster indices;
5. per frame: 2 normals (u, v) of pixel noise per visible landmark in id
   order, then 2 normals of centre jitter per emitted box in cluster order;
6. per frame: 3 + 3 normals perturbing the initial pose estimate.
"""

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from probslam.ba.problem import BAProblem, Landmark, Observation
from probslam.dataset import DetectionFrame, Trajectory
from probslam.errors import EmptyScene
from probslam.geometry import CameraIntrinsics, exp_map, look_at, project_many
from probslam.probmap import BoundingBox, Detection
from probslam.rng import Xoshiro256

TRAJECTORIES = ("orbit", "line", "arc")
CLUSTER_SIZE = 25
CLUSTER_RADIUS = 0.3
BOX_INFLATION = 1.1
MIN_BOX_HALF_EXTENT = 2.0
MIN_DEPTH = 0.1
# (low, high) bounds per axis, meters: tabletop objects sit below the
# people-height band where moving landmarks start
STATIC_REGION = ((-0.8, 0.8), (-0.8, 0.8), (-0.2, 0.2))
DYNAMIC_REGION = ((-0.8, 0.8), (-0.8, 0.8), (1.2, 1.6))
LOOK_AT = (0.0, 0.0, 0.5)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 7
    n_frames: int = 60
    n_static_landmarks: int = 200
    n_dynamic_landmarks: int = 50
    pixel_noise_sigma: float = 1.0
    dynamic_velocity_sigma: float = 0.005
    trajectory: str = "orbit"
    radius: float = 3.0
    length: float = 2.0
    camera_height: float = 1.0
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    )
    detection_coverage: float = 1.0
    box_jitter_sigma: float = 2.0
    frame_rate: float = 30.0
    init_rotation_sigma: float = 0.01
    init_translation_sigma: float = 0.02

    def __post_init__(self):
        counts = (self.n_frames, self.n_static_landmarks, self.n_dynamic_landmarks)
        if any(c < 0 for c in counts):
            raise ValueError("counts must be non-negative")
        sigmas = (
            self.pixel_noise_sigma,
            self.dynamic_velocity_sigma,
            self.box_jitter_sigma,
            self.init_rotation_sigma,
            self.init_translation_sigma,
        )
        if any(s < 0 for s in sigmas):
            raise ValueError("sigmas must be non-negative")
        if not 0.0 <= self.detection_coverage <= 1.0:
            raise ValueError("detection_coverage must lie in [0, 1]")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}")
        if self.radius <= 0 or self.length <= 0 or self.frame_rate <= 0:
            raise ValueError("radius, length and frame_rate must be positive")

    @property
    def n_clusters(self):
        return max(1, self.n_static_landmarks // CLUSTER_SIZE)


_INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def parse_config(text):
    """Read ``key = value`` lines (``#`` comments) into a :class:`SceneConfig`."""
    types = {f.name: f.type for f in fields(SceneConfig) if f.name != "intrinsics"}
    kwargs, intr = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _INTRINSIC_KEYS:
            intr[key] = int(value) if key in ("width", "height") else float(value)
        elif key in types:
            kwargs[key] = types[key](value)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if intr:
        base = SceneConfig().intrinsics
        vals = {k: intr.get(k, getattr(base, k)) for k in _INTRINSIC_KEYS}
        kwargs["intrinsics"] = CameraIntrinsics(**vals)
    return SceneConfig(**kwargs)


def format_config(config):
    lines = []
    for f in fields(SceneConfig):
        if f.name == "intrinsics":
            for k in _INTRINSIC_KEYS:
                lines.append(f"{k} = {getattr(config.intrinsics, k)}")
        else:
            lines.append(f"{f.name} = {getattr(config, f.name)}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SyntheticScene:
    config: SceneConfig
    ground_truth: Trajectory
    poses: tuple
    initial_poses: tuple
    static_positions: np.ndarray
    cluster_of: np.ndarray
    dynamic_start: np.ndarray
    dynamic_velocity: np.ndarray
    observations: tuple
    detections: tuple
    contaminated: bool = False

    @property
    def n_static(self):
        return len(self.static_positions)

    @property
    def n_dynamic(self):
        return len(self.dynamic_start)

    def is_dynamic(self, landmark_id):
        return landmark_id >= self.n_static

    def positions_at(self, frame):
        """World positions of all landmarks (static first) at ``frame``."""
        dyn = self.dynamic_start + frame * self.dynamic_velocity
        return np.vstack([self.static_positions, dyn]).reshape(-1, 3)


def camera_poses(config):
    """Ground-truth world-to-camera poses along the configured path."""
    n, r, h = config.n_frames, config.radius, config.camera_height
    span = max(n - 1, 1)
    poses = []
    for i in range(n):
        if config.trajectory == "orbit":
            a = 2.0 * math.pi * i / max(n, 1)
        elif config.trajectory == "arc":
            a = (config.length / r) * (i / span - 0.5)
        if config.trajectory == "line":
            x = config.length * (i / span - 0.5)
            center, target = (x, -r, h), (x, LOOK_AT[1], LOOK_AT[2])
        else:
            center, target = (r * math.cos(a), r * math.sin(a), h), LOOK_AT
        poses.append(look_at(center, target))
    return poses


def _box_for(K, pixels):
    lo, hi = pixels.min(axis=0), pixels.max(axis=0)
    mid = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo) * BOX_INFLATION, MIN_BOX_HALF_EXTENT)
    return mid, half


def generate(config):
    """Build a deterministic scene from ``config`` (see module docstring)."""
    rng = Xoshiro256(config.seed)
    K = config.intrinsics

    n_clusters = config.n_clusters
    centers = np.array([[rng.uniform(lo, hi) for lo, hi in STATIC_REGION] for _ in range(n_clusters)])
    static = np.zeros((config.n_static_landmarks, 3))
    cluster_of = np.arange(config.n_static_landmarks) % n_clusters
    for k in range(config.n_static_landmarks):
        d = np.array(rng.normals(3))
        d /= max(np.linalg.norm(d), 1e-12)
        radius = CLUSTER_RADIUS * rng.random() ** (1.0 / 3.0)
        static[k] = centers[cluster_of[k]] + radius * d
    dyn_start = np.zeros((config.n_dynamic_landmarks, 3))
    dyn_vel = np.zeros((config.n_dynamic_landmarks, 3))
    for k in range(config.n_dynamic_landmarks):
        dyn_start[k] = [rng.uniform(lo, hi) for lo, hi in DYNAMIC_REGION]
        dyn_vel[k] = rng.normals(3, config.dynamic_velocity_sigma)

    order = rng.shuffle(list(range(n_clusters)))
    covered = sorted(order[: int(round(config.detection_coverage * n_clusters))])

    gt = camera_poses(config)
    stamps = [i / config.frame_rate for i in range(config.n_frames)]
    scene_obs, scene_dets = [], []
    n_static = config.n_static_landmarks
    for f, pose in enumerate(gt):
        pts = np.vstack([static, dyn_start + f * dyn_vel]).reshape(-1, 3)
        pix, depth = project_many(K, pose, pts)
        visible = (
            (depth > MIN_DEPTH)
            & (pix[:, 0] >= 0) & (pix[:, 0] <= K.width - 1)
            & (pix[:, 1] >= 0) & (pix[:, 1] <= K.height - 1)
        )
        ids = np.flatnonzero(visible)
        noise = np.array(rng.normals(2 * len(ids), config.pixel_noise_sigma)).reshape(-1, 2)
        noisy = (pix[ids] + noise).tolist()
        frame_obs = [Observation(f, lid, uv) for lid, uv in zip(ids.tolist(), noisy)]
        dets = []
        for c in covered:
            members = np.flatnonzero(cluster_of == c)
            in_front = members[depth[members] > MIN_DEPTH]
            if not visible[members].any():
                continue
            mid, half = _box_for(K, pix[in_front])
            jitter = np.array(rng.normals(2, config.box_jitter_sigma))
            mid = mid + jitter
            box = BoundingBox(float(mid[0]), float(mid[1]), float(half[0]), float(half[1]))
            dets.append(Detection(f"object_{c}", box, 0.9, True))
        scene_obs.append(tuple(frame_obs))
        scene_dets.append(DetectionFrame(stamps[f], K.width, K.height, tuple(dets)))

    initial = []
    for pose in gt:
        rot = rng.normals(3, config.init_rotation_sigma)
        trans = rng.normals(3, config.init_translation_sigma)
        initial.append(exp_map(rot + trans) @ pose)

    if not any(scene_obs):
        raise EmptyScene("no landmark is visible in any frame")
    for arr in (static, cluster_of, dyn_start, dyn_vel):
        arr.flags.writeable = False
    truth = Trajectory(stamps, [p.inverse() for p in gt])
    return SyntheticScene(
        config, truth, tuple(gt), tuple(initial), static, cluster_of,
        dyn_start, dyn_vel, tuple(scene_obs), tuple(scene_dets),
    )


def contaminate_as_static(scene):
    """Treat every moving landmark as a fixed point at its frame-0 position.

    Problems built from the result include the dynamic observations, which is
    what a tracker assuming a static world would do.
    """
    if scene.n_dynamic == 0:
        return scene
    return replace(scene, contaminated=True)


def build_problem(scene, initial=True):
    """Pose-only BA problem over all frames with every landmark fixed.

    Dynamic observations are included only for a contaminated scene.
    Poses start at the perturbed estimates, or at ground truth when
    ``initial`` is false.
    """
    landmarks = {i: Landmark(i, p) for i, p in enumerate(scene.static_positions)}
    if scene.contaminated:
        for k, p in enumerate(scene.dynamic_start):
            lid = scene.n_static + k
            landmarks[lid] = Landmark(lid, p)
    obs = [
        o
        for frame_obs in scene.observations
        for o in frame_obs
        if scene.contaminated or not scene.is_dynamic(o.landmark_id)
    ]
    start = scene.initial_poses if initial else scene.poses
    poses = dict(enumerate(start))
    stamps = dict(enumerate(scene.ground_truth.timestamps))
    return BAProblem(scene.config.intrinsics, poses, landmarks, obs, (), set(landmarks), stamps)
