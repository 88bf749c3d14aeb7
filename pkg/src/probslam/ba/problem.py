"""Bundle adjustment problem container, residuals and the text format.

Text format, one record per line, whitespace separated, ``#`` starts a
comment::

    CAMERA fx fy cx cy width height
    POSE id qw qx qy qz tx ty tz [FIXED]
    LM id x y z [FIXED]
    OBS frame lm u v weight
    TIME frame t

``TIME`` is optional and carries the capture timestamp of a frame.
Floats are written with 9 significant digits.
"""

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from probslam.errors import DimensionMismatch, NonPositiveDepth, ParseError
from probslam.geometry import DEPTH_EPS, CameraIntrinsics, Pose, project


@dataclass(frozen=True)
class Landmark:
    id: int
    position: tuple

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))


@dataclass(frozen=True)
class Observation:
    frame_id: int
    landmark_id: int
    pixel: tuple
    weight: float = 1.0

    def __post_init__(self):
        u, v = self.pixel
        object.__setattr__(self, "pixel", (float(u), float(v)))
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"observation weight {self.weight} outside [0, 1]")


@dataclass(frozen=True)
class BAProblem:
    """Poses (world to camera), landmarks and weighted pixel observations.

    ``fixed_poses`` and ``fixed_landmarks`` hold ids excluded from the
    optimization. Fixing every landmark gives motion-only (pose-only) BA.
    """

    intrinsics: CameraIntrinsics
    poses: dict
    landmarks: dict
    observations: tuple
    fixed_poses: frozenset = frozenset()
    fixed_landmarks: frozenset = frozenset()
    timestamps: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "fixed_poses", frozenset(self.fixed_poses))
        object.__setattr__(self, "fixed_landmarks", frozenset(self.fixed_landmarks))
        frames = {o.frame_id for o in self.observations}
        if not frames <= self.poses.keys():
            raise ValueError(f"observations reference unknown frames {sorted(frames - self.poses.keys())[:5]}")
        lms = {o.landmark_id for o in self.observations}
        if not lms <= self.landmarks.keys():
            raise ValueError(f"observations reference unknown landmarks {sorted(lms - self.landmarks.keys())[:5]}")
        pairs = {(o.frame_id, o.landmark_id) for o in self.observations}
        if len(pairs) != len(self.observations):
            raise ValueError("a landmark is observed more than once in the same frame")

    @property
    def pose_only(self):
        return set(self.landmarks) <= self.fixed_landmarks

    def with_poses(self, poses):
        return replace(self, poses={**self.poses, **poses})

    def with_weights(self, weights):
        obs = [
            Observation(o.frame_id, o.landmark_id, o.pixel, float(w))
            for o, w in zip(self.observations, weights)
        ]
        out = replace(self, observations=obs)
        if "_arrays" in self.__dict__:
            frames, lms, pixels, _ = self._arrays
            w = np.array(weights, dtype=float)
            w.flags.writeable = False
            out.__dict__["_arrays"] = (frames, lms, pixels, w)
        return out

    def frame(self, frame_id):
        """Sub-problem holding a single frame and the landmarks it observes."""
        return self._subproblem(frame_id, [o for o in self.observations if o.frame_id == frame_id])

    def split_frames(self):
        """One single-frame sub-problem per frame id, in frame-id order."""
        groups = {f: [] for f in sorted(self.poses)}
        for o in self.observations:
            groups[o.frame_id].append(o)
        return {f: self._subproblem(f, obs) for f, obs in groups.items()}

    def _subproblem(self, frame_id, obs):
        lm_ids = {o.landmark_id for o in obs}
        return BAProblem(
            self.intrinsics,
            {frame_id: self.poses[frame_id]},
            {i: self.landmarks[i] for i in sorted(lm_ids)},
            obs,
            self.fixed_poses & {frame_id},
            self.fixed_landmarks & lm_ids,
            {frame_id: self.timestamps[frame_id]} if frame_id in self.timestamps else {},
        )

    def arrays(self):
        """Observation data as read-only arrays ``(frame_ids, landmark_ids, pixels, weights)``."""
        return self._arrays

    @cached_property
    def _arrays(self):
        n = len(self.observations)
        frames = np.fromiter((o.frame_id for o in self.observations), dtype=np.int64, count=n)
        lms = np.fromiter((o.landmark_id for o in self.observations), dtype=np.int64, count=n)
        pixels = np.array([o.pixel for o in self.observations], dtype=float).reshape(n, 2)
        weights = np.fromiter((o.weight for o in self.observations), dtype=float, count=n)
        for a in (frames, lms, pixels, weights):
            a.flags.writeable = False
        return frames, lms, pixels, weights


def residual(problem, obs):
    """Measured minus predicted pixel for one observation."""
    pose = problem.poses[obs.frame_id]
    pixel, _ = project(problem.intrinsics, pose, problem.landmarks[obs.landmark_id].position)
    return np.asarray(obs.pixel) - pixel


def residuals(problem):
    """All residuals as an (N, 2) array plus a validity mask (positive depth).

    Rows for invalid observations are zero.
    """
    K = problem.intrinsics
    frames, lms, pixels, _ = problem.arrays()
    n = len(frames)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    fids = sorted(problem.poses)
    R = np.stack([problem.poses[f].R for f in fids])
    t = np.stack([problem.poses[f].translation for f in fids])
    pidx = np.searchsorted(fids, frames)
    lids = sorted(problem.landmarks)
    P = np.array([problem.landmarks[i].position for i in lids])
    lidx = np.searchsorted(lids, lms)
    Xc = np.einsum("nij,nj->ni", R[pidx], P[lidx]) + t[pidx]
    z = Xc[:, 2]
    valid = z > DEPTH_EPS
    zs = np.where(valid, z, 1.0)
    pred = np.stack([K.fx * Xc[:, 0] / zs + K.cx, K.fy * Xc[:, 1] / zs + K.cy], axis=1)
    res = np.where(valid[:, None], pixels - pred, 0.0)
    return res, valid


def weighted_cost(problem):
    """Half the weighted sum of squared residuals over observations in front of the camera."""
    res, valid = residuals(problem)
    _, _, _, w = problem.arrays()
    r2 = np.sum(res * res, axis=1)
    return 0.5 * float(np.sum(w[valid] * r2[valid]))


def attach_weights(problem, maps):
    """Set every observation weight from its frame's probability map.

    ``maps`` is keyed by frame id; each map must match the image size.
    """
    K = problem.intrinsics
    for frame_id, pmap in maps.items():
        if (pmap.width, pmap.height) != (K.width, K.height):
            raise DimensionMismatch(
                f"map for frame {frame_id} is {pmap.width}x{pmap.height}, "
                f"camera is {K.width}x{K.height}"
            )
    frames, _, pixels, _ = problem.arrays()
    missing = set(frames.tolist()) - maps.keys()
    if missing:
        raise KeyError(f"no probability map for frame(s) {sorted(missing)[:5]}")
    # nearest pixel, halves rounded up, clamped to the raster
    cols = np.clip(np.floor(pixels[:, 0] + 0.5), 0, K.width - 1).astype(np.int64)
    rows = np.clip(np.floor(pixels[:, 1] + 0.5), 0, K.height - 1).astype(np.int64)
    weights = np.empty(len(frames))
    for frame_id in np.unique(frames):
        sel = frames == frame_id
        weights[sel] = maps[int(frame_id)].values[rows[sel], cols[sel]]
    return problem.with_weights(weights)


def _g(x):
    return f"{x:.9g}"


def format_problem(problem):
    K = problem.intrinsics
    lines = [
        "# probslam bundle adjustment problem",
        f"CAMERA {_g(K.fx)} {_g(K.fy)} {_g(K.cx)} {_g(K.cy)} {K.width} {K.height}",
    ]
    for fid in sorted(problem.poses):
        p = problem.poses[fid]
        vals = " ".join(_g(v) for v in (*p.rotation, *p.translation))
        suffix = " FIXED" if fid in problem.fixed_poses else ""
        lines.append(f"POSE {fid} {vals}{suffix}")
    for fid in sorted(problem.timestamps):
        lines.append(f"TIME {fid} {problem.timestamps[fid]:.9f}")
    for lid in sorted(problem.landmarks):
        x, y, z = problem.landmarks[lid].position
        suffix = " FIXED" if lid in problem.fixed_landmarks else ""
        lines.append(f"LM {lid} {_g(x)} {_g(y)} {_g(z)}{suffix}")
    for o in problem.observations:
        lines.append(
            f"OBS {o.frame_id} {o.landmark_id} {_g(o.pixel[0])} {_g(o.pixel[1])} {_g(o.weight)}"
        )
    return "\n".join(lines) + "\n"


def write_problem(problem, stream):
    stream.write(format_problem(problem))


def _floats(fields, lineno):
    try:
        values = [float(f) for f in fields]
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    if not all(math.isfinite(v) for v in values):
        raise ParseError("non-finite value", lineno)
    return values


def _int(token, lineno):
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"expected integer id, got {token!r}", lineno) from None


def read_problem(stream):
    """Parse the text format; accepts a string or a text stream."""
    text = stream if isinstance(stream, str) else stream.read()
    intrinsics = None
    poses, landmarks, observations, stamps = {}, {}, [], {}
    fixed_poses, fixed_lms = set(), set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *fields = line.split()
        fixed = bool(fields) and fields[-1] == "FIXED"
        if fixed:
            fields = fields[:-1]
        if tag == "CAMERA" and len(fields) == 6:
            fx, fy, cx, cy = _floats(fields[:4], lineno)
            try:
                intrinsics = CameraIntrinsics(fx, fy, cx, cy, _int(fields[4], lineno), _int(fields[5], lineno))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
        elif tag == "POSE" and len(fields) == 8:
            fid = _int(fields[0], lineno)
            v = _floats(fields[1:], lineno)
            try:
                poses[fid] = Pose(v[:4], v[4:])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if fixed:
                fixed_poses.add(fid)
        elif tag == "LM" and len(fields) == 4:
            lid = _int(fields[0], lineno)
            landmarks[lid] = Landmark(lid, _floats(fields[1:], lineno))
            if fixed:
                fixed_lms.add(lid)
        elif tag == "OBS" and len(fields) == 5 and not fixed:
            u, v, w = _floats(fields[2:], lineno)
            try:
                observations.append(Observation(_int(fields[0], lineno), _int(fields[1], lineno), (u, v), w))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
        elif tag == "TIME" and len(fields) == 2 and not fixed:
            stamps[_int(fields[0], lineno)] = _floats(fields[1:], lineno)[0]
        else:
            raise ParseError(f"malformed record {raw.strip()!r}", lineno)
    if intrinsics is None:
        raise ParseError("missing CAMERA record")
    try:
        return BAProblem(intrinsics, poses, landmarks, observations, fixed_poses, fixed_lms, stamps)
    except ValueError as exc:
        raise ParseError(str(exc)) from None
