"""TUM trajectories, detection files and timestamp association.

Trajectories follow the TUM RGB-D ground-truth convention: one line per
pose, ``timestamp tx ty tz qx qy qz qw``, with the pose mapping camera
coordinates into the world (the camera's position and orientation).

Detection files are JSON lines, one frame per line::

    {"t": 0.0, "w": 640, "h": 480,
     "dets": [{"label": "cup", "cx": 320.0, "cy": 240.0, "hw": 40.0,
               "hh": 30.0, "score": 0.9, "static": true}]}
"""

import io
import json
from dataclasses import dataclass, field

import numpy as np

from probslam.errors import InvalidBox, NonMonotonicTimestamps, ParseError
from probslam.geometry import Pose
from probslam.probmap import BoundingBox, Detection

DEFAULT_MAX_DT = 0.02
_QUAT_TOL = 1e-3


@dataclass(frozen=True)
class Trajectory:
    timestamps: tuple
    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(float(t) for t in self.timestamps))
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise NonMonotonicTimestamps("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def transformed(self, g):
        """Left-multiply every pose by the fixed transform ``g``."""
        return Trajectory(self.timestamps, [g @ p for p in self.poses])


@dataclass(frozen=True)
class DetectionFrame:
    timestamp: float
    width: int
    height: int
    detections: tuple = field(default_factory=tuple)


def _text(stream):
    return stream if isinstance(stream, str) else stream.read()


def read_tum_trajectory(stream):
    stamps, poses = [], []
    for lineno, raw in enumerate(_text(stream).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"expected 8 fields, found {len(fields)}", lineno)
        try:
            t, tx, ty, tz, qx, qy, qz, qw = (float(f) for f in fields)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        q = np.array([qw, qx, qy, qz])
        if not np.all(np.isfinite(q)) or abs(np.linalg.norm(q) - 1.0) > _QUAT_TOL:
            raise ParseError("quaternion is not unit length", lineno)
        if stamps and t <= stamps[-1]:
            raise NonMonotonicTimestamps(f"line {lineno}: timestamp {t} does not increase")
        stamps.append(t)
        poses.append(Pose(q, (tx, ty, tz)))
    return Trajectory(stamps, poses)


def format_tum_trajectory(traj):
    out = io.StringIO()
    write_tum_trajectory(traj, out)
    return out.getvalue()


def write_tum_trajectory(traj, stream):
    stream.write("# timestamp tx ty tz qx qy qz qw\n")
    for t, p in zip(traj.timestamps, traj.poses):
        w, x, y, z = p.rotation
        tx, ty, tz = p.translation
        vals = (t, tx, ty, tz, x, y, z, w)
        stream.write(" ".join(f"{v:.6f}" for v in vals) + "\n")


def _det_from_json(obj, lineno):
    try:
        box = BoundingBox(float(obj["cx"]), float(obj["cy"]), float(obj["hw"]), float(obj["hh"]))
        return Detection(
            str(obj["label"]),
            box,
            float(obj.get("score", 1.0)),
            bool(obj.get("static", True)),
        )
    except InvalidBox as exc:
        raise InvalidBox(f"line {lineno}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad detection record: {exc}", lineno) from None


def read_detections(stream):
    frames = []
    for lineno, raw in enumerate(_text(stream).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
            t, w, h = float(obj["t"]), int(obj["w"]), int(obj["h"])
            dets = obj["dets"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad detection frame: {exc}", lineno) from None
        if not isinstance(dets, list):
            raise ParseError("'dets' must be a list", lineno)
        frames.append(DetectionFrame(t, w, h, tuple(_det_from_json(d, lineno) for d in dets)))
    return frames


def format_detections(frames):
    out = io.StringIO()
    write_detections(frames, out)
    return out.getvalue()


def write_detections(frames, stream):
    for fr in frames:
        dets = [
            {
                "label": d.label,
                "cx": d.box.cx,
                "cy": d.box.cy,
                "hw": d.box.half_width,
                "hh": d.box.half_height,
                "score": d.score,
                "static": d.is_static,
            }
            for d in fr.detections
        ]
        obj = {"t": fr.timestamp, "w": fr.width, "h": fr.height, "dets": dets}
        stream.write(json.dumps(obj, separators=(",", ":")) + "\n")


def associate(a, b, max_dt=DEFAULT_MAX_DT):
    """Greedy nearest-timestamp matching between two trajectories.

    Candidate pairs within ``max_dt`` are taken in order of increasing
    ``|dt|`` (ties broken by index), skipping any index already used.
    Returns ``(index_a, index_b)`` pairs sorted by ``index_a``.
    """
    if max_dt <= 0:
        raise ValueError("max_dt must be positive")
    ta = np.asarray(a.timestamps if hasattr(a, "timestamps") else a, dtype=float)
    tb = np.asarray(b.timestamps if hasattr(b, "timestamps") else b, dtype=float)
    candidates = []
    # both lists are sorted, so each a-stamp only needs the window of b within max_dt
    lo = np.searchsorted(tb, ta - max_dt, side="left")
    hi = np.searchsorted(tb, ta + max_dt, side="right")
    for i in range(len(ta)):
        for j in range(lo[i], hi[i]):
            dt = abs(ta[i] - tb[j])
            if dt <= max_dt:
                candidates.append((dt, i, j))
    candidates.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in candidates:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    pairs.sort()
    return pairs
