"""Absolute and relative trajectory error.

Both metrics work on camera-to-world trajectories. ATE aligns the
estimate onto the reference with a closed-form rigid (or similarity)
fit before measuring position differences; RPE compares relative
motions over a fixed frame gap and needs no alignment.
"""

import io
from dataclasses import dataclass

import numpy as np

from probslam.dataset import DEFAULT_MAX_DT, associate
from probslam.errors import DegenerateConfiguration, EmptySeries, InsufficientPairs
from probslam.geometry import rotation_angle


@dataclass(frozen=True)
class ErrorSeries:
    timestamps: np.ndarray
    errors: np.ndarray
    unit: str = "m"

    def __post_init__(self):
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=float))
        object.__setattr__(self, "errors", np.asarray(self.errors, dtype=float))
        if self.timestamps.shape != self.errors.shape:
            raise ValueError("timestamps and errors differ in length")
        if np.any(self.errors < 0):
            raise ValueError("errors must be non-negative")

    def __len__(self):
        return len(self.errors)


@dataclass(frozen=True)
class MetricSummary:
    n: int
    rmse: float
    mean: float
    median: float
    std: float
    min: float
    max: float


def summarize(series):
    e = np.asarray(series.errors if isinstance(series, ErrorSeries) else series, dtype=float)
    if e.size == 0:
        raise EmptySeries("cannot summarize an empty error series")
    srt = np.sort(e)
    return MetricSummary(
        n=int(e.size),
        rmse=float(np.sqrt(np.mean(e * e))),
        mean=float(np.mean(e)),
        median=float(srt[(e.size - 1) // 2]),
        std=float(np.std(e)),
        min=float(srt[0]),
        max=float(srt[-1]),
    )


def align_umeyama(reference, estimate, with_scale=False):
    """Least-squares ``(s, R, t)`` minimizing ``sum |ref_i - (s R est_i + t)|^2``.

    Uses Umeyama's closed form with the reflection-correcting sign matrix,
    so ``R`` is always a proper rotation. ``s`` is 1 unless ``with_scale``.
    """
    ref = np.asarray(reference, dtype=float).reshape(-1, 3)
    est = np.asarray(estimate, dtype=float).reshape(-1, 3)
    if len(ref) != len(est):
        raise ValueError("point sets differ in length")
    if len(ref) < 3:
        raise DegenerateConfiguration(f"need at least 3 point pairs, got {len(ref)}")
    mu_r, mu_e = ref.mean(axis=0), est.mean(axis=0)
    rc, ec = ref - mu_r, est - mu_e
    sv = np.linalg.svd(ec, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateConfiguration("estimate points are collinear")

    cov = rc.T @ ec / len(ref)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_e = np.sum(ec * ec) / len(ref)
        s = float(np.trace(np.diag(D) @ S) / var_e)
    else:
        s = 1.0
    t = mu_r - s * R @ mu_e
    return s, R, t


def _pairs(reference, estimate, max_dt):
    pairs = associate(reference, estimate, max_dt)
    ia = np.array([i for i, _ in pairs], dtype=int)
    ib = np.array([j for _, j in pairs], dtype=int)
    return ia, ib


def ate(reference, estimate, max_dt=DEFAULT_MAX_DT, with_scale=False):
    """Absolute trajectory error after aligning the estimate to the reference."""
    ia, ib = _pairs(reference, estimate, max_dt)
    if len(ia) < 3:
        raise DegenerateConfiguration(f"only {len(ia)} associated poses, need 3")
    ref = reference.positions()[ia]
    est = estimate.positions()[ib]
    s, R, t = align_umeyama(ref, est, with_scale)
    aligned = s * est @ R.T + t
    err = np.linalg.norm(ref - aligned, axis=1)
    stamps = np.asarray(reference.timestamps)[ia]
    series = ErrorSeries(stamps, err, "m")
    return series, summarize(series)


def relative_errors(ref_poses, est_poses, delta):
    """Per-index translation and rotation error of relative motions."""
    trans, rot = [], []
    for i in range(len(ref_poses) - delta):
        dq = ref_poses[i].inverse() @ ref_poses[i + delta]
        dp = est_poses[i].inverse() @ est_poses[i + delta]
        E = dq.inverse() @ dp
        trans.append(float(np.linalg.norm(E.translation)))
        rot.append(rotation_angle(E.R))
    return np.array(trans), np.array(rot)


def rpe(reference, estimate, delta=1, max_dt=DEFAULT_MAX_DT):
    """Relative pose error over a gap of ``delta`` associated frames.

    Returns ``((translation_series, summary), (rotation_series, summary))``.
    """
    if delta < 1:
        raise ValueError("delta must be at least 1")
    ia, ib = _pairs(reference, estimate, max_dt)
    if len(ia) <= delta:
        raise InsufficientPairs(f"{len(ia)} associated poses cannot span a gap of {delta}")
    ref_poses = [reference.poses[i] for i in ia]
    est_poses = [estimate.poses[j] for j in ib]
    trans, rot = relative_errors(ref_poses, est_poses, delta)
    stamps = np.asarray(reference.timestamps)[ia[:len(trans)]]
    ts = ErrorSeries(stamps, trans, "m")
    rs = ErrorSeries(stamps, rot, "rad")
    return (ts, summarize(ts)), (rs, summarize(rs))


def format_series_csv(series):
    out = io.StringIO()
    out.write("timestamp,error\n")
    for t, e in zip(series.timestamps, series.errors):
        out.write(f"{t:.9g},{e:.9g}\n")
    return out.getvalue()


SUMMARY_HEADER = "metric,n,rmse,mean,median,std,min,max"


def format_summary_row(metric, summary):
    vals = ",".join(
        f"{v:.9f}"
        for v in (summary.rmse, summary.mean, summary.median, summary.std, summary.min, summary.max)
    )
    return f"{metric},{summary.n},{vals}"


def format_summary_csv(rows):
    """``rows`` is an iterable of ``(metric_name, MetricSummary)``."""
    lines = [SUMMARY_HEADER] + [format_summary_row(m, s) for m, s in rows]
    return "\n".join(lines) + "\n"
