"""Per-pixel confidence maps built from detection bounding boxes.

Inside the box of a static detection the confidence follows an
axis-aligned Gaussian centred on the box, scaled so that the centre reads
``peak`` and the edge midpoints read ``floor``; anything lower (box
corners, every pixel outside static boxes) reads ``floor``. Overlapping
boxes combine by pointwise maximum. Dynamic detections are ignored and
their pixels stay at the background value.

Pixel ``(i, j)`` is column ``i`` (x) and row ``j`` (y); rasters are stored
row-major as ``values[j, i]``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from probslam.errors import InvalidBox

DEFAULT_PEAK = 0.99
DEFAULT_FLOOR = 0.1


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    half_width: float
    half_height: float

    def __post_init__(self):
        if not (self.half_width > 0 and self.half_height > 0):
            raise InvalidBox(
                f"box half extents must be positive, got ({self.half_width}, {self.half_height})"
            )

    @property
    def center(self):
        return np.array([self.cx, self.cy])

    def contains(self, pixel):
        u, v = pixel
        return abs(u - self.cx) <= self.half_width and abs(v - self.cy) <= self.half_height


@dataclass(frozen=True)
class Detection:
    label: str
    box: BoundingBox
    score: float = 1.0
    is_static: bool = True

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detector score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GaussianWeightModel:
    peak: float = DEFAULT_PEAK
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if not 0.0 < self.floor < self.peak <= 1.0:
            raise ValueError("need 0 < floor < peak <= 1")

    @property
    def log_ratio(self):
        return math.log(self.peak / self.floor)

    @property
    def kappa(self):
        """Number of standard deviations between box centre and edge."""
        return math.sqrt(2.0 * self.log_ratio)

    def covariance(self, box):
        k = self.kappa
        return np.diag([(box.half_width / k) ** 2, (box.half_height / k) ** 2])

    def _weights(self, q):
        # q is the squared normalized distance ((dx/hw)^2 + (dy/hh)^2); the
        # Gaussian reaches the floor at q = 1
        w = self.peak * np.exp(-self.log_ratio * q)
        return np.where(q >= 1.0, self.floor, np.maximum(w, self.floor))


def box_weight(model, box, pixel):
    """Confidence contributed by a single box at ``pixel``.

    Evaluated as ``max(floor, peak * exp(-0.5 d^T S^-1 d))`` with
    ``S = diag((hw/kappa)^2, (hh/kappa)^2)``. Pixels outside the box get
    ``floor``.
    """
    if not box.contains(pixel):
        return model.floor
    dx = (pixel[0] - box.cx) / box.half_width
    dy = (pixel[1] - box.cy) / box.half_height
    return float(model._weights(np.float64(dx * dx + dy * dy)))


class ProbabilityMap:
    """Immutable confidence raster of shape ``(height, width)``."""

    __slots__ = ("values", "floor", "peak")

    def __init__(self, values, floor=DEFAULT_FLOOR, peak=DEFAULT_PEAK, copy=True):
        values = np.array(values, dtype=float, copy=copy)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError("probability map must be a non-empty 2-D raster")
        values.flags.writeable = False
        self.values = values
        self.floor = floor
        self.peak = peak

    @classmethod
    def uniform(cls, width, height, value=DEFAULT_FLOOR, floor=DEFAULT_FLOOR, peak=DEFAULT_PEAK):
        return cls(np.full((height, width), value), floor, peak)

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    def at(self, i, j):
        return float(self.values[j, i])

    def sample(self, pixel):
        """Nearest-pixel lookup, rounding half up and clamping to the raster."""
        i = min(max(math.floor(pixel[0] + 0.5), 0), self.width - 1)
        j = min(max(math.floor(pixel[1] + 0.5), 0), self.height - 1)
        return float(self.values[j, i])


def _paint_box(raster, model, box):
    h, w = raster.shape
    i0 = max(math.ceil(box.cx - box.half_width), 0)
    i1 = min(math.floor(box.cx + box.half_width), w - 1)
    j0 = max(math.ceil(box.cy - box.half_height), 0)
    j1 = min(math.floor(box.cy + box.half_height), h - 1)
    if i0 > i1 or j0 > j1:
        return
    dx = (np.arange(i0, i1 + 1) - box.cx) / box.half_width
    dy = (np.arange(j0, j1 + 1) - box.cy) / box.half_height
    q = dy[:, None] ** 2 + dx[None, :] ** 2
    region = raster[j0:j1 + 1, i0:i1 + 1]
    np.maximum(region, model._weights(q), out=region)


def build_map(detections, width, height, model=None):
    """Rasterize static detections into a :class:`ProbabilityMap`."""
    if width < 1 or height < 1:
        raise ValueError("map dimensions must be at least 1x1")
    model = model or GaussianWeightModel()
    raster = np.full((height, width), model.floor)
    for det in detections:
        if det.is_static:
            _paint_box(raster, model, det.box)
    return ProbabilityMap(raster, model.floor, model.peak, copy=False)


def render_pgm(pmap):
    """Encode a map as binary PGM (P5, maxval 255)."""
    data = np.floor(255.0 * pmap.values + 0.5).clip(0, 255).astype(np.uint8)
    header = f"P5\n{pmap.width} {pmap.height}\n255\n".encode("ascii")
    return header + data.tobytes()


def read_pgm(data):
    """Decode a P5 image written by :func:`render_pgm` back to a map in [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos + 1)
    return ProbabilityMap(raw.reshape(height, width) / float(maxval))
