"""SE(3) poses, se(3) twists and the pinhole camera.

Poses map world coordinates into the camera frame, so a world point ``P``
is seen at ``pixel = project(K, T, P)`` with ``Xc = R @ P + t``.
Twists are ordered ``(rotational, translational)`` throughout and act on
poses by left multiplication, ``exp(xi) @ T``.
"""

from dataclasses import dataclass

import numpy as np

from probslam.errors import NonPositiveDepth

DEPTH_EPS = 1e-9
_NORM_TOL = 1e-9
_SMALL_ANGLE = 1e-4


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_to_matrix(q):
    """Rotation matrix of a (w, x, y, z) quaternion. Tolerates tiny norm error."""
    w, x, y, z = q
    s = 2.0 / (w * w + x * x + y * y + z * z)
    return np.array([
        [1.0 - s * (y * y + z * z), s * (x * y - w * z), s * (x * z + w * y)],
        [s * (x * y + w * z), 1.0 - s * (x * x + z * z), s * (y * z - w * x)],
        [s * (x * z - w * y), s * (y * z + w * x), 1.0 - s * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Unit (w, x, y, z) quaternion of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def rotation_angle(R):
    """Angle in [0, pi] of a rotation matrix."""
    c = 0.5 * (np.trace(R) - 1.0)
    # arctan2 form stays accurate near 0 and pi, unlike arccos
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


class Pose:
    """Rigid transform stored as a unit quaternion (w, x, y, z) and a translation.

    The quaternion is renormalized when its norm is off by more than 1e-9;
    values already unit to that tolerance are kept verbatim so that text
    round trips stay exact.
    """

    __slots__ = ("_q", "_t", "_R")

    def __init__(self, rotation=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        q = np.array(rotation, dtype=float).reshape(4)
        t = np.array(translation, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        if abs(n - 1.0) > _NORM_TOL:
            q = q / n
        q.flags.writeable = False
        t.flags.writeable = False
        self._q = q
        self._t = t
        self._R = None

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls.from_rt(M[:3, :3], M[:3, 3])

    @property
    def rotation(self):
        return self._q

    @property
    def translation(self):
        return self._t

    @property
    def R(self):
        if self._R is None:
            R = quat_to_matrix(self._q)
            R.flags.writeable = False
            self._R = R
        return self._R

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self._t
        return M

    def inverse(self):
        qi = self._q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qi, -(self.R.T @ self._t))

    def compose(self, other):
        """``self @ other``: apply ``other`` first, then ``self``."""
        return Pose(quat_multiply(self._q, other._q), self.R @ other._t + self._t)

    __matmul__ = compose

    def transform(self, points):
        """Apply to a single 3-vector or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self._t

    def angle_to(self, other):
        """Rotation angle between two poses, in radians."""
        return rotation_angle(self.R.T @ other.R)

    def distance_to(self, other):
        return float(np.linalg.norm(self._t - other._t))

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self._q)
        t = ", ".join(f"{v:.6g}" for v in self._t)
        return f"Pose(q=({q}), t=({t}))"


@dataclass(frozen=True)
class Twist:
    """se(3) tangent coordinates."""

    rotational: tuple = (0.0, 0.0, 0.0)
    translational: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(tuple(v[:3]), tuple(v[3:]))

    def vector(self):
        return np.array(self.rotational + self.translational, dtype=float)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, pixel):
        u, v = pixel
        return 0.0 <= u <= self.width - 1 and 0.0 <= v <= self.height - 1


def _so3_coefficients(theta):
    """Return A = sin(t)/t, B = (1-cos t)/t^2, C = (t - sin t)/t^3."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def exp_map(xi):
    """SE(3) exponential of a twist (or a 6-vector ``[rot, trans]``)."""
    v = xi.vector() if isinstance(xi, Twist) else np.asarray(xi, dtype=float).reshape(6)
    phi, rho = v[:3], v[3:]
    theta = float(np.linalg.norm(phi))
    half = 0.5 * theta
    if theta < _SMALL_ANGLE:
        # sin(h)/theta with h = theta/2, expanded
        k = 0.5 - theta * theta / 48.0
    else:
        k = np.sin(half) / theta
    q = np.concatenate([[np.cos(half)], k * phi])
    _, B, C = _so3_coefficients(theta)
    W = skew(phi)
    V = np.eye(3) + B * W + C * (W @ W)
    return Pose(q, V @ rho)


def exp_rt(v):
    """SE(3) exponential of a 6-vector ``[rot, trans]`` as ``(R, t)`` arrays."""
    phi, rho = v[:3], v[3:]
    theta = float(np.sqrt(phi @ phi))
    A, B, C = _so3_coefficients(theta)
    W = skew(phi)
    W2 = W @ W
    R = np.eye(3) + A * W + B * W2
    V = np.eye(3) + B * W + C * W2
    return R, V @ rho


def exp_rt_many(v):
    """Batched :func:`exp_rt` over an (N, 6) array; returns (N, 3, 3) and (N, 3)."""
    v = np.asarray(v, dtype=float).reshape(-1, 6)
    phi, rho = v[:, :3], v[:, 3:]
    theta = np.sqrt(np.sum(phi * phi, axis=1))
    small = theta < _SMALL_ANGLE
    t2 = theta * theta
    ts = np.where(small, 1.0, theta)
    A = np.where(small, 1.0 - t2 / 6.0, np.sin(ts) / ts)
    B = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(ts)) / ts**2)
    C = np.where(small, 1.0 / 6.0 - t2 / 120.0, (ts - np.sin(ts)) / ts**3)
    W = np.zeros((len(v), 3, 3))
    W[:, 0, 1], W[:, 0, 2], W[:, 1, 2] = -phi[:, 2], phi[:, 1], -phi[:, 0]
    W[:, 1, 0], W[:, 2, 0], W[:, 2, 1] = phi[:, 2], -phi[:, 1], phi[:, 0]
    W2 = W @ W
    eye = np.eye(3)
    R = eye + A[:, None, None] * W + B[:, None, None] * W2
    V = eye + B[:, None, None] * W + C[:, None, None] * W2
    return R, (V @ rho[:, :, None])[:, :, 0]


def log_map(pose):
    """Inverse of :func:`exp_map` for rotation angles below pi."""
    q = pose.rotation / np.linalg.norm(pose.rotation)
    if q[0] < 0.0:
        q = -q
    w, vec = q[0], q[1:]
    vn = float(np.linalg.norm(vec))
    theta = 2.0 * np.arctan2(vn, w)
    if np.pi - theta < 1e-9:
        raise ValueError("log_map is undefined at rotation angle pi")
    if vn < 1e-12:
        phi = 2.0 * vec / w
    else:
        phi = vec * (theta / vn)
    W = skew(phi)
    if theta < _SMALL_ANGLE:
        coef = 1.0 / 12.0 + theta * theta / 720.0
    else:
        coef = (1.0 - 0.5 * theta / np.tan(0.5 * theta)) / theta**2
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return Twist.from_vector(np.concatenate([phi, V_inv @ pose.translation]))


def project(K, T, P):
    """Pinhole projection of world point ``P`` through camera pose ``T``.

    Returns ``(pixel, depth)``; raises :class:`NonPositiveDepth` when the
    camera-frame depth is at most 1e-9.
    """
    Xc = T.transform(P)
    z = Xc[2]
    if z <= DEPTH_EPS:
        raise NonPositiveDepth(f"camera-frame depth {z:.3g} is not positive")
    pixel = np.array([K.fx * Xc[0] / z + K.cx, K.fy * Xc[1] / z + K.cy])
    return pixel, float(z)


def project_many(K, T, points):
    """Vectorized projection of (N, 3) world points.

    Returns ``(pixels, depths)``; no depth check is made here, callers mask
    on ``depths > DEPTH_EPS``.
    """
    Xc = T.transform(np.atleast_2d(points))
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
    return np.stack([u, v], axis=1), z


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera pose of a camera at ``center`` looking at ``target``.

    Camera axes follow the usual vision convention: x right, y down, z forward.
    """
    center = np.asarray(center, dtype=float)
    f = np.asarray(target, dtype=float) - center
    f /= np.linalg.norm(f)
    x = np.cross(f, up)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("viewing direction is parallel to the up vector")
    x /= nx
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return Pose.from_rt(R, -R @ center)
