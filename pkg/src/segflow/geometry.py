"""Pinhole camera, axis-angle rigid motions and depth-map normals.

Every energy term is built from the handful of operations in this module.
Scalar entry points (``project``, ``transform_point``, ...) follow the
textbook definitions; the ``*_batch`` / plural helpers are their vectorized
counterparts used inside residual evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DataError, InvalidDepthError

SMALL_ANGLE = 1e-8


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
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} raster"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# projection


def project(P, K: CameraIntrinsics) -> np.ndarray:
    """Project a camera-frame point (meters) to continuous pixel coordinates."""
    P = np.asarray(P, dtype=float)
    if not P[2] > 0:
        raise BehindCameraError(f"point {P.tolist()} is not in front of the camera")
    return np.array([K.fx * P[0] / P[2] + K.cx, K.fy * P[1] / P[2] + K.cy])


def backproject(p, z: float, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel ``p`` at depth ``z`` back to a camera-frame point."""
    if not z > 0:
        raise InvalidDepthError(f"depth must be positive, got {z}")
    x, y = float(p[0]), float(p[1])
    return np.array([z * (x - K.cx) / K.fx, z * (y - K.cy) / K.fy, float(z)])


def project_points(P: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """(n, 3) -> (n, 2). No depth check; callers mask ``P_z <= 0`` themselves."""
    z = P[..., 2]
    return np.stack([K.fx * P[..., 0] / z + K.cx, K.fy * P[..., 1] / z + K.cy], axis=-1)


def backproject_depth(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Back-project a whole depth raster to an (H, W, 3) point map (zeros stay zero)."""
    h, w = depth.shape
    xs = np.arange(w, dtype=float)[None, :]
    ys = np.arange(h, dtype=float)[:, None]
    return np.stack([depth * (xs - K.cx) / K.fx, depth * (ys - K.cy) / K.fy, depth], axis=-1)


# ---------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; works on (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotations_from_axis_angles(alpha: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for an (n, 3) stack of axis-angle vectors."""
    alpha = np.asarray(alpha, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(alpha, axis=1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    Kn = skew(alpha / safe[:, None])
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    R = np.eye(3) + s * Kn + c * (Kn @ Kn)
    if small.any():
        R[small] = np.eye(3) + skew(alpha[small])
    return R


def rotation_from_axis_angle(alpha) -> np.ndarray:
    """R = I + sin(theta) K + (1 - cos(theta)) K^2 with K the skew matrix of the unit axis.

    Below ``SMALL_ANGLE`` radians the first-order expansion ``I + skew(alpha)``
    is returned instead of normalizing a near-zero axis.
    """
    return rotations_from_axis_angles(np.asarray(alpha, dtype=float))[0]


def _quaternion_from_rotation(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest of (w, x, y, z) to divide by.
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    cands = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(cands))
    if i == 0:
        s = 2.0 * np.sqrt(max(1.0 + tr, 0.0))
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif i == 1:
        s = 2.0 * np.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif i == 2:
        s = 2.0 * np.sqrt(max(1.0 - R[0, 0] + R[1, 1] - R[2, 2], 0.0))
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(max(1.0 - R[0, 0] - R[1, 1] + R[2, 2], 0.0))
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def axis_angle_from_rotation(R: np.ndarray) -> np.ndarray:
    """Logarithm map, returning the canonical axis-angle vector (angle in [0, pi])."""
    q = _quaternion_from_rotation(np.asarray(R, dtype=float))
    vnorm = np.linalg.norm(q[1:])
    if vnorm < 1e-300:
        return np.zeros(3)
    theta = 2.0 * np.arctan2(vnorm, q[0])
    if theta < SMALL_ANGLE:
        # 2*atan2(v, w)/v -> 2/w as v -> 0
        return q[1:] * (2.0 / q[0])
    return q[1:] * (theta / vnorm)


def canonical_axis_angle(alpha) -> np.ndarray:
    """Wrap the rotation angle into [0, pi) by flipping the axis when needed."""
    alpha = np.asarray(alpha, dtype=float).copy()
    theta = float(np.linalg.norm(alpha))
    if theta < np.pi:
        return alpha
    axis = alpha / theta
    theta = np.mod(theta, 2.0 * np.pi)
    if theta > np.pi:
        return -(2.0 * np.pi - theta) * axis
    return theta * axis


def left_jacobians(alpha: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3), (n, 3) -> (n, 3, 3).

    Relates a perturbation of the axis-angle vector to a rotation applied on
    the left: R(a + d) ~= exp(skew(J_l(a) d)) R(a).
    """
    alpha = np.asarray(alpha, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(alpha, axis=1)
    A = skew(alpha)
    A2 = A @ A
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    c1 = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(t)) / t**2)
    c2 = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / t**3)
    return np.eye(3) + c1[:, None, None] * A + c2[:, None, None] * A2


def left_jacobian_inverses(alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(alpha, axis=1)
    A = skew(alpha)
    A2 = A @ A
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    c2 = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
    )
    return np.eye(3) - 0.5 * A + c2[:, None, None] * A2


# ---------------------------------------------------------------------------
# poses


def _frozen(v, n) -> np.ndarray:
    a = np.array(v, dtype=float).reshape(n)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SegmentPose:
    """A 6-DOF rigid motion: rotate by ``axis_angle`` then translate."""

    axis_angle: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        a = np.asarray(self.axis_angle, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(t))):
            raise DataError("pose components must be finite")
        object.__setattr__(self, "axis_angle", _frozen(canonical_axis_angle(a.reshape(3)), 3))
        object.__setattr__(self, "translation", _frozen(t, 3))

    @classmethod
    def identity(cls) -> SegmentPose:
        return cls()

    @classmethod
    def from_vector(cls, v) -> SegmentPose:
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> SegmentPose:
        return cls(axis_angle_from_rotation(R), t)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.axis_angle, self.translation])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_axis_angle(self.axis_angle)

    def inverse(self) -> SegmentPose:
        R = self.rotation
        return SegmentPose(-self.axis_angle, -R.T @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, SegmentPose):
            return NotImplemented
        return bool(np.array_equal(self.axis_angle, other.axis_angle) and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.axis_angle.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        a = np.array2string(self.axis_angle, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"SegmentPose(axis_angle={a}, translation={t})"


def transform_point(T: SegmentPose, P) -> np.ndarray:
    return T.rotation @ np.asarray(P, dtype=float) + T.translation


def compose_poses(outer: SegmentPose, inner: SegmentPose) -> SegmentPose:
    """Pose that applies ``inner`` first, then ``outer``."""
    Ro, Ri = outer.rotation, inner.rotation
    return SegmentPose.from_matrix(Ro @ Ri, Ro @ inner.translation + outer.translation)


def pose_difference(Ta: SegmentPose, Tb: SegmentPose) -> np.ndarray:
    """Component-wise difference of the stacked (axis-angle, translation) 6-vectors."""
    return Ta.as_vector() - Tb.as_vector()


def pose_power(T: SegmentPose, n: int) -> SegmentPose:
    """``T`` composed with itself ``n`` times (n >= 0)."""
    out = SegmentPose.identity()
    for _ in range(n):
        out = compose_poses(T, out)
    return out


def transform_points(vectors: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply per-point poses: ``vectors`` is (n, 6) or (6,), ``points`` (n, 3)."""
    vectors = np.asarray(vectors, dtype=float)
    if vectors.ndim == 1:
        R = rotation_from_axis_angle(vectors[:3])
        return points @ R.T + vectors[3:]
    R = rotations_from_axis_angles(vectors[:, :3])
    return np.einsum("nij,nj->ni", R, points) + vectors[:, 3:]


# ---------------------------------------------------------------------------
# normals


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3), NaN where invalid
    valid: np.ndarray  # (H, W) bool


def compute_normals(depth: np.ndarray, K: CameraIntrinsics, valid: np.ndarray | None = None) -> NormalMap:
    """Normals from the cross product of central differences of back-projected points.

    A pixel gets a normal only if it and its four direct neighbours have valid
    depth and the cross product is not degenerate. Normals are oriented
    towards the camera (negative z).
    """
    depth = np.asarray(depth, dtype=float)
    if valid is None:
        valid = depth > 0
    h, w = depth.shape
    normals = np.full((h, w, 3), np.nan)
    ok = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return NormalMap(normals, ok)

    P = backproject_depth(depth, K)
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    inner = (
        valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
    ) & (norm >= 1e-12)
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    n = np.where((n[..., 2] > 0)[..., None], -n, n)
    normals[1:-1, 1:-1][inner] = n[inner]
    ok[1:-1, 1:-1] = inner
    return NormalMap(normals, ok)
