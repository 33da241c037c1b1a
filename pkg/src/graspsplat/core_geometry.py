"""Linear-algebra primitives, cameras, and the Gaussian parameterization.

Conventions used everywhere in this package:

* Vec3 / Mat3 / quaternions are plain float64 numpy arrays of shape (3,),
  (3, 3) and (4,). Quaternions are stored (w, x, y, z).
* Cameras are vision style: +z looks forward, +x right, +y down, and
  world-to-camera is ``x_c = R @ x + t``. Pixel (col, row) samples the
  continuous image point (u, v) = (col, row).
* Scene units are meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateCovarianceError,
    InvalidRotationError,
    ShapeError,
)

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# Norm drift below this is silently renormalized (optimizer steps denormalize
# a little every iteration); beyond it the quaternion is rejected.
QUAT_DRIFT_TOL = 1e-3

COV_DET_FLOOR = 1e-12

SUBJECT_TAGS = ("left-hand", "right-hand", "object")


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def ensure_unit_quat(q, tol=QUAT_DRIFT_TOL):
    """Renormalize a slightly drifted quaternion; reject a badly broken one."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        worst = float(np.max(np.abs(n - 1.0)))
        raise InvalidRotationError(f"quaternion norm drift {worst:.3e} exceeds {tol:.0e}")
    return q / n[..., None]


def quat_mul(a, b):
    """Hamilton product a (x) b, batched over leading dimensions."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_mul_left_matrix(a):
    """L(a) with a (x) b == L(a) @ b; batched to (..., 4, 4)."""
    a = np.asarray(a, dtype=float)
    w, x, y, z = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_mul_right_matrix(b):
    """R(b) with a (x) b == R(b) @ a; batched to (..., 4, 4)."""
    b = np.asarray(b, dtype=float)
    w, x, y, z = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rotmat_from_unit_quat(q):
    """Rotation matrix of a unit quaternion (polynomial form, batched)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def drotmat_dquat(q):
    """Partials of the unit-quaternion rotation polynomial: (..., 3, 3, 4)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    two = 2.0

    def m(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dw = m([[zero, -two * z, two * y], [two * z, zero, -two * x], [-two * y, two * x, zero]])
    dx = m([[zero, two * y, two * z], [two * y, -2 * two * x, -two * w], [two * z, two * w, -2 * two * x]])
    dy = m([[-2 * two * y, two * x, two * w], [two * x, zero, two * z], [-two * w, two * z, -2 * two * y]])
    dz = m([[-2 * two * z, -two * w, two * x], [two * w, -2 * two * z, two * y], [two * x, two * y, zero]])
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_quat_backward(q_raw, grad_unit):
    """Pull a gradient on q_hat = q/|q| back to the raw 4-vector."""
    q_raw = np.asarray(q_raw, dtype=float)
    n = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q_hat = q_raw / n
    inner = np.sum(grad_unit * q_hat, axis=-1, keepdims=True)
    return (grad_unit - q_hat * inner) / n


def quat_from_rotvec(v):
    """Quaternion of an axis-angle vector, batched; stable near zero."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1)
    half = 0.5 * angle
    small = angle < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    w = np.cos(half)
    return np.concatenate([w[..., None], s[..., None] * v], axis=-1)


def dquat_drotvec(v):
    """Jacobian of quat_from_rotvec: (..., 4, 3), stable near zero."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v, axis=-1)
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    half = 0.5 * angle
    s = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / safe)
    # d/d angle of sin(angle/2)/angle
    ds = np.where(small, -angle / 24.0, 0.5 * np.cos(half) / safe - np.sin(half) / safe**2)
    unit = v / safe[..., None]
    jac = np.zeros(v.shape[:-1] + (4, 3))
    # dw/dv = -0.5 sin(half) * unit
    jac[..., 0, :] = -0.5 * np.sin(half)[..., None] * unit
    eye = np.eye(3)
    jac[..., 1:, :] = s[..., None, None] * eye + ds[..., None, None] * (
        v[..., :, None] * unit[..., None, :]
    )
    return jac


def quat_increment_grad(q, dq):
    """Gradient w.r.t. an axis-angle increment applied as exp(d) (x) q at d=0.

    Used by the optimizer's manifold updates: given dL/dq for the composed
    quaternion, returns the 3-vector dL/d(increment).
    """
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    rr = quat_mul_right_matrix(q)
    pulled = np.einsum("...qr,...q->...r", rr, dq)
    return 0.5 * pulled[..., 1:]


def mirror_rotvec(v):
    """Axis-angle conjugated by diag(-1,1,1): (vx, vy, vz) -> (vx, -vy, -vz)."""
    v = np.asarray(v, dtype=float).copy()
    v[..., 1] *= -1.0
    v[..., 2] *= -1.0
    return v


def mirror_quat(q):
    """Quaternion of M R M for M = diag(-1,1,1): (w,x,y,z) -> (w,x,-y,-z)."""
    q = np.asarray(q, dtype=float).copy()
    q[..., 2] *= -1.0
    q[..., 3] *= -1.0
    return q


# ---------------------------------------------------------------------------
# small matrix helpers
# ---------------------------------------------------------------------------

def spd_inverse_3x3(a, det_floor=COV_DET_FLOOR):
    """Cofactor inverse of a symmetric positive-definite 3x3 matrix.

    Raises DegenerateCovarianceError if the matrix fails Sylvester's
    criterion or its determinant falls below the floor.
    """
    a = np.asarray(a, dtype=float)
    a = 0.5 * (a + a.T)
    c00 = a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1]
    c01 = a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2]
    c02 = a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]
    det = a[0, 0] * c00 + a[0, 1] * c01 + a[0, 2] * c02
    lead2 = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if a[0, 0] <= 0.0 or lead2 <= 0.0 or det <= det_floor:
        raise DegenerateCovarianceError(f"covariance not SPD (det={det:.3e})")
    c10 = a[0, 2] * a[2, 1] - a[0, 1] * a[2, 2]
    c11 = a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0]
    c12 = a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1]
    c20 = a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]
    c21 = a[0, 2] * a[1, 0] - a[0, 0] * a[1, 2]
    c22 = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    inv = np.array([[c00, c10, c20], [c01, c11, c21], [c02, c12, c22]]) / det
    return 0.5 * (inv + inv.T)


def is_rotation_matrix(m, tol=1e-6):
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3):
        return False
    return (
        np.allclose(m @ m.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(m) - 1.0) <= tol
    )


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 128
    height: int = 128
    near: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise ValueError("image dimensions must be >= 1")
        if not self.near > 0:
            raise ValueError("near plane must be positive")
        if not is_rotation_matrix(self.rotation):
            raise InvalidRotationError("camera extrinsic rotation is not in SO(3)")
        if self.translation.shape != (3,):
            raise ShapeError("camera translation must be shape (3,)")

    def world_to_cam(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    @property
    def position(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height, near=0.01):
        """Camera at `eye` with +z toward `target` (y-down image frame)."""
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        fn = np.linalg.norm(forward)
        if fn < 1e-12:
            raise ValueError("look_at eye and target coincide")
        forward = forward / fn
        up = np.asarray(up, dtype=float)
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise ValueError("look_at up vector is parallel to the view axis")
        right = right / rn
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=0)
        return cls(fx=fx, fy=fy, cx=cx, cy=cy, rotation=rot,
                   translation=-rot @ eye, width=width, height=height, near=near)


# ---------------------------------------------------------------------------
# Gaussian representation
# ---------------------------------------------------------------------------

@dataclass
class Gaussian3D:
    """One anisotropic splat: center, scale, rotation, opacity, color."""

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.color = np.asarray(self.color, dtype=float)
        self.opacity = float(self.opacity)
        self.validate()

    def validate(self):
        if self.center.shape != (3,) or self.scale.shape != (3,) or self.color.shape != (3,):
            raise ShapeError("Gaussian3D fields must be 3-vectors")
        if self.rotation.shape != (4,):
            raise ShapeError("Gaussian3D rotation must be a quaternion (w,x,y,z)")
        if np.any(self.scale <= 0):
            raise ValueError("Gaussian scale components must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must lie in [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color channels must lie in [0, 1]")


@dataclass
class GaussianSet:
    """Struct-of-arrays splat collection with a subject tag."""

    centers: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    subject: str = "object"

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        self.scales = np.asarray(self.scales, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        self.opacities = np.asarray(self.opacities, dtype=float).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if self.subject not in SUBJECT_TAGS:
            raise ValueError(f"subject must be one of {SUBJECT_TAGS}")
        n = len(self.centers)
        for arr in (self.scales, self.quats, self.opacities, self.colors):
            if len(arr) != n:
                raise ShapeError("GaussianSet arrays disagree on length")

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i) -> Gaussian3D:
        return Gaussian3D(
            center=self.centers[i],
            scale=self.scales[i],
            rotation=self.quats[i],
            opacity=self.opacities[i],
            color=self.colors[i],
        )

    def validate(self):
        if np.any(self.scales <= 0):
            raise ValueError("all scales must be positive")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("all opacities must lie in [0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError("all colors must lie in [0, 1]")
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1.0) > QUAT_DRIFT_TOL):
            raise InvalidRotationError("GaussianSet contains badly denormalized quaternions")

    def copy(self):
        return GaussianSet(
            centers=self.centers.copy(),
            scales=self.scales.copy(),
            quats=self.quats.copy(),
            opacities=self.opacities.copy(),
            colors=self.colors.copy(),
            subject=self.subject,
        )

    @classmethod
    def from_gaussians(cls, gaussians, subject="object"):
        return cls(
            centers=np.stack([g.center for g in gaussians]),
            scales=np.stack([g.scale for g in gaussians]),
            quats=np.stack([g.rotation for g in gaussians]),
            opacities=np.array([g.opacity for g in gaussians]),
            colors=np.stack([g.color for g in gaussians]),
            subject=subject,
        )


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def covariance(s, q):
    """3D covariance of a splat: R(q) diag(s)^2 R(q)^T."""
    s = np.asarray(s, dtype=float)
    if s.shape != (3,):
        raise ShapeError("scale must be a 3-vector")
    if np.any(s <= 0):
        raise ValueError("scale components must be positive")
    q = ensure_unit_quat(q)
    rot = rotmat_from_unit_quat(q)
    return (rot * (s * s)) @ rot.T


def gaussian_weight(x, mu, cov):
    """exp(-1/2 (x-mu)^T cov^-1 (x-mu)); in (0, 1]."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    inv = spd_inverse_3x3(cov)
    d = x - mu
    return float(np.exp(-0.5 * d @ inv @ d))


def project_point(x, cam: Camera):
    """Pinhole projection; returns (u, v, depth) or raises behind the near plane."""
    pc = cam.world_to_cam(np.asarray(x, dtype=float))
    depth = float(pc[2])
    if depth <= cam.near:
        raise BehindCameraError(f"depth {depth:.4f} is behind the near plane {cam.near}")
    u = cam.fx * pc[0] / depth + cam.cx
    v = cam.fy * pc[1] / depth + cam.cy
    return float(u), float(v), depth
