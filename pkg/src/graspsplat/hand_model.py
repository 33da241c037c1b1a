"""Procedural hand rig: skeleton, forward kinematics, linear blend skinning
of Gaussian centers, and the shared-canonical x-flip mechanism for two hands.

The rig is a 16-joint tree (wrist root + 5 fingers x 3 joints), posed by a
45-dim axis-angle vector (3 per articulated joint) plus a global rigid
transform. The canonical template is right-handed; the left hand reuses it by
flipping canonical centers across x and running kinematics on the mirrored
skeleton, so a left pose that mirrors a right pose produces the exact world
mirror of the right hand.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core_geometry import (
    Camera,
    GaussianSet,
    dquat_drotvec,
    drotmat_dquat,
    mirror_quat,
    normalize_quat_backward,
    quat_from_rotvec,
    quat_mul,
    quat_mul_left_matrix,
    quat_mul_right_matrix,
    quat_normalize,
    rotmat_from_unit_quat,
)
from .errors import InvalidWeightsError, ShapeError

NUM_JOINTS = 16
POSE_DIM = 45  # 15 articulated joints x 3 axis-angle components

MIRROR = np.diag([-1.0, 1.0, 1.0])


# ---------------------------------------------------------------------------
# rig description
# ---------------------------------------------------------------------------

@dataclass
class Skeleton:
    """Right-hand rest skeleton: a tree of joints with rest offsets.

    `parents[k]` is -1 for the wrist root. `rest_offsets[k]` is joint k's rest
    position relative to its parent (the root offset is its world position).
    `tip_points` / `tip_parents` describe fingertip probes attached to the
    leaf joints (used for contact checks, not part of the pose vector).
    """

    parents: np.ndarray
    rest_offsets: np.ndarray
    tip_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    tip_parents: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        self.rest_offsets = np.asarray(self.rest_offsets, dtype=float)
        self.tip_points = np.asarray(self.tip_points, dtype=float).reshape(-1, 3)
        self.tip_parents = np.asarray(self.tip_parents, dtype=int)
        k = len(self.parents)
        if k != NUM_JOINTS or self.rest_offsets.shape != (k, 3):
            raise ShapeError(f"skeleton must have {NUM_JOINTS} joints with 3-vector offsets")
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, k)):
            raise ValueError("parents must form a tree rooted at joint 0 in topological order")
        if 3 * (k - 1) != POSE_DIM:
            raise ValueError("joint count disagrees with the pose dimensionality")

    @property
    def rest_joints(self):
        joints = np.zeros((NUM_JOINTS, 3))
        for k in range(NUM_JOINTS):
            p = self.parents[k]
            joints[k] = self.rest_offsets[k] + (joints[p] if p >= 0 else 0.0)
        return joints


@dataclass
class HandPose:
    """45-dim articulation plus a global rigid placement and handedness."""

    theta: np.ndarray
    quat: np.ndarray
    translation: np.ndarray
    handedness: str = "R"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        self.quat = np.asarray(self.quat, dtype=float).reshape(4)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.theta.shape != (POSE_DIM,):
            raise ShapeError(f"theta must have {POSE_DIM} entries, got {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")
        if self.handedness not in ("L", "R"):
            raise ValueError("handedness must be 'L' or 'R'")

    @classmethod
    def from_matrix(cls, theta, rotation, translation, handedness="R"):
        rotation = np.asarray(rotation, dtype=float)
        # matrix -> quaternion (Shepperd); rotation validity checked downstream
        t = np.trace(rotation)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2
            q = np.array([0.25 * s,
                          (rotation[2, 1] - rotation[1, 2]) / s,
                          (rotation[0, 2] - rotation[2, 0]) / s,
                          (rotation[1, 0] - rotation[0, 1]) / s])
        else:
            i = int(np.argmax(np.diag(rotation)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(1.0 + rotation[i, i] - rotation[j, j] - rotation[k, k]) * 2
            q = np.zeros(4)
            q[0] = (rotation[k, j] - rotation[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (rotation[j, i] + rotation[i, j]) / s
            q[1 + k] = (rotation[k, i] + rotation[i, k]) / s
        return cls(theta=theta, quat=quat_normalize(q), translation=translation,
                   handedness=handedness)

    @property
    def rotation(self):
        return rotmat_from_unit_quat(quat_normalize(self.quat))


@dataclass
class HandTemplate:
    """Rest template points with pseudo ground-truth skinning weights."""

    skeleton: Skeleton
    points: np.ndarray              # (N, 3) canonical right-hand space
    weights: np.ndarray             # (N, K) rows on the simplex
    beta: np.ndarray = field(default_factory=lambda: np.zeros(10))  # frozen shape

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if self.weights.shape != (len(self.points), NUM_JOINTS):
            raise ShapeError("template weights must be (N, 16)")
        validate_skin_weights(self.weights)
        if self.beta.shape != (10,):
            raise ShapeError("beta must have 10 entries")
        self._tree = None

    @property
    def tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree


def validate_skin_weights(w, tol=1e-3):
    w = np.asarray(w, dtype=float)
    sums = w.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise InvalidWeightsError(f"skin weights sum off by up to {np.abs(sums - 1).max():.2e}")
    if np.any(w < -1e-9):
        raise InvalidWeightsError("skin weights must be nonnegative")


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

@dataclass
class FKResult:
    """Per-joint world transforms (rest pose maps to identity) plus cache."""

    quats: np.ndarray       # (K, 4) global joint rotations
    phis: np.ndarray        # (K, 3, 3) skinning rotations
    gammas: np.ndarray      # (K, 3) skinning translations
    joints: np.ndarray      # (K, 3) posed joint positions
    cache: dict


def forward_kinematics(skeleton: Skeleton, pose: HandPose) -> FKResult:
    """Per-joint world transforms relative to the canonical rest pose.

    Includes the pose's global rigid placement, so a rest pose with identity
    placement yields identity transforms for every joint.
    """
    mirrored = pose.handedness == "L"
    offsets = skeleton.rest_offsets @ MIRROR if mirrored else skeleton.rest_offsets
    rest = np.zeros((NUM_JOINTS, 3))
    for k in range(NUM_JOINTS):
        p = skeleton.parents[k]
        rest[k] = offsets[k] + (rest[p] if p >= 0 else 0.0)

    theta = pose.theta.reshape(NUM_JOINTS - 1, 3)
    q_local = np.zeros((NUM_JOINTS, 4))
    q_local[0] = np.array([1.0, 0.0, 0.0, 0.0])
    q_local[1:] = quat_from_rotvec(theta)

    q_art = np.zeros((NUM_JOINTS, 4))
    t_art = np.zeros((NUM_JOINTS, 3))
    q_art[0] = q_local[0]
    t_art[0] = rest[0]
    for k in range(1, NUM_JOINTS):
        p = skeleton.parents[k]
        q_art[k] = quat_mul(q_art[p], q_local[k])
        t_art[k] = rotmat_from_unit_quat(q_art[p]) @ offsets[k] + t_art[p]

    q_pose = quat_normalize(pose.quat)
    r_pose = rotmat_from_unit_quat(q_pose)
    q_g = quat_mul(q_pose[None, :], q_art)
    t_g = t_art @ r_pose.T + pose.translation

    phis = rotmat_from_unit_quat(q_g)
    gammas = t_g - np.einsum("kij,kj->ki", phis, rest)
    cache = {
        "q_local": q_local, "q_art": q_art, "t_art": t_art,
        "q_pose": q_pose, "q_pose_raw": pose.quat.copy(), "r_pose": r_pose,
        "theta": theta, "offsets": offsets, "rest": rest,
        "parents": skeleton.parents, "mirrored": mirrored,
    }
    return FKResult(quats=q_g, phis=phis, gammas=gammas, joints=t_g, cache=cache)


def fk_backward(fk: FKResult, d_phis=None, d_gammas=None, d_qg=None, d_joints=None):
    """Reverse pass of forward_kinematics.

    Accepts gradients on the skinning transforms (phis, gammas), on the global
    joint quaternions (rotation-composition path), and on the posed joint
    positions; returns (d_theta, d_quat, d_translation) where d_quat treats
    the pose quaternion as a free 4-vector.
    """
    c = fk.cache
    parents = c["parents"]
    rest, offsets = c["rest"], c["offsets"]
    q_pose, r_pose = c["q_pose"], c["r_pose"]
    q_art, t_art, q_local = c["q_art"], c["t_art"], c["q_local"]

    dq_g = np.zeros((NUM_JOINTS, 4)) if d_qg is None else np.asarray(d_qg, dtype=float).copy()
    dt_g = np.zeros((NUM_JOINTS, 3)) if d_joints is None else np.asarray(d_joints, dtype=float).copy()

    if d_phis is not None or d_gammas is not None:
        d_phis = np.zeros((NUM_JOINTS, 3, 3)) if d_phis is None else np.asarray(d_phis, dtype=float)
        if d_gammas is not None:
            d_gammas = np.asarray(d_gammas, dtype=float)
            dt_g += d_gammas
            # gammas = t_g - phis @ rest
            d_phis = d_phis - np.einsum("ki,kj->kij", d_gammas, rest)
        dq_g += np.einsum("kij,kijq->kq", d_phis, drotmat_dquat(fk.quats))

    # global placement: q_g = q_pose (x) q_art ; t_g = R(q_pose) t_art + Gamma
    d_quat = np.einsum("kqr,kq->r", quat_mul_right_matrix(q_art), dq_g)
    d_quat += np.einsum("ki,kj,ijq->q", dt_g, t_art, drotmat_dquat(q_pose))
    d_translation = dt_g.sum(axis=0)
    # einsum "qr,kq->kr" contracts the first axis, i.e. applies L^T
    dq_art = np.einsum("qr,kq->kr", quat_mul_left_matrix(q_pose), dq_g)
    dt_art = dt_g @ r_pose

    # articulated chain, leaves to root
    d_theta = np.zeros((NUM_JOINTS - 1, 3))
    for k in range(NUM_JOINTS - 1, 0, -1):
        p = parents[k]
        dq_art[p] += quat_mul_right_matrix(q_local[k]).T @ dq_art[k]
        dq_local = quat_mul_left_matrix(q_art[p]).T @ dq_art[k]
        dt_art[p] += dt_art[k]
        dq_art[p] += np.einsum("i,j,ijq->q", dt_art[k], offsets[k], drotmat_dquat(q_art[p]))
        d_theta[k - 1] = dquat_drotvec(c["theta"][k - 1]).T @ dq_local

    d_quat = normalize_quat_backward(c["q_pose_raw"], d_quat)
    return d_theta.reshape(-1), d_quat, d_translation


# ---------------------------------------------------------------------------
# skinning
# ---------------------------------------------------------------------------

def lbs_pose(mu_c, weights, transforms):
    """Pose one canonical point: sum_k W^k (Phi_k mu + Gamma_k)."""
    mu_c = np.asarray(mu_c, dtype=float)
    weights = np.asarray(weights, dtype=float)
    validate_skin_weights(weights)
    out = np.zeros(3)
    for w, (phi, gamma) in zip(weights, transforms):
        if w != 0.0:
            out += w * (np.asarray(phi) @ mu_c + np.asarray(gamma))
    return out


def lbs_pose_batch(mu, weights, phis, gammas):
    """Vectorized Eq.-3 skinning of many points."""
    per_joint = np.einsum("kij,nj->nki", phis, mu) + gammas[None, :, :]
    return np.einsum("nk,nki->ni", weights, per_joint)


def lbs_pose_backward(mu, weights, phis, gammas, grad):
    """Gradients of lbs_pose_batch w.r.t. every input."""
    per_joint = np.einsum("kij,nj->nki", phis, mu) + gammas[None, :, :]
    d_mu = np.einsum("nk,kij,ni->nj", weights, phis, grad)
    d_w = np.einsum("nki,ni->nk", per_joint, grad)
    d_phis = np.einsum("nk,ni,nj->kij", weights, grad, mu)
    d_gammas = np.einsum("nk,ni->ki", weights, grad)
    return d_mu, d_w, d_phis, d_gammas


def flip_x(gset: GaussianSet) -> GaussianSet:
    """Mirror a canonical set across the x axis (centers and orientations)."""
    subject = gset.subject
    if subject == "right-hand":
        subject = "left-hand"
    elif subject == "left-hand":
        subject = "right-hand"
    return GaussianSet(
        centers=gset.centers @ MIRROR,
        scales=gset.scales.copy(),
        quats=mirror_quat(gset.quats),
        opacities=gset.opacities.copy(),
        colors=gset.colors.copy(),
        subject=subject,
    )


def pose_hand(canonical: GaussianSet, template: HandTemplate, weights, pose: HandPose) -> GaussianSet:
    """Pose the shared canonical set into world space for one hand.

    Left hands flip the canonical centers/orientations first; centers are then
    skinned with the per-Gaussian weights and each orientation is composed
    with its maximum-weight joint's global rotation.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(canonical), NUM_JOINTS):
        raise ShapeError("weights must be (N, 16)")
    validate_skin_weights(weights)
    gset = flip_x(canonical) if pose.handedness == "L" else canonical
    fk = forward_kinematics(template.skeleton, pose)
    posed = lbs_pose_batch(gset.centers, weights, fk.phis, fk.gammas)
    kstar = np.argmax(weights, axis=1)
    quats = quat_mul(fk.quats[kstar], gset.quats)
    return GaussianSet(
        centers=posed,
        scales=gset.scales.copy(),
        quats=quats,
        opacities=gset.opacities.copy(),
        colors=gset.colors.copy(),
        subject="left-hand" if pose.handedness == "L" else "right-hand",
    )


def pseudo_lbs(query, template: HandTemplate):
    """Inverse-distance weighted skinning weights from the 6 nearest template
    points; an exact-match query returns that point's weights."""
    query = np.asarray(query, dtype=float)
    single = query.ndim == 1
    pts = np.atleast_2d(query)
    k = min(6, len(template.points))
    dist, idx = template.tree.query(pts, k=k)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    out = np.zeros((len(pts), NUM_JOINTS))
    exact = dist[:, 0] < 1e-12
    out[exact] = template.weights[idx[exact, 0]]
    rest = ~exact
    if np.any(rest):
        inv = 1.0 / dist[rest]
        inv /= inv.sum(axis=1, keepdims=True)
        out[rest] = np.einsum("qk,qkj->qj", inv, template.weights[idx[rest]])
    return out[0] if single else out


def mirror_pose_theta(theta):
    """Mirror a 45-dim articulation across x: per-joint (vx,vy,vz) -> (vx,-vy,-vz)."""
    out = np.asarray(theta, dtype=float).reshape(NUM_JOINTS - 1, 3).copy()
    out[:, 1] *= -1.0
    out[:, 2] *= -1.0
    return out.reshape(-1)


def mirror_camera(cam: Camera) -> Camera:
    """The camera that sees the x-mirrored scene as the horizontally flipped
    image of the original camera's view."""
    return Camera(
        fx=cam.fx, fy=cam.fy, cx=(cam.width - 1) - cam.cx, cy=cam.cy,
        rotation=MIRROR @ cam.rotation @ MIRROR,
        translation=MIRROR @ cam.translation,
        width=cam.width, height=cam.height, near=cam.near,
    )


# ---------------------------------------------------------------------------
# procedural rig construction
# ---------------------------------------------------------------------------

_FINGERS = {
    # name: (base position, direction, proximal len, middle len, tip len, radius)
    "thumb": ((0.033, 0.018, -0.006), (0.55, 0.80, 0.10), 0.040, 0.032, 0.025, 0.011),
    "index": ((0.030, 0.088, 0.0), (0.0, 1.0, 0.0), 0.036, 0.024, 0.021, 0.009),
    "middle": ((0.010, 0.094, 0.0), (0.0, 1.0, 0.0), 0.040, 0.027, 0.023, 0.009),
    "ring": ((-0.011, 0.088, 0.0), (0.0, 1.0, 0.0), 0.036, 0.025, 0.021, 0.009),
    "pinky": ((-0.030, 0.078, 0.0), (0.0, 1.0, 0.0), 0.028, 0.019, 0.018, 0.008),
}

PALM_RADIUS = 0.020


def build_skeleton() -> Skeleton:
    """The canonical right-hand rig: wrist at the origin, fingers along +y,
    palm normal +z, thumb toward +x."""
    parents = [-1]
    offsets = [np.zeros(3)]
    tips = []
    tip_parents = []
    joint = 1
    for name, (base, direction, l1, l2, l3, _r) in _FINGERS.items():
        base = np.asarray(base, dtype=float)
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        parents += [0, joint, joint + 1]
        offsets += [base, l1 * d, l2 * d]
        mcp = base
        dip = mcp + (l1 + l2) * d
        tips.append(dip + l3 * d)
        tip_parents.append(joint + 2)
        joint += 3
    return Skeleton(parents=np.array(parents), rest_offsets=np.stack(offsets),
                    tip_points=np.stack(tips), tip_parents=np.array(tip_parents))


def _joint_bones(skeleton: Skeleton):
    """Segments owned by each joint: palm fan for the root, phalanx for each
    articulated joint (leaves extend to the fingertip probes)."""
    joints = skeleton.rest_joints
    bones = {k: [] for k in range(NUM_JOINTS)}
    radii = {0: PALM_RADIUS}
    finger_radii = [spec[5] for spec in _FINGERS.values()]
    children = {k: [] for k in range(NUM_JOINTS)}
    for k in range(1, NUM_JOINTS):
        children[skeleton.parents[k]].append(k)
    for k in children[0]:
        bones[0].append((joints[0], joints[k]))
    for f in range(5):
        for step in range(3):
            k = 1 + 3 * f + step
            radii[k] = finger_radii[f] * (1.0 - 0.08 * step)
            if children[k]:
                bones[k].append((joints[k], joints[children[k][0]]))
            else:
                tip = skeleton.tip_points[list(skeleton.tip_parents).index(k)]
                bones[k].append((joints[k], tip))
    return bones, radii


def _segment_distances(points, seg_a, seg_b):
    """Distance from each point to the segment a-b."""
    d = seg_b - seg_a
    denom = float(d @ d)
    if denom < 1e-18:
        return np.linalg.norm(points - seg_a, axis=1)
    t = np.clip((points - seg_a) @ d / denom, 0.0, 1.0)
    proj = seg_a + t[:, None] * d
    return np.linalg.norm(points - proj, axis=1)


def build_template(skeleton: Skeleton, n_points=340, seed=11, weight_tau=0.008) -> HandTemplate:
    """Capsule-sample template points around every bone and assign pseudo
    ground-truth weights by a bone-distance softmax."""
    rng = np.random.default_rng(seed)
    bones, radii = _joint_bones(skeleton)
    segs = []
    for k in range(NUM_JOINTS):
        for a, b in bones[k]:
            segs.append((k, np.asarray(a), np.asarray(b), radii[k]))
    areas = np.array([r * np.linalg.norm(b - a) for _, a, b, r in segs])
    counts = np.maximum(1, np.round(areas / areas.sum() * n_points).astype(int))

    pts = []
    for (k, a, b, r), m in zip(segs, counts):
        axis = b - a
        ln = np.linalg.norm(axis)
        axis = axis / ln
        helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        n1 = np.cross(axis, helper)
        n1 /= np.linalg.norm(n1)
        n2 = np.cross(axis, n1)
        t = rng.uniform(0.0, 1.0, size=m)
        phi = rng.uniform(0.0, 2 * np.pi, size=m)
        pts.append(a + t[:, None] * ln * axis
                   + r * (np.cos(phi)[:, None] * n1 + np.sin(phi)[:, None] * n2))
    points = np.concatenate(pts, axis=0)

    dists = np.full((len(points), NUM_JOINTS), np.inf)
    for k, a, b, _r in segs:
        dists[:, k] = np.minimum(dists[:, k], _segment_distances(points, a, b))
    logits = -dists / weight_tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return HandTemplate(skeleton=skeleton, points=points, weights=w)


# ---------------------------------------------------------------------------
# rig serialization
# ---------------------------------------------------------------------------

def save_rig(skeleton: Skeleton, path):
    """Plain-text rig table: `joint parent offset_x offset_y offset_z`, with
    fingertip probes in trailing `tip parent x y z` rows."""
    lines = ["# graspsplat hand rig", "# joint parent offset_x offset_y offset_z"]
    for k in range(NUM_JOINTS):
        ox, oy, oz = (float(v) for v in skeleton.rest_offsets[k])
        lines.append(f"{k} {skeleton.parents[k]} {ox!r} {oy!r} {oz!r}")
    lines.append("# tip parent x y z")
    for parent, tip in zip(skeleton.tip_parents, skeleton.tip_points):
        lines.append(f"tip {parent} {float(tip[0])!r} {float(tip[1])!r} {float(tip[2])!r}")
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_rig(path) -> Skeleton:
    parents, offsets, tips, tip_parents = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if fields[0] == "tip":
                tip_parents.append(int(fields[1]))
                tips.append([float(x) for x in fields[2:5]])
            else:
                parents.append(int(fields[1]))
                offsets.append([float(x) for x in fields[2:5]])
    return Skeleton(parents=np.array(parents), rest_offsets=np.array(offsets),
                    tip_points=np.array(tips) if tips else np.zeros((0, 3)),
                    tip_parents=np.array(tip_parents, dtype=int))


def save_template_ply(template: HandTemplate, path):
    """Template points as a binary little-endian PLY point cloud."""
    n = len(template.points)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(template.points.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_template_points(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    n = int([ln for ln in data[:end].decode("ascii").splitlines()
             if ln.startswith("element vertex")][0].split()[-1])
    pts = np.frombuffer(data[end:end + 12 * n], dtype="<f4").reshape(n, 3)
    return pts.astype(float)


def fingertip_positions(skeleton: Skeleton, fk: FKResult):
    """World positions of the fingertip probes under an FK result."""
    tips = skeleton.tip_points @ MIRROR if fk.cache["mirrored"] else skeleton.tip_points
    idx = skeleton.tip_parents
    return np.einsum("kij,kj->ki", fk.phis[idx], tips) + fk.gammas[idx]
