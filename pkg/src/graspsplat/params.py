"""Named parameter storage for the whole reconstruction problem.

A ParamStore is a flat dict of float64 arrays covering the shared subject
models (triplane planes, head layers, canonical centers) and the per-frame
tracks (articulations, rigid rotations as quaternions, translations). The
store is fully self-describing: subject models are rebuilt from array shapes,
so a serialized store reconstructs the same scene model.

Rotation tracks are quaternion-valued and updated multiplicatively by the
optimizer (axis-angle increments composed onto the current rotation), so they
are listed in ROTATION_TRACKS rather than treated as free vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import feature_field as ff
from .errors import ShapeError
from .hand_model import NUM_JOINTS, POSE_DIM, HandTemplate

ROTATION_TRACKS = ("frames.quat_l", "frames.quat_r", "frames.quat_o")

TRACK_KEYS = (
    "frames.theta_l", "frames.theta_r",
    "frames.gamma_l", "frames.gamma_r", "frames.gamma_o",
    "frames.quat_l", "frames.quat_r", "frames.quat_o",
)


@dataclass
class ParamStore:
    arrays: dict

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def names(self):
        return sorted(self.arrays)

    @property
    def num_frames(self):
        return len(self.arrays["frames.theta_l"])

    def copy(self):
        return ParamStore(arrays={k: v.copy() for k, v in self.arrays.items()})

    def save(self, path):
        ff.save_container(path, self.arrays)

    @classmethod
    def load(cls, path):
        return cls(arrays=ff.load_container(path))

    def serialized_blocks(self, exclude=()):
        """Per-array float32 byte blocks, keyed by name (for scope checks)."""
        return {k: np.asarray(v, dtype="<f4", order="C").tobytes()
                for k, v in self.arrays.items() if k not in exclude}


class GradientTape:
    """Per-parameter gradient buffers accumulated over one iteration."""

    def __init__(self, store: ParamStore):
        self.store = store
        self.grads = {}

    def add(self, name, grad, row=None):
        base = self.store[name]
        buf = self.grads.get(name)
        if buf is None:
            if name in ROTATION_TRACKS:
                # rotation tracks accumulate axis-angle increment gradients
                buf = np.zeros((len(base), 3))
            else:
                buf = np.zeros_like(base)
            self.grads[name] = buf
        if row is None:
            if grad.shape != buf.shape:
                raise ShapeError(f"gradient for {name} has shape {grad.shape}, "
                                 f"expected {buf.shape}")
            buf += grad
        else:
            buf[row] += grad

    def add_layers(self, prefix, dw, db):
        for i, (w, b) in enumerate(zip(dw, db)):
            self.add(f"{prefix}.w{i}", w)
            self.add(f"{prefix}.b{i}", b)

    def get(self, name):
        return self.grads.get(name)

    def names(self):
        return sorted(self.grads)


# ---------------------------------------------------------------------------
# store construction
# ---------------------------------------------------------------------------

def _register_mlp(arrays, prefix, mlp):
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        arrays[f"{prefix}.w{i}"] = w
        arrays[f"{prefix}.b{i}"] = b


def _subject_arrays(arrays, prefix, subject: ff.SubjectField):
    arrays[f"{prefix}.plane_xy"] = subject.field.plane_xy
    arrays[f"{prefix}.plane_xz"] = subject.field.plane_xz
    arrays[f"{prefix}.plane_yz"] = subject.field.plane_yz
    arrays[f"{prefix}.bbox_lo"] = subject.field.bbox_lo
    arrays[f"{prefix}.bbox_hi"] = subject.field.bbox_hi
    arrays[f"{prefix}.delta_max"] = np.array([subject.geometry.delta_max])
    arrays[f"{prefix}.base_log_scale"] = np.array([subject.geometry.base_log_scale])
    _register_mlp(arrays, f"{prefix}.app", subject.appearance.mlp)
    _register_mlp(arrays, f"{prefix}.geo", subject.geometry.mlp)
    if subject.deformation is not None:
        _register_mlp(arrays, f"{prefix}.def", subject.deformation.mlp)


def _points_stats(points):
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    pad = 0.1 * (hi - lo) + 1e-3
    lo, hi = lo - pad, hi + pad
    diag = float(np.linalg.norm(hi - lo))
    # median nearest-neighbor spacing sets the neutral splat size
    from scipy.spatial import cKDTree
    d, _ = cKDTree(points).query(points, k=2)
    spacing = float(np.median(d[:, 1]))
    return lo, hi, diag, max(spacing, 1e-5)


def init_store(rng, template: HandTemplate, object_points, num_frames,
               resolution=64, feature_dim=32, hidden=(64, 64),
               plane_init_scale=1e-2) -> ParamStore:
    """Fresh parameter store: neutral fields plus zeroed pose tracks."""
    arrays = {}
    for prefix, points in (("hand", template.points), ("object", np.asarray(object_points, dtype=float))):
        lo, hi, diag, spacing = _points_stats(points)
        subject = ff.build_subject_field(
            rng, resolution=resolution, feature_dim=feature_dim,
            bbox_lo=lo, bbox_hi=hi,
            delta_max=0.05 * diag,
            base_log_scale=float(np.log(0.7 * spacing)),
            hidden=hidden,
            with_deformation=(prefix == "hand"),
            init_scale=plane_init_scale)
        _subject_arrays(arrays, prefix, subject)
        arrays[f"{prefix}.centers"] = points.copy()

    t = num_frames
    arrays["frames.theta_l"] = np.zeros((t, POSE_DIM))
    arrays["frames.theta_r"] = np.zeros((t, POSE_DIM))
    for key in ("frames.gamma_l", "frames.gamma_r", "frames.gamma_o"):
        arrays[key] = np.zeros((t, 3))
    quat = np.zeros((t, 4))
    quat[:, 0] = 1.0
    for key in ROTATION_TRACKS:
        arrays[key] = quat.copy()
    return ParamStore(arrays=arrays)


def _collect_mlp(store: ParamStore, prefix):
    weights, biases = [], []
    i = 0
    while f"{prefix}.w{i}" in store:
        weights.append(store[f"{prefix}.w{i}"])
        biases.append(store[f"{prefix}.b{i}"])
        i += 1
    return ff.MlpHead(weights=weights, biases=biases)


def subject_field_from_store(store: ParamStore, prefix) -> ff.SubjectField:
    """Rebuild a SubjectField whose parameters alias the store arrays."""
    field = ff.TriplaneField(
        plane_xy=store[f"{prefix}.plane_xy"],
        plane_xz=store[f"{prefix}.plane_xz"],
        plane_yz=store[f"{prefix}.plane_yz"],
        bbox_lo=store[f"{prefix}.bbox_lo"],
        bbox_hi=store[f"{prefix}.bbox_hi"])
    appearance = ff.AppearanceHead(_collect_mlp(store, f"{prefix}.app"))
    geometry = ff.GeometryHead(_collect_mlp(store, f"{prefix}.geo"),
                               delta_max=float(store[f"{prefix}.delta_max"][0]),
                               base_log_scale=float(store[f"{prefix}.base_log_scale"][0]))
    deformation = None
    if f"{prefix}.def.w0" in store:
        deformation = ff.DeformationHead(_collect_mlp(store, f"{prefix}.def"))
    return ff.SubjectField(field=field, appearance=appearance, geometry=geometry,
                           deformation=deformation)
