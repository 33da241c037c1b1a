"""Triplane feature grids plus small fully-connected heads that emit
per-Gaussian parameters, with reverse-mode gradients into plane entries, head
weights, and query positions.

A field query sums bilinear interpolations of three axis-aligned planes
(XY, XZ, YZ) after mapping canonical coordinates into the unit square of each
plane; queries outside the bounding box are clamped (and flagged in the
cache). Heads are two ELU hidden layers with zero-initialized final layers so
an untrained field emits near-neutral Gaussians.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ConfigError, ShapeError

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ
PLANE_NAMES = ("plane_xy", "plane_xz", "plane_yz")

SCALE_LOG_RANGE = 1.5  # log-scale head output is bounded to +/- this


# ---------------------------------------------------------------------------
# triplane
# ---------------------------------------------------------------------------

@dataclass
class TriplaneField:
    plane_xy: np.ndarray  # (R, R, d)
    plane_xz: np.ndarray
    plane_yz: np.ndarray
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray

    def __post_init__(self):
        self.bbox_lo = np.asarray(self.bbox_lo, dtype=float).reshape(3)
        self.bbox_hi = np.asarray(self.bbox_hi, dtype=float).reshape(3)
        shapes = {p.shape for p in self.planes}
        if len(shapes) != 1 or self.plane_xy.ndim != 3 or self.plane_xy.shape[0] != self.plane_xy.shape[1]:
            raise ShapeError("the three planes must share one (R, R, d) shape")
        if np.any(self.bbox_hi <= self.bbox_lo):
            raise ValueError("bounding box must have positive extent")

    @property
    def planes(self):
        return (self.plane_xy, self.plane_xz, self.plane_yz)

    @property
    def resolution(self):
        return self.plane_xy.shape[0]

    @property
    def feature_dim(self):
        return self.plane_xy.shape[2]

    @classmethod
    def create(cls, rng, resolution=64, feature_dim=32, bbox_lo=(-1, -1, -1),
               bbox_hi=(1, 1, 1), init_scale=1e-2):
        def plane():
            return rng.uniform(-init_scale, init_scale, size=(resolution, resolution, feature_dim))
        return cls(plane_xy=plane(), plane_xz=plane(), plane_yz=plane(),
                   bbox_lo=np.asarray(bbox_lo, dtype=float),
                   bbox_hi=np.asarray(bbox_hi, dtype=float))


def triplane_interp_batch(f: TriplaneField, mu):
    """Features for a batch of query points; returns (features, cache)."""
    mu = np.asarray(mu, dtype=float).reshape(-1, 3)
    extent = f.bbox_hi - f.bbox_lo
    norm = (mu - f.bbox_lo) / extent
    clipped = (norm < 0.0) | (norm > 1.0)
    norm = np.clip(norm, 0.0, 1.0)
    r = f.resolution
    feats = np.zeros((len(mu), f.feature_dim))
    cache = {"norm": norm, "clipped": clipped, "extent": extent, "per_plane": []}
    for plane, (ax, ay) in zip(f.planes, PLANE_AXES):
        g0 = norm[:, ax] * (r - 1)
        g1 = norm[:, ay] * (r - 1)
        i0 = np.minimum(g0.astype(np.int64), r - 2)
        i1 = np.minimum(g1.astype(np.int64), r - 2)
        f0 = g0 - i0
        f1 = g1 - i1
        w00 = (1 - f0) * (1 - f1)
        w01 = (1 - f0) * f1
        w10 = f0 * (1 - f1)
        w11 = f0 * f1
        feats += (w00[:, None] * plane[i0, i1] + w01[:, None] * plane[i0, i1 + 1]
                  + w10[:, None] * plane[i0 + 1, i1] + w11[:, None] * plane[i0 + 1, i1 + 1])
        cache["per_plane"].append((i0, i1, f0, f1))
    return feats, cache


def triplane_interp(f: TriplaneField, mu):
    """Feature at one canonical point (clamped to the bounding box)."""
    feats, _ = triplane_interp_batch(f, np.asarray(mu, dtype=float).reshape(1, 3))
    return feats[0]


def triplane_interp_backward(f: TriplaneField, cache, d_feats):
    """Scatter feature gradients into plane gradients and query-point grads."""
    d_feats = np.asarray(d_feats, dtype=float)
    r = f.resolution
    extent = cache["extent"]
    d_planes = [np.zeros_like(p) for p in f.planes]
    d_mu = np.zeros((len(d_feats), 3))
    for pi, (plane, (ax, ay)) in enumerate(zip(f.planes, PLANE_AXES)):
        i0, i1, f0, f1 = cache["per_plane"][pi]
        w00 = (1 - f0) * (1 - f1)
        w01 = (1 - f0) * f1
        w10 = f0 * (1 - f1)
        w11 = f0 * f1
        dp = d_planes[pi]
        np.add.at(dp, (i0, i1), w00[:, None] * d_feats)
        np.add.at(dp, (i0, i1 + 1), w01[:, None] * d_feats)
        np.add.at(dp, (i0 + 1, i1), w10[:, None] * d_feats)
        np.add.at(dp, (i0 + 1, i1 + 1), w11[:, None] * d_feats)

        v00 = np.sum(plane[i0, i1] * d_feats, axis=1)
        v01 = np.sum(plane[i0, i1 + 1] * d_feats, axis=1)
        v10 = np.sum(plane[i0 + 1, i1] * d_feats, axis=1)
        v11 = np.sum(plane[i0 + 1, i1 + 1] * d_feats, axis=1)
        dg0 = (v10 - v00) * (1 - f1) + (v11 - v01) * f1
        dg1 = (v01 - v00) * (1 - f0) + (v11 - v10) * f0
        d_mu[:, ax] += dg0 * (r - 1) / extent[ax]
        d_mu[:, ay] += dg1 * (r - 1) / extent[ay]
    d_mu[np.any(cache["clipped"], axis=1)] = 0.0
    return d_planes, d_mu


# ---------------------------------------------------------------------------
# MLP heads
# ---------------------------------------------------------------------------

def _elu(x):
    return np.where(x > 0, x, np.expm1(x))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(x))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class MlpHead:
    """Dense stack with ELU hidden activations and a linear output layer."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must pair up")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ShapeError("layer shapes do not chain")

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"feature width {x.shape[-1]} != head input {self.in_dim}")
        pre = []
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if i == last else _elu(z)
            acts.append(h)
        return h, {"pre": pre, "acts": acts}

    def backward(self, cache, d_out):
        d_out = np.asarray(d_out, dtype=float)
        pre, acts = cache["pre"], cache["acts"]
        dw = [None] * len(self.weights)
        db = [None] * len(self.weights)
        grad = d_out
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i != last:
                grad = grad * _elu_grad(pre[i])
            dw[i] = acts[i].T @ grad
            db[i] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return grad, dw, db

    @classmethod
    def create(cls, rng, in_dim, hidden, out_dim, final_bias=None):
        dims = [in_dim] + list(hidden) + [out_dim]
        weights, biases = [], []
        for i in range(len(dims) - 1):
            if i == len(dims) - 2:
                w = np.zeros((dims[i], dims[i + 1]))
                b = np.zeros(dims[i + 1]) if final_bias is None else np.asarray(final_bias, dtype=float).copy()
            else:
                bound = np.sqrt(6.0 / dims[i])
                w = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
                b = np.zeros(dims[i + 1])
            weights.append(w)
            biases.append(b)
        return cls(weights=weights, biases=biases)


class AppearanceHead:
    """Feature -> (color in [0,1]^3, opacity in [0,1]) via logistic squash."""

    OUT_DIM = 4

    def __init__(self, mlp: MlpHead):
        self.mlp = mlp

    def forward(self, feats):
        raw, mcache = self.mlp.forward(feats)
        sig = _sigmoid(raw)
        return {"colors": sig[:, :3], "opacities": sig[:, 3]}, {"mlp": mcache, "sig": sig}

    def backward(self, cache, d_colors, d_opacities):
        sig = cache["sig"]
        d_raw = np.empty_like(sig)
        d_raw[:, :3] = d_colors
        d_raw[:, 3] = d_opacities
        d_raw *= sig * (1.0 - sig)
        return self.mlp.backward(cache["mlp"], d_raw)


class GeometryHead:
    """Feature -> (bounded center offset, unit quaternion, positive scale)."""

    OUT_DIM = 10

    def __init__(self, mlp: MlpHead, delta_max, base_log_scale):
        self.mlp = mlp
        self.delta_max = float(delta_max)
        self.base_log_scale = float(base_log_scale)

    @staticmethod
    def neutral_bias():
        bias = np.zeros(10)
        bias[3] = 1.0  # identity quaternion
        return bias

    def forward(self, feats):
        raw, mcache = self.mlp.forward(feats)
        t_off = np.tanh(raw[:, :3])
        offsets = self.delta_max * t_off
        q_raw = raw[:, 3:7]
        q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
        quats = q_raw / q_norm
        t_s = np.tanh(raw[:, 7:10])
        scales = np.exp(self.base_log_scale + SCALE_LOG_RANGE * t_s)
        cache = {"mlp": mcache, "t_off": t_off, "q_raw": q_raw, "q_norm": q_norm,
                 "quats": quats, "t_s": t_s, "scales": scales}
        return {"offsets": offsets, "quats": quats, "scales": scales}, cache

    def backward(self, cache, d_offsets, d_quats, d_scales):
        d_raw = np.empty((len(d_offsets), 10))
        d_raw[:, :3] = d_offsets * self.delta_max * (1.0 - cache["t_off"] ** 2)
        quats = cache["quats"]
        inner = np.sum(d_quats * quats, axis=1, keepdims=True)
        d_raw[:, 3:7] = (d_quats - quats * inner) / cache["q_norm"]
        d_raw[:, 7:10] = d_scales * cache["scales"] * SCALE_LOG_RANGE * (1.0 - cache["t_s"] ** 2)
        return self.mlp.backward(cache["mlp"], d_raw)


class DeformationHead:
    """Feature -> skinning weights on the 16-joint simplex via softmax."""

    OUT_DIM = 16

    def __init__(self, mlp: MlpHead):
        self.mlp = mlp

    def forward(self, feats):
        raw, mcache = self.mlp.forward(feats)
        shifted = raw - raw.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        w = e / e.sum(axis=1, keepdims=True)
        return {"weights": w}, {"mlp": mcache, "w": w}

    def backward(self, cache, d_weights):
        w = cache["w"]
        inner = np.sum(d_weights * w, axis=1, keepdims=True)
        d_raw = w * (d_weights - inner)
        return self.mlp.backward(cache["mlp"], d_raw)


def head_forward(head, feats):
    """Run one head on a feature batch; returns its output dict."""
    out, _ = head.forward(np.atleast_2d(np.asarray(feats, dtype=float)))
    return out


# ---------------------------------------------------------------------------
# bundled subject field
# ---------------------------------------------------------------------------

@dataclass
class SubjectField:
    """One subject's triplane plus its heads (deformation only for hands)."""

    field: TriplaneField
    appearance: AppearanceHead
    geometry: GeometryHead
    deformation: DeformationHead | None = None

    def emit(self, centers):
        """Per-Gaussian parameters at the given canonical centers."""
        feats, fcache = triplane_interp_batch(self.field, centers)
        app, acache = self.appearance.forward(feats)
        geo, gcache = self.geometry.forward(feats)
        out = {
            "colors": app["colors"], "opacities": app["opacities"],
            "offsets": geo["offsets"], "quats": geo["quats"], "scales": geo["scales"],
        }
        cache = {"feats": feats, "field": fcache, "app": acache, "geo": gcache}
        if self.deformation is not None:
            deform, dcache = self.deformation.forward(feats)
            out["weights"] = deform["weights"]
            cache["deform"] = dcache
        return out, cache

    def emit_backward(self, cache, grads):
        """Reverse `emit`; missing gradients are treated as zero.

        Returns a dict with plane gradients, per-head (dw, db) lists, and the
        gradient on the query centers.
        """
        if cache is None:
            raise ConfigError("emit_backward requires the cache from emit")
        feats = cache["feats"]
        n, d = feats.shape
        zeros3 = np.zeros((n, 3))

        d_feats = np.zeros((n, d))
        d_fa, aw, ab = self.appearance.backward(
            cache["app"],
            grads.get("colors", zeros3),
            grads.get("opacities", np.zeros(n)),
        )
        d_feats += d_fa
        d_fg, gw, gb = self.geometry.backward(
            cache["geo"],
            grads.get("offsets", zeros3),
            grads.get("quats", np.zeros((n, 4))),
            grads.get("scales", zeros3),
        )
        d_feats += d_fg
        result = {"appearance": (aw, ab), "geometry": (gw, gb)}
        if self.deformation is not None:
            d_fd, dw, db = self.deformation.backward(
                cache["deform"], grads.get("weights", np.zeros((n, DeformationHead.OUT_DIM))))
            d_feats += d_fd
            result["deformation"] = (dw, db)
        d_planes, d_mu = triplane_interp_backward(self.field, cache["field"], d_feats)
        result["planes"] = d_planes
        result["centers"] = d_mu
        return result


def field_backward(subject: SubjectField, cache, grads):
    """Gradients for plane entries and head parameters given emitted-parameter
    gradients; requires the forward cache."""
    return subject.emit_backward(cache, grads)


def build_subject_field(rng, resolution, feature_dim, bbox_lo, bbox_hi,
                        delta_max, base_log_scale, hidden=(64, 64),
                        with_deformation=False, init_scale=1e-2):
    field = TriplaneField.create(rng, resolution, feature_dim, bbox_lo, bbox_hi,
                                 init_scale=init_scale)
    app = AppearanceHead(MlpHead.create(rng, feature_dim, hidden, AppearanceHead.OUT_DIM))
    geo = GeometryHead(MlpHead.create(rng, feature_dim, hidden, GeometryHead.OUT_DIM,
                                      final_bias=GeometryHead.neutral_bias()),
                       delta_max=delta_max, base_log_scale=base_log_scale)
    deform = None
    if with_deformation:
        deform = DeformationHead(MlpHead.create(rng, feature_dim, hidden,
                                                DeformationHead.OUT_DIM))
    return SubjectField(field=field, appearance=app, geometry=geo, deformation=deform)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CONTAINER_MAGIC = b"GSPARAMS"
CONTAINER_VERSION = 1


def save_container(path, params):
    """Binary parameter container: magic, version, then named float32 blocks.

    Layout (little-endian): magic 8s | version u32 | count u32 | blocks, where
    each block is name_len u16 | name utf-8 | ndim u32 | dims u32*ndim |
    payload float32. Written atomically.
    """
    names = sorted(params)
    buf = [CONTAINER_MAGIC, struct.pack("<II", CONTAINER_VERSION, len(names))]
    for name in names:
        arr = np.asarray(params[name], dtype="<f4", order="C")
        nb = name.encode("utf-8")
        buf.append(struct.pack("<H", len(nb)))
        buf.append(nb)
        buf.append(struct.pack("<I", arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.append(arr.tobytes())
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(buf))
    os.replace(tmp, path)


def load_container(path):
    """Load a parameter container back into float64 arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CONTAINER_MAGIC:
        raise ConfigError(f"bad container magic in {path}")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CONTAINER_VERSION:
        raise ConfigError(f"unsupported container version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = arr.astype(float)
    return out
