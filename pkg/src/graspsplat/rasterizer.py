"""Differentiable splat renderer: projection, front-to-back compositing, and
analytic gradients for every Gaussian parameter.

Forward model per splat i at pixel x_p:

    o~_i = o_i * exp(-1/2 d^T Sigma2D^-1 d),  d = x_p - mean2D_i
    C(x_p) = sum_i c_i o~_i prod_{j<i} (1 - o~_j)      (depth-ascending order)

with Sigma2D = J W Sigma3D W^T J^T + LOWPASS * I. Inside a splat's screen
rectangle o~ is clamped to [ALPHA_MIN, ALPHA_MAX] (a continuous clip, so the
pixel loss stays piecewise smooth; gradients vanish on the clamped ranges),
and compositing for a pixel stops once transmittance falls below
TRANSMITTANCE_EPS. Outside every rectangle a pixel is exactly background.

The implementation is vectorized over (splat, pixel) pairs gathered from each
splat's 3-sigma screen rectangle; pairs are ordered by one global stable sort
on (pixel, depth rank) and reduced with bincount, so accumulation order is
fixed and renders are bit-reproducible. Large scenes fall back to fixed-order
row bands to bound the transient pair arrays.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .core_geometry import (
    Camera,
    Gaussian3D,
    GaussianSet,
    drotmat_dquat,
    normalize_quat_backward,
    rotmat_from_unit_quat,
)
from .errors import EmptySceneError, ShapeError

LOWPASS = 0.3                 # px^2, isotropic screen-space regularizer
FOOTPRINT_SIGMAS = 3.0        # rectangle half-extent in sigma units
ALPHA_MIN = 1e-4              # lower opacity clamp inside the footprint
ALPHA_MAX = 1.0 - 1e-4        # cap keeps the transmittance product positive
TRANSMITTANCE_EPS = 1e-4      # per-pixel early-termination threshold
MAX_PAIRS = 2_000_000         # band splitting threshold


@dataclass
class Splat2D:
    """A projected Gaussian: screen mean, 2x2 covariance, depth, payload."""

    mean: np.ndarray
    cov: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    index: int


@dataclass
class RenderOutput:
    image: np.ndarray        # (H, W, 3) in [0, 1]
    alpha: np.ndarray        # (H, W) accumulated opacity in [0, 1]
    splat_count: np.ndarray  # (H, W) contributing splats per pixel


@dataclass
class RenderGradients:
    centers: np.ndarray    # (N, 3)
    scales: np.ndarray     # (N, 3)
    quats: np.ndarray      # (N, 4)
    opacities: np.ndarray  # (N,)
    colors: np.ndarray     # (N, 3)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _project_arrays(centers, scales, quats, opacities, colors, cam: Camera):
    """Project all splats; returns a dict of per-splat arrays plus validity."""
    n = len(centers)
    rot = cam.rotation
    pc = centers @ rot.T + cam.translation
    depth = pc[:, 2]
    in_front = depth > cam.near

    # keep the math well-defined for culled splats
    z = np.where(in_front, depth, 1.0)
    invz = 1.0 / z
    u0 = cam.fx * pc[:, 0] * invz + cam.cx
    v0 = cam.fy * pc[:, 1] * invz + cam.cy

    q_hat = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    rq = rotmat_from_unit_quat(q_hat)
    sigma3 = np.einsum("nij,nj,nkj->nik", rq, scales * scales, rq)
    m_cam = np.einsum("ij,njk,lk->nil", rot, sigma3, rot)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx * invz
    jac[:, 0, 2] = -cam.fx * pc[:, 0] * invz * invz
    jac[:, 1, 1] = cam.fy * invz
    jac[:, 1, 2] = -cam.fy * pc[:, 1] * invz * invz
    cov2 = np.einsum("nij,njk,nlk->nil", jac, m_cam, jac)
    cov2[:, 0, 0] += LOWPASS
    cov2[:, 1, 1] += LOWPASS

    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = FOOTPRINT_SIGMAS * np.sqrt(np.maximum(lam_max, 0.0))

    on_screen = (
        (u0 + radius >= 0.0)
        & (u0 - radius <= cam.width - 1.0)
        & (v0 + radius >= 0.0)
        & (v0 - radius <= cam.height - 1.0)
    )
    valid = in_front & on_screen

    det = a * c - b * b
    det = np.maximum(det, 1e-12)
    q00 = c / det
    q01 = -b / det
    q11 = a / det

    return {
        "pc": pc,
        "depth": depth,
        "invz": invz,
        "u0": u0,
        "v0": v0,
        "q_hat": q_hat,
        "rq": rq,
        "m_cam": m_cam,
        "jac": jac,
        "cov2": cov2,
        "q00": q00,
        "q01": q01,
        "q11": q11,
        "radius": radius,
        "valid": valid,
        "opacity": opacities,
        "color": colors,
        "scales": scales,
    }


def project_gaussian(g: Gaussian3D, cam: Camera):
    """Project one Gaussian to a Splat2D; returns None when culled."""
    proj = _project_arrays(
        g.center[None], g.scale[None], g.rotation[None],
        np.array([g.opacity]), g.color[None], cam,
    )
    if not proj["valid"][0]:
        return None
    return Splat2D(
        mean=np.array([proj["u0"][0], proj["v0"][0]]),
        cov=proj["cov2"][0],
        depth=float(proj["depth"][0]),
        opacity=g.opacity,
        color=g.color.copy(),
        index=0,
    )


# ---------------------------------------------------------------------------
# pair machinery
# ---------------------------------------------------------------------------

def _pixel_bounds(proj, width, row0, row1):
    """Per-splat inclusive pixel rectangles clipped to a row band."""
    u0, v0, radius = proj["u0"], proj["v0"], proj["radius"]
    x0 = np.maximum(np.ceil(u0 - radius), 0.0).astype(np.int64)
    x1 = np.minimum(np.floor(u0 + radius), width - 1.0).astype(np.int64)
    y0 = np.maximum(np.ceil(v0 - radius), float(row0)).astype(np.int64)
    y1 = np.minimum(np.floor(v0 + radius), row1 - 1.0).astype(np.int64)
    ok = proj["valid"] & (x0 <= x1) & (y0 <= y1)
    return x0, x1, y0, y1, ok


def _band_pairs(proj, rank, width, row0, row1):
    """Build depth-ordered (splat, pixel) pairs for one pixel-row band.

    Returns None when the band receives no contributions.
    """
    x0, x1, y0, y1, ok = _pixel_bounds(proj, width, row0, row1)
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return None
    w = x1[idx] - x0[idx] + 1
    h = y1[idx] - y0[idx] + 1
    counts = w * h
    total = int(counts.sum())
    if total == 0:
        return None

    a = np.repeat(idx, counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    offset = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    w_rep = np.repeat(w, counts)
    px = np.repeat(x0[idx], counts) + offset % w_rep
    py = np.repeat(y0[idx], counts) + offset // w_rep

    d0 = px - proj["u0"][a]
    d1 = py - proj["v0"][a]
    q00, q01, q11 = proj["q00"][a], proj["q01"][a], proj["q11"][a]
    sig = 0.5 * (q00 * d0 * d0 + 2.0 * q01 * d0 * d1 + q11 * d1 * d1)
    weight = np.exp(-sig)
    o_raw = proj["opacity"][a] * weight

    pix = (py - row0) * width + px
    order = np.lexsort((rank[a], pix))
    a, pix, d0, d1 = a[order], pix[order], d0[order], d1[order]
    weight, o_raw = weight[order], o_raw[order]

    clamped = (o_raw < ALPHA_MIN) | (o_raw > ALPHA_MAX)
    o_til = np.clip(o_raw, ALPHA_MIN, ALPHA_MAX)

    # transmittance before each splat: segmented exclusive cumsum of log(1-o~)
    logs = np.log1p(-o_til)
    csum = np.cumsum(logs)
    excl = csum - logs
    seg_start = np.empty(len(pix), dtype=bool)
    seg_start[0] = True
    seg_start[1:] = pix[1:] != pix[:-1]
    seg_id = np.cumsum(seg_start) - 1
    first = np.flatnonzero(seg_start)
    trans = np.exp(excl - excl[first][seg_id])
    active = trans >= TRANSMITTANCE_EPS

    return {
        "a": a, "pix": pix, "d0": d0, "d1": d1, "w": weight,
        "o_til": o_til, "clamped": clamped, "trans": trans, "active": active,
        "seg_id": seg_id, "first": first, "n_band": (row1 - row0) * width,
        "row0": row0,
    }


def _band_rows(proj, width, height):
    """Split the image into row bands so pair counts stay bounded."""
    x0, x1, y0, y1, ok = _pixel_bounds(proj, width, 0, height)
    if not np.any(ok):
        return [(0, height)]
    total = int(((x1 - x0 + 1) * (y1 - y0 + 1))[ok].sum())
    n_bands = max(1, int(np.ceil(total / MAX_PAIRS)))
    if n_bands == 1:
        return [(0, height)]
    edges = np.linspace(0, height, n_bands + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(len(edges) - 1)
            if edges[i + 1] > edges[i]]


# ---------------------------------------------------------------------------
# forward / backward over raw arrays
# ---------------------------------------------------------------------------

def _render_forward_arrays(centers, scales, quats, opacities, colors, cam: Camera):
    height, width = cam.height, cam.width
    proj = _project_arrays(centers, scales, quats, opacities, colors, cam)
    order = np.lexsort((np.arange(len(centers)), proj["depth"]))
    rank = np.empty(len(centers), dtype=np.int64)
    rank[order] = np.arange(len(centers))

    image = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    for row0, row1 in _band_rows(proj, width, height):
        pairs = _band_pairs(proj, rank, width, row0, row1)
        if pairs is None:
            continue
        nb = pairs["n_band"]
        contrib_w = pairs["o_til"] * pairs["trans"] * pairs["active"]
        for ch in range(3):
            acc = np.bincount(pairs["pix"], weights=contrib_w * colors[pairs["a"], ch],
                              minlength=nb)
            image[row0:row1, :, ch] += acc.reshape(row1 - row0, width)
        alpha[row0:row1] += np.bincount(pairs["pix"], weights=contrib_w,
                                        minlength=nb).reshape(row1 - row0, width)
        count[row0:row1] += np.bincount(pairs["pix"], weights=pairs["active"],
                                        minlength=nb).reshape(row1 - row0, width).astype(np.int64)
    return RenderOutput(image=image, alpha=alpha, splat_count=count), proj, rank


def _render_backward_arrays(centers, scales, quats, opacities, colors, cam: Camera,
                            pixel_grad, proj=None, rank=None):
    height, width = cam.height, cam.width
    if pixel_grad.shape != (height, width, 3):
        raise ShapeError(
            f"pixel gradient shape {pixel_grad.shape} does not match image "
            f"({height}, {width}, 3)")
    if proj is None:
        proj = _project_arrays(centers, scales, quats, opacities, colors, cam)
        order = np.lexsort((np.arange(len(centers)), proj["depth"]))
        rank = np.empty(len(centers), dtype=np.int64)
        rank[order] = np.arange(len(centers))

    n = len(centers)
    du0 = np.zeros(n)
    dv0 = np.zeros(n)
    dq00 = np.zeros(n)
    dq01 = np.zeros(n)
    dq11 = np.zeros(n)
    d_op = np.zeros(n)
    d_col = np.zeros((n, 3))

    for row0, row1 in _band_rows(proj, width, height):
        pairs = _band_pairs(proj, rank, width, row0, row1)
        if pairs is None:
            continue
        a = pairs["a"]
        pix = pairs["pix"]
        nb = pairs["n_band"]
        o_til, trans, active = pairs["o_til"], pairs["trans"], pairs["active"]
        seg_id, first = pairs["seg_id"], pairs["first"]
        contrib_w = o_til * trans * active

        g_band = pixel_grad[row0:row1].reshape(-1, 3)
        gpix = g_band[pix]

        d_otil = np.zeros(len(a))
        for ch in range(3):
            col_ch = colors[a, ch]
            contrib_ch = contrib_w * col_ch
            totals = np.bincount(pix, weights=contrib_ch, minlength=nb)
            cs = np.cumsum(contrib_ch)
            base = (cs[first] - contrib_ch[first])[seg_id]
            s_after = totals[pix] - (cs - base)
            d_otil += gpix[:, ch] * (col_ch * trans - s_after / (1.0 - o_til))
            d_col[:, ch] += np.bincount(a, weights=gpix[:, ch] * contrib_w, minlength=n)
        d_otil *= active

        d_raw = d_otil * ~pairs["clamped"]
        d_op += np.bincount(a, weights=d_raw * pairs["w"], minlength=n)
        dw = d_raw * opacities[a]
        dsig = -pairs["w"] * dw
        q00a, q01a, q11a = proj["q00"][a], proj["q01"][a], proj["q11"][a]
        dd0 = dsig * (q00a * pairs["d0"] + q01a * pairs["d1"])
        dd1 = dsig * (q01a * pairs["d0"] + q11a * pairs["d1"])
        du0 += np.bincount(a, weights=-dd0, minlength=n)
        dv0 += np.bincount(a, weights=-dd1, minlength=n)
        dq00 += np.bincount(a, weights=dsig * 0.5 * pairs["d0"] ** 2, minlength=n)
        dq01 += np.bincount(a, weights=dsig * pairs["d0"] * pairs["d1"], minlength=n)
        dq11 += np.bincount(a, weights=dsig * 0.5 * pairs["d1"] ** 2, minlength=n)

    # chain from the conic Q = cov2^-1 back to cov2; dq01 already carries the
    # combined weight of both symmetric slots, so each full-matrix slot gets half
    g2 = np.zeros((n, 2, 2))
    g2[:, 0, 0] = dq00
    g2[:, 0, 1] = 0.5 * dq01
    g2[:, 1, 0] = 0.5 * dq01
    g2[:, 1, 1] = dq11
    qmat = np.zeros((n, 2, 2))
    qmat[:, 0, 0] = proj["q00"]
    qmat[:, 0, 1] = proj["q01"]
    qmat[:, 1, 0] = proj["q01"]
    qmat[:, 1, 1] = proj["q11"]
    dcov2 = -np.einsum("nij,njk,nkl->nil", qmat, g2, qmat)

    jac, m_cam, rq = proj["jac"], proj["m_cam"], proj["rq"]
    djac = 2.0 * np.einsum("nij,njk,nkl->nil", dcov2, jac, m_cam)
    dm = np.einsum("nji,njk,nkl->nil", jac, dcov2, jac)
    rot = cam.rotation
    dsigma3 = np.einsum("ji,njk,kl->nil", rot, dm, rot)
    rq_d = rq * (scales * scales)[:, None, :]
    drq = 2.0 * np.einsum("nij,njk->nik", dsigma3, rq_d)
    dd_diag = np.einsum("nik,nij,njk->nk", rq, dsigma3, rq)
    d_scales = dd_diag * 2.0 * scales

    dq_hat = np.einsum("nij,nijq->nq", drq, drotmat_dquat(proj["q_hat"]))
    d_quats = normalize_quat_backward(quats, dq_hat)

    pc, invz = proj["pc"], proj["invz"]
    fx, fy = cam.fx, cam.fy
    invz2 = invz * invz
    dj00 = djac[:, 0, 0]
    dj02 = djac[:, 0, 2]
    dj11 = djac[:, 1, 1]
    dj12 = djac[:, 1, 2]
    dpc = np.zeros((n, 3))
    dpc[:, 0] = du0 * fx * invz + dj02 * (-fx * invz2)
    dpc[:, 1] = dv0 * fy * invz + dj12 * (-fy * invz2)
    dpc[:, 2] = (
        du0 * (-fx * pc[:, 0] * invz2)
        + dv0 * (-fy * pc[:, 1] * invz2)
        + dj00 * (-fx * invz2)
        + dj11 * (-fy * invz2)
        + dj02 * (2.0 * fx * pc[:, 0] * invz2 * invz)
        + dj12 * (2.0 * fy * pc[:, 1] * invz2 * invz)
    )
    d_centers = dpc @ rot

    # culled splats contribute nothing
    dead = ~proj["valid"]
    for arr in (d_centers, d_scales, d_quats, d_col):
        arr[dead] = 0.0
    d_op[dead] = 0.0

    return RenderGradients(
        centers=d_centers,
        scales=d_scales,
        quats=d_quats,
        opacities=d_op,
        colors=d_col,
    )


# ---------------------------------------------------------------------------
# public surface
# ---------------------------------------------------------------------------

def render(gset: GaussianSet, cam: Camera) -> RenderOutput:
    """Composite a Gaussian set into an RGB image (Eq-style alpha blending)."""
    if len(gset) == 0:
        raise EmptySceneError("cannot render an empty Gaussian set")
    gset.validate()
    out, _, _ = _render_forward_arrays(
        gset.centers, gset.scales, gset.quats, gset.opacities, gset.colors, cam)
    return out


def render_backward(gset: GaussianSet, cam: Camera, pixel_grad) -> RenderGradients:
    """Backpropagate a per-pixel loss gradient to all Gaussian parameters."""
    if len(gset) == 0:
        raise EmptySceneError("cannot differentiate an empty Gaussian set")
    pixel_grad = np.asarray(pixel_grad, dtype=float)
    return _render_backward_arrays(
        gset.centers, gset.scales, gset.quats, gset.opacities, gset.colors,
        cam, pixel_grad)


def linear_to_srgb(image):
    return np.clip(image, 0.0, 1.0) ** (1.0 / 2.2)


def save_debug_png(out: RenderOutput, path):
    """Write the rendered image as an 8-bit sRGB PNG (atomic)."""
    data = (linear_to_srgb(out.image) * 255.0 + 0.5).astype(np.uint8)
    tmp = str(path) + ".tmp"
    Image.fromarray(data, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)
