"""Training objectives: masked image consistency (L1 + SSIM + perceptual
proxy + mask regularizer), neighbor color / scale regularizers, hand pose
smoothness with skinning-weight regularization, and the contact term. Every
term returns its value together with analytic gradients.

The perceptual term is a multi-scale gradient-difference proxy: Sobel edge
maps at three dyadic scales compared with L1. It preserves the contract of a
learned perceptual loss (image pair to scalar, with pixel gradients) while
staying self-contained.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.spatial import cKDTree

from .core_geometry import Camera, GaussianSet
from .errors import ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

LUMA = np.array([0.299, 0.587, 0.114])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
PERC_SCALES = 3
PERC_EPS = 1e-12

MASK_DILATE_RADIUS = 6  # fallback when no support mask is available


@dataclass
class LossWeights:
    """Objective weights; the defaults are the published operating point."""

    ssim: float = 0.2
    perceptual: float = 1.0
    color: float = 0.1
    scale: float = 100.0
    mask: float = 10.0
    lbs: float = 1e3
    contact: float = 1.0

    def __post_init__(self):
        for name in ("ssim", "perceptual", "color", "scale", "mask", "lbs", "contact"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class FrameObservation:
    """One observed frame: image, per-subject visibility masks, camera."""

    image: np.ndarray
    mask_left: np.ndarray
    mask_right: np.ndarray
    mask_object: np.ndarray
    camera: Camera
    index: int = 0
    support_mask: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        for name in ("mask_left", "mask_right", "mask_object"):
            setattr(self, name, np.asarray(getattr(self, name)).astype(bool))
        if self.support_mask is not None:
            self.support_mask = np.asarray(self.support_mask).astype(bool)

    @property
    def combined_mask(self):
        return self.mask_left | self.mask_right | self.mask_object

    def outside_region(self):
        """Pixels where rendered content is penalized by the mask term."""
        if self.support_mask is not None:
            return ~self.support_mask
        dilated = ndimage.binary_dilation(self.combined_mask,
                                          iterations=MASK_DILATE_RADIUS)
        return ~dilated


# ---------------------------------------------------------------------------
# windowed SSIM with gradients
# ---------------------------------------------------------------------------

def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _corr_valid(img, k=_KERNEL):
    out = np.einsum("ijw,w->ij", sliding_window_view(img, len(k), axis=0), k)
    return np.einsum("ijw,w->ij", sliding_window_view(out, len(k), axis=1), k)


def _corr_valid_adjoint(grad, shape, k=_KERNEL):
    # adjoint of separable valid correlation: zero-pad then correlate with the
    # (symmetric) kernel; output recovers the full input shape
    pad = len(k) - 1
    padded = np.zeros((grad.shape[0] + 2 * pad, grad.shape[1] + 2 * pad))
    padded[pad:-pad, pad:-pad] = grad
    out = np.einsum("ijw,w->ij", sliding_window_view(padded, len(k), axis=0), k)
    out = np.einsum("ijw,w->ij", sliding_window_view(out, len(k), axis=1), k)
    assert out.shape == shape
    return out


def ssim_map(x, y):
    """Per-window SSIM statistics for one channel pair; returns map + cache."""
    mu_x = _corr_valid(x)
    mu_y = _corr_valid(y)
    sxx = _corr_valid(x * x)
    syy = _corr_valid(y * y)
    sxy = _corr_valid(x * y)
    var_x = sxx - mu_x * mu_x
    var_y = syy - mu_y * mu_y
    cov = sxy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, {"mu_x": mu_x, "mu_y": mu_y, "a1": a1, "a2": a2, "b1": b1, "b2": b2, "s": s}


def ssim_value(x, y):
    """Mean SSIM over valid windows; channels averaged for 3-channel input."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ShapeError("ssim inputs must share a shape")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    vals = [ssim_map(x[..., c], y[..., c])[0].mean() for c in range(x.shape[-1])]
    return float(np.mean(vals))


def _ssim_loss_grad(x, y):
    """(1 - mean SSIM, d/dx) for a single channel pair."""
    if np.array_equal(x, y):
        # SSIM attains its maximum with exactly zero gradient; computing the
        # general expression here would leave ~ulp-level rounding residue
        return 0.0, np.zeros_like(x)
    s, c = ssim_map(x, y)
    n = s.size
    mu_x, mu_y = c["mu_x"], c["mu_y"]
    a1, a2, b1, b2, smap = c["a1"], c["a2"], c["b1"], c["b2"], c["s"]
    d_mu = (2 * mu_y * (a2 - a1)) / (b1 * b2) - 2 * mu_x * smap * (1.0 / b1 - 1.0 / b2)
    d_sxx = -smap / b2
    d_sxy = 2 * a1 / (b1 * b2)
    grad = (_corr_valid_adjoint(d_mu, x.shape)
            + 2.0 * x * _corr_valid_adjoint(d_sxx, x.shape)
            + y * _corr_valid_adjoint(d_sxy, x.shape))
    return 1.0 - float(smap.mean()), -grad / n


def _mask_bbox(mask, min_size=SSIM_WINDOW):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return None
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    h, w = mask.shape
    while r1 - r0 < min_size and (r0 > 0 or r1 < h):
        r0 = max(0, r0 - 1)
        r1 = min(h, r1 + 1)
    while c1 - c0 < min_size and (c0 > 0 or c1 < w):
        c0 = max(0, c0 - 1)
        c1 = min(w, c1 + 1)
    return r0, r1, c0, c1


# ---------------------------------------------------------------------------
# perceptual proxy with gradients
# ---------------------------------------------------------------------------

def _avgpool2(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    c = x[:h, :w]
    return 0.25 * (c[0::2, 0::2] + c[0::2, 1::2] + c[1::2, 0::2] + c[1::2, 1::2])


def _avgpool2_adjoint(g, shape):
    out = np.zeros(shape)
    h, w = (shape[0] // 2) * 2, (shape[1] // 2) * 2
    rep = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
    out[:h, :w] = rep
    return out


def _edge_map(gray):
    gx = ndimage.correlate(gray, SOBEL_X, mode="constant")
    gy = ndimage.correlate(gray, SOBEL_Y, mode="constant")
    e = np.sqrt(gx * gx + gy * gy + PERC_EPS)
    return e, gx, gy


def perceptual_proxy(pred_rgb, gt_rgb):
    """Multi-scale Sobel edge-difference loss and its gradient on pred."""
    gray_p = pred_rgb @ LUMA
    gray_g = gt_rgb @ LUMA
    levels_p, levels_g = [gray_p], [gray_g]
    for _ in range(PERC_SCALES - 1):
        levels_p.append(_avgpool2(levels_p[-1]))
        levels_g.append(_avgpool2(levels_g[-1]))

    value = 0.0
    grads = []
    for lp, lg in zip(levels_p, levels_g):
        ep, gxp, gyp = _edge_map(lp)
        eg, _, _ = _edge_map(lg)
        diff = ep - eg
        value += float(np.abs(diff).mean()) / PERC_SCALES
        d_e = np.sign(diff) / (diff.size * PERC_SCALES)
        d_gx = d_e * gxp / ep
        d_gy = d_e * gyp / ep
        d_gray = (ndimage.convolve(d_gx, SOBEL_X, mode="constant")
                  + ndimage.convolve(d_gy, SOBEL_Y, mode="constant"))
        grads.append(d_gray)

    d_gray_full = grads[-1]
    for lvl in range(PERC_SCALES - 2, -1, -1):
        d_gray_full = _avgpool2_adjoint(d_gray_full, levels_p[lvl].shape) + grads[lvl]
    return value, d_gray_full[..., None] * LUMA[None, None, :]


# ---------------------------------------------------------------------------
# image consistency loss (Eq.-5 pixel terms)
# ---------------------------------------------------------------------------

@dataclass
class ImageLossResult:
    value: float
    pixel_grad: np.ndarray
    terms: dict


def image_loss(pred, obs: FrameObservation, subject_mask, weights: LossWeights,
               include_mask_term=True) -> ImageLossResult:
    """Masked L1 + weighted SSIM + perceptual proxy + outlier mask penalty.

    The L1 term is normalized by the masked pixel count; SSIM and the
    perceptual proxy compare the masked images over the mask's bounding box;
    the mask penalty is the mean of rendered intensity outside the frame's
    support region.
    """
    pred = np.asarray(pred, dtype=float)
    if pred.shape != obs.image.shape:
        raise ShapeError(f"prediction {pred.shape} does not match frame {obs.image.shape}")
    mask = np.asarray(subject_mask).astype(bool)
    if mask.shape != pred.shape[:2]:
        raise ShapeError("subject mask does not match the image")

    grad = np.zeros_like(pred)
    terms = {"l1": 0.0, "ssim": 0.0, "perceptual": 0.0, "mask": 0.0}

    count = int(mask.sum())
    if count > 0:
        m3 = mask[..., None]
        diff = (pred - obs.image) * m3
        denom = 3.0 * count
        terms["l1"] = float(np.abs(diff).sum() / denom)
        grad += np.sign(diff) * m3 / denom

        bbox = _mask_bbox(mask)
        r0, r1, c0, c1 = bbox
        crop_m = mask[r0:r1, c0:c1, None]
        crop_p = pred[r0:r1, c0:c1] * crop_m
        crop_g = obs.image[r0:r1, c0:c1] * crop_m
        if crop_p.shape[0] >= SSIM_WINDOW and crop_p.shape[1] >= SSIM_WINDOW:
            ssim_losses = []
            for ch in range(3):
                lv, g = _ssim_loss_grad(crop_p[..., ch], crop_g[..., ch])
                ssim_losses.append(lv)
                grad[r0:r1, c0:c1, ch] += weights.ssim * (g / 3.0) * crop_m[..., 0]
            terms["ssim"] = float(np.mean(ssim_losses))

        pv, pg = perceptual_proxy(crop_p, crop_g)
        terms["perceptual"] = pv
        grad[r0:r1, c0:c1] += weights.perceptual * pg * crop_m

    if include_mask_term:
        outside = obs.outside_region()[..., None]
        terms["mask"] = float((pred * outside).mean())
        grad += weights.mask * outside / pred.size

    value = (terms["l1"] + weights.ssim * terms["ssim"]
             + weights.perceptual * terms["perceptual"] + weights.mask * terms["mask"])
    return ImageLossResult(value=value, pixel_grad=grad, terms=terms)


# ---------------------------------------------------------------------------
# Gaussian-space regularizers (Eq.-5 color/scale terms)
# ---------------------------------------------------------------------------

def neighbor_graph(centers, k=5):
    """Directed k-NN neighbor indices over canonical centers."""
    centers = np.asarray(centers, dtype=float)
    k = min(k, len(centers) - 1)
    if k <= 0:
        return np.zeros((len(centers), 0), dtype=int)
    _, idx = cKDTree(centers).query(centers, k=k + 1)
    return np.atleast_2d(idx)[:, 1:]


def color_scale_regularizers(gset: GaussianSet, neighbors):
    """Neighbor color smoothness and oversized-splat penalty.

    L_color is the mean squared color difference over directed k-NN pairs;
    L_scale penalizes max-axis scales above 2% of the subject's canonical
    bounding-box diagonal. Returns (l_color, l_scale, d_colors, d_scales).
    """
    colors = gset.colors
    scales = gset.scales
    neighbors = np.asarray(neighbors, dtype=int)
    d_colors = np.zeros_like(colors)
    l_color = 0.0
    if neighbors.size:
        n, k = neighbors.shape
        diff = colors[:, None, :] - colors[neighbors]
        l_color = float((diff ** 2).mean())
        coef = 2.0 / diff.size
        d_colors += coef * diff.sum(axis=1)
        np.add.at(d_colors, neighbors.reshape(-1), -coef * diff.reshape(-1, 3))

    extent = gset.centers.max(axis=0) - gset.centers.min(axis=0)
    tau = 0.02 * float(np.linalg.norm(extent))
    smax = scales.max(axis=1)
    excess = np.maximum(smax - tau, 0.0)
    l_scale = float((excess ** 2).mean())
    d_scales = np.zeros_like(scales)
    rows = np.flatnonzero(excess > 0)
    d_scales[rows, scales[rows].argmax(axis=1)] = 2.0 * excess[rows] / len(scales)
    return l_color, l_scale, d_colors, d_scales


# ---------------------------------------------------------------------------
# hand loss (Eq. 6) and contact loss (Eq. 8)
# ---------------------------------------------------------------------------

@dataclass
class HandLossResult:
    value: float
    smoothness: float
    lbs: float
    d_theta_t: np.ndarray
    d_theta_prev: np.ndarray | None
    d_gamma_t: np.ndarray
    d_gamma_prev: np.ndarray | None
    d_weights: np.ndarray


def hand_loss(theta_t, theta_prev, gamma_t, gamma_prev, weights_pred,
              weights_pseudo, lw: LossWeights) -> HandLossResult:
    """Pose/translation smoothness plus the skinning-weight regularizer.

    `theta_t`/`gamma_t` stack both hands ((2, 45) and (2, 3)); pass the
    previous frame as None on the first frame, where only the weight
    regularizer contributes.
    """
    theta_t = np.asarray(theta_t, dtype=float)
    gamma_t = np.asarray(gamma_t, dtype=float)
    weights_pred = np.asarray(weights_pred, dtype=float)
    weights_pseudo = np.asarray(weights_pseudo, dtype=float)
    if weights_pred.shape != weights_pseudo.shape:
        raise ShapeError("predicted and pseudo weights must match")

    smooth = 0.0
    d_theta_t = np.zeros_like(theta_t)
    d_gamma_t = np.zeros_like(gamma_t)
    d_theta_prev = d_gamma_prev = None
    if theta_prev is not None:
        theta_prev = np.asarray(theta_prev, dtype=float)
        gamma_prev = np.asarray(gamma_prev, dtype=float)
        dt = theta_t - theta_prev
        dg = gamma_t - gamma_prev
        smooth = float((dt ** 2).sum() + (dg ** 2).sum())
        d_theta_t = 2.0 * dt
        d_theta_prev = -2.0 * dt
        d_gamma_t = 2.0 * dg
        d_gamma_prev = -2.0 * dg

    dw = weights_pred - weights_pseudo
    lbs = float((dw ** 2).sum())
    d_weights = 2.0 * lw.lbs * dw

    return HandLossResult(
        value=smooth + lw.lbs * lbs,
        smoothness=smooth,
        lbs=lbs,
        d_theta_t=d_theta_t,
        d_theta_prev=d_theta_prev,
        d_gamma_t=d_gamma_t,
        d_gamma_prev=d_gamma_prev,
        d_weights=d_weights,
    )


def contact_loss(gamma_o, gamma_l, gamma_r, lam):
    """lambda * sum_H ||Gamma_O - Gamma_H||; subgradient 0 at coincidence."""
    gamma_o = np.asarray(gamma_o, dtype=float)
    value = 0.0
    d_o = np.zeros(3)
    d_hands = []
    for gamma_h in (np.asarray(gamma_l, dtype=float), np.asarray(gamma_r, dtype=float)):
        diff = gamma_o - gamma_h
        dist = float(np.linalg.norm(diff))
        value += lam * dist
        if dist > 0.0:
            unit = diff / dist
            d_o += lam * unit
            d_hands.append(-lam * unit)
        else:
            d_hands.append(np.zeros(3))
    return value, d_o, d_hands[0], d_hands[1]
