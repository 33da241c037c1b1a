"""First-order optimization: Adam with per-group learning rates, manifold
updates for quaternion tracks, and the two training stages (per-subject
fitting, then hand-translation refinement with the contact term).

Stage 1 interleaves a hand pass and an object pass on the same sampled frame
each iteration; the pass gates decide which parameter groups receive
gradients. Stage 2 renders the composite scene and steps only the two hand
translation tracks, leaving every other array untouched byte for byte.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .core_geometry import quat_from_rotvec, quat_mul, quat_normalize
from .errors import DivergenceError
from .guidance import GuidanceSchedule, sds_step
from .losses import (
    FrameObservation,
    LossWeights,
    color_scale_regularizers,
    contact_loss,
    hand_loss,
    image_loss,
    neighbor_graph,
)
from .params import ROTATION_TRACKS, GradientTape, ParamStore
from .scene_model import SceneModel
from .core_geometry import GaussianSet

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(param, grad, state, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One in-place Adam update on a single array; state holds {m, v, t}."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state["m"].shape:
        raise ValueError(f"gradient shape {grad.shape} does not match state")
    if np.isnan(grad).any():
        raise FloatingPointError("NaN gradient")
    state["t"] += 1
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    m_hat = state["m"] / (1.0 - beta1 ** state["t"])
    v_hat = state["v"] / (1.0 - beta2 ** state["t"])
    step = lr * m_hat / (np.sqrt(v_hat) + eps)
    param -= step
    return step


class Adam:
    """Named-group Adam over a ParamStore with quaternion-manifold tracks."""

    def __init__(self, store: ParamStore, lrs, warmup_iters=100):
        self.store = store
        self.lrs = dict(lrs)
        self.warmup = int(warmup_iters)
        self.state = {}
        for name in sorted(self.lrs):
            base = store[name]
            shape = (len(base), 3) if name in ROTATION_TRACKS else base.shape
            self.state[name] = {"m": np.zeros(shape), "v": np.zeros(shape), "t": 0}

    def lr_scale(self, iteration):
        if self.warmup <= 0:
            return 1.0
        return min(1.0, (iteration + 1) / self.warmup)

    def step(self, tape: GradientTape, iteration):
        scale = self.lr_scale(iteration)
        for name in sorted(self.lrs):
            grad = tape.get(name)
            state = self.state[name]
            if grad is None:
                grad = np.zeros_like(state["m"])
            if np.isnan(grad).any():
                raise FloatingPointError(f"NaN gradient in parameter group '{name}'")
            lr = self.lrs[name] * scale
            if name in ROTATION_TRACKS:
                quats = self.store[name]
                delta = np.zeros_like(grad)
                adam_step(delta, grad, state, lr)
                rows = np.flatnonzero(np.any(delta != 0.0, axis=1))
                if len(rows):
                    inc = quat_from_rotvec(delta[rows])
                    quats[rows] = quat_normalize(quat_mul(inc, quats[rows]))
            else:
                adam_step(self.store[name], grad, state, lr)


def default_learning_rates(store: ParamStore, pose_lr=1e-4):
    """Per-group rates: centers 1.6e-4, planes/heads 1e-3, tracks pose_lr."""
    lrs = {}
    for name in store.names():
        if name.endswith((".bbox_lo", ".bbox_hi", ".delta_max", ".base_log_scale")):
            continue
        if name.endswith(".centers"):
            lrs[name] = 1.6e-4
        elif ".plane_" in name:
            lrs[name] = 1e-3
        elif any(f".{part}." in name for part in ("app", "geo", "def")):
            lrs[name] = 1e-3
        elif name.startswith("frames."):
            lrs[name] = pose_lr
    return lrs


@dataclass
class StageConfig:
    """Iteration counts, gates, cadence, and learning-rate overrides."""

    iterations: int = 500
    seed: int = 0
    warmup_iters: int = 100
    pose_lr: float = 1e-4
    lr_overrides: dict = dc_field(default_factory=dict)
    hand_passes: bool = True
    object_passes: bool = True
    enable_sds: bool = False
    sds_every: int = 5
    sds_samples: int = 1
    sds_size: int = 64
    enable_smoothness: bool = True
    enable_hand_loss: bool = True
    enable_color_scale_reg: bool = True
    checkpoint_every: int = 0
    log_every: int = 200
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")


def _frame_order(rng, num_frames, iterations):
    order = []
    while len(order) < iterations:
        order.extend(rng.permutation(num_frames))
    return order[:iterations]


class _DivergenceWatch:
    def __init__(self, factor, patience):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.streak = 0

    def update(self, value, store, checkpoint_dir):
        if self.initial is None:
            self.initial = max(value, 1e-12)
            return
        if value > self.factor * self.initial:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.patience:
            path = None
            if checkpoint_dir:
                path = os.path.join(checkpoint_dir, "diverged.bin")
                store.save(path)
            raise DivergenceError(
                f"loss {value:.4g} exceeded {self.factor}x the initial "
                f"{self.initial:.4g} for {self.patience} consecutive iterations",
                checkpoint_path=path)


def _hand_pass(model, obs, t, tape, weights, config, terms):
    store = model.store
    masks = {"L": obs.mask_left, "R": obs.mask_right}
    reg = None
    if config.enable_hand_loss:
        theta_t = np.stack([store["frames.theta_l"][t], store["frames.theta_r"][t]])
        gamma_t = np.stack([store["frames.gamma_l"][t], store["frames.gamma_r"][t]])
        theta_prev = gamma_prev = None
        if config.enable_smoothness and t > 0:
            theta_prev = np.stack([store["frames.theta_l"][t - 1],
                                   store["frames.theta_r"][t - 1]])
            gamma_prev = np.stack([store["frames.gamma_l"][t - 1],
                                   store["frames.gamma_r"][t - 1]])

    for handed in ("L", "R"):
        arrays, cache = model.emit_hand(t, handed)
        out = model.render_arrays(arrays, obs.camera)
        res = image_loss(out.image, obs, masks[handed], weights)
        terms[f"image_{handed.lower()}"] = terms.get(f"image_{handed.lower()}", 0.0) + res.value
        grads = model.render_arrays_backward(arrays, obs.camera, res.pixel_grad)

        extras = {}
        if handed == "R":
            # canonical emission is shared by both hands; regularize it once
            if config.enable_color_scale_reg:
                gset = GaussianSet(centers=cache["mu_eff"], scales=cache["out"]["scales"],
                                   quats=cache["out"]["quats"],
                                   opacities=np.clip(cache["out"]["opacities"], 0, 1),
                                   colors=np.clip(cache["out"]["colors"], 0, 1),
                                   subject="right-hand")
                nbr = neighbor_graph(cache["mu_eff"])
                l_color, l_scale, d_colors, d_scales = color_scale_regularizers(gset, nbr)
                terms["hand_color"] = l_color
                terms["hand_scale"] = l_scale
                extras["d_colors"] = weights.color * d_colors
                extras["d_scales"] = weights.scale * d_scales
            if config.enable_hand_loss:
                w_hat = model.pseudo_weights(cache)
                hres = hand_loss(theta_t, theta_prev, gamma_t, gamma_prev,
                                 cache["weights"], w_hat, weights)
                terms["hand_loss"] = hres.value
                extras["d_weights"] = hres.d_weights
                for i, s in enumerate(("l", "r")):
                    tape.add(f"frames.theta_{s}", hres.d_theta_t[i], row=t)
                    tape.add(f"frames.gamma_{s}", hres.d_gamma_t[i], row=t)
                    if hres.d_theta_prev is not None:
                        tape.add(f"frames.theta_{s}", hres.d_theta_prev[i], row=t - 1)
                        tape.add(f"frames.gamma_{s}", hres.d_gamma_prev[i], row=t - 1)
        model.hand_backward(cache, tape, grads, **extras)


def _object_pass(model, obs, t, tape, weights, config, terms):
    arrays, cache = model.emit_object(t)
    out = model.render_arrays(arrays, obs.camera)
    res = image_loss(out.image, obs, obs.mask_object, weights)
    terms["image_o"] = res.value
    grads = model.render_arrays_backward(arrays, obs.camera, res.pixel_grad)
    extras = {}
    if config.enable_color_scale_reg:
        gset = GaussianSet(centers=cache["mu_eff"], scales=cache["out"]["scales"],
                           quats=cache["out"]["quats"],
                           opacities=np.clip(cache["out"]["opacities"], 0, 1),
                           colors=np.clip(cache["out"]["colors"], 0, 1),
                           subject="object")
        nbr = neighbor_graph(cache["mu_eff"])
        l_color, l_scale, d_colors, d_scales = color_scale_regularizers(gset, nbr)
        terms["object_color"] = l_color
        terms["object_scale"] = l_scale
        extras["d_colors"] = weights.color * d_colors
        extras["d_scales"] = weights.scale * d_scales
    model.object_backward(cache, tape, grads, **extras)


def stage_single_subject(observations, model: SceneModel, config: StageConfig,
                         weights: LossWeights, oracle=None, schedule=None,
                         checkpoint_dir=None):
    """Per-subject optimization of fields, heads, and per-frame parameters."""
    store = model.store
    rng = np.random.default_rng(config.seed)
    lrs = default_learning_rates(store, pose_lr=config.pose_lr)
    lrs.update(config.lr_overrides)
    adam = Adam(store, lrs, warmup_iters=config.warmup_iters)
    if schedule is None:
        schedule = GuidanceSchedule(samples_per_step=config.sds_samples)
    watch = _DivergenceWatch(config.divergence_factor, config.divergence_patience)
    order = _frame_order(rng, len(observations), config.iterations)
    history = []

    for it in range(config.iterations):
        t = int(order[it])
        obs = observations[t]
        tape = GradientTape(store)
        terms = {"iteration": it, "frame": t}

        if config.hand_passes:
            _hand_pass(model, obs, t, tape, weights, config, terms)
        if config.object_passes:
            _object_pass(model, obs, t, tape, weights, config, terms)
            if config.enable_sds and oracle is not None and it % config.sds_every == 0:
                meta = sds_step(model.sds_closure(tape), oracle, schedule, rng,
                                size=config.sds_size)
                terms["sds_residual"] = float(np.mean([m["residual_l2"] for m in meta]))

        adam.step(tape, it)
        total = sum(v for k, v in terms.items()
                    if k not in ("iteration", "frame", "sds_residual"))
        terms["total"] = total
        history.append(terms)
        watch.update(total, store, checkpoint_dir)
        if checkpoint_dir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            store.save(os.path.join(checkpoint_dir, f"checkpoint_{it + 1:06d}.bin"))
        if config.log_every and it % config.log_every == 0:
            log.info("stage1 it=%d frame=%d total=%.5f", it, t, total)
    return history


def stage_interacting(observations, model: SceneModel, config: StageConfig,
                      weights: LossWeights, checkpoint_dir=None):
    """Hand-translation refinement: composite image + mask + contact terms."""
    store = model.store
    rng = np.random.default_rng(config.seed)
    lrs = {"frames.gamma_l": config.pose_lr, "frames.gamma_r": config.pose_lr}
    lrs.update(config.lr_overrides)
    adam = Adam(store, lrs, warmup_iters=config.warmup_iters)
    watch = _DivergenceWatch(config.divergence_factor, config.divergence_patience)
    order = _frame_order(rng, len(observations), config.iterations)
    history = []

    for it in range(config.iterations):
        t = int(order[it])
        obs = observations[t]
        tape = GradientTape(store)
        merged, caches, slices = model.composite_arrays(t)
        out = model.render_arrays(merged, obs.camera)
        res = image_loss(out.image, obs, obs.combined_mask, weights)
        grads = model.render_arrays_backward(merged, obs.camera, res.pixel_grad)
        model.composite_backward(caches, slices, tape, grads)

        cv, d_o, d_l, d_r = contact_loss(store["frames.gamma_o"][t],
                                         store["frames.gamma_l"][t],
                                         store["frames.gamma_r"][t],
                                         weights.contact)
        tape.add("frames.gamma_l", d_l, row=t)
        tape.add("frames.gamma_r", d_r, row=t)

        adam.step(tape, it)
        total = res.value + cv
        history.append({"iteration": it, "frame": t, "image": res.value,
                        "contact": cv, "total": total})
        watch.update(total, store, checkpoint_dir)
        if config.log_every and it % config.log_every == 0:
            log.info("stage2 it=%d frame=%d total=%.5f", it, t, total)
    return history


def smoothed_history(history, key="total", window=25):
    """Window-averaged loss trace (for trend checks and reporting)."""
    vals = np.array([h[key] for h in history], dtype=float)
    if len(vals) < window:
        return vals
    kernel = np.ones(window) / window
    return np.convolve(vals, kernel, mode="valid")
