"""Synthetic bimanual grasp sequences with verifiable ground truth.

A scene is built in four steps: (1) procedural hand rig plus an object point
cloud with a view-informative texture, (2) a smooth grasp script filling the
ground-truth pose tracks, (3) a short regression that fits the triplane/head
parameters to explicit per-point targets so the ground-truth frames are
produced by the standard emission path (this is what makes the closed loop
exact), and (4) per-frame rendering of images, visibility masks, and the
support mask. Perturbation then manufactures the noisy initialization that a
real pre-processing stack would deliver.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
from PIL import Image

from .core_geometry import Camera, GaussianSet, quat_from_rotvec, quat_mul, quat_normalize
from .errors import SceneSpecError
from .feature_field import load_container, save_container
from .hand_model import (
    MIRROR,
    HandPose,
    build_skeleton,
    build_template,
    fingertip_positions,
    forward_kinematics,
    mirror_quat,
)
from .losses import FrameObservation
from .optimizer import adam_step
from .params import ParamStore, init_store
from .rasterizer import _render_forward_arrays, linear_to_srgb
from .scene_model import SceneModel

log = logging.getLogger(__name__)

TEMPLATE_SEED = 11  # rig construction is structural, not per-scene random


@dataclass
class SceneSpec:
    """Everything needed to generate one synthetic sequence deterministically."""

    object_shape: str = "box"          # box | sphere | composite
    object_points: int = 200
    object_size: float = 0.055        # bounding radius, meters
    hand_points: int = 340
    frame_count: int = 30
    image_size: int = 128
    focal_scale: float = 1.1          # fx = focal_scale * image_size
    orbit_radius: float = 0.45
    orbit_elevation_deg: float = 18.0
    orbit_arc_deg: float = 150.0
    orbit_start_deg: float = -60.0
    grasp_settle: float = 0.5         # normalized time when the grasp holds
    contact_radius: float = 0.025
    pose_noise: float = 0.0           # radians, i.i.d. per axis-angle entry
    trans_noise: float = 0.0          # scene units
    dropout: float = 0.0              # object point fraction removed (sector)
    view_retention: float = 1.0
    seed: int = 0
    field_resolution: int = 64
    feature_dim: int = 32
    prefit_iters: int = 900

    def validate(self):
        if self.frame_count < 2:
            raise SceneSpecError("frame_count must be >= 2")
        if not (0.0 < self.view_retention <= 1.0):
            raise SceneSpecError("view_retention must lie in (0, 1]")
        if not (0.0 <= self.dropout < 1.0):
            raise SceneSpecError("dropout must lie in [0, 1)")
        if self.object_size <= 0:
            raise SceneSpecError("object must have positive extent")
        if self.object_shape not in ("box", "sphere", "composite"):
            raise SceneSpecError(f"unknown object shape {self.object_shape!r}")
        if self.object_points < 8 or self.hand_points < 32:
            raise SceneSpecError("too few points for a meaningful scene")


@dataclass
class SyntheticSequence:
    spec: SceneSpec
    observations: list
    gt_store: ParamStore
    init_store: ParamStore
    template: object
    frame_indices: np.ndarray
    gt_object_canonical: GaussianSet

    @property
    def num_frames(self):
        return len(self.observations)

    def gt_model(self):
        return SceneModel(self.gt_store, self.template)

    def init_model(self):
        return SceneModel(self.init_store.copy(), self.template)


# ---------------------------------------------------------------------------
# object sampling and textures
# ---------------------------------------------------------------------------

def _sample_object(spec: SceneSpec, rng):
    n = spec.object_points
    r = spec.object_size
    if spec.object_shape == "sphere":
        normals = rng.normal(size=(n, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        points = r * normals
        colors = 0.5 + 0.45 * normals  # normal-coded gradient
    elif spec.object_shape == "box":
        half = r / np.sqrt(3.0)
        faces = rng.integers(0, 6, size=n)
        uv = rng.uniform(-half, half, size=(n, 2))
        points = np.zeros((n, 3))
        for i in range(n):
            axis = faces[i] // 2
            sign = 1.0 if faces[i] % 2 == 0 else -1.0
            rest = [a for a in range(3) if a != axis]
            points[i, axis] = sign * half
            points[i, rest[0]] = uv[i, 0]
            points[i, rest[1]] = uv[i, 1]
        cell = half  # 2x2x2 checker
        parity = np.floor((points + half) / cell).sum(axis=1) % 2
        a = np.array([0.85, 0.25, 0.2])
        b = np.array([0.95, 0.85, 0.3])
        colors = np.where(parity[:, None] > 0.5, a, b)
    else:  # composite: box core plus a sphere cap
        half_n = n // 2
        sub_box = SceneSpec(**{**asdict(spec), "object_shape": "box",
                               "object_points": half_n})
        sub_sph = SceneSpec(**{**asdict(spec), "object_shape": "sphere",
                               "object_points": n - half_n,
                               "object_size": 0.6 * r})
        pb, cb = _sample_object(sub_box, rng)
        ps, cs = _sample_object(sub_sph, rng)
        ps = ps + np.array([0.0, 0.9 * r, 0.0])
        points = np.concatenate([pb, ps])
        colors = np.concatenate([cb, cs])
    return points, np.clip(colors, 0.0, 1.0)


def _object_surface_distance(points, spec: SceneSpec):
    """Unsigned distance from points to the object's canonical surface."""
    p = np.atleast_2d(points)
    if spec.object_shape == "sphere":
        return np.abs(np.linalg.norm(p, axis=1) - spec.object_size)
    half = spec.object_size / np.sqrt(3.0)
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.abs(np.minimum(np.max(q, axis=1), 0.0))
    box = outside + inside
    if spec.object_shape == "composite":
        offset = p - np.array([0.0, 0.9 * spec.object_size, 0.0])
        sphere = np.abs(np.linalg.norm(offset, axis=1) - 0.6 * spec.object_size)
        return np.minimum(box, sphere)
    return box


def _hand_color_targets(points):
    """Skin-tone gradient over the canonical hand, varied along the fingers."""
    base = np.array([0.78, 0.57, 0.45])
    y = points[:, 1]
    yn = (y - y.min()) / max(y.max() - y.min(), 1e-9)
    shade = 0.75 + 0.4 * yn
    tint = 0.06 * np.sin(points[:, 0] * 80.0)
    colors = base[None, :] * shade[:, None]
    colors[:, 0] += tint
    return np.clip(colors, 0.0, 1.0)


# ---------------------------------------------------------------------------
# grasp script
# ---------------------------------------------------------------------------

def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _grasp_curls(spec: SceneSpec, skeleton, wrist, quat):
    """Per-finger curl magnitudes that land each fingertip near the surface."""
    curls = np.zeros(5)
    for f in range(5):
        best, best_err = 0.3, np.inf
        for curl in np.linspace(0.05, 2.0, 48):
            theta = np.zeros(45)
            for step in range(3):
                theta[3 * (3 * f + step):3 * (3 * f + step) + 1] = curl * (0.9 if step else 1.0)
            pose = HandPose(theta=theta, quat=quat, translation=wrist, handedness="R")
            fk = forward_kinematics(skeleton, pose)
            tip = fingertip_positions(skeleton, fk)[f]
            err = abs(_object_surface_distance(tip, spec)[0] - 0.004)
            if err < best_err:
                best, best_err = curl, err
        curls[f] = best
    return curls


def _script_tracks(spec: SceneSpec, skeleton):
    """Ground-truth tracks (theta, quat, gamma per hand, object placement)."""
    t_count = spec.frame_count
    r_wrist = np.array([spec.object_size + 0.012, 0.0, 0.0])
    quat_r = quat_from_rotvec([0.0, -np.pi / 2.0, 0.0])
    quat_l = mirror_quat(quat_r)
    far = r_wrist + np.array([0.09, -0.02, 0.0])

    curls = _grasp_curls(spec, skeleton, r_wrist, quat_r)
    theta_open = np.zeros(45)
    theta_grasp = np.zeros(45)
    for f in range(5):
        for step in range(3):
            j = 3 * f + step
            theta_open[3 * j] = 0.12
            theta_grasp[3 * j] = curls[f] * (0.9 if step else 1.0)

    tracks = {
        "frames.theta_l": np.zeros((t_count, 45)),
        "frames.theta_r": np.zeros((t_count, 45)),
        "frames.gamma_l": np.zeros((t_count, 3)),
        "frames.gamma_r": np.zeros((t_count, 3)),
        "frames.gamma_o": np.zeros((t_count, 3)),
        "frames.quat_l": np.tile(quat_l, (t_count, 1)),
        "frames.quat_r": np.tile(quat_r, (t_count, 1)),
        "frames.quat_o": np.tile([1.0, 0.0, 0.0, 0.0], (t_count, 1)),
    }
    for t in range(t_count):
        u = _smoothstep((t / max(t_count - 1, 1)) / spec.grasp_settle)
        theta = (1 - u) * theta_open + u * theta_grasp
        gamma_r = (1 - u) * far + u * r_wrist
        tracks["frames.theta_r"][t] = theta
        tracks["frames.theta_l"][t] = theta  # pure-x curls mirror to themselves
        tracks["frames.gamma_r"][t] = gamma_r
        tracks["frames.gamma_l"][t] = MIRROR @ gamma_r
    return tracks


def grasp_frames(spec: SceneSpec, frame_indices):
    """Original-timeline frames where the grasp has settled."""
    t_count = spec.frame_count
    settled = [i for i in frame_indices
               if (i / max(t_count - 1, 1)) >= spec.grasp_settle]
    return np.array(settled, dtype=int)


def _orbit_camera(spec: SceneSpec, t_original):
    u = t_original / max(spec.frame_count - 1, 1)
    az = np.deg2rad(spec.orbit_start_deg + spec.orbit_arc_deg * u)
    el = np.deg2rad(spec.orbit_elevation_deg)
    eye = spec.orbit_radius * np.array([
        np.cos(el) * np.sin(az), np.sin(el), -np.cos(el) * np.cos(az)])
    size = spec.image_size
    fx = spec.focal_scale * size
    return Camera.look_at(eye=eye, target=np.zeros(3), up=np.array([0.0, 1.0, 0.0]),
                          fx=fx, fy=fx, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
                          width=size, height=size, near=0.02)


# ---------------------------------------------------------------------------
# ground-truth field pre-fit
# ---------------------------------------------------------------------------

def _prefit_subject(subject, centers, targets, iters, lr=4e-3):
    """Regress field/head parameters onto explicit per-point targets."""
    arrays = list(subject.field.planes)
    for head in (subject.appearance, subject.geometry, subject.deformation):
        if head is not None:
            arrays.extend(head.mlp.weights)
            arrays.extend(head.mlp.biases)
    states = [{"m": np.zeros_like(a), "v": np.zeros_like(a), "t": 0} for a in arrays]

    n = len(centers)
    value = np.inf
    for _ in range(iters):
        out, cache = subject.emit(centers)
        grads_out = {}
        value = 0.0
        for key, weight in (("colors", 4.0), ("opacities", 1.0), ("quats", 0.5),
                            ("offsets", 1.0), ("weights", 2.0)):
            if key not in out:
                continue
            target = targets.get(key)
            if target is None:
                target = np.zeros_like(out[key])
            diff = out[key] - target
            value += weight * float((diff ** 2).sum()) / n
            grads_out[key] = 2.0 * weight * diff / n
        log_diff = np.log(out["scales"]) - targets["log_scales"]
        value += 0.5 * float((log_diff ** 2).sum()) / n
        grads_out["scales"] = (1.0 * log_diff / out["scales"]) / n
        res = subject.emit_backward(cache, grads_out)
        flat = list(res["planes"])
        flat.extend(res["appearance"][0])
        flat.extend(res["appearance"][1])
        flat.extend(res["geometry"][0])
        flat.extend(res["geometry"][1])
        if "deformation" in res:
            flat.extend(res["deformation"][0])
            flat.extend(res["deformation"][1])
        for arr, g, st in zip(arrays, flat, states):
            adam_step(arr, g, st, lr)
    return value


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _visibility_masks(model: SceneModel, t, cam):
    """Render once with one-hot subject colors to partition visible pixels."""
    merged, _, slices = model.composite_arrays(t)
    out, _, _ = _render_forward_arrays(*merged, cam)

    indicator = np.zeros_like(merged[4])
    for g, sl in enumerate(slices):
        indicator[sl, g] = 1.0
    ind_arrays = (merged[0], merged[1], merged[2], merged[3], indicator)
    weights, _, _ = _render_forward_arrays(*ind_arrays, cam)

    fg = out.alpha > 0.5
    owner = np.argmax(weights.image, axis=2)
    masks = [fg & (owner == g) & (weights.image[:, :, g] > 0) for g in range(3)]
    support = out.alpha > 0.0
    return out, masks, support


def generate(spec: SceneSpec) -> SyntheticSequence:
    """Deterministic synthetic sequence: ground truth plus perturbed init."""
    spec.validate()
    master = np.random.SeedSequence(spec.seed)
    rng_obj, rng_field, rng_perturb = (np.random.default_rng(s)
                                       for s in master.spawn(3))

    skeleton = build_skeleton()
    template = build_template(skeleton, n_points=spec.hand_points, seed=TEMPLATE_SEED)
    object_points, object_colors = _sample_object(spec, rng_obj)

    stride = max(1, int(round(1.0 / spec.view_retention)))
    frame_indices = np.arange(0, spec.frame_count, stride)

    tracks = _script_tracks(spec, skeleton)
    store = init_store(rng_field, template, object_points, len(frame_indices),
                       resolution=spec.field_resolution, feature_dim=spec.feature_dim)
    for key, full in tracks.items():
        store.arrays[key][:] = full[frame_indices]

    model = SceneModel(store, template)
    hand_targets = {
        "colors": _hand_color_targets(template.points),
        "opacities": np.full(len(template.points), 0.92),
        "quats": np.tile([1.0, 0, 0, 0], (len(template.points), 1)),
        "weights": template.weights,
        "log_scales": np.full((len(template.points), 3),
                              float(store["hand.base_log_scale"][0])),
    }
    object_targets = {
        "colors": object_colors,
        "opacities": np.full(len(object_points), 0.95),
        "quats": np.tile([1.0, 0, 0, 0], (len(object_points), 1)),
        "log_scales": np.full((len(object_points), 3),
                              float(store["object.base_log_scale"][0])),
    }
    err_h = _prefit_subject(model.hand_field, store["hand.centers"], hand_targets,
                            iters=spec.prefit_iters)
    err_o = _prefit_subject(model.object_field, store["object.centers"], object_targets,
                            iters=spec.prefit_iters)
    log.info("prefit residuals: hand %.3e object %.3e", err_h, err_o)

    observations = []
    for row, t_orig in enumerate(frame_indices):
        cam = _orbit_camera(spec, int(t_orig))
        out, masks, support = _visibility_masks(model, row, cam)
        observations.append(FrameObservation(
            image=out.image, mask_left=masks[0], mask_right=masks[1],
            mask_object=masks[2], camera=cam, index=int(t_orig),
            support_mask=support))

    gt_arrays, _ = model.emit_object(t=None)
    gt_object = GaussianSet(centers=gt_arrays[0], scales=gt_arrays[1],
                            quats=gt_arrays[2],
                            opacities=np.clip(gt_arrays[3], 0, 1),
                            colors=np.clip(gt_arrays[4], 0, 1), subject="object")

    init = perturb(store, spec, rng_perturb)
    return SyntheticSequence(spec=spec, observations=observations, gt_store=store,
                             init_store=init, template=template,
                             frame_indices=frame_indices,
                             gt_object_canonical=gt_object)


def perturb(gt: ParamStore, spec: SceneSpec, rng=None) -> ParamStore:
    """Noisy initialization: i.i.d. pose/translation noise plus sector dropout
    of the object cloud (contiguous in azimuth, exact retained count)."""
    rng = rng or np.random.default_rng(spec.seed + 1)
    out = gt.copy()
    for key in ("frames.theta_l", "frames.theta_r"):
        out.arrays[key] += rng.normal(scale=spec.pose_noise, size=out[key].shape)
    for key in ("frames.quat_l", "frames.quat_r", "frames.quat_o"):
        inc = quat_from_rotvec(rng.normal(scale=spec.pose_noise,
                                          size=(len(out[key]), 3)))
        out.arrays[key] = quat_mul(inc, out[key])
    for key in ("frames.gamma_l", "frames.gamma_r", "frames.gamma_o"):
        out.arrays[key] += rng.normal(scale=spec.trans_noise, size=out[key].shape)

    if spec.dropout > 0.0:
        pts = out["object.centers"]
        n = len(pts)
        keep_n = int(np.floor(n * (1.0 - spec.dropout)))
        rel = pts - pts.mean(axis=0)
        azimuth = np.arctan2(rel[:, 2], rel[:, 0])
        order = np.argsort(azimuth, kind="stable")
        start = int(rng.integers(0, n))
        drop = set(order[(start + np.arange(n - keep_n)) % n].tolist())
        keep = np.array([i for i in range(n) if i not in drop], dtype=int)
        out.arrays["object.centers"] = pts[keep].copy()
    return out


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def _save_png(path, data):
    tmp = str(path) + ".tmp"
    Image.fromarray(data).save(tmp, format="PNG")
    os.replace(tmp, path)


def save_sequence(seq: SyntheticSequence, out_dir):
    """Directory layout: frames/%04d.png (sRGB preview), masks/{l,r,o}/%04d.png,
    cameras.txt, float32 frame container, spec, and both parameter stores."""
    os.makedirs(out_dir, exist_ok=True)
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    for sub in ("l", "r", "o"):
        os.makedirs(os.path.join(out_dir, "masks", sub), exist_ok=True)

    cam_lines = ["# width height near appended per row after tz",
                 "# frame fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz width height near"]
    images = []
    supports = []
    for i, obs in enumerate(seq.observations):
        img8 = (linear_to_srgb(obs.image) * 255.0 + 0.5).astype(np.uint8)
        _save_png(os.path.join(frames_dir, f"{i:04d}.png"), img8)
        for sub, mask in (("l", obs.mask_left), ("r", obs.mask_right),
                          ("o", obs.mask_object)):
            _save_png(os.path.join(out_dir, "masks", sub, f"{i:04d}.png"),
                      (mask * 255).astype(np.uint8))
        cam = obs.camera
        vals = [obs.index, cam.fx, cam.fy, cam.cx, cam.cy,
                *cam.rotation.reshape(-1), *cam.translation,
                cam.width, cam.height, cam.near]
        cam_lines.append(" ".join(repr(float(v)) if isinstance(v, float) else str(int(v))
                                  for v in vals))
        images.append(obs.image.astype(np.float32))
        supports.append(obs.support_mask)

    tmp = os.path.join(out_dir, "cameras.txt.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(cam_lines) + "\n")
    os.replace(tmp, os.path.join(out_dir, "cameras.txt"))

    save_container(os.path.join(out_dir, "frames_f32.bin"),
                   {"frames": np.stack(images),
                    "support": np.stack(supports).astype(np.float32),
                    "frame_indices": seq.frame_indices.astype(np.float32)})
    seq.gt_store.save(os.path.join(out_dir, "gt_params.bin"))
    seq.init_store.save(os.path.join(out_dir, "init_params.bin"))

    spec_lines = [f"{k} = {v!r}" for k, v in sorted(asdict(seq.spec).items())]
    tmp = os.path.join(out_dir, "scene_spec.txt.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(spec_lines) + "\n")
    os.replace(tmp, os.path.join(out_dir, "scene_spec.txt"))


def load_spec(path) -> SceneSpec:
    fields = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = eval(value.strip(), {"__builtins__": {}})  # literals only
    return SceneSpec(**fields)


def load_sequence(scene_dir) -> SyntheticSequence:
    spec = load_spec(os.path.join(scene_dir, "scene_spec.txt"))
    data = load_container(os.path.join(scene_dir, "frames_f32.bin"))
    frames = data["frames"]
    supports = data["support"].astype(bool)
    frame_indices = data["frame_indices"].astype(int)

    cameras = []
    with open(os.path.join(scene_dir, "cameras.txt"), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            cameras.append(Camera(fx=vals[1], fy=vals[2], cx=vals[3], cy=vals[4],
                                  rotation=np.array(vals[5:14]).reshape(3, 3),
                                  translation=np.array(vals[14:17]),
                                  width=int(vals[17]), height=int(vals[18]),
                                  near=vals[19]))

    observations = []
    for i, cam in enumerate(cameras):
        masks = {}
        for sub in ("l", "r", "o"):
            img = np.asarray(Image.open(os.path.join(scene_dir, "masks", sub,
                                                     f"{i:04d}.png")))
            masks[sub] = img > 127
        observations.append(FrameObservation(
            image=frames[i].astype(float), mask_left=masks["l"],
            mask_right=masks["r"], mask_object=masks["o"], camera=cam,
            index=int(frame_indices[i]), support_mask=supports[i]))

    skeleton = build_skeleton()
    template = build_template(skeleton, n_points=spec.hand_points, seed=TEMPLATE_SEED)
    gt_store = ParamStore.load(os.path.join(scene_dir, "gt_params.bin"))
    init_store = ParamStore.load(os.path.join(scene_dir, "init_params.bin"))

    model = SceneModel(gt_store, template)
    gt_arrays, _ = model.emit_object(t=None)
    gt_object = GaussianSet(centers=gt_arrays[0], scales=gt_arrays[1],
                            quats=gt_arrays[2],
                            opacities=np.clip(gt_arrays[3], 0, 1),
                            colors=np.clip(gt_arrays[4], 0, 1), subject="object")
    return SyntheticSequence(spec=spec, observations=observations, gt_store=gt_store,
                             init_store=init_store, template=template,
                             frame_indices=frame_indices,
                             gt_object_canonical=gt_object)
