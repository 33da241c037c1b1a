"""Scene model: wires a ParamStore to the differentiable emission chain.

One frame's forward pass per subject is

    canonical centers -> triplane/heads -> (color, opacity, offset, quat,
    scale[, skin weights]) -> optional x-flip (left hand) -> LBS with forward
    kinematics (hands) or rigid placement (object) -> world-space Gaussians

and every step has a matching reverse pass that accumulates gradients into a
GradientTape keyed by store array names. Rotation tracks receive axis-angle
increment gradients (shape (T, 3)) for the optimizer's manifold updates.
"""

from __future__ import annotations

import numpy as np

from .core_geometry import (
    mirror_quat,
    normalize_quat_backward,
    drotmat_dquat,
    quat_increment_grad,
    quat_mul,
    quat_mul_left_matrix,
    quat_mul_right_matrix,
    quat_normalize,
    rotmat_from_unit_quat,
)
from .hand_model import (
    MIRROR,
    HandPose,
    HandTemplate,
    fingertip_positions,
    fk_backward,
    forward_kinematics,
    lbs_pose_backward,
    lbs_pose_batch,
    pseudo_lbs,
)
from .params import GradientTape, ParamStore, subject_field_from_store
from .rasterizer import RenderGradients, _render_backward_arrays, _render_forward_arrays

HAND_KEYS = {"L": "l", "R": "r"}


class SceneModel:
    """Differentiable two-hands-plus-object scene bound to a ParamStore."""

    def __init__(self, store: ParamStore, template: HandTemplate):
        self.store = store
        self.template = template
        self.skeleton = template.skeleton
        self.hand_field = subject_field_from_store(store, "hand")
        self.object_field = subject_field_from_store(store, "object")

    # -- poses ---------------------------------------------------------------

    def hand_pose(self, t, handed) -> HandPose:
        s = HAND_KEYS[handed]
        return HandPose(theta=self.store[f"frames.theta_{s}"][t],
                        quat=self.store[f"frames.quat_{s}"][t],
                        translation=self.store[f"frames.gamma_{s}"][t],
                        handedness=handed)

    def hand_joints(self, t, handed):
        fk = forward_kinematics(self.skeleton, self.hand_pose(t, handed))
        return fk.joints

    def hand_fingertips(self, t, handed):
        fk = forward_kinematics(self.skeleton, self.hand_pose(t, handed))
        return fingertip_positions(self.skeleton, fk)

    # -- hand emission --------------------------------------------------------

    def emit_hand(self, t, handed):
        centers = self.store["hand.centers"]
        out, fcache = self.hand_field.emit(centers)
        mu_eff = centers + out["offsets"]
        weights = out["weights"]
        if handed == "L":
            mu_in = mu_eff @ MIRROR
            q_in = mirror_quat(out["quats"])
        else:
            mu_in, q_in = mu_eff, out["quats"]
        fk = forward_kinematics(self.skeleton, self.hand_pose(t, handed))
        posed = lbs_pose_batch(mu_in, weights, fk.phis, fk.gammas)
        kstar = np.argmax(weights, axis=1)
        quats = quat_mul(fk.quats[kstar], q_in)
        arrays = (posed, out["scales"], quats, out["opacities"], out["colors"])
        cache = {"t": t, "handed": handed, "out": out, "fcache": fcache,
                 "mu_eff": mu_eff, "mu_in": mu_in, "q_in": q_in,
                 "fk": fk, "kstar": kstar, "weights": weights}
        return arrays, cache

    def hand_backward(self, cache, tape: GradientTape, grads: RenderGradients | None,
                      d_weights=None, d_colors=None, d_opacities=None, d_scales=None):
        weights = cache["weights"]
        fk = cache["fk"]
        kstar = cache["kstar"]
        n = len(weights)
        if grads is None:
            grads = RenderGradients(centers=np.zeros((n, 3)), scales=np.zeros((n, 3)),
                                    quats=np.zeros((n, 4)), opacities=np.zeros(n),
                                    colors=np.zeros((n, 3)))

        d_mu_in, d_w, d_phis, d_gammas = lbs_pose_backward(
            cache["mu_in"], weights, fk.phis, fk.gammas, grads.centers)
        if d_weights is not None:
            d_w = d_w + d_weights

        # composed orientation: q = q_g[kstar] (x) q_in
        dq_comp = grads.quats
        dq_fk = np.einsum("nqr,nq->nr", quat_mul_right_matrix(cache["q_in"]), dq_comp)
        dqg = np.zeros((16, 4))
        np.add.at(dqg, kstar, dq_fk)
        dq_in = np.einsum("nqr,nq->nr", quat_mul_left_matrix(fk.quats[kstar]), dq_comp)

        d_theta, d_quat, d_gamma = fk_backward(fk, d_phis=d_phis, d_gammas=d_gammas,
                                               d_qg=dqg)

        if cache["handed"] == "L":
            d_mu_eff = d_mu_in @ MIRROR
            dq_canon = mirror_quat(dq_in)
        else:
            d_mu_eff = d_mu_in
            dq_canon = dq_in

        fgrads = {
            "colors": grads.colors + (d_colors if d_colors is not None else 0.0),
            "opacities": grads.opacities + (d_opacities if d_opacities is not None else 0.0),
            "offsets": d_mu_eff,
            "quats": dq_canon,
            "scales": grads.scales + (d_scales if d_scales is not None else 0.0),
            "weights": d_w,
        }
        res = self.hand_field.emit_backward(cache["fcache"], fgrads)
        self._tape_subject(tape, "hand", res, extra_centers=d_mu_eff)

        s = HAND_KEYS[cache["handed"]]
        t = cache["t"]
        tape.add(f"frames.theta_{s}", d_theta, row=t)
        tape.add(f"frames.gamma_{s}", d_gamma, row=t)
        tape.add(f"frames.quat_{s}",
                 quat_increment_grad(self.store[f"frames.quat_{s}"][t], d_quat), row=t)

    # -- object emission -------------------------------------------------------

    def emit_object(self, t=None):
        """Object Gaussians; world space for a frame, canonical when t is None."""
        centers = self.store["object.centers"]
        out, fcache = self.object_field.emit(centers)
        mu_eff = centers + out["offsets"]
        cache = {"t": t, "out": out, "fcache": fcache, "mu_eff": mu_eff}
        if t is None:
            arrays = (mu_eff, out["scales"], out["quats"], out["opacities"], out["colors"])
            return arrays, cache
        q_raw = self.store["frames.quat_o"][t]
        q_hat = quat_normalize(q_raw)
        rot = rotmat_from_unit_quat(q_hat)
        gamma = self.store["frames.gamma_o"][t]
        world = mu_eff @ rot.T + gamma
        quats = quat_mul(q_hat[None, :], out["quats"])
        cache.update({"q_raw": q_raw, "q_hat": q_hat, "rot": rot})
        arrays = (world, out["scales"], quats, out["opacities"], out["colors"])
        return arrays, cache

    def object_backward(self, cache, tape: GradientTape, grads: RenderGradients | None,
                        d_colors=None, d_opacities=None, d_scales=None):
        out = cache["out"]
        n = len(cache["mu_eff"])
        if grads is None:
            grads = RenderGradients(centers=np.zeros((n, 3)), scales=np.zeros((n, 3)),
                                    quats=np.zeros((n, 4)), opacities=np.zeros(n),
                                    colors=np.zeros((n, 3)))
        t = cache["t"]
        if t is None:
            d_mu_eff = grads.centers
            dq_out = grads.quats
        else:
            rot, q_hat = cache["rot"], cache["q_hat"]
            d_mu_eff = grads.centers @ rot
            d_rot = np.einsum("ni,nj->ij", grads.centers, cache["mu_eff"])
            dq_hat = np.einsum("ij,ijq->q", d_rot, drotmat_dquat(q_hat))
            dq_hat += np.einsum("nqr,nq->r", quat_mul_right_matrix(out["quats"]), grads.quats)
            dq_out = np.einsum("qr,nq->nr", quat_mul_left_matrix(q_hat), grads.quats)
            dq_raw = normalize_quat_backward(cache["q_raw"], dq_hat)
            tape.add("frames.gamma_o", grads.centers.sum(axis=0), row=t)
            tape.add("frames.quat_o", quat_increment_grad(cache["q_raw"], dq_raw), row=t)

        fgrads = {
            "colors": grads.colors + (d_colors if d_colors is not None else 0.0),
            "opacities": grads.opacities + (d_opacities if d_opacities is not None else 0.0),
            "offsets": d_mu_eff,
            "quats": dq_out,
            "scales": grads.scales + (d_scales if d_scales is not None else 0.0),
        }
        res = self.object_field.emit_backward(cache["fcache"], fgrads)
        self._tape_subject(tape, "object", res, extra_centers=d_mu_eff)

    def _tape_subject(self, tape, prefix, res, extra_centers):
        for name, plane_grad in zip(("plane_xy", "plane_xz", "plane_yz"), res["planes"]):
            tape.add(f"{prefix}.{name}", plane_grad)
        tape.add_layers(f"{prefix}.app", *res["appearance"])
        tape.add_layers(f"{prefix}.geo", *res["geometry"])
        if "deformation" in res:
            tape.add_layers(f"{prefix}.def", *res["deformation"])
        tape.add(f"{prefix}.centers", res["centers"] + extra_centers)

    # -- composites and rendering ----------------------------------------------

    def pseudo_weights(self, cache):
        """Pseudo ground-truth skinning weights at the current canonical
        Gaussian positions (detached regression target)."""
        return pseudo_lbs(cache["mu_eff"], self.template)

    def composite_arrays(self, t):
        """Concatenated world-space arrays for (left, right, object)."""
        parts = []
        caches = []
        for handed in ("L", "R"):
            arrays, cache = self.emit_hand(t, handed)
            parts.append(arrays)
            caches.append(("hand", cache))
        arrays, cache = self.emit_object(t)
        parts.append(arrays)
        caches.append(("object", cache))
        merged = tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(5))
        sizes = [len(p[0]) for p in parts]
        slices = []
        start = 0
        for size in sizes:
            slices.append(slice(start, start + size))
            start += size
        return merged, caches, slices

    @staticmethod
    def render_arrays(arrays, cam):
        out, _, _ = _render_forward_arrays(*arrays, cam)
        return out

    @staticmethod
    def render_arrays_backward(arrays, cam, pixel_grad):
        return _render_backward_arrays(*arrays, cam, pixel_grad)

    def composite_backward(self, caches, slices, tape, grads: RenderGradients):
        for (kind, cache), sl in zip(caches, slices):
            sub = RenderGradients(centers=grads.centers[sl], scales=grads.scales[sl],
                                  quats=grads.quats[sl], opacities=grads.opacities[sl],
                                  colors=grads.colors[sl])
            if kind == "hand":
                self.hand_backward(cache, tape, sub)
            else:
                self.object_backward(cache, tape, sub)

    def sds_closure(self, tape: GradientTape):
        """emit_canonical callable for guidance.sds_step: renders the canonical
        object and routes gradients into the object parameter groups."""
        def emit():
            arrays, cache = self.emit_object(t=None)

            def backward(grads):
                self.object_backward(cache, tape, grads)

            return arrays, backward

        return emit
