import numpy as np
import pytest

from _utils import assert_grad_close, central_difference_at, small_camera
from graspsplat import hand_model as hm
from graspsplat import rasterizer as ras
from graspsplat.core_geometry import (
    GaussianSet,
    QUAT_IDENTITY,
    mirror_quat,
    quat_from_rotvec,
    quat_normalize,
    rotmat_from_unit_quat,
)
from graspsplat.errors import InvalidWeightsError

RNG = np.random.default_rng(5)
SKEL = hm.build_skeleton()
TEMPLATE = hm.build_template(SKEL, n_points=120, seed=3)


def rest_pose(handedness="R", quat=None, translation=(0, 0, 0)):
    return hm.HandPose(theta=np.zeros(45), quat=QUAT_IDENTITY if quat is None else quat,
                       translation=np.array(translation, dtype=float), handedness=handedness)


def random_pose(rng, handedness="R", scale=0.3):
    return hm.HandPose(theta=rng.normal(scale=scale, size=45),
                       quat=quat_normalize(rng.normal(size=4)),
                       translation=rng.normal(scale=0.1, size=3),
                       handedness=handedness)


class TestForwardKinematics:
    def test_rest_pose_identity(self):
        fk = hm.forward_kinematics(SKEL, rest_pose())
        assert np.allclose(fk.phis, np.eye(3)[None], atol=1e-12)
        assert np.allclose(fk.gammas, 0.0, atol=1e-12)
        assert np.allclose(fk.joints, SKEL.rest_joints, atol=1e-12)

    def test_root_only_rotation(self):
        rv = np.array([0.3, -0.5, 0.7])
        pose = rest_pose(quat=quat_from_rotvec(rv))
        fk = hm.forward_kinematics(SKEL, pose)
        r = rotmat_from_unit_quat(quat_from_rotvec(rv))
        # chain-product oracle: identity articulation leaves only the global
        for k in range(hm.NUM_JOINTS):
            assert np.allclose(fk.phis[k], r, atol=1e-12)
        assert np.allclose(fk.joints, SKEL.rest_joints @ r.T, atol=1e-12)

    def test_mid_chain_rotation_two_link_oracle(self):
        # rotate the index PIP (joint 5) by 90 deg about x
        theta = np.zeros(45)
        theta[3 * 4:3 * 4 + 3] = [np.pi / 2, 0.0, 0.0]
        fk = hm.forward_kinematics(SKEL, rest_pose().__class__(
            theta=theta, quat=QUAT_IDENTITY, translation=np.zeros(3)))
        joints = SKEL.rest_joints
        rx = rotmat_from_unit_quat(quat_from_rotvec([np.pi / 2, 0, 0]))
        # descendants rotate about the PIP rest position
        expect6 = rx @ (joints[6] - joints[5]) + joints[5]
        assert np.allclose(fk.joints[6], expect6, atol=1e-12)
        # joints outside the chain stay put
        assert np.allclose(fk.joints[9], joints[9], atol=1e-12)
        assert np.allclose(fk.joints[5], joints[5], atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(Exception):
            hm.HandPose(theta=np.zeros(44), quat=QUAT_IDENTITY, translation=np.zeros(3))

    def test_root_rigid_commutes_with_posthoc(self):
        rng = np.random.default_rng(1)
        theta = rng.normal(scale=0.4, size=45)
        q = quat_normalize(rng.normal(size=4))
        t = rng.normal(size=3)
        full = hm.forward_kinematics(SKEL, hm.HandPose(theta=theta, quat=q, translation=t))
        art = hm.forward_kinematics(SKEL, hm.HandPose(theta=theta, quat=QUAT_IDENTITY,
                                                      translation=np.zeros(3)))
        r = rotmat_from_unit_quat(q)
        for k in range(hm.NUM_JOINTS):
            assert np.allclose(full.phis[k], r @ art.phis[k], atol=1e-9)
            assert np.allclose(full.gammas[k], r @ art.gammas[k] + t, atol=1e-9)


class TestLbs:
    def identity_transforms(self):
        return [(np.eye(3), np.zeros(3)) for _ in range(16)]

    def test_identity(self):
        mu = np.array([0.02, 0.05, 0.01])
        w = np.full(16, 1 / 16)
        assert np.allclose(hm.lbs_pose(mu, w, self.identity_transforms()), mu)

    def test_single_translation(self):
        mu = np.array([0.02, 0.05, 0.01])
        w = np.zeros(16)
        w[4] = 1.0
        tr = self.identity_transforms()
        tr[4] = (np.eye(3), np.array([0.0, 0.0, 0.3]))
        assert np.allclose(hm.lbs_pose(mu, w, tr), mu + [0, 0, 0.3])

    def test_two_translations_hand_evaluated(self):
        mu = np.zeros(3)
        w = np.zeros(16)
        w[1] = w[2] = 0.5
        tr = self.identity_transforms()
        t1, t2 = np.array([0.1, 0, 0]), np.array([0, 0.2, 0])
        tr[1] = (np.eye(3), t1)
        tr[2] = (np.eye(3), t2)
        assert np.allclose(hm.lbs_pose(mu, w, tr), (t1 + t2) / 2)

    def test_invalid_weights(self):
        with pytest.raises(InvalidWeightsError):
            hm.lbs_pose(np.zeros(3), np.full(16, 0.1), self.identity_transforms())

    def test_convexity_certificate(self):
        rng = np.random.default_rng(2)
        pose = random_pose(rng)
        fk = hm.forward_kinematics(SKEL, pose)
        for _ in range(20):
            mu = rng.normal(scale=0.05, size=3)
            w = rng.dirichlet(np.ones(16))
            posed = hm.lbs_pose(mu, w, list(zip(fk.phis, fk.gammas)))
            verts = np.einsum("kij,j->ki", fk.phis, mu) + fk.gammas
            # the posed point is the declared convex combination of the
            # per-joint images, with valid simplex weights
            assert np.allclose(posed, w @ verts, atol=1e-12)
            assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(3)
        pose = random_pose(rng)
        fk = hm.forward_kinematics(SKEL, pose)
        mus = rng.normal(scale=0.05, size=(10, 3))
        ws = rng.dirichlet(np.ones(16), size=10)
        batch = hm.lbs_pose_batch(mus, ws, fk.phis, fk.gammas)
        for i in range(10):
            one = hm.lbs_pose(mus[i], ws[i], list(zip(fk.phis, fk.gammas)))
            assert np.allclose(batch[i], one, atol=1e-12)


class TestFlip:
    def canonical(self, n=8):
        rng = np.random.default_rng(4)
        return GaussianSet(
            centers=rng.normal(scale=0.05, size=(n, 3)),
            scales=rng.uniform(0.004, 0.01, size=(n, 3)),
            quats=quat_normalize(rng.normal(size=(n, 4))),
            opacities=rng.uniform(0.3, 0.9, size=n),
            colors=rng.uniform(0, 1, size=(n, 3)),
            subject="right-hand",
        )

    def test_center_flip(self):
        gset = GaussianSet(centers=[[1.0, 2.0, 3.0]], scales=[[1, 1, 1]],
                           quats=[QUAT_IDENTITY], opacities=[0.5], colors=[[0, 0, 0]],
                           subject="right-hand")
        flipped = hm.flip_x(gset)
        assert np.allclose(flipped.centers[0], [-1.0, 2.0, 3.0])
        assert flipped.subject == "left-hand"

    def test_involution(self):
        gset = self.canonical()
        back = hm.flip_x(hm.flip_x(gset))
        assert np.array_equal(back.centers, gset.centers)
        assert np.array_equal(back.quats, gset.quats)
        assert np.array_equal(back.scales, gset.scales)
        assert back.subject == gset.subject

    def test_rotation_conjugation_oracle(self):
        phi = 0.8
        q = quat_from_rotvec([0, 0, phi])
        gset = GaussianSet(centers=[[0, 0, 0]], scales=[[1, 1, 1]], quats=[q],
                           opacities=[0.5], colors=[[0, 0, 0]], subject="right-hand")
        flipped = hm.flip_x(gset)
        m = np.diag([-1.0, 1.0, 1.0])
        oracle = m @ rotmat_from_unit_quat(q) @ m
        assert np.allclose(rotmat_from_unit_quat(flipped.quats[0]), oracle, atol=1e-12)
        # mirrored rotation about z is the negated angle
        expect = rotmat_from_unit_quat(quat_from_rotvec([0, 0, -phi]))
        assert np.allclose(rotmat_from_unit_quat(flipped.quats[0]), expect, atol=1e-12)


class TestPoseHand:
    def canonical(self):
        pts = TEMPLATE.points
        n = len(pts)
        rng = np.random.default_rng(6)
        return GaussianSet(centers=pts.copy(), scales=np.full((n, 3), 0.004),
                           quats=np.tile(QUAT_IDENTITY, (n, 1)),
                           opacities=np.full(n, 0.8),
                           colors=rng.uniform(0.2, 0.9, size=(n, 3)),
                           subject="right-hand")

    def test_right_rest_identity_chain(self):
        gset = self.canonical()
        out = hm.pose_hand(gset, TEMPLATE, TEMPLATE.weights, rest_pose("R"))
        assert np.allclose(out.centers, gset.centers, atol=1e-12)

    def test_rigid_translation_only(self):
        gset = self.canonical()
        out = hm.pose_hand(gset, TEMPLATE, TEMPLATE.weights,
                           rest_pose("R", translation=(0, 0, 1.0)))
        assert np.allclose(out.centers, gset.centers + [0, 0, 1.0], atol=1e-12)

    def test_left_rest_is_flip(self):
        gset = self.canonical()
        out = hm.pose_hand(gset, TEMPLATE, TEMPLATE.weights, rest_pose("L"))
        oracle = hm.flip_x(gset)
        assert np.allclose(out.centers, oracle.centers, atol=1e-12)
        assert np.allclose(out.quats, oracle.quats, atol=1e-12)
        assert out.subject == "left-hand"

    def test_mirror_render_symmetry(self):
        """Left hand at the mirrored pose under the mirrored camera renders as
        the horizontally flipped right-hand image."""
        gset = self.canonical()
        rng = np.random.default_rng(8)
        theta = rng.normal(scale=0.25, size=45)
        q = quat_normalize(rng.normal(size=4))
        t = np.array([0.02, -0.01, 0.0])
        pose_r = hm.HandPose(theta=theta, quat=q, translation=t, handedness="R")
        pose_l = hm.HandPose(theta=hm.mirror_pose_theta(theta), quat=mirror_quat(q),
                             translation=hm.MIRROR @ t, handedness="L")
        w = hm.pseudo_lbs(gset.centers, TEMPLATE)
        right = hm.pose_hand(gset, TEMPLATE, w, pose_r)
        left = hm.pose_hand(gset, TEMPLATE, w, pose_l)

        cam = small_camera(size=48, fx=120.0)
        cam = type(cam)(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                        rotation=cam.rotation, translation=np.array([0.0, -0.05, 0.35]),
                        width=48, height=48, near=0.05)
        img_r = ras.render(right, cam).image
        img_l = ras.render(left, hm.mirror_camera(cam)).image
        assert np.max(np.abs(img_l - img_r[:, ::-1])) < 1e-5


class TestPseudoLbs:
    def test_exact_match(self):
        idx = 17
        w = hm.pseudo_lbs(TEMPLATE.points[idx], TEMPLATE)
        assert np.allclose(w, TEMPLATE.weights[idx], atol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(9)
        queries = TEMPLATE.points[:30] + rng.normal(scale=0.003, size=(30, 3))
        w = hm.pseudo_lbs(queries, TEMPLATE)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(w >= -1e-12)

    def test_equidistant_pair_brute_force_oracle(self):
        # purpose-built template: two one-hot points equidistant from the
        # query, four others farther away sharing the same two joints
        pts = np.array([
            [0.01, 0.0, 0.0], [-0.01, 0.0, 0.0],
            [0.03, 0.0, 0.0], [-0.03, 0.0, 0.0],
            [0.0, 0.035, 0.0], [0.0, -0.035, 0.0],
            [0.3, 0.3, 0.3],
        ])
        w = np.zeros((7, 16))
        w[[0, 2, 4], 3] = 1.0
        w[[1, 3, 5], 7] = 1.0
        w[6, 0] = 1.0
        tpl = hm.HandTemplate(skeleton=SKEL, points=pts, weights=w)
        got = hm.pseudo_lbs(np.zeros(3), tpl)
        # brute-force 6-NN + inverse-distance oracle
        d = np.linalg.norm(pts - 0.0, axis=1)
        nn = np.argsort(d)[:6]
        inv = 1.0 / d[nn]
        inv /= inv.sum()
        oracle = inv @ w[nn]
        assert np.allclose(got, oracle, atol=1e-12)
        assert abs(got[3] - got[7]) < 1e-12  # symmetric joints balance


class TestGradients:
    def test_posed_centers_wrt_pose_chain(self):
        rng = np.random.default_rng(10)
        mus = rng.normal(scale=0.05, size=(6, 3))
        ws = rng.dirichlet(np.ones(16) * 2.0, size=6)
        grad_out = rng.normal(size=(6, 3))

        theta = rng.normal(scale=0.3, size=45)
        quat = quat_normalize(rng.normal(size=4))
        trans = rng.normal(scale=0.1, size=3)

        def run(theta_v, quat_v, trans_v):
            pose = hm.HandPose(theta=theta_v, quat=quat_v, translation=trans_v)
            fk = hm.forward_kinematics(SKEL, pose)
            posed = hm.lbs_pose_batch(mus, ws, fk.phis, fk.gammas)
            return float(np.sum(posed * grad_out)), fk

        _, fk = run(theta, quat, trans)
        d_mu, d_w, d_phis, d_gammas = hm.lbs_pose_backward(mus, ws, fk.phis, fk.gammas, grad_out)
        d_theta, d_quat, d_trans = hm.fk_backward(fk, d_phis=d_phis, d_gammas=d_gammas)

        coords = rng.choice(45, size=8, replace=False)
        fd_theta = central_difference_at(lambda x: run(x, quat, trans)[0], theta.copy(),
                                         coords, h=1e-6)
        assert_grad_close(d_theta[coords], fd_theta, rel=1e-3, msg="theta")

        fd_quat = central_difference_at(lambda x: run(theta, x, trans)[0], quat.copy(),
                                        range(4), h=1e-6)
        assert_grad_close(d_quat, fd_quat, rel=1e-3, msg="quat")

        fd_trans = central_difference_at(lambda x: run(theta, quat, x)[0], trans.copy(),
                                         range(3), h=1e-6)
        assert_grad_close(d_trans, fd_trans, rel=1e-3, msg="trans")

        mu_coords = list(rng.choice(mus.size, 6, replace=False))
        fd_mu = central_difference_at(
            lambda x: float(np.sum(hm.lbs_pose_batch(x, ws, fk.phis, fk.gammas) * grad_out)),
            mus.copy(), mu_coords, h=1e-6)
        assert_grad_close(d_mu.reshape(-1)[mu_coords], fd_mu, rel=1e-3, msg="mu")

    def test_joint_position_gradients(self):
        rng = np.random.default_rng(12)
        theta = rng.normal(scale=0.3, size=45)
        quat = quat_normalize(rng.normal(size=4))
        trans = rng.normal(scale=0.1, size=3)
        gj = rng.normal(size=(16, 3))

        def run(theta_v):
            pose = hm.HandPose(theta=theta_v, quat=quat, translation=trans)
            return float(np.sum(hm.forward_kinematics(SKEL, pose).joints * gj))

        fk = hm.forward_kinematics(SKEL, hm.HandPose(theta=theta, quat=quat, translation=trans))
        d_theta, _, _ = hm.fk_backward(fk, d_joints=gj)
        coords = rng.choice(45, size=8, replace=False)
        fd = central_difference_at(run, theta.copy(), coords, h=1e-6)
        assert_grad_close(d_theta[coords], fd, rel=1e-3, msg="fk joints theta")


class TestSerialization:
    def test_rig_round_trip(self, tmp_path):
        path = tmp_path / "rig.txt"
        hm.save_rig(SKEL, path)
        loaded = hm.load_rig(path)
        assert np.array_equal(loaded.parents, SKEL.parents)
        assert np.array_equal(loaded.rest_offsets, SKEL.rest_offsets)
        assert np.array_equal(loaded.tip_points, SKEL.tip_points)
        assert np.array_equal(loaded.tip_parents, SKEL.tip_parents)

    def test_template_ply_round_trip(self, tmp_path):
        path = tmp_path / "template.ply"
        hm.save_template_ply(TEMPLATE, path)
        pts = hm.load_template_points(path)
        assert pts.shape == TEMPLATE.points.shape
        assert np.allclose(pts, TEMPLATE.points, atol=1e-6)
