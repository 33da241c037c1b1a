import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graspsplat import core_geometry as cg
from graspsplat.errors import (
    BehindCameraError,
    DegenerateCovarianceError,
    InvalidRotationError,
)

RNG = np.random.default_rng(0)


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_z(angle):
    return np.array([np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)])


class TestCovariance:
    def test_identity_case(self):
        cov = cg.covariance(np.ones(3), cg.QUAT_IDENTITY)
        assert np.allclose(cov, np.eye(3))

    def test_axis_aligned(self):
        cov = cg.covariance(np.array([2.0, 1.0, 1.0]), cg.QUAT_IDENTITY)
        assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]))

    def test_rotated_matches_matrix_product_oracle(self):
        s = np.array([2.0, 1.0, 1.0])
        q = quat_z(np.pi / 2)
        cov = cg.covariance(s, q)
        # independent oracle: explicit R S S^T R^T with the rotation matrix
        r = rot_z(np.pi / 2)
        oracle = r @ np.diag(s) @ np.diag(s).T @ r.T
        assert np.allclose(cov, oracle, atol=1e-12)
        assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_symmetric_and_eigenvalues_match_scales(self):
        for _ in range(50):
            s = RNG.uniform(0.2, 3.0, size=3)
            q = cg.quat_normalize(RNG.normal(size=4))
            cov = cg.covariance(s, q)
            assert np.max(np.abs(cov - cov.T)) < 1e-12
            eig = np.sort(np.linalg.eigvalsh(cov))
            assert np.allclose(eig, np.sort(s * s), atol=1e-9)

    def test_renormalizes_small_drift(self):
        q = cg.QUAT_IDENTITY * (1.0 + 5e-4)
        cov = cg.covariance(np.ones(3), q)
        assert np.allclose(cov, np.eye(3), atol=1e-9)

    def test_rejects_large_drift(self):
        with pytest.raises(InvalidRotationError):
            cg.covariance(np.ones(3), np.array([1.1, 0.0, 0.0, 0.0]))

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            cg.covariance(np.array([1.0, -0.1, 1.0]), cg.QUAT_IDENTITY)


class TestGaussianWeight:
    def test_at_center(self):
        assert cg.gaussian_weight(np.zeros(3), np.zeros(3), np.eye(3)) == 1.0

    def test_unit_distance_identity_cov(self):
        w = cg.gaussian_weight(np.array([1.0, 0.0, 0.0]), np.zeros(3), np.eye(3))
        assert abs(w - np.exp(-0.5)) < 1e-12

    def test_anisotropic_matches_numeric_solve(self):
        cov = np.diag([4.0, 1.0, 1.0])
        x = np.array([2.0, 0.0, 0.0])
        w = cg.gaussian_weight(x, np.zeros(3), cov)
        m = x @ np.linalg.solve(cov, x)  # independent numeric inverse
        assert abs(w - np.exp(-0.5 * m)) < 1e-12
        assert abs(w - np.exp(-0.5)) < 1e-12

    def test_rotation_equivariance(self):
        for _ in range(30):
            s = RNG.uniform(0.3, 2.0, size=3)
            q = cg.quat_normalize(RNG.normal(size=4))
            cov = cg.covariance(s, q)
            x = RNG.normal(size=3)
            mu = RNG.normal(size=3)
            rot = cg.rotmat_from_unit_quat(cg.quat_normalize(RNG.normal(size=4)))
            w1 = cg.gaussian_weight(x, mu, cov)
            w2 = cg.gaussian_weight(rot @ x, rot @ mu, rot @ cov @ rot.T)
            assert abs(w1 - w2) < 1e-9

    def test_singular_covariance_raises(self):
        with pytest.raises(DegenerateCovarianceError):
            cg.gaussian_weight(np.zeros(3), np.zeros(3), np.diag([1.0, 1.0, 0.0]))

    def test_range(self):
        for _ in range(20):
            cov = cg.covariance(RNG.uniform(0.2, 2.0, 3), cg.quat_normalize(RNG.normal(size=4)))
            w = cg.gaussian_weight(RNG.normal(size=3), RNG.normal(size=3), cov)
            assert 0.0 < w <= 1.0


class TestProjectPoint:
    def cam(self):
        return cg.Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)

    def test_optical_axis(self):
        u, v, d = cg.project_point(np.array([0.0, 0.0, 1.0]), self.cam())
        assert (u, v, d) == (50.0, 50.0, 1.0)

    def test_similar_triangles(self):
        u, v, d = cg.project_point(np.array([0.5, 0.0, 1.0]), self.cam())
        assert (u, v, d) == (100.0, 50.0, 1.0)

    def test_rotated_camera_matches_matrix_chain_oracle(self):
        rot = rot_z(0.3) @ np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
        t = np.array([0.1, -0.2, 0.5])
        cam = cg.Camera(fx=80.0, fy=90.0, cx=32.0, cy=30.0, rotation=rot,
                        translation=t, width=64, height=64)
        x = np.array([0.2, 0.4, 0.3])
        # independent chain evaluated with plain matrix arithmetic
        pc = rot @ x + t
        expect = (80.0 * pc[0] / pc[2] + 32.0, 90.0 * pc[1] / pc[2] + 30.0, pc[2])
        got = cg.project_point(x, cam)
        assert np.allclose(got, expect, atol=1e-12)

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            cg.project_point(np.array([0.0, 0.0, -1.0]), self.cam())

    @given(st.floats(min_value=0.1, max_value=50.0))
    @settings(max_examples=30, deadline=None)
    def test_scale_consistency(self, k):
        cam = self.cam()
        x = np.array([0.3, -0.2, 1.5])
        u1, v1, _ = cg.project_point(x, cam)
        u2, v2, _ = cg.project_point(k * x, cam)
        assert abs(u1 - u2) < 1e-9 * max(1.0, abs(u1))
        assert abs(v1 - v2) < 1e-9 * max(1.0, abs(v1))


class TestQuaternionCalculus:
    def test_rotmat_derivative_matches_fd(self):
        for _ in range(10):
            q = cg.quat_normalize(RNG.normal(size=4))
            jac = cg.drotmat_dquat(q)
            h = 1e-6
            for k in range(4):
                qp = q.copy(); qp[k] += h
                qm = q.copy(); qm[k] -= h
                fd = (cg.rotmat_from_unit_quat(qp) - cg.rotmat_from_unit_quat(qm)) / (2 * h)
                assert np.max(np.abs(jac[..., k] - fd)) < 1e-6

    def test_quat_from_rotvec_matches_fd(self):
        for v in [np.array([0.3, -0.2, 0.5]), np.array([1e-10, 0.0, 0.0]), np.zeros(3)]:
            jac = cg.dquat_drotvec(v)
            h = 1e-7
            for k in range(3):
                vp = v.copy(); vp[k] += h
                vm = v.copy(); vm[k] -= h
                fd = (cg.quat_from_rotvec(vp) - cg.quat_from_rotvec(vm)) / (2 * h)
                assert np.max(np.abs(jac[:, k] - fd)) < 1e-6

    def test_quat_mul_matrices(self):
        a = cg.quat_normalize(RNG.normal(size=4))
        b = cg.quat_normalize(RNG.normal(size=4))
        ab = cg.quat_mul(a, b)
        assert np.allclose(cg.quat_mul_left_matrix(a) @ b, ab)
        assert np.allclose(cg.quat_mul_right_matrix(b) @ a, ab)

    def test_quat_rotvec_consistency(self):
        v = np.array([0.4, -0.1, 0.7])
        q = cg.quat_from_rotvec(v)
        r = cg.rotmat_from_unit_quat(q)
        # Rodrigues oracle
        angle = np.linalg.norm(v)
        axis = v / angle
        kmat = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        oracle = np.eye(3) + np.sin(angle) * kmat + (1 - np.cos(angle)) * kmat @ kmat
        assert np.allclose(r, oracle, atol=1e-12)

    def test_mirror_quat_matches_conjugation(self):
        m = np.diag([-1.0, 1.0, 1.0])
        for _ in range(10):
            q = cg.quat_normalize(RNG.normal(size=4))
            r1 = cg.rotmat_from_unit_quat(cg.mirror_quat(q))
            r2 = m @ cg.rotmat_from_unit_quat(q) @ m
            assert np.allclose(r1, r2, atol=1e-12)
