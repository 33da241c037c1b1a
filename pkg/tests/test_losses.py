import numpy as np
import pytest

from _utils import assert_grad_close, central_difference_at, small_camera
from graspsplat import losses as ls
from graspsplat.core_geometry import GaussianSet, QUAT_IDENTITY
from graspsplat.errors import ShapeError

RNG = np.random.default_rng(31)


def make_obs(rng, size=32, mask_frac=0.5):
    img = rng.uniform(0, 1, size=(size, size, 3))
    mask = np.zeros((size, size), dtype=bool)
    half = int(size * np.sqrt(mask_frac) / 2)
    c = size // 2
    mask[c - half:c + half, c - half:c + half] = True
    support = np.zeros((size, size), dtype=bool)
    support[2:-2, 2:-2] = True
    return ls.FrameObservation(image=img, mask_left=mask, mask_right=np.zeros_like(mask),
                               mask_object=np.zeros_like(mask), camera=small_camera(size),
                               index=0, support_mask=support)


def sliding_ssim_oracle(x, y):
    """Definition-based sliding-window SSIM (loops, no shared code path)."""
    k1 = np.arange(11) - 5
    g = np.exp(-(k1 ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    win = np.outer(g, g)
    h, w = x.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            px = x[i:i + 11, j:j + 11]
            py = y[i:i + 11, j:j + 11]
            mx = (win * px).sum()
            my = (win * py).sum()
            vx = (win * px * px).sum() - mx * mx
            vy = (win * py * py).sum() - my * my
            cxy = (win * px * py).sum() - mx * my
            c1, c2 = 0.01 ** 2, 0.03 ** 2
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_identical_is_one(self):
        x = RNG.uniform(0, 1, size=(16, 16))
        assert ls.ssim_value(x, x) == 1.0

    def test_matches_definition_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, size=(14, 15))
        y = np.clip(x + rng.normal(scale=0.15, size=x.shape), 0, 1)
        assert abs(ls.ssim_value(x, y) - sliding_ssim_oracle(x, y)) < 1e-9

    def test_exact_11x11_patch(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, size=(11, 11))
        y = rng.uniform(0, 1, size=(11, 11))
        assert abs(ls.ssim_value(x, y) - sliding_ssim_oracle(x, y)) < 1e-12

    def test_gradient_fd(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0.1, 0.9, size=(16, 16))
        y = rng.uniform(0.1, 0.9, size=(16, 16))
        _, grad = ls._ssim_loss_grad(x, y)
        coords = rng.choice(x.size, size=6, replace=False)

        def f(v):
            return ls._ssim_loss_grad(v, y)[0]

        fd = central_difference_at(f, x.copy(), coords, h=1e-6)
        assert_grad_close(grad.reshape(-1)[coords], fd, rel=1e-3, msg="ssim")


class TestPerceptual:
    def test_identical_zero(self):
        img = RNG.uniform(0, 1, size=(24, 24, 3))
        v, g = ls.perceptual_proxy(img, img)
        assert v == 0.0

    def test_gradient_fd(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(0, 1, size=(16, 16, 3))
        g_img = rng.uniform(0, 1, size=(16, 16, 3))
        _, grad = ls.perceptual_proxy(p, g_img)
        coords = rng.choice(p.size, size=6, replace=False)

        def f(v):
            return ls.perceptual_proxy(v, g_img)[0]

        fd = central_difference_at(f, p.copy(), coords, h=1e-6)
        assert_grad_close(grad.reshape(-1)[coords], fd, rel=1e-3, msg="perceptual")


class TestImageLoss:
    def test_perfect_input_zero(self):
        rng = np.random.default_rng(6)
        obs = make_obs(rng)
        pred = obs.image.copy()
        pred[~obs.support_mask] = 0.0
        obs.image[~obs.support_mask] = 0.0
        res = ls.image_loss(pred, obs, obs.mask_left, ls.LossWeights())
        assert res.terms["l1"] == 0.0
        assert res.terms["ssim"] == 0.0
        assert res.terms["perceptual"] == 0.0
        assert res.terms["mask"] == 0.0
        assert res.value == 0.0
        # data terms contribute exactly zero gradient; only the (linear) mask
        # penalty keeps its constant slope outside the support region, where
        # no splat lives, so parameter gradients still vanish
        assert np.all(res.pixel_grad[obs.support_mask] == 0.0)

    def test_constant_offset_l1(self):
        rng = np.random.default_rng(7)
        obs = make_obs(rng)
        obs.image[:] = 0.4
        mask = np.ones_like(obs.mask_left)
        obs = ls.FrameObservation(image=obs.image, mask_left=mask,
                                  mask_right=obs.mask_right, mask_object=obs.mask_object,
                                  camera=obs.camera, support_mask=np.ones_like(mask))
        pred = obs.image + 0.1
        res = ls.image_loss(pred, obs, mask, ls.LossWeights())
        assert abs(res.terms["l1"] - 0.1) < 1e-12

    def test_invariant_outside_combined_mask(self):
        rng = np.random.default_rng(8)
        obs = make_obs(rng)
        pred = rng.uniform(0, 1, size=obs.image.shape)
        res1 = ls.image_loss(pred, obs, obs.mask_left, ls.LossWeights())
        # changing ground truth strictly outside the combined mask is invisible
        tampered = obs.image.copy()
        tampered[~obs.combined_mask] = rng.uniform(0, 1, size=obs.image.shape)[~obs.combined_mask]
        obs2 = ls.FrameObservation(image=tampered, mask_left=obs.mask_left,
                                   mask_right=obs.mask_right, mask_object=obs.mask_object,
                                   camera=obs.camera, support_mask=obs.support_mask)
        res2 = ls.image_loss(pred, obs2, obs2.mask_left, ls.LossWeights())
        assert abs(res1.value - res2.value) < 1e-12

    def test_shape_mismatch(self):
        obs = make_obs(np.random.default_rng(9))
        with pytest.raises(ShapeError):
            ls.image_loss(np.zeros((16, 16, 3)), obs, obs.mask_left, ls.LossWeights())

    def test_pixel_gradient_fd(self):
        rng = np.random.default_rng(10)
        obs = make_obs(rng)
        pred = rng.uniform(0.05, 0.95, size=obs.image.shape)
        w = ls.LossWeights()
        res = ls.image_loss(pred, obs, obs.mask_left, w)
        coords = rng.choice(pred.size, size=8, replace=False)

        def f(v):
            return ls.image_loss(v, obs, obs.mask_left, w).value

        fd = central_difference_at(f, pred.copy(), coords, h=1e-6)
        assert_grad_close(res.pixel_grad.reshape(-1)[coords], fd, rel=1e-3, msg="image loss")


class TestRegularizers:
    def gset(self, colors, scales=None, centers=None):
        n = len(colors)
        return GaussianSet(
            centers=np.asarray(centers) if centers is not None else RNG.normal(size=(n, 3)),
            scales=np.asarray(scales) if scales is not None else np.full((n, 3), 0.01),
            quats=np.tile(QUAT_IDENTITY, (n, 1)),
            opacities=np.full(n, 0.5),
            colors=np.asarray(colors, dtype=float),
        )

    def test_uniform_color_zero(self):
        gset = self.gset(np.full((10, 3), 0.3))
        nbr = ls.neighbor_graph(gset.centers)
        l_color, _, d_colors, _ = ls.color_scale_regularizers(gset, nbr)
        assert l_color == 0.0
        assert np.all(d_colors == 0.0)

    def test_small_scales_zero(self):
        gset = self.gset(RNG.uniform(0, 1, (10, 3)))
        nbr = ls.neighbor_graph(gset.centers)
        _, l_scale, _, d_scales = ls.color_scale_regularizers(gset, nbr)
        assert l_scale == 0.0
        assert np.all(d_scales == 0.0)

    def test_black_white_pair(self):
        gset = self.gset(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]),
                         centers=np.array([[0.0, 0, 0], [0.1, 0, 0]]))
        nbr = ls.neighbor_graph(gset.centers)
        l_color, _, _, _ = ls.color_scale_regularizers(gset, nbr)
        assert abs(l_color - 1.0) < 1e-12

    def test_gradients_fd(self):
        rng = np.random.default_rng(11)
        centers = rng.normal(size=(8, 3))
        colors = rng.uniform(0.1, 0.9, (8, 3))
        scales = rng.uniform(0.01, 0.2, (8, 3))
        gset = self.gset(colors, scales=scales, centers=centers)
        nbr = ls.neighbor_graph(centers)
        w = ls.LossWeights()
        l_color, l_scale, d_colors, d_scales = ls.color_scale_regularizers(gset, nbr)

        def f_col(v):
            g = self.gset(v, scales=scales, centers=centers)
            return w.color * ls.color_scale_regularizers(g, nbr)[0]

        coords = rng.choice(colors.size, 6, replace=False)
        fd = central_difference_at(f_col, colors.copy(), coords, h=1e-6)
        assert_grad_close(w.color * d_colors.reshape(-1)[coords], fd, rel=1e-3, msg="color")

        def f_scale(v):
            g = self.gset(colors, scales=v, centers=centers)
            return w.scale * ls.color_scale_regularizers(g, nbr)[1]

        coords = rng.choice(scales.size, 6, replace=False)
        fd = central_difference_at(f_scale, scales.copy(), coords, h=1e-6)
        assert_grad_close(w.scale * d_scales.reshape(-1)[coords], fd, rel=1e-3, msg="scale")


class TestHandLoss:
    def test_constant_track_and_matched_weights(self):
        w = RNG.dirichlet(np.ones(16), size=10)
        res = ls.hand_loss(np.zeros((2, 45)), np.zeros((2, 45)), np.zeros((2, 3)),
                           np.zeros((2, 3)), w, w, ls.LossWeights())
        assert res.value == 0.0

    def test_unit_theta_step(self):
        t = np.zeros((2, 45))
        t_prev = t.copy()
        t = t.copy()
        t[0, 7] = 1.0
        res = ls.hand_loss(t, t_prev, np.zeros((2, 3)), np.zeros((2, 3)),
                           np.zeros((3, 16)), np.zeros((3, 16)), ls.LossWeights())
        assert abs(res.smoothness - 1.0) < 1e-12

    def test_lbs_scalar_check(self):
        w_pred = np.zeros((1, 16))
        w_pseudo = np.zeros((1, 16))
        w_pred[0, 4] = 0.1
        res = ls.hand_loss(np.zeros((2, 45)), None, np.zeros((2, 3)), None,
                           w_pred, w_pseudo, ls.LossWeights())
        # 1e3 * 0.1^2 = 10
        assert abs(res.value - 10.0) < 1e-12

    def test_first_frame_smoothness_skipped(self):
        res = ls.hand_loss(RNG.normal(size=(2, 45)), None, RNG.normal(size=(2, 3)), None,
                           np.zeros((2, 16)), np.zeros((2, 16)), ls.LossWeights())
        assert res.smoothness == 0.0
        assert res.d_theta_prev is None

    def test_gradients_fd(self):
        rng = np.random.default_rng(12)
        t, tp = rng.normal(size=(2, 45)), rng.normal(size=(2, 45))
        g, gp = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        wpred = rng.dirichlet(np.ones(16), size=5)
        wpseudo = rng.dirichlet(np.ones(16), size=5)
        lw = ls.LossWeights()
        res = ls.hand_loss(t, tp, g, gp, wpred, wpseudo, lw)

        coords = rng.choice(t.size, 5, replace=False)
        fd = central_difference_at(
            lambda v: ls.hand_loss(v, tp, g, gp, wpred, wpseudo, lw).value,
            t.copy(), coords, h=1e-6)
        assert_grad_close(res.d_theta_t.reshape(-1)[coords], fd, rel=1e-3, msg="theta_t")

        coords = rng.choice(wpred.size, 5, replace=False)
        fd = central_difference_at(
            lambda v: ls.hand_loss(t, tp, g, gp, v, wpseudo, lw).value,
            wpred.copy(), coords, h=1e-6)
        assert_grad_close(res.d_weights.reshape(-1)[coords], fd, rel=1e-3, msg="weights")


class TestContactLoss:
    def test_coincident_zero(self):
        g = np.array([0.1, 0.2, 0.3])
        v, d_o, d_l, d_r = ls.contact_loss(g, g, g, 1.0)
        assert v == 0.0
        assert np.all(d_o == 0) and np.all(d_l == 0) and np.all(d_r == 0)

    def test_euclidean_value(self):
        go = np.array([3.0, 4.0, 0.0])
        v, _, _, _ = ls.contact_loss(go, np.zeros(3), go, 1.0)
        assert abs(v - 5.0) < 1e-12

    def test_gradient_direction_and_fd(self):
        rng = np.random.default_rng(13)
        go, gl, gr = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        lam = 1.0
        v, d_o, d_l, d_r = ls.contact_loss(go, gl, gr, lam)
        # hand gradient points from the object toward the hand, scaled lambda
        unit = (go - gl) / np.linalg.norm(go - gl)
        assert np.allclose(d_l, -lam * unit, atol=1e-12)

        fd = central_difference_at(lambda v_: ls.contact_loss(go, v_, gr, lam)[0],
                                   gl.copy(), range(3), h=1e-7)
        assert_grad_close(d_l, fd, rel=1e-3, msg="contact gl")
        fd = central_difference_at(lambda v_: ls.contact_loss(v_, gl, gr, lam)[0],
                                   go.copy(), range(3), h=1e-7)
        assert_grad_close(d_o, fd, rel=1e-3, msg="contact go")
