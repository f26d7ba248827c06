import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geotex.core import CameraView, GaussianSplat, SplatSet, logit, rgb_to_sh_dc
from geotex.rasterizer import NO_SPLAT, project_splat, render, render_backward

from conftest import brute_render, fd_gradients, random_camera, random_splats, rel_error


def one_splat(mu, sigma, opacity, rgb, deg=0):
    sh = np.zeros((1, (deg + 1) ** 2, 3))
    sh[0, 0] = rgb_to_sh_dc(rgb)
    return SplatSet(np.atleast_2d(mu), np.array([[1.0, 0, 0, 0]]),
                    np.log(np.full((1, 3), sigma)), np.array([logit(opacity)]), sh)


def axis_camera(size=32, f=100.0, c=None):
    c = size / 2 if c is None else c
    return CameraView(f, f, c, c, np.eye(3), np.zeros(3), size, size)


class TestProjection:
    def test_on_axis_mean(self):
        g = GaussianSplat(np.array([0, 0, 2.0]), np.array([1.0, 0, 0, 0]), np.log(np.full(3, 0.1)),
                          0.0, np.zeros((1, 3)))
        p = project_splat(g, axis_camera(100, 100, 50))
        np.testing.assert_allclose(p.mu2d, [50, 50])
        # J = diag(f/z, f/z) on axis: (100/2 * 0.1)^2 = 25, plus the low-pass term
        np.testing.assert_allclose(p.cov2d, np.diag([25.3, 25.3]), rtol=1e-12)
        assert p.depth == 2.0

    def test_behind_camera_culled(self):
        g = GaussianSplat(np.array([0, 0, -2.0]), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0,
                          np.zeros((1, 3)))
        assert project_splat(g, axis_camera()) is None
        s = SplatSet.from_splats([g])
        out = render(s, axis_camera())
        assert not out.visible[0]
        assert np.all(out.index_max == NO_SPLAT)


class TestForward:
    def test_empty_scene_is_background(self):
        out = render(SplatSet.empty(0), axis_camera(8), bg=[0.2, 0.3, 0.4])
        np.testing.assert_array_equal(out.color, np.broadcast_to([0.2, 0.3, 0.4], (8, 8, 3)))
        np.testing.assert_array_equal(out.final_transmittance, 1.0)

    def test_opaque_splat_blends_at_alpha_max(self):
        rgb = np.array([0.8, 0.4, 0.2])
        s = one_splat([0, 0, 2.0], 1.0, 0.99999, rgb)
        out = render(s, axis_camera(16, c=8.5))
        np.testing.assert_allclose(out.color[8, 8], 0.99 * rgb, rtol=1e-12)
        assert out.index_max[8, 8] == 0

    def test_two_half_transparent_splats_telescope(self):
        a, b = np.array([1.0, 0.0, 0.2]), np.array([0.0, 1.0, 0.6])
        front = one_splat([0, 0, 2.0], 0.5, 0.5, a)
        back = one_splat([0, 0, 3.0], 0.5, 0.5, b)
        back.extend(front)  # submission order must not matter
        out = render(back, axis_camera(16, c=8.5))
        np.testing.assert_allclose(out.color[8, 8], 0.5 * a + 0.25 * b, rtol=1e-12)
        assert out.index_max[8, 8] == 1  # tie on alpha: the front splat wins

    def test_random_scene_matches_brute_force(self, rng):
        cam = random_camera(rng, 16, 16)
        s = random_splats(rng, 20)
        out = render(s, cam)
        color, imax = brute_render(s, cam)
        np.testing.assert_allclose(out.color, color, atol=1e-6)
        np.testing.assert_array_equal(out.index_max, imax)

    def test_non_tile_multiple_size(self, rng):
        cam = random_camera(rng, 37, 21)
        s = random_splats(rng, 30)
        out = render(s, cam)
        color, imax = brute_render(s, cam)
        np.testing.assert_allclose(out.color, color, atol=1e-6)
        np.testing.assert_array_equal(out.index_max, imax)

    def test_bookkeeping(self, rng):
        cam = random_camera(rng)
        s = random_splats(rng, 40)
        wmap = rng.uniform(size=(32, 32))
        out = render(s, cam, weight_map=wmap)
        hit = out.index_max >= 0
        np.testing.assert_array_equal(out.contribution_count,
                                      np.bincount(out.index_max[hit], minlength=40))
        ones = render(s, cam, weight_map=np.ones((32, 32)))
        np.testing.assert_array_equal(ones.weighted_area, ones.contribution_count)
        assert np.all((out.per_splat_max_weight >= 0) & (out.per_splat_max_weight <= 0.99))
        assert np.all(out.per_splat_max_weight[~out.visible] == 0)
        assert np.all((out.final_transmittance > 0) & (out.final_transmittance <= 1))

    def test_deterministic(self, rng):
        cam = random_camera(rng)
        s = random_splats(rng, 60)
        a, b = render(s, cam), render(s, cam)
        np.testing.assert_array_equal(a.color, b.color)
        np.testing.assert_array_equal(a.per_splat_max_weight, b.per_splat_max_weight)

    def test_weight_map_shape_checked(self, rng):
        with pytest.raises(ValueError):
            render(random_splats(rng, 2), random_camera(rng), weight_map=np.ones((3, 3)))

    @settings(max_examples=15)
    @given(st.integers(0, 2 ** 31))
    def test_colour_bounded_by_splat_colours(self, seed):
        r = np.random.default_rng(seed)
        cam = random_camera(r, 16, 16)
        s = random_splats(r, 10, sh_degree=0)
        s.sh[:, 0] = rgb_to_sh_dc(r.uniform(0, 1, (10, 3)))
        out = render(s, cam)
        assert np.all(out.color >= 0) and np.all(out.color <= 1 + 1e-12)
        total = out.color.sum(axis=2)
        assert np.all(total <= 3 * (1 - out.final_transmittance) + 1e-9)


class TestBackward:
    def test_zero_upstream_gives_zero(self, rng):
        cam = random_camera(rng)
        s = random_splats(rng, 10)
        g = render_backward(s, cam, np.zeros((32, 32, 3)))
        for name in ("mu", "rot", "scale", "opacity", "sh", "mean2d"):
            assert not np.any(getattr(g, name))

    def test_single_pixel_opacity_sign(self):
        rgb = np.array([0.9, 0.6, 0.3])
        s = one_splat([0, 0, 2.0], 0.02, 0.4, rgb)
        cam = axis_camera(1, c=0.5)
        target = np.array([0.2, 0.2, 0.2])
        out = render(s, cam)
        err = out.color[0, 0] - target
        dL = (np.sign(err) / 3.0)[None, None]
        g = render_backward(s, cam, dL, out)
        # a more opaque splat moves the pixel towards rgb; with rgb above target the L1 loss grows
        assert np.sign(g.opacity[0]) == np.sign(np.sum(np.sign(err) * rgb))
        h = 1e-4
        losses = []
        for d in (h, -h):
            t = s.copy()
            t.opacity[0] += d
            losses.append(np.abs(render(t, cam).color[0, 0] - target).mean())
        fd = (losses[0] - losses[1]) / (2 * h)
        assert g.opacity[0] == pytest.approx(fd, rel=1e-3)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        cam = random_camera(r, 16, 16)
        s = random_splats(r, 6)
        w = r.normal(size=(16, 16, 3))
        g = render_backward(s, cam, w)
        fd = fd_gradients(s, cam, w)
        for name in fd:
            tol = 1e-2 if name == "rot" else 1e-3
            assert rel_error(getattr(g, name), fd[name]) < tol, name

    def test_background_gradient_free(self, rng):
        cam = random_camera(rng, 16, 16)
        s = random_splats(rng, 4)
        w = rng.normal(size=(16, 16, 3))
        g = render_backward(s, cam, w, bg=[0.3, 0.2, 0.1])
        fd = fd_gradients(s, cam, w, bg=np.array([0.3, 0.2, 0.1]))
        assert rel_error(g.opacity, fd["opacity"]) < 1e-3
        assert rel_error(g.mu, fd["mu"]) < 1e-3

    def test_viewspace_norm_units(self):
        from geotex.rasterizer import Gradients

        g = Gradients(*(np.zeros((1, k)) for k in (3, 4, 3)), np.zeros(1), np.zeros((1, 1, 3)),
                      np.array([[3.0, 4.0]]))
        assert g.viewspace_norm(2, 2)[0] == pytest.approx(5.0)
        assert g.viewspace_norm(4, 2)[0] == pytest.approx(np.hypot(6, 4))
