from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import nshape.autodiff as ad
from nshape.field import Field, alpha_graph, param_nodes
from nshape.render import (
    Camera,
    RenderError,
    Renderer,
    composite,
    compositing_weights,
    cube_bounds,
    look_at,
    make_rays,
    normal_jacobian_graph,
    pixel_centers,
    ray_bindings,
    read_poses,
    sample_ray,
    top_weight_selection,
    weights_graph,
    write_poses,
)

from conftest import small_field


def _cam(c2w=None, size=8, f=10.0):
    return Camera(np.eye(4) if c2w is None else c2w, f, f, size / 2, size / 2, size, size)


class TestCamera:
    def test_principal_point_is_forward(self):
        cam = Camera(look_at([2.0, 0.5, -1.0], [0.0, 0.0, 0.0]), 30.0, 30.0, 16.0, 16.0, 32, 32)
        _, d = make_rays(cam, [[cam.cx, cam.cy]])
        np.testing.assert_allclose(d[0], cam.forward, atol=1e-12)

    def test_identity_pose_axis_convention(self):
        cam = _cam(size=32)
        o, d = make_rays(cam, [[cam.cx + cam.fx, cam.cy]])
        np.testing.assert_allclose(d[0], np.array([1.0, 0.0, 1.0]) / np.sqrt(2), atol=1e-12)
        np.testing.assert_array_equal(o[0], np.zeros(3))
        _, d = make_rays(cam, [[cam.cx, cam.cy + 2.0]])
        assert d[0, 1] > 0  # image y points down

    def test_unit_directions(self):
        cam = Camera(look_at([1.0, 2.0, 3.0], [0.1, 0.0, 0.0]), 20.0, 25.0, 8.0, 6.0, 16, 12)
        _, d = make_rays(cam, pixel_centers(cam, np.arange(cam.npix)))
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)

    def test_out_of_bounds(self):
        with pytest.raises(RenderError):
            make_rays(_cam(), [[9.0, 1.0]])

    def test_non_orthonormal(self):
        m = np.eye(4)
        m[0, 0] = 2.0
        with pytest.raises(RenderError):
            _cam(m)

    def test_project_inverts_rays(self):
        cam = Camera(look_at([0.0, -1.0, 2.5], [0.0, 0.0, 0.0]), 20.0, 20.0, 8.0, 8.0, 16, 16)
        uv = pixel_centers(cam, [0, 17, 255])
        o, d = make_rays(cam, uv)
        back, z = cam.project(o + 1.7 * d)
        np.testing.assert_allclose(back, uv, atol=1e-9)
        assert np.all(z > 0)

    def test_cube_bounds(self):
        o = np.array([[0.0, 0.0, -3.0], [5.0, 5.0, 5.0]])
        d = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        near, far = cube_bounds(o, d)
        np.testing.assert_allclose([near[0], far[0]], [2.0, 4.0])
        assert far[1] > near[1]  # miss gets a dummy range


class TestSampling:
    def test_uniform_endpoints(self):
        np.testing.assert_allclose(sample_ray(0.0, 1.0, 3, "uniform"), [0.0, 0.5, 1.0])

    def test_stratified_one_per_bin(self):
        t = sample_ray(0.0, 1.0, 64, "stratified", np.random.default_rng(3))
        np.testing.assert_array_equal(np.floor(t * 64), np.arange(64))
        assert np.all(np.diff(t) > 0)

    def test_stratified_deterministic(self):
        a = sample_ray(np.zeros(4), np.ones(4), 16, "stratified", 7)
        b = sample_ray(np.zeros(4), np.ones(4), 16, "stratified", 7)
        np.testing.assert_array_equal(a, b)

    def test_invalid(self):
        with pytest.raises(RenderError):
            sample_ray(1.0, 0.5, 4)
        with pytest.raises(RenderError):
            sample_ray(0.0, 1.0, 1)
        with pytest.raises(RenderError):
            sample_ray(0.0, 1.0, 4, "importance")


class TestCompositing:
    def test_opaque_first_sample(self):
        rgb, w = composite([1.0, 0.7], [[0.2, 0.4, 0.6], [1.0, 1.0, 1.0]])
        np.testing.assert_array_equal(w, [1.0, 0.0])
        np.testing.assert_array_equal(rgb, [0.2, 0.4, 0.6])

    def test_half_then_opaque(self):
        np.testing.assert_allclose(compositing_weights([0.5, 1.0]), [0.5, 0.5])

    def test_empty_space_black(self):
        rgb, w = composite(np.zeros(5), np.ones((5, 3)))
        np.testing.assert_array_equal(rgb, 0.0)
        assert w.sum() == 0.0

    def test_graph_matches_numeric(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 1, size=(50, 20))
        an = ad.slot("a", a.shape)
        np.testing.assert_allclose(ad.evaluate(weights_graph(an), {"a": a}), compositing_weights(a),
                                   atol=1e-9)

    def test_exact_log_transmittance_with_opaque_samples(self):
        # f jumps from +1 to -1 at a huge sharpness: alpha rounds to 1 exactly
        f = ad.slot("f", (1, 4))
        a, lt = alpha_graph(ad.slice_axis(f, 1, 0, 3), ad.slice_axis(f, 1, 1, 4), ad.const(1e4), True)
        av, w = ad.Graph([a, weights_graph(a, lt)]).evaluate({"f": np.array([[2.0, 1.0, -1.0, -2.0]])})
        assert av[0, 1] == 1.0
        np.testing.assert_array_equal(w[0, 2], 0.0)
        assert w.sum() <= 1.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0.0, 1.0)))
def test_weights_nonnegative_and_bounded(alpha):
    w = compositing_weights(alpha)
    assert np.all(w >= 0)
    assert w.sum() <= 1.0 + 1e-12


def _jac_setup(R=3, n=12, seed=0):
    cfg = small_field()
    field = Field(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    o = rng.normal(size=(R, 3))
    o = 2.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = -o / np.linalg.norm(o, axis=1, keepdims=True) + 0.05 * rng.normal(size=(R, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    near, far = cube_bounds(o, d)
    t = sample_ray(near, far, n, "stratified", rng)
    return cfg, field, o, d, t


class TestNormalJacobian:
    def test_fast_generic_and_selected_agree(self):
        cfg, field, o, d, t = _jac_setup()
        R, n = t.shape
        p = param_nodes(cfg)
        b = dict(field.params, **ray_bindings(o, d, t))
        Jf, rg, _ = normal_jacobian_graph(cfg, p, R, n, ["sdf.head.weight"], fast=True)
        Jg, _, _ = normal_jacobian_graph(cfg, p, R, n, ["sdf.head.weight"], fast=False)
        Js, _, _ = normal_jacobian_graph(cfg, p, R, n, ["sdf.head.weight"], select=n - 1)
        w = ad.evaluate(rg.weights, b)
        ts, sel = top_weight_selection(t, w, n - 1)
        bs = dict(b, ts=ts, sel=sel)
        jf, jg, js = ad.evaluate(Jf, b), ad.evaluate(Jg, b), ad.evaluate(Js, bs)
        np.testing.assert_allclose(jf, jg, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(jf, js, rtol=1e-12, atol=1e-14)

    def test_matches_finite_difference_oracle(self):
        # J = sum_i w_i dN(x_i)/dw with N linear in the head weight w
        cfg, field, o, d, t = _jac_setup(R=2, n=8, seed=1)
        R, n = t.shape
        p = param_nodes(cfg)
        J, rg, _ = normal_jacobian_graph(cfg, p, R, n, ["sdf.head.weight"])
        b = dict(field.params, **ray_bindings(o, d, t))
        got = ad.evaluate(J, b)
        w = ad.evaluate(rg.weights, b)
        x = o[:, None, :] + t[:, :-1, None] * d[:, None, :]
        H = cfg.hidden
        want = np.zeros((R, 3 * H))
        h = 1e-4
        for j in range(H):
            fp = Field(cfg, dict(field.params), seed=1)
            fm = Field(cfg, dict(field.params), seed=1)
            for f, s in ((fp, h), (fm, -h)):
                W = field.params["sdf.head.weight"].copy()
                W[j, 0] += s
                f.params["sdf.head.weight"] = W
            dn = (fp.normal(x.reshape(-1, 3)) - fm.normal(x.reshape(-1, 3))) / (2 * h)
            dn = dn.reshape(R, n - 1, 3)
            for k in range(3):
                want[:, k * H + j] = np.sum(w * dn[:, :, k], axis=1)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-8)

    def test_single_full_weight_sample(self):
        # one selected sample with weight 1 gives that sample's Jacobian
        cfg, field, o, d, t = _jac_setup(R=1, n=6, seed=2)
        p = param_nodes(cfg)
        J, _, _ = normal_jacobian_graph(cfg, p, 1, 6, ["sdf.head.weight"], select=1)
        sel = np.zeros((1, 5, 1))
        sel[0, 2, 0] = 1.0
        b = dict(field.params, **ray_bindings(o, d, t), ts=t[:, 2:3], sel=sel)
        rg_w = ad.evaluate(J, b)
        J1, _, _ = normal_jacobian_graph(cfg, p, 1, 6, ["sdf.head.weight"], fast=False, select=1)
        np.testing.assert_allclose(rg_w, ad.evaluate(J1, b), rtol=1e-12)

    def test_top_weight_selection(self):
        t = np.array([[0.0, 1.0, 2.0, 3.0, 4.0]])
        w = np.array([[0.1, 0.5, 0.05, 0.3]])
        ts, sel = top_weight_selection(t, w, 2)
        np.testing.assert_array_equal(ts, [[1.0, 3.0]])
        np.testing.assert_array_equal(np.argmax(sel[0], axis=0), [1, 3])


class TestRendererAndPoses:
    def test_render_image_range(self):
        cfg = small_field()
        field = Field(cfg, seed=0)
        cam = Camera(look_at([0.0, 0.0, -2.0], [0.0, 0.0, 0.0]), 8.0, 8.0, 4.0, 4.0, 8, 8)
        img = Renderer(cfg, n_samples=16).render_image(field.params, cam)
        assert img.shape == (8, 8, 3)
        assert np.all((img >= 0) & (img <= 1))

    def test_pose_round_trip(self, tmp_path):
        cams = [Camera(look_at([2.0, 0.3 * i, 1.0], [0.0, 0.0, 0.0]), 40.0, 41.0, 31.5, 32.0, 64, 48)
                for i in range(3)]
        write_poses(tmp_path / "poses.txt", cams)
        back = read_poses(tmp_path / "poses.txt")
        assert len(back) == 3
        for a, b in zip(cams, back):
            np.testing.assert_array_equal(a.c2w, b.c2w)
            assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)

    def test_bad_pose_file(self, tmp_path):
        (tmp_path / "p.txt").write_text("1 2 3\n")
        with pytest.raises(RenderError):
            read_poses(tmp_path / "p.txt")
