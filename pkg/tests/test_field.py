from __future__ import annotations

import numpy as np
import pytest

import nshape.autodiff as ad
from nshape.field import (
    CheckpointError,
    Field,
    FieldConfig,
    FieldError,
    NonFiniteError,
    alpha_from_sdf,
    init_params,
    param_shapes,
    positional_encoding,
    read_checkpoint,
    validate_theta_d,
    write_checkpoint,
)

from conftest import small_field


@pytest.fixture(scope="module")
def field():
    return Field(FieldConfig(), seed=0)


class TestSphereInit:
    def test_origin_is_minus_radius(self, field):
        assert field.sdf(np.zeros(3)) == pytest.approx(-0.5, abs=1e-9)

    @pytest.mark.parametrize("seed", [0, 1, 7])
    def test_zero_on_init_sphere(self, seed):
        f = Field(FieldConfig(), seed=seed)
        rng = np.random.default_rng(seed)
        d = rng.normal(size=(500, 3))
        x = 0.5 * d / np.linalg.norm(d, axis=1, keepdims=True)
        assert np.max(np.abs(f.sdf(x))) < 0.1

    def test_sign_inside_outside(self, field):
        assert field.sdf(np.array([0.1, 0.0, 0.0])) < 0 < field.sdf(np.array([0.9, 0.0, 0.0]))

    def test_normals_point_outward(self, field):
        rng = np.random.default_rng(3)
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        n = field.normal(0.5 * d)
        assert np.all(np.sum(n * d, axis=1) > 0.9)

    def test_param_shapes_cover_init(self):
        cfg = small_field()
        p = init_params(cfg, 0)
        assert {k: v.shape for k, v in p.items()} == {k: tuple(s) for k, s in param_shapes(cfg).items()}


class TestNormal:
    def test_linear_field(self):
        x = ad.slot("x", (4, 3))
        f = ad.sum(ad.slice_axis(x, 1, 0, 1))
        n = ad.evaluate(ad.grad(f, x), {"x": np.random.default_rng(0).normal(size=(4, 3))})
        np.testing.assert_array_equal(n, np.tile([1.0, 0.0, 0.0], (4, 1)))

    def test_quadratic_field(self):
        x = ad.slot("x", (1, 3))
        n = ad.evaluate(ad.grad(0.5 * ad.sum(ad.square(x)), x), {"x": np.array([[1.0, 2.0, 3.0]])})
        np.testing.assert_allclose(n, [[1.0, 2.0, 3.0]])

    def test_mlp_normal_vs_central_difference(self):
        f = Field(small_field(), seed=2)
        rng = np.random.default_rng(5)
        x = rng.uniform(-0.8, 0.8, size=(100, 3))
        n = f.normal(x)
        h = 1e-6
        fd = np.stack([(f.sdf(x + h * e) - f.sdf(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
        err = np.linalg.norm(n - fd, axis=1) / np.linalg.norm(fd, axis=1)
        assert err.max() < 1e-5


class TestColor:
    def test_range_and_determinism(self, field):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(50, 3))
        v = rng.normal(size=(50, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        c = field.color(x, v)
        assert np.all((c >= 0) & (c <= 1))
        np.testing.assert_array_equal(c, field.color(x, v))

    def test_direction_dependence(self, field):
        rng = np.random.default_rng(1)
        differs = 0
        for _ in range(10):
            x = rng.uniform(-1, 1, size=3)
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            differs += not np.allclose(field.color(x, v), field.color(x, -v))
        assert differs >= 1

    def test_non_unit_direction(self, field):
        with pytest.raises(FieldError):
            field.color(np.zeros(3), np.array([1.0, 1.0, 0.0]))


class TestAlpha:
    def test_equal_sdf_zero(self):
        assert alpha_from_sdf(0.3, 0.3, 50.0) == 0.0

    def test_sharp_crossing_near_one(self):
        assert alpha_from_sdf(0.1, -0.1, 1e3) > 0.99

    def test_receding_clamped(self):
        assert alpha_from_sdf(-0.2, 0.1, 20.0) == 0.0

    def test_monotone_in_next(self):
        f_next = np.linspace(-1, 1, 201)
        a = alpha_from_sdf(0.2, f_next, 30.0)
        assert np.all(np.diff(a) <= 0)
        assert np.all((a >= 0) & (a <= 1))

    def test_bad_sharpness(self):
        with pytest.raises(FieldError):
            alpha_from_sdf(0.1, 0.0, 0.0)


class TestEncodingAndSubset:
    def test_encoding_layout(self):
        x = ad.slot("x", (2, 3))
        xv = np.array([[0.1, -0.2, 0.3], [0.5, 0.0, -0.7]])
        e = ad.evaluate(positional_encoding(x, 2), {"x": xv})
        np.testing.assert_allclose(e, np.concatenate([xv, np.sin(xv), np.cos(xv), np.sin(2 * xv), np.cos(2 * xv)], 1))

    def test_encoding_distinguishes_inputs(self):
        rng = np.random.default_rng(0)
        xv = rng.uniform(-1, 1, size=(200, 3))
        x = ad.slot("x", xv.shape)
        e = ad.evaluate(positional_encoding(x, 6), {"x": xv})
        d = np.linalg.norm(e[:, None] - e[None], axis=-1)
        assert np.all(d[~np.eye(200, dtype=bool)] > 0)

    def test_theta_d_validation(self):
        cfg = FieldConfig()
        assert validate_theta_d(cfg, ["sdf.head.weight"]) == ("sdf.head.weight",)
        with pytest.raises(FieldError):
            validate_theta_d(cfg, [])
        with pytest.raises(FieldError):
            validate_theta_d(cfg, ["color.out.weight"])
        with pytest.raises(FieldError):
            validate_theta_d(cfg, ["sdf.l9.weight"])

    def test_non_finite_reports_layer(self):
        cfg = small_field()
        p = init_params(cfg, 0)
        p["sdf.l1.weight"] = p["sdf.l1.weight"].copy()
        p["sdf.l1.weight"][0, 0] = np.nan
        with pytest.raises(NonFiniteError) as info:
            Field(cfg, p).sdf(np.zeros((2, 3)))
        assert info.value.layer == 1


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, field):
        path = tmp_path / "f.nshape"
        field.save(path)
        g = Field.load(path)
        x = np.random.default_rng(0).uniform(-1, 1, size=(20, 3))
        np.testing.assert_array_equal(field.sdf(x), g.sdf(x))
        assert g.params["log_s"].shape == ()

    def test_save_load_save_identical_bytes(self, tmp_path, field):
        a, b = tmp_path / "a", tmp_path / "b"
        field.save(a)
        Field.load(a).save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_crc_mismatch(self, tmp_path):
        path = tmp_path / "c"
        write_checkpoint(path, {"w": np.arange(4.0)})
        raw = bytearray(path.read_bytes())
        raw[-10] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="CRC"):
            read_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v"
        write_checkpoint(path, {"w": np.arange(4.0)})
        raw = bytearray(path.read_bytes())
        raw[6:8] = b"99"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t"
        path.write_bytes(b"NSHA")
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_scalar_shapes_survive(self, tmp_path):
        path = tmp_path / "s"
        write_checkpoint(path, {"a": np.array(2.5), "b": np.ones((2, 0, 3))})
        e = read_checkpoint(path)
        assert e["a"].shape == () and e["a"] == 2.5
        assert e["b"].shape == (2, 0, 3)
