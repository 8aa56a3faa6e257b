from __future__ import annotations

import math

import numpy as np
import pytest

from nshape.geomeval import chamfer, read_ply, sample_points
from nshape.pairing import load_feature_map
from nshape.render import Camera, look_at, read_poses
from nshape.scenegen import (
    AnalyticScene,
    Dataset,
    Primitive,
    SceneError,
    embeddings,
    generate_dataset,
    make_features,
    make_scene,
    perturb_normals,
    read_ppm,
    render_scene,
    scene_cameras,
    scene_normal,
    scene_sdf,
    write_ppm,
)

A = np.asarray


def _sphere(r=0.5, center=(0.0, 0.0, 0.0), obj_id=1):
    return Primitive("sphere", A(center, dtype=float), A([r]), obj_id, A([0.8, 0.5, 0.3]))


def _box(center, half, obj_id):
    return Primitive("box", A(center, dtype=float), A(half, dtype=float), obj_id, A([0.3, 0.5, 0.8]))


class TestSceneSdf:
    def test_center_of_unit_sphere(self):
        d, i = scene_sdf(AnalyticScene([_sphere(1.0, obj_id=4)]), [0.0, 0.0, 0.0])
        assert (d, i) == (-1.0, 4)

    def test_surface_point(self):
        d, i = scene_sdf(AnalyticScene([_sphere()]), [0.5, 0.0, 0.0])
        assert d == 0.0 and i == 1

    def test_min_union(self):
        sc = AnalyticScene([_sphere(), _box([0.8, 0.8, 0.0], [0.1, 0.1, 0.1], 2)])
        d, i = scene_sdf(sc, [0.8, 0.95, 0.0])
        assert i == 2 and d == pytest.approx(0.05)

    def test_box_inside(self):
        d, _ = scene_sdf(AnalyticScene([_box([0, 0, 0], [0.2, 0.3, 0.4], 1)]), [0.1, 0.0, 0.0])
        assert d == pytest.approx(-0.1)

    @pytest.mark.parametrize("prim", [_sphere(0.4, (0.1, -0.1, 0.0)), _box([0.0, 0.1, 0.0], [0.3, 0.2, 0.25], 1)])
    def test_unit_gradient(self, prim):
        sc = AnalyticScene([prim])
        rng = np.random.default_rng(0)
        x = rng.uniform(-0.9, 0.9, size=(400, 3))
        h = 1e-6
        g = np.stack([(scene_sdf(sc, x + h * e)[0] - scene_sdf(sc, x - h * e)[0]) / (2 * h) for e in np.eye(3)], 1)
        gn = np.linalg.norm(g, axis=1)
        # away from the medial axis (box interior ridges) the field is a distance
        if prim.kind == "box":
            q = np.sort(np.abs(x - prim.center) - prim.size, axis=1)
            clear = (q[:, 2] > 0) | (q[:, 2] - q[:, 1] > 1e-3)
        else:
            clear = np.linalg.norm(x - prim.center, axis=1) > 1e-3
        assert np.all(np.abs(gn[clear] - 1) < 1e-3)
        np.testing.assert_allclose(scene_normal(sc, x[clear]), g[clear] / gn[clear, None], atol=1e-3)

    def test_ids_unique(self):
        with pytest.raises(SceneError):
            AnalyticScene([_sphere(obj_id=1), _box([0, 0, 0], [0.1] * 3, 1)])

    def test_unknown_scene(self):
        with pytest.raises(SceneError):
            make_scene("teapot")


def _center_camera(size=33, dist=2.0):
    f = 0.5 * size / math.tan(math.radians(25))
    return Camera(look_at([0.3, 0.4, -dist], [0.0, 0.0, 0.0]), f, f, size / 2, size / 2, size, size)


class TestRender:
    def test_center_pixel_hits_sphere(self):
        sc = AnalyticScene([_sphere(obj_id=3)])
        cam = _center_camera()
        out = render_scene(sc, cam)
        c = cam.height // 2
        assert out.ids[c, c] == 3
        eye = cam.c2w[:3, 3]
        assert out.depth[c, c] == pytest.approx(np.linalg.norm(eye) - 0.5, abs=1e-3)
        # normal faces the camera: angle to -view direction below one degree
        cosang = float(out.normal[c, c] @ (-cam.forward))
        assert math.degrees(math.acos(min(1.0, cosang))) < 1.0

    def test_depth_against_analytic_intersection(self):
        sc = AnalyticScene([_sphere()])
        cam = _center_camera(size=17)
        out = render_scene(sc, cam)
        from nshape.render import make_rays, pixel_centers
        o, d = make_rays(cam, pixel_centers(cam, np.arange(cam.npix)))
        b = np.sum(o * d, axis=1)
        disc = b * b - (np.sum(o * o, axis=1) - 0.25)
        hit = disc > 1e-3
        t = -b[hit] - np.sqrt(disc[hit])
        want = t * (d[hit] @ cam.forward)
        np.testing.assert_allclose(out.depth.reshape(-1)[hit], want, atol=1e-3)

    def test_background(self):
        sc = AnalyticScene([_sphere(0.1)])
        out = render_scene(sc, _center_camera())
        assert out.ids[0, 0] == 0 and np.all(out.rgb[0, 0] == 0) and math.isinf(out.depth[0, 0])

    def test_depth_and_ids_consistent(self):
        sc = make_scene("sphere+box")
        for cam in scene_cameras("sphere+box", 3, 20):
            out = render_scene(sc, cam)
            assert np.all(out.ids[np.isfinite(out.depth)] > 0)
            assert np.all(out.ids[~np.isfinite(out.depth)] == 0)
            assert np.all((out.rgb >= 0) & (out.rgb <= 1))


class TestFeatures:
    def test_noiseless(self):
        sc = make_scene("sphere+box")
        out = render_scene(sc, scene_cameras("sphere+box", 1, 24)[0])
        sem, geo = make_features(out, sc.ids, 16, 0.0, 0.0, seed=0)
        ids = out.ids.reshape(-1)
        s = sem.rows()
        for i in sc.ids:
            rows = s[ids == i]
            np.testing.assert_allclose(rows @ rows[0], 1.0, atol=1e-6)
        fg = ids > 0
        np.testing.assert_allclose(geo.rows()[fg], out.normal.reshape(-1, 3)[fg], atol=1e-6)

    def test_geometric_noise_bound(self):
        rng = np.random.default_rng(0)
        n = np.tile([0.0, 0.0, 1.0], (20000, 1))
        a = perturb_normals(n, 5.0, rng)
        b = perturb_normals(n, 5.0, rng)
        assert np.mean(np.sum(a * b, axis=1) >= math.cos(math.radians(20))) >= 0.99

    def test_embedding_separation(self):
        below = [float(embeddings([1, 2], 16, s)[1] @ embeddings([1, 2], 16, s)[2]) < 0.65 for s in range(500)]
        assert np.mean(below) >= 0.95

    def test_dimension_must_cover_ids(self):
        sc = make_scene("room")
        out = render_scene(sc, scene_cameras("room", 1, 8)[0])
        with pytest.raises(SceneError):
            make_features(out, sc.ids, sem_dim=3)


class TestDataset:
    def test_inventory_and_loading(self, tiny_dataset):
        root = tiny_dataset.root
        for i in range(4):
            assert (root / "images" / f"{i:03d}.ppm").is_file()
            for kind in ("sem", "geo"):
                assert (root / "feats" / f"{i:03d}.{kind}.nfeat").is_file()
        assert len(read_poses(root / "poses.txt")) == 4
        assert (root / "gt_mesh.ply").is_file()
        listed = [ln.split("  ")[1] for ln in (root / "manifest.txt").read_text().splitlines()]
        assert "gt_mesh.ply" in listed and "poses.txt" in listed and len(listed) == 4 * 3 + 3
        assert len(tiny_dataset.images) == 4 and tiny_dataset.images[0].shape == (16, 16, 3)

    def test_same_seed_same_checksums(self, tmp_path):
        a = generate_dataset("sphere", tmp_path / "a", views=2, size=8, seed=3, mesh_res=24)
        b = generate_dataset("sphere", tmp_path / "b", views=2, size=8, seed=3, mesh_res=24)
        assert (a / "manifest.txt").read_text() == (b / "manifest.txt").read_text()
        c = generate_dataset("sphere", tmp_path / "c", views=2, size=8, seed=4, mesh_res=24)
        assert (a / "manifest.txt").read_text() != (c / "manifest.txt").read_text()

    def test_ground_truth_mesh_accuracy(self, tmp_path):
        root = generate_dataset("sphere", tmp_path / "s", views=1, size=8, mesh_res=64)
        mesh = read_ply(root / "gt_mesh.ply")
        rng = np.random.default_rng(0)
        u = rng.normal(size=(50000, 3))
        ref = 0.5 * u / np.linalg.norm(u, axis=1, keepdims=True)
        h = 2.0 / 63
        assert chamfer(sample_points(mesh, 50000, 0), ref) < (2 * h) ** 2

    def test_features_round_trip(self, tmp_path):
        sc = make_scene("sphere")
        out = render_scene(sc, scene_cameras("sphere", 1, 8)[0])
        sem, geo = make_features(out, sc.ids, 8, seed=1)
        from nshape.pairing import save_feature_map
        for fm, name in ((sem, "s"), (geo, "g")):
            save_feature_map(tmp_path / name, fm)
            assert load_feature_map(tmp_path / name).data.tobytes() == fm.data.tobytes()

    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)) / 255.0
        write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)

    def test_not_a_dataset(self, tmp_path):
        with pytest.raises(SceneError):
            Dataset.load(tmp_path)
