from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from nshape.geomeval import (
    EvalReport,
    MeshError,
    TriangleMesh,
    chamfer,
    cull_mesh,
    depth_map,
    evaluate_meshes,
    fscore,
    grid_mesh,
    marching_cubes,
    nearest_sq,
    read_ply,
    sample_points,
    write_ply,
)
from nshape.render import Camera, look_at

from oracles import brute_chamfer, brute_fscore, brute_nearest_sq, ray_triangle_hits, subdivided_box


def _sphere_grid(res, r=0.5):
    ax = np.linspace(-1, 1, res)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.sqrt(X ** 2 + Y ** 2 + Z ** 2) - r


def _front_camera(size=64, dist=3.0):
    f = 0.5 * size / math.tan(math.radians(25))
    return Camera(look_at([0.0, 0.0, -dist], [0.0, 0.0, 0.0]), f, f, size / 2, size / 2, size, size)


class TestMarchingCubes:
    def test_sphere_radii(self):
        h = 2.0 / 63
        m = grid_mesh(_sphere_grid(64))
        r = np.linalg.norm(m.vertices, axis=1)
        assert np.max(np.abs(r - 0.5)) < 2 * h

    def test_outward_orientation(self):
        m = grid_mesh(_sphere_grid(32))
        v = m.vertices[m.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        assert np.all(np.sum(n * v.mean(1), axis=1) > 0)

    def test_constant_grid_empty(self):
        assert marching_cubes(np.ones((8, 8, 8))).empty

    def test_plane(self):
        ax = np.linspace(-1, 1, 21)
        X = np.meshgrid(ax, ax, ax, indexing="ij")[0]
        m = grid_mesh(X + 0.013)
        assert not m.empty
        # interpolation runs in single precision
        assert np.max(np.abs(m.vertices[:, 0] + 0.013)) < 1e-6

    def test_too_small(self):
        with pytest.raises(MeshError):
            marching_cubes(np.zeros((1, 4, 4)))

    def test_no_degenerate_triangles(self):
        assert np.all(grid_mesh(_sphere_grid(24)).areas() > 0)


class TestSampling:
    def test_single_triangle_containment(self):
        tri = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        p = sample_points(TriangleMesh(tri, [[0, 1, 2]]), 5000, seed=1)
        assert np.all(p[:, 2] == 0) and np.all(p[:, 0] >= -1e-12) and np.all(p[:, 1] >= -1e-12)
        assert np.all(p[:, 0] + p[:, 1] / 2 <= 1 + 1e-12)

    def test_area_weighting(self):
        v = np.array([[0.0, 0, 0], [3, 0, 0], [0, 1, 0], [0, 0, 5], [1, 0, 5], [0, 1, 5]])
        _, face = sample_points(TriangleMesh(v, [[0, 1, 2], [3, 4, 5]]), 40000, seed=0, return_faces=True)
        sd = math.sqrt(40000 * 0.75 * 0.25)
        assert abs(np.sum(face == 0) - 30000) < 3 * sd

    def test_deterministic(self):
        m = grid_mesh(_sphere_grid(16))
        np.testing.assert_array_equal(sample_points(m, 100, 3), sample_points(m, 100, 3))

    def test_empty(self):
        with pytest.raises(MeshError):
            sample_points(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), 10)


class TestMetrics:
    def test_identity(self, rng):
        s = rng.normal(size=(200, 3))
        assert chamfer(s, s) == 0.0
        assert fscore(s, s, 0.01) == (1.0, 1.0, 1.0)

    def test_singletons(self):
        assert chamfer([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]) == 2.0

    def test_total_miss(self):
        assert fscore(np.zeros((3, 3)), np.ones((4, 3)), 0.5) == (0.0, 0.0, 0.0)

    def test_half_overlap(self):
        s1 = np.array([[0.0, 0, 0], [10.0, 0, 0]])
        s2 = np.array([[0.0, 0, 0], [-10.0, 0, 0]])
        assert fscore(s1, s2, 0.1) == (0.5, 0.5, 0.5)

    def test_matches_brute_force(self, rng):
        for _ in range(20):
            n1, n2 = rng.integers(1, 200, size=2)
            s1, s2 = rng.normal(size=(n1, 3)), rng.normal(size=(n2, 3))
            np.testing.assert_array_equal(nearest_sq(s1, s2), brute_nearest_sq(s1, s2))
            assert chamfer(s1, s2) == brute_chamfer(s1, s2)
            assert fscore(s1, s2, 0.3) == brute_fscore(s1, s2, 0.3)

    def test_clustered_duplicates_match_brute_force(self, rng):
        # many equidistant candidates stress the tree's candidate cutoff
        s2 = np.round(rng.normal(size=(300, 3)), 1)
        s1 = np.round(rng.normal(size=(100, 3)), 1) + 0.05
        np.testing.assert_array_equal(nearest_sq(s1, s2), brute_nearest_sq(s1, s2))

    def test_symmetric_and_scaling(self, rng):
        s1, s2 = rng.normal(size=(80, 3)), rng.normal(size=(60, 3))
        assert chamfer(s1, s2) == chamfer(s2, s1)
        assert chamfer(3 * s1, 3 * s2) == pytest.approx(9 * chamfer(s1, s2), rel=1e-12)

    def test_fscore_rigid_invariance(self, rng):
        s1, s2 = rng.normal(size=(150, 3)), rng.normal(size=(120, 3))
        R = Rotation.random(random_state=4).as_matrix()
        t = np.array([0.3, -2.0, 5.0])
        assert fscore(s1 @ R.T + t, s2 @ R.T + t, 0.4) == fscore(s1, s2, 0.4)

    def test_errors(self):
        with pytest.raises(MeshError):
            chamfer(np.zeros((0, 3)), np.zeros((1, 3)))
        with pytest.raises(MeshError):
            fscore(np.zeros((1, 3)), np.zeros((1, 3)), 0.0)


class TestCulling:
    def test_depth_map_matches_ray_cast(self):
        v, f, _ = subdivided_box(n=2)
        mesh = TriangleMesh(v, f)
        cam = _front_camera(size=12)
        dm = depth_map(mesh, cam)
        tri = v[f]
        from nshape.render import make_rays, pixel_centers
        o, d = make_rays(cam, pixel_centers(cam, np.arange(cam.npix)))
        for k in range(cam.npix):
            t = ray_triangle_hits(o[k], d[k], tri)
            want = t * float(d[k] @ cam.forward) if math.isfinite(t) else math.inf
            assert dm.reshape(-1)[k] == pytest.approx(want, rel=1e-9, abs=1e-12)

    def test_behind_camera_removed(self):
        cam = _front_camera()
        tri = TriangleMesh([[0.0, 0, -4], [0.1, 0, -4], [0, 0.1, -4]], [[0, 1, 2]])
        assert cull_mesh(tri, [cam], reference=tri, eps=0.01).empty

    def test_facing_kept(self):
        cam = _front_camera()
        tri = TriangleMesh([[0.0, 0, 0], [0.1, 0, 0], [0, 0.1, 0]], [[0, 1, 2]])
        assert len(cull_mesh(tri, [cam]).faces) == 1

    def test_box_back_face_removed(self):
        v, f, lab = subdivided_box(n=6)
        box = TriangleMesh(v, f)
        kept = cull_mesh(box, [_front_camera()])
        kept_set = {tuple(t) for t in kept.faces}
        front = [tuple(t) for t, lb in zip(f, lab) if lb == "-z"]
        back = [tuple(t) for t, lb in zip(f, lab) if lb == "+z"]
        assert all(t in kept_set for t in front)
        assert not any(t in kept_set for t in back)

    def test_subset_and_needs_camera(self):
        m = grid_mesh(_sphere_grid(16))
        kept = cull_mesh(m, [_front_camera()])
        faces = {tuple(t) for t in m.faces}
        assert all(tuple(t) in faces for t in kept.faces)
        with pytest.raises(MeshError):
            cull_mesh(m, [])


class TestEvaluateAndPly:
    def test_report_csv(self):
        m = grid_mesh(_sphere_grid(24))
        rep = evaluate_meshes(m, m, samples=2000)
        assert isinstance(rep, EvalReport)
        assert rep.chamfer == 0.0 and rep.fscore == 1.0
        assert rep.csv().splitlines()[0] == "chamfer,precision,recall,fscore,tau,samples,seed"
        assert rep.tau == pytest.approx(0.02 * m.bbox_diagonal())

    @pytest.mark.parametrize("binary", [True, False])
    def test_ply_round_trip(self, tmp_path, binary):
        m = grid_mesh(_sphere_grid(12))
        write_ply(tmp_path / "m.ply", m, binary=binary)
        back = read_ply(tmp_path / "m.ply")
        np.testing.assert_array_equal(back.faces, m.faces)
        if binary:
            np.testing.assert_array_equal(back.vertices, m.vertices)
        else:
            np.testing.assert_allclose(back.vertices, m.vertices, rtol=1e-15, atol=1e-15)

    def test_ply_bad_file(self, tmp_path):
        (tmp_path / "x.ply").write_text("not a ply\n")
        with pytest.raises(MeshError):
            read_ply(tmp_path / "x.ply")

    def test_ply_truncated(self, tmp_path):
        write_ply(tmp_path / "m.ply", grid_mesh(_sphere_grid(12)))
        raw = (tmp_path / "m.ply").read_bytes()
        (tmp_path / "m.ply").write_bytes(raw[:-20])
        with pytest.raises(MeshError):
            read_ply(tmp_path / "m.ply")
