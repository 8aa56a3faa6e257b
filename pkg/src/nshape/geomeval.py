"""Surface extraction, visibility culling and point-sample mesh metrics."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .render import Camera

DEFAULT_SAMPLES = 50_000
DEFAULT_TAU_FRAC = 0.02
DEFAULT_EPS_FRAC = 0.01


class MeshError(Exception):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float64
    faces: np.ndarray      # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def bbox_diagonal(self) -> float:
        if len(self.vertices) == 0:
            raise MeshError("empty mesh has no bounding box")
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def subset(self, keep) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces[np.asarray(keep)])


def marching_cubes(grid, iso: float = 0.0, spacing: float | Sequence[float] = 1.0,
                   origin=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Zero-level set of a sampled field indexed [ix, iy, iz]; negative inside.

    No crossing yields an empty mesh. Faces are oriented with outward normals.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise MeshError("grid must be 3-D with at least 2 samples per axis")
    spacing = tuple(np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)))
    if not (grid.min() < iso < grid.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(grid, level=iso, spacing=spacing,
                                                gradient_direction="descent", allow_degenerate=False)
    mesh = TriangleMesh(verts + np.asarray(origin, dtype=np.float64), faces)
    return mesh.subset(mesh.areas() > 0)


def grid_mesh(grid, lo: float = -1.0, hi: float = 1.0) -> TriangleMesh:
    """Marching cubes over a res^3 lattice covering [lo, hi]^3."""
    res = np.asarray(grid).shape[0]
    return marching_cubes(grid, 0.0, (hi - lo) / (res - 1), (lo, lo, lo))


# ---------------------------------------------------------------------------
# sampling and metrics


def sample_points(mesh: TriangleMesh, n: int = DEFAULT_SAMPLES, seed: int = 0,
                  return_faces: bool = False):
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.empty:
        raise MeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    a = mesh.areas()
    face = rng.choice(len(a), size=n, p=a / a.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    b = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    pts = np.einsum("ni,nij->nj", b, mesh.vertices[mesh.faces[face]])
    return (pts, face) if return_faces else pts


def nearest_sq(src, dst, k: int = 4) -> np.ndarray:
    """Squared distance from each src point to its nearest dst point.

    The tree proposes k candidates; distances are recomputed with the plain
    coordinate formula so results equal an exhaustive scan.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise MeshError("point sets must be non-empty")
    k = min(k, len(dst))
    d, idx = cKDTree(dst).query(src, k=k)
    if k == 1:
        idx = idx[:, None]
        d = d[:, None]
    d2 = ((src[:, None, :] - dst[idx]) ** 2).sum(-1)
    best = d2.min(1)
    # candidates beyond the k-th tree neighbor cannot beat it by more than rounding
    tight = d[:, -1] ** 2 <= best * (1 + 1e-9) + 1e-300
    if np.any(tight) and k < len(dst):
        rows = np.flatnonzero(tight)
        best[rows] = ((src[rows, None, :] - dst[None, :, :]) ** 2).sum(-1).min(1)
    return best


def chamfer(s1, s2) -> float:
    """Mean nearest squared distance s1->s2 plus s2->s1."""
    return float(nearest_sq(s1, s2).mean() + nearest_sq(s2, s1).mean())


def fscore(s1, s2, tau: float) -> tuple[float, float, float]:
    """(precision, recall, f) with s1 the reconstruction: a point counts if its distance < tau."""
    if tau <= 0:
        raise MeshError("tau must be positive")
    t2 = tau * tau
    precision = float(np.mean(nearest_sq(s1, s2) < t2))
    recall = float(np.mean(nearest_sq(s2, s1) < t2))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f


# ---------------------------------------------------------------------------
# visibility


def depth_map(mesh: TriangleMesh, camera: Camera, near: float = 1e-6, chunk: int = 2_000_000) -> np.ndarray:
    """Camera-space depth of the closest mesh hit through each pixel center (inf on miss)."""
    H, W = camera.height, camera.width
    depth = np.full(H * W, np.inf)
    if mesh.empty:
        return depth.reshape(H, W)
    V = mesh.vertices
    uv, z = camera.project(V)
    F = mesh.faces
    front = np.all(z[F] > near, axis=1)
    F = F[front]
    tu, tv = uv[F, 0], uv[F, 1]
    c0 = np.maximum(np.ceil(tu.min(1) - 0.5), 0).astype(np.int64)
    c1 = np.minimum(np.floor(tu.max(1) - 0.5), W - 1).astype(np.int64)
    r0 = np.maximum(np.ceil(tv.min(1) - 0.5), 0).astype(np.int64)
    r1 = np.minimum(np.floor(tv.max(1) - 0.5), H - 1).astype(np.int64)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    cnt = nc * nr
    hit = cnt > 0
    F, c0, r0, nc, cnt = F[hit], c0[hit], r0[hit], nc[hit], cnt[hit]
    # camera-space triangle planes
    Pc = camera.world_to_camera(V)
    start = 0
    while start < len(F):
        csum = np.cumsum(cnt[start:])
        stop = start + max(1, int(np.searchsorted(csum, chunk, side="right")))
        tri = np.repeat(np.arange(start, stop), cnt[start:stop])
        local = np.arange(len(tri)) - np.repeat(np.cumsum(cnt[start:stop]) - cnt[start:stop], cnt[start:stop])
        col = c0[tri] + local % nc[tri]
        row = r0[tri] + local // nc[tri]
        u = col + 0.5
        v = row + 0.5
        d = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=1)
        p0, p1, p2 = Pc[F[tri, 0]], Pc[F[tri, 1]], Pc[F[tri, 2]]
        e1, e2 = p1 - p0, p2 - p0
        # Moller-Trumbore with the ray origin at the camera center; d has unit z so t = depth
        pv = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pv)
        ok = np.abs(det) > 1e-18
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv_ = -p0
        a = np.einsum("ij,ij->i", tv_, pv) * inv
        qv = np.cross(tv_, e1)
        b = np.einsum("ij,ij->i", d, qv) * inv
        t = np.einsum("ij,ij->i", e2, qv) * inv
        ok &= (a >= -1e-12) & (b >= -1e-12) & (a + b <= 1 + 1e-12) & (t > near)
        np.minimum.at(depth, (row * W + col)[ok], t[ok])
        start = stop
    return depth.reshape(H, W)


def visible_vertices(vertices, cameras: Sequence[Camera], depths: Sequence[np.ndarray], eps: float) -> np.ndarray:
    vertices = np.asarray(vertices, dtype=np.float64)
    vis = np.zeros(len(vertices), dtype=bool)
    for cam, dm in zip(cameras, depths):
        uv, z = cam.project(vertices)
        inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        idx = np.flatnonzero(inside)
        col = np.floor(uv[idx, 0]).astype(np.int64)
        row = np.floor(uv[idx, 1]).astype(np.int64)
        ok = z[idx] <= dm[row, col] + eps
        vis[idx[ok]] = True
    return vis


def cull_mesh(mesh: TriangleMesh, cameras: Sequence[Camera], reference: TriangleMesh | None = None,
              eps: float | None = None, depths=None) -> TriangleMesh:
    """Keep triangles with at least one vertex visible from some camera.

    Reference depth comes from ray-casting `reference` (default: the mesh itself);
    eps defaults to 1% of the reference bounding-box diagonal.
    """
    if not cameras:
        raise MeshError("culling needs at least one camera")
    if mesh.empty:
        return mesh
    reference = reference if reference is not None else mesh
    if eps is None:
        eps = DEFAULT_EPS_FRAC * reference.bbox_diagonal()
    if depths is None:
        depths = [depth_map(reference, cam) for cam in cameras]
    vis = visible_vertices(mesh.vertices, cameras, depths, eps)
    return mesh.subset(np.any(vis[mesh.faces], axis=1))


@dataclass
class EvalReport:
    chamfer: float
    precision: float
    recall: float
    fscore: float
    tau: float
    samples: int
    seed: int

    HEADER = "chamfer,precision,recall,fscore,tau,samples,seed"

    def csv(self) -> str:
        return (f"{self.HEADER}\n{self.chamfer!r},{self.precision!r},{self.recall!r},"
                f"{self.fscore!r},{self.tau!r},{self.samples},{self.seed}\n")


def evaluate_meshes(pred: TriangleMesh, gt: TriangleMesh, cameras: Sequence[Camera] | None = None,
                    samples: int = DEFAULT_SAMPLES, tau_frac: float = DEFAULT_TAU_FRAC,
                    seed: int = 0, eps_frac: float = DEFAULT_EPS_FRAC) -> EvalReport:
    """Cull both meshes against ground-truth depth, sample, and score."""
    if gt.empty:
        raise MeshError("ground-truth mesh is empty")
    diag = gt.bbox_diagonal()
    tau = tau_frac * diag
    if cameras:
        depths = [depth_map(gt, cam) for cam in cameras]
        pred = cull_mesh(pred, cameras, gt, eps_frac * diag, depths)
        gt = cull_mesh(gt, cameras, gt, eps_frac * diag, depths)
    if pred.empty:
        raise MeshError("predicted mesh is empty after culling")
    sp = sample_points(pred, samples, seed)
    sg = sample_points(gt, samples, seed)
    cd = chamfer(sp, sg)
    p, r, f = fscore(sp, sg, tau)
    return EvalReport(cd, p, r, f, tau, samples, seed)


# ---------------------------------------------------------------------------
# PLY


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, mesh: TriangleMesh, binary: bool = True) -> None:
    V, F = mesh.vertices, mesh.faces
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {len(V)}", "property double x", "property double y", "property double z",
            f"element face {len(F)}", "property list uchar int vertex_indices", "end_header"]
    header = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        vb = np.ascontiguousarray(V, dtype="<f8").tobytes()
        fr = np.zeros(len(F), dtype=[("n", "u1"), ("i", "<i4", (3,))])
        fr["n"] = 3
        fr["i"] = F
        Path(path).write_bytes(header + vb + fr.tobytes())
    else:
        lines = [" ".join(repr(float(c)) for c in v) for v in V]
        lines += ["3 " + " ".join(str(int(i)) for i in f) for f in F]
        Path(path).write_bytes(header + ("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def read_ply(path) -> TriangleMesh:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise MeshError(f"cannot read mesh {path}: {exc}") from exc
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError(f"{path}: not a PLY file")
    nl = data.index(b"\n", end)
    header = data[:nl].decode("ascii", "replace").splitlines()
    body = data[nl + 1:]
    fmt = None
    elements: list[list] = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MeshError(f"{path}: property before element")
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[2], tok[3], tok[4]))
            else:
                elements[-1][2].append(("scalar", tok[1], tok[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshError(f"{path}: unsupported PLY format {fmt!r}")
    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    try:
        if fmt == "ascii":
            toks = body.split()
            pos = 0
            for name, count, props in elements:
                rows = []
                for _ in range(count):
                    row = []
                    for p in props:
                        if p[0] == "list":
                            n = int(toks[pos])
                            pos += 1
                            row.append([float(t) for t in toks[pos:pos + n]])
                            pos += n
                        else:
                            row.append(float(toks[pos]))
                            pos += 1
                    rows.append(row)
                verts, faces = _take_element(name, props, rows, verts, faces)
        else:
            pos = 0
            for name, count, props in elements:
                if all(p[0] == "scalar" for p in props):
                    dt = np.dtype([(p[2], "<" + _PLY_TYPES[p[1]]) for p in props])
                    arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                    pos += dt.itemsize * count
                    if name == "vertex":
                        verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                    continue
                if len(props) == 1 and props[0][0] == "list":
                    _, ct, it, _ = props[0]
                    cdt, idt = np.dtype("<" + _PLY_TYPES[ct]), np.dtype("<" + _PLY_TYPES[it])
                    probe = np.frombuffer(body, dtype=cdt, count=1, offset=pos) if count else [3]
                    n = int(probe[0])
                    dt = np.dtype([("n", cdt), ("i", idt, (n,))])
                    arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                    if count and np.any(arr["n"] != n):
                        raise MeshError(f"{path}: mixed polygon sizes are not supported")
                    pos += dt.itemsize * count
                    if name == "face":
                        if n != 3:
                            raise MeshError(f"{path}: only triangle faces are supported")
                        faces = arr["i"].astype(np.int64)
                    continue
                raise MeshError(f"{path}: unsupported binary element layout for {name!r}")
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}: malformed or truncated PLY body ({exc})") from exc
    return TriangleMesh(verts, faces)


def _take_element(name, props, rows, verts, faces):
    if name == "vertex":
        names = [p[2] for p in props]
        idx = [names.index(c) for c in "xyz"]
        verts = np.array([[r[i] for i in idx] for r in rows], dtype=np.float64).reshape(-1, 3)
    elif name == "face":
        li = [i for i, p in enumerate(props) if p[0] == "list"][0]
        polys = [r[li] for r in rows]
        if any(len(p) != 3 for p in polys):
            raise MeshError("only triangle faces are supported")
        faces = np.array(polys, dtype=np.int64).reshape(-1, 3)
    return verts, faces
