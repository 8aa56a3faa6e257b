"""Synthetic analytic scenes, posed renders, feature maps and dataset writing."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geomeval import grid_mesh, write_ply
from .pairing import FeatureMap, save_feature_map
from .render import Camera, look_at, make_rays, pixel_centers, write_poses

TRACE_TOL = 1e-5
TRACE_STEPS = 256
AMBIENT = 0.1


class SceneError(Exception):
    pass


@dataclass
class Primitive:
    kind: str                 # "sphere" | "box"
    center: np.ndarray
    size: np.ndarray          # radius (1,) or half extents (3,)
    obj_id: int
    albedo: np.ndarray
    inverted: bool = False    # inside-out: the solid is everything outside

    def sdf(self, x: np.ndarray) -> np.ndarray:
        p = x - self.center
        if self.kind == "sphere":
            d = np.linalg.norm(p, axis=-1) - self.size[0]
        else:
            q = np.abs(p) - self.size
            d = np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(-1), 0.0)
        return -d if self.inverted else d

    def normal(self, x: np.ndarray) -> np.ndarray:
        p = x - self.center
        if self.kind == "sphere":
            n = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-300)
        else:
            q = np.abs(p) - self.size
            out = np.maximum(q, 0.0)
            no = np.linalg.norm(out, axis=-1, keepdims=True)
            inside = np.zeros_like(p)
            k = np.argmax(q, axis=-1)
            inside[np.arange(len(p)), k] = 1.0
            n = np.where(no > 0, out / np.maximum(no, 1e-300), inside) * np.sign(p + (p == 0))
        return -n if self.inverted else n


@dataclass
class AnalyticScene:
    primitives: list[Primitive]
    light: np.ndarray = field(default_factory=lambda: np.array([0.4, -0.8, -0.45]))

    def __post_init__(self):
        self.light = np.asarray(self.light, dtype=np.float64)
        self.light /= np.linalg.norm(self.light)
        ids = [p.obj_id for p in self.primitives]
        if len(set(ids)) != len(ids) or 0 in ids:
            raise SceneError("object ids must be unique and non-zero")

    @property
    def ids(self) -> list[int]:
        return [p.obj_id for p in self.primitives]


def scene_sdf(scene: AnalyticScene, x) -> tuple[np.ndarray, np.ndarray]:
    """Min-union distance and the id of the closest primitive."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    d = np.stack([p.sdf(x) for p in scene.primitives])
    k = np.argmin(d, axis=0)
    dist = d[k, np.arange(len(x))]
    ids = np.array(scene.ids)[k]
    return (dist[0], ids[0]) if single else (dist, ids)


def scene_normal(scene: AnalyticScene, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = np.stack([p.sdf(x) for p in scene.primitives])
    k = np.argmin(d, axis=0)
    out = np.zeros_like(x)
    for j, prim in enumerate(scene.primitives):
        m = k == j
        if np.any(m):
            out[m] = prim.normal(x[m])
    return out


def make_scene(name: str) -> AnalyticScene:
    """Built-in toy scenes: 'sphere', 'sphere+box', 'room'."""
    A = np.asarray
    if name == "sphere":
        return AnalyticScene([Primitive("sphere", A([0.0, 0.0, 0.0]), A([0.5]), 1, A([0.8, 0.5, 0.3]))])
    if name == "sphere+box":
        return AnalyticScene([
            Primitive("sphere", A([-0.3, 0.0, 0.05]), A([0.35]), 1, A([0.85, 0.45, 0.3])),
            Primitive("box", A([0.35, 0.05, -0.05]), A([0.22, 0.3, 0.22]), 2, A([0.3, 0.55, 0.85])),
        ])
    if name == "room":
        return AnalyticScene([
            Primitive("box", A([0.0, 0.0, 0.0]), A([0.9, 0.9, 0.9]), 1, A([0.75, 0.75, 0.7]), inverted=True),
            Primitive("sphere", A([-0.35, 0.55, 0.2]), A([0.3]), 2, A([0.85, 0.4, 0.3])),
            Primitive("box", A([0.4, 0.6, -0.3]), A([0.2, 0.3, 0.2]), 3, A([0.3, 0.5, 0.85])),
        ])
    raise SceneError(f"unknown scene {name!r}; choose sphere, sphere+box or room")


SCENES = ("sphere", "sphere+box", "room")


# ---------------------------------------------------------------------------
# cameras


def default_intrinsics(size: int, fov_deg: float = 50.0) -> tuple[float, float, float, float]:
    f = 0.5 * size / math.tan(math.radians(fov_deg) / 2)
    return f, f, size / 2, size / 2


def ring_cameras(n: int, size: int = 64, radius: float = 2.0, elevation_deg: float = 25.0,
                 target=(0.0, 0.0, 0.0), fov_deg: float = 50.0) -> list[Camera]:
    """Views evenly spaced in azimuth, looking at `target`; world +y is up."""
    fx, fy, cx, cy = default_intrinsics(size, fov_deg)
    el = math.radians(elevation_deg)
    cams = []
    for i in range(n):
        az = 2 * math.pi * i / n
        eye = np.array([radius * math.cos(el) * math.sin(az), radius * math.sin(el),
                        -radius * math.cos(el) * math.cos(az)]) + np.asarray(target)
        cams.append(Camera(look_at(eye, target), fx, fy, cx, cy, size, size))
    return cams


def hemisphere_cameras(n: int, size: int = 64, radius: float = 2.0, fov_deg: float = 50.0) -> list[Camera]:
    fx, fy, cx, cy = default_intrinsics(size, fov_deg)
    cams = []
    golden = math.pi * (3 - math.sqrt(5))
    for i in range(n):
        y = 0.15 + 0.8 * (i + 0.5) / n
        r = math.sqrt(1 - y * y)
        eye = radius * np.array([r * math.cos(golden * i), y, r * math.sin(golden * i)])
        cams.append(Camera(look_at(eye, (0.0, 0.0, 0.0)), fx, fy, cx, cy, size, size))
    return cams


def scene_cameras(scene_name: str, n: int, size: int, layout: str = "ring") -> list[Camera]:
    if scene_name == "room":
        # inward-facing capture from inside the room, looking across at the far side
        fx, fy, cx, cy = default_intrinsics(size, 70.0)
        cams = []
        for i in range(n):
            az = 2 * math.pi * i / n
            eye = np.array([0.55 * math.sin(az), 0.1, -0.55 * math.cos(az)])
            target = np.array([-0.3 * math.sin(az), 0.35, 0.3 * math.cos(az)])
            cams.append(Camera(look_at(eye, target), fx, fy, cx, cy, size, size))
        return cams
    if layout == "ring":
        return ring_cameras(n, size)
    if layout == "hemisphere":
        return hemisphere_cameras(n, size)
    raise SceneError(f"unknown pose layout {layout!r}")


# ---------------------------------------------------------------------------
# rendering


@dataclass
class RenderOutput:
    rgb: np.ndarray       # (H, W, 3) in [0, 1]
    normal: np.ndarray    # (H, W, 3), zero on background
    ids: np.ndarray       # (H, W) int, 0 on background
    depth: np.ndarray     # (H, W) camera z, inf on background


def sphere_trace(scene: AnalyticScene, o, d, t_max: float = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Ray parameter of the first hit and a convergence flag."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    t = np.zeros(len(o))
    active = np.ones(len(o), dtype=bool)
    hit = np.zeros(len(o), dtype=bool)
    for _ in range(TRACE_STEPS):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        dist, _ = scene_sdf(scene, o[idx] + t[idx, None] * d[idx])
        done = np.abs(dist) < TRACE_TOL
        hit[idx[done]] = True
        t[idx[~done]] += dist[~done]
        escaped = (t[idx] > t_max) | (t[idx] < 0)
        active[idx[done | escaped]] = False
    return t, hit


def render_scene(scene: AnalyticScene, camera: Camera) -> RenderOutput:
    H, W = camera.height, camera.width
    o, d = make_rays(camera, pixel_centers(camera, np.arange(H * W)))
    t, hit = sphere_trace(scene, o, d)
    rgb = np.zeros((H * W, 3))
    nrm = np.zeros((H * W, 3))
    ids = np.zeros(H * W, dtype=np.int64)
    depth = np.full(H * W, np.inf)
    if np.any(hit):
        x = o[hit] + t[hit, None] * d[hit]
        _, oid = scene_sdf(scene, x)
        n = scene_normal(scene, x)
        albedo = np.stack([next(p.albedo for p in scene.primitives if p.obj_id == i) for i in oid])
        shade = np.maximum(0.0, n @ scene.light)
        rgb[hit] = np.clip(albedo * shade[:, None] + AMBIENT, 0.0, 1.0)
        nrm[hit] = n
        ids[hit] = oid
        depth[hit] = t[hit] * (d[hit] @ camera.forward)
    return RenderOutput(rgb.reshape(H, W, 3), nrm.reshape(H, W, 3), ids.reshape(H, W), depth.reshape(H, W))


# ---------------------------------------------------------------------------
# features


def embeddings(ids: Sequence[int], dim: int, seed: int) -> dict[int, np.ndarray]:
    """A fixed random unit vector per object id (id 0 is the background)."""
    rng = np.random.default_rng([seed, 7])
    out = {}
    for i in sorted(set(int(v) for v in ids)):
        v = rng.standard_normal(dim)
        out[i] = v / np.linalg.norm(v)
    return out


def rotate_about(v: np.ndarray, axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation of rows of v about unit rows of axis."""
    c, s = np.cos(angle)[:, None], np.sin(angle)[:, None]
    return v * c + np.cross(axis, v) * s + axis * np.einsum("ij,ij->i", axis, v)[:, None] * (1 - c)


def perturb_normals(n: np.ndarray, sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Tilt each unit normal by |N(0, sigma)| degrees about a random perpendicular axis."""
    n = np.asarray(n, dtype=np.float64)
    if sigma_deg == 0 or len(n) == 0:
        return n.copy()
    r = rng.standard_normal(n.shape)
    axis = r - n * np.einsum("ij,ij->i", r, n)[:, None]
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = np.abs(rng.standard_normal(len(n))) * math.radians(sigma_deg)
    out = rotate_about(n, axis, angle)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def make_features(out: RenderOutput, scene_ids: Sequence[int], sem_dim: int = 32, sigma_s: float = 0.05,
                  sigma_g: float = 5.0, seed: int = 0, embed_seed: int | None = None,
                  rng: np.random.Generator | None = None) -> tuple[FeatureMap, FeatureMap]:
    """Semantic: per-id embedding plus Gaussian noise; geometric: tilted true normals.

    Background pixels get the id-0 embedding and zero geometric rows.
    """
    all_ids = [0] + list(scene_ids)
    if sem_dim < len(all_ids):
        raise SceneError("semantic dimension must cover every object id")
    emb = embeddings(all_ids, sem_dim, seed if embed_seed is None else embed_seed)
    rng = rng or np.random.default_rng(seed)
    H, W = out.ids.shape
    ids = out.ids.reshape(-1)
    sem = np.stack([emb[int(i)] for i in ids])
    if sigma_s > 0:
        sem = sem + sigma_s * rng.standard_normal(sem.shape)
        sem /= np.linalg.norm(sem, axis=1, keepdims=True)
    geo = np.zeros((H * W, 3))
    fg = ids > 0
    geo[fg] = perturb_normals(out.normal.reshape(-1, 3)[fg], sigma_g, rng)
    return (FeatureMap(W, H, sem_dim, sem.reshape(H, W, sem_dim), "semantic"),
            FeatureMap(W, H, 3, geo.reshape(H, W, 3), "geometric"))


# ---------------------------------------------------------------------------
# dataset


def write_ppm(path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape[:2]
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P6":
        raise SceneError(f"{path}: not a binary PPM")
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pos += 1
    raw = np.frombuffer(data, dtype=np.uint8, count=W * H * 3, offset=pos)
    return raw.reshape(H, W, 3).astype(np.float64) / maxval


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def scene_grid(scene: AnalyticScene, res: int, lo: float = -1.0, hi: float = 1.0, chunk: int = 1 << 20):
    axis = np.linspace(lo, hi, res)
    out = np.empty(res ** 3)
    ii = np.arange(res ** 3)
    for s in range(0, res ** 3, chunk):
        k = ii[s:s + chunk]
        pts = np.stack([axis[k // (res * res)], axis[(k // res) % res], axis[k % res]], axis=1)
        out[s:s + chunk] = scene_sdf(scene, pts)[0]
    return out.reshape(res, res, res)


def generate_dataset(scene_name: str, out_dir, views: int = 8, size: int = 64, layout: str = "ring",
                     sigma_s: float = 0.05, sigma_g: float = 5.0, seed: int = 0, sem_dim: int = 32,
                     mesh_res: int = 256) -> Path:
    """Write images, poses, feature maps, ground-truth mesh and a checksum manifest."""
    scene = make_scene(scene_name)
    cams = scene_cameras(scene_name, views, size, layout)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "feats").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SceneError(f"cannot create dataset directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    for i, cam in enumerate(cams):
        r = render_scene(scene, cam)
        write_ppm(out / "images" / f"{i:03d}.ppm", r.rgb)
        sem, geo = make_features(r, scene.ids, sem_dim, sigma_s, sigma_g, seed, rng=rng)
        save_feature_map(out / "feats" / f"{i:03d}.sem.nfeat", sem)
        save_feature_map(out / "feats" / f"{i:03d}.geo.nfeat", geo)
    write_poses(out / "poses.txt", cams)
    write_ply(out / "gt_mesh.ply", grid_mesh(scene_grid(scene, mesh_res)))
    (out / "scene.txt").write_text(f"scene={scene_name}\nviews={views}\nsize={size}\nlayout={layout}\n"
                                   f"noise_sem={sigma_s!r}\nnoise_geo={sigma_g!r}\nseed={seed}\n")
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt")
    lines = [f"{sha256(p)}  {p.relative_to(out).as_posix()}" for p in files]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


@dataclass
class Dataset:
    root: Path
    images: list[np.ndarray]
    cameras: list[Camera]
    sem: list[FeatureMap]
    geo: list[FeatureMap]

    @classmethod
    def load(cls, root) -> "Dataset":
        from .pairing import load_feature_map
        from .render import read_poses

        root = Path(root)
        if not (root / "poses.txt").is_file():
            raise SceneError(f"{root}: no poses.txt; not a dataset directory")
        cams = read_poses(root / "poses.txt")
        imgs, sem, geo = [], [], []
        for i in range(len(cams)):
            img = root / "images" / f"{i:03d}.ppm"
            if not img.is_file():
                raise SceneError(f"{root}: missing image {img.name}")
            imgs.append(read_ppm(img))
            sem.append(load_feature_map(root / "feats" / f"{i:03d}.sem.nfeat"))
            geo.append(load_feature_map(root / "feats" / f"{i:03d}.geo.nfeat"))
        return cls(root, imgs, cams, sem, geo)
