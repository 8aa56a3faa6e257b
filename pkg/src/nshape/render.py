"""Cameras, ray sampling, discrete volume rendering and ray-aggregated normal Jacobians.

Camera space looks down +z with x to the right and y down. Pixel (row r,
column c) has its center at image coordinates (c + 0.5, r + 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .field import FieldConfig, alpha_graph, color_head, sharpness, trunk

LOG_FLOOR = 1e-300
ZERO_WEIGHT = 1e-6


class RenderError(Exception):
    pass


@dataclass
class Camera:
    c2w: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        R = self.c2w[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise RenderError("camera rotation block is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise RenderError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3].copy()

    @property
    def forward(self) -> np.ndarray:
        return self.c2w[:3, 2].copy()

    @property
    def npix(self) -> int:
        return self.width * self.height

    def world_to_camera(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        R, t = self.c2w[:3, :3], self.c2w[:3, 3]
        return (pts - t) @ R

    def project(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Image coordinates (u, v) and camera depth z of world points."""
        pc = self.world_to_camera(pts)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at `eye` looking at `target` (y down in the image)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, eye
    return m


def pixel_centers(camera: Camera, index) -> np.ndarray:
    """Linear (row-major) pixel indices to image coordinates of pixel centers."""
    index = np.asarray(index, dtype=np.int64)
    r, c = np.divmod(index, camera.width)
    return np.stack([c + 0.5, r + 0.5], axis=-1).astype(np.float64)


def make_rays(camera: Camera, pixels) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions through image coordinates `pixels` (N, 2) = (u, v)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any(u < 0) or np.any(v < 0) or np.any(u > camera.width) or np.any(v > camera.height):
        raise RenderError(f"pixel outside image bounds {camera.width}x{camera.height}")
    d = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=1)
    d = d @ camera.c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def cube_bounds(o, d, half: float = 1.0, min_near: float = 0.05):
    """Per-ray [t_near, t_far] clipped to the cube [-half, half]^3; misses get a short dummy range."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (-half - o) * inv
        t1 = (half - o) * inv
    lo = np.nanmax(np.minimum(t0, t1), axis=1)
    hi = np.nanmin(np.maximum(t0, t1), axis=1)
    near = np.maximum(lo, min_near)
    miss = hi <= near
    far = np.where(miss, near + 1.0, hi)
    return near, far


def sample_ray(t_near, t_far, n: int, mode: str = "uniform", rng=None) -> np.ndarray:
    """n ascending depths in [t_near, t_far]; scalar or per-ray bounds.

    'uniform' includes both endpoints; 'stratified' draws one point per equal bin.
    """
    if n < 2:
        raise RenderError("need at least 2 samples per ray")
    near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if np.any(near >= far):
        raise RenderError("invalid depth range: t_near must be below t_far")
    if mode == "uniform":
        u = np.linspace(0.0, 1.0, n)[None, :]
    elif mode == "stratified":
        if rng is None:
            rng = np.random.default_rng(0)
        elif not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        u = (np.arange(n)[None, :] + rng.random((len(near), n))) / n
    else:
        raise RenderError(f"unknown sampling mode {mode!r}")
    t = near[:, None] + (far - near)[:, None] * u
    return t[0] if np.ndim(t_near) == 0 and np.ndim(t_far) == 0 else t


def compositing_weights(alpha) -> np.ndarray:
    """w_i = alpha_i * prod_{j<i} (1 - alpha_j) along the last axis."""
    alpha = np.asarray(alpha, dtype=np.float64)
    trans = np.cumprod(1.0 - alpha, axis=-1)
    trans = np.concatenate([np.ones(alpha.shape[:-1] + (1,)), trans[..., :-1]], axis=-1)
    return alpha * trans


def composite(alpha, colors) -> tuple[np.ndarray, np.ndarray]:
    w = compositing_weights(alpha)
    return np.einsum("...i,...ic->...c", w, np.asarray(colors, dtype=np.float64)), w


@dataclass
class RaySampleSet:
    origin: np.ndarray
    direction: np.ndarray
    t: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return np.diff(self.t, axis=-1)


# ---------------------------------------------------------------------------
# graph builders


def weights_graph(alpha: ad.Node, log_t: ad.Node | None = None) -> ad.Node:
    """Compositing weights along the last axis, as a differentiable graph.

    `log_t` = log(1 - alpha) when known exactly; otherwise log(max(1 - alpha, LOG_FLOOR)),
    which is exact above the floor so the weights never sum past one.
    """
    if log_t is None:
        log_t = ad.log(ad.relu(1.0 - alpha - LOG_FLOOR) + LOG_FLOOR)
    excl = ad.cumsum(log_t, axis=-1) - log_t
    return alpha * ad.exp(excl)


@dataclass
class RayGraph:
    """Symbolic render of R rays with n samples each (n - 1 compositing intervals)."""
    R: int
    n: int
    points: ad.Node     # (R*n, 3)
    sdf: ad.Node        # (R, n)
    alpha: ad.Node      # (R, n-1)
    weights: ad.Node    # (R, n-1)
    rgb: ad.Node | None
    trunk: object


def ray_graph(cfg: FieldConfig, p: Mapping[str, ad.Node], R: int, n: int, prefix: str = "",
              copies: Mapping[str, ad.Node] | None = None, with_color: bool = True) -> RayGraph:
    """Slots: {prefix}o (R,3), {prefix}d (R,3), {prefix}t (R,n)."""
    o = ad.slot(prefix + "o", (R, 3))
    d = ad.slot(prefix + "d", (R, 3))
    t = ad.slot(prefix + "t", (R, n))
    pts = ad.reshape(ad.reshape(o, (R, 1, 3)) + ad.reshape(t, (R, n, 1)) * ad.reshape(d, (R, 1, 3)),
                     (R * n, 3))
    out = trunk(cfg, p, pts, copies)
    f = ad.reshape(out.sdf, (R, n))
    s = sharpness(p)
    alpha, log_t = alpha_graph(ad.slice_axis(f, 1, 0, n - 1), ad.slice_axis(f, 1, 1, n), s, True)
    w = weights_graph(alpha, log_t)
    rgb = None
    if with_color:
        feat = ad.reshape(out.feature, (R, n, cfg.feat_dim))
        feat = ad.reshape(ad.slice_axis(feat, 1, 0, n - 1), (R * (n - 1), cfg.feat_dim))
        v = ad.reshape(ad.broadcast_to(ad.reshape(d, (R, 1, 3)), (R, n - 1, 3)), (R * (n - 1), 3))
        c = ad.reshape(color_head(cfg, p, feat, v), (R, n - 1, 3))
        rgb = ad.sum(ad.reshape(w, (R, n - 1, 1)) * c, axis=1)
    return RayGraph(R, n, pts, f, alpha, w, rgb, out)


def point_copies(p: Mapping[str, ad.Node], names: Sequence[str], P: int) -> dict[str, ad.Node]:
    """Per-point replicas of parameters; gradients wrt a replica are per-point gradients."""
    return {k: ad.broadcast_to(p[k], (P,) + p[k].shape) for k in names}


def _per_ray(x: ad.Node, R: int, n: int) -> ad.Node:
    """(R*n, ...) per-point rows -> (R, n-1, ...) rows of the left interval samples."""
    tail = x.shape[1:]
    x = ad.reshape(x, (R, n) + tail)
    return ad.slice_axis(x, 1, 0, n - 1)


def _flat_sum(parts: list[ad.Node], w: ad.Node, R: int, n: int, intervals: bool = True) -> ad.Node:
    """Weighted ray sums of per-point blocks, concatenated into (R, D) vectors.

    With `intervals` the n points per ray contribute their first n - 1 rows
    (left interval ends); otherwise all n rows are used.
    """
    m = n - 1 if intervals else n
    rows = []
    for g in parts:
        if intervals:
            g = _per_ray(g, R, n)
        width = int(np.prod(g.shape[1:] if not intervals else g.shape[2:], dtype=np.int64))
        g = ad.reshape(g, (R, m, width))
        rows.append(ad.sum(ad.reshape(w, (R, m, 1)) * g, axis=1))
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=1)


def normal_jacobian_graph(cfg: FieldConfig, p: Mapping[str, ad.Node], R: int, n: int,
                          theta_d: Sequence[str], prefix: str = "", fast: bool = True,
                          select: int = 0):
    """Aggregated normal Jacobians (R, 3*|theta_d|), plus the ray graph and normals.

    Blocks are ordered x, y, z; each block is the flattened gradient of that
    normal component wrt theta_d. With theta_d = head weight only, the block
    equals d(hidden)/dx_k, obtained by forward-mode tangents.

    With `select` = K > 0 the sum runs over K chosen samples per ray, given by
    slots {prefix}ts (R, K) (their depths) and {prefix}sel (R, n-1, K) (one-hot
    picks); weights still come from compositing the full ray.
    """
    theta_d = tuple(theta_d)
    rg = ray_graph(cfg, p, R, n, prefix, with_color=False)
    w = rg.weights
    if select:
        K = select
        o = ad.slot(prefix + "o", (R, 3))
        d = ad.slot(prefix + "d", (R, 3))
        ts = ad.slot(prefix + "ts", (R, K))
        sel = ad.slot(prefix + "sel", (R, n - 1, K))
        x = ad.reshape(ad.reshape(o, (R, 1, 3)) + ad.reshape(ts, (R, K, 1)) * ad.reshape(d, (R, 1, 3)),
                       (R * K, 3))
        w = ad.sum(ad.reshape(w, (R, n - 1, 1)) * sel, axis=1)
    else:
        x = rg.points
    P = x.shape[0]
    if fast and theta_d == ("sdf.head.weight",):
        h = trunk(cfg, p, x).hidden if select else rg.trunk.hidden
        eye = np.zeros((3, P, 3))
        for k in range(3):
            eye[k, :, k] = 1.0
        Jh = ad.jvp(h, x, ad.const(eye))          # (3, P, H)
        blocks = [ad.reshape(ad.slice_axis(Jh, 0, k, k + 1), (P, cfg.hidden)) for k in range(3)]
    else:
        copies = point_copies(p, theta_d, P)
        N = ad.grad(ad.sum(trunk(cfg, p, x, copies).sdf), x)
        blocks = []
        for k in range(3):
            gk = ad.grad(ad.sum(ad.slice_axis(N, 1, k, k + 1)), [copies[name] for name in theta_d])
            gk = [ad.reshape(g, (P, int(np.prod(g.shape[1:], dtype=np.int64)))) for g in gk]
            blocks.append(gk[0] if len(gk) == 1 else ad.concat(gk, axis=1))
    N = ad.grad(ad.sum(rg.trunk.sdf), rg.points)
    if select:
        return _flat_sum(blocks, w, R, select, intervals=False), rg, N
    return _flat_sum(blocks, w, R, n), rg, N


def top_weight_selection(t: np.ndarray, weights: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Depths and one-hot picks of the K largest-weight intervals per ray, in ray order."""
    R, n1 = weights.shape
    order = np.argsort(-weights, axis=1, kind="stable")[:, :K]
    order.sort(axis=1)
    ts = np.take_along_axis(t[:, :n1], order, axis=1)
    sel = np.zeros((R, n1, K))
    sel[np.arange(R)[:, None], order, np.arange(K)[None, :]] = 1.0
    return ts, sel


def sdf_jacobian_graph(cfg, p, R, n, theta_d, prefix: str = ""):
    """Per-ray d(sum_i w_i f_i)/d theta_d, weights included in the derivative."""
    theta_d = tuple(theta_d)
    P = R * n
    copies = point_copies(p, theta_d, P)
    rg = ray_graph(cfg, p, R, n, prefix, copies=copies, with_color=False)
    depth_f = ad.sum(rg.weights * ad.slice_axis(rg.sdf, 1, 0, n - 1))
    gs = ad.grad(depth_f, [copies[k] for k in theta_d])
    return _ray_collect(gs, R, n), rg


def color_jacobian_graph(cfg, p, R, n, theta_d, prefix: str = ""):
    """Per-ray d(rendered rgb_k)/d theta_d for k = r, g, b, concatenated."""
    theta_d = tuple(theta_d)
    P = R * n
    copies = point_copies(p, theta_d, P)
    rg = ray_graph(cfg, p, R, n, prefix, copies=copies, with_color=True)
    blocks = []
    for k in range(3):
        gs = ad.grad(ad.sum(ad.slice_axis(rg.rgb, 1, k, k + 1)), [copies[name] for name in theta_d])
        blocks.append(_ray_collect(gs, R, n))
    return ad.concat(blocks, axis=1), rg


def _ray_collect(gs: list[ad.Node], R: int, n: int) -> ad.Node:
    """Sum per-point replica gradients over each ray's samples."""
    rows = []
    for g in gs:
        width = int(np.prod(g.shape[1:], dtype=np.int64))
        rows.append(ad.sum(ad.reshape(g, (R, n, width)), axis=1))
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=1)


def rendered_normal_graph(rg: RayGraph, N: ad.Node) -> ad.Node:
    """Per-ray sum_i w_i N(x_i): (R, 3)."""
    return _flat_sum([N], rg.weights, rg.R, rg.n)


def ray_bindings(o, d, t, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + "o": o, prefix + "d": d, prefix + "t": t}


# ---------------------------------------------------------------------------
# numeric rendering with concrete parameters


class Renderer:
    """Renders images from a field's parameters in fixed-size ray chunks."""

    def __init__(self, cfg: FieldConfig, n_samples: int = 64, chunk: int = 512):
        self.cfg = cfg
        self.n = n_samples
        self.chunk = chunk
        self._graphs: dict[int, ad.Graph] = {}
        from .field import param_nodes

        self.nodes = param_nodes(cfg)

    def _graph(self, R: int) -> ad.Graph:
        g = self._graphs.get(R)
        if g is None:
            rg = ray_graph(self.cfg, self.nodes, R, self.n)
            g = ad.Graph([rg.rgb, rg.alpha, rg.weights])
            self._graphs[R] = g
        return g

    def render_rays(self, params, o, d, t=None) -> tuple[np.ndarray, RaySampleSet]:
        o = np.asarray(o, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        if t is None:
            near, far = cube_bounds(o, d)
            t = sample_ray(near, far, self.n, "uniform")
        rgb, alpha, w = [], [], []
        for s in range(0, len(o), self.chunk):
            sl = slice(s, s + self.chunk)
            R = len(o[sl])
            out = self._graph(R).evaluate(dict(params, **ray_bindings(o[sl], d[sl], t[sl])))
            rgb.append(out[0])
            alpha.append(out[1])
            w.append(out[2])
        rgb = np.concatenate(rgb)
        return rgb, RaySampleSet(o, d, t, np.concatenate(alpha), np.concatenate(w))

    def render_image(self, params, camera: Camera) -> np.ndarray:
        o, d = make_rays(camera, pixel_centers(camera, np.arange(camera.npix)))
        rgb, _ = self.render_rays(params, o, d)
        return rgb.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# pose file


def write_poses(path, cameras: Sequence[Camera]) -> None:
    blocks = []
    for cam in cameras:
        rows = [" ".join(repr(float(v)) for v in cam.c2w[i]) for i in range(4)]
        rows.append(f"{cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r} {cam.width} {cam.height}")
        blocks.append("\n".join(rows))
    Path(path).write_text("\n\n".join(blocks) + "\n")


def read_poses(path) -> list[Camera]:
    """Whitespace-separated blocks of 16 c2w reals then fx fy cx cy w h."""
    try:
        tokens = Path(path).read_text().split()
    except OSError as exc:
        raise RenderError(f"cannot read pose file {path}: {exc}") from exc
    if len(tokens) % 22:
        raise RenderError(f"pose file has {len(tokens)} numbers, not a multiple of 22")
    cams = []
    for i in range(0, len(tokens), 22):
        try:
            vals = [float(x) for x in tokens[i:i + 22]]
        except ValueError as exc:
            raise RenderError(f"pose file: {exc}") from exc
        cams.append(Camera(np.array(vals[:16]).reshape(4, 4), vals[16], vals[17], vals[18], vals[19],
                           int(vals[20]), int(vals[21])))
    return cams
