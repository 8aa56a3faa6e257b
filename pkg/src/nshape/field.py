"""Neural scene field: SDF trunk, color head, positional encoding, normals.

All network math is expressed as autodiff graphs so the same builders serve
plain evaluation, training and higher-order shaping losses.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"NSHAPE01"
DEFAULT_THETA_D = ("sdf.head.weight",)


class FieldError(Exception):
    pass


class NonFiniteError(FieldError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class CheckpointError(Exception):
    pass


@dataclass
class FieldConfig:
    pe_x: int = 6
    pe_v: int = 4
    hidden: int = 64
    depth: int = 4
    color_hidden: int = 64
    color_depth: int = 2
    feat_dim: int = 32
    beta: float = 100.0
    init_radius: float = 0.5
    init_sharpness: float = 20.0
    use_dirs: bool = True

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.pe_x, self.pe_v, self.hidden, self.depth, self.color_hidden,
             self.color_depth, self.feat_dim, self.beta, self.init_radius,
             self.init_sharpness, float(self.use_dirs)],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "FieldConfig":
        a = [float(v) for v in np.asarray(arr).reshape(-1)]
        return cls(int(a[0]), int(a[1]), int(a[2]), int(a[3]), int(a[4]), int(a[5]),
                   int(a[6]), a[7], a[8], a[9], bool(a[10]))


def encoded_dim(n_freq: int) -> int:
    return 3 + 6 * n_freq


def param_shapes(cfg: FieldConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    width = encoded_dim(cfg.pe_x)
    for i in range(cfg.depth):
        shapes[f"sdf.l{i}.weight"] = (width, cfg.hidden)
        shapes[f"sdf.l{i}.bias"] = (cfg.hidden,)
        width = cfg.hidden
    shapes["sdf.head.weight"] = (cfg.hidden, 1)
    shapes["sdf.head.bias"] = (1,)
    shapes["sdf.feat.weight"] = (cfg.hidden, cfg.feat_dim)
    shapes["sdf.feat.bias"] = (cfg.feat_dim,)
    width = cfg.feat_dim + (encoded_dim(cfg.pe_v) if cfg.use_dirs else 0)
    for i in range(cfg.color_depth):
        shapes[f"color.l{i}.weight"] = (width, cfg.color_hidden)
        shapes[f"color.l{i}.bias"] = (cfg.color_hidden,)
        width = cfg.color_hidden
    shapes["color.out.weight"] = (width, 3)
    shapes["color.out.bias"] = (3,)
    shapes["log_s"] = ()
    return shapes


def _spread_directions(n: int, rng) -> np.ndarray:
    """n unit vectors on a Fibonacci spiral, randomly rotated."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    u = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    q, rr = np.linalg.qr(rng.normal(size=(3, 3)))
    return u @ (q * np.sign(np.diag(rr)))


def init_params(cfg: FieldConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Sphere initialization: the fresh SDF approximates |x| - init_radius.

    Layer 0 holds antipodal direction pairs (+u, -u) so each pair sums to |u.x|,
    hidden layers start as identities, and the head averages the pairs. Gaussian
    geometric init is too anisotropic at this width.
    """
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    p: dict[str, np.ndarray] = {}
    pairs = cfg.hidden // 2
    u = _spread_directions(pairs, rng)
    for i in range(cfg.depth):
        shp = shapes[f"sdf.l{i}.weight"]
        w = np.zeros(shp)
        if i == 0:
            w[:3, :pairs] = u.T
            w[:3, pairs:2 * pairs] = -u.T
        else:
            w[:, :] = np.eye(shp[0], shp[1])
        p[f"sdf.l{i}.weight"] = w
        p[f"sdf.l{i}.bias"] = np.zeros(cfg.hidden)
    # mean of |u.x| over the sphere is |x| / 2
    head = np.full((cfg.hidden, 1), 2.0 / pairs)
    head[2 * pairs:] = 0.0
    p["sdf.head.weight"] = head
    p["sdf.head.bias"] = np.zeros(1)
    p["sdf.feat.weight"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.hidden), size=shapes["sdf.feat.weight"])
    p["sdf.feat.bias"] = np.zeros(cfg.feat_dim)
    for i in range(cfg.color_depth):
        shp = shapes[f"color.l{i}.weight"]
        p[f"color.l{i}.weight"] = rng.normal(0.0, 1.0 / math.sqrt(shp[0]), size=shp)
        p[f"color.l{i}.bias"] = np.zeros(shp[1])
    shp = shapes["color.out.weight"]
    p["color.out.weight"] = rng.normal(0.0, 1.0 / math.sqrt(shp[0]), size=shp)
    p["color.out.bias"] = np.zeros(3)
    p["log_s"] = np.array(math.log(cfg.init_sharpness))
    # absorb the softplus offsets so that f(0) = -init_radius
    nodes = param_nodes(cfg)
    x = ad.slot("x", (1, 3))
    f0 = ad.Graph(trunk(cfg, nodes, x).sdf).evaluate(dict(p, x=np.zeros((1, 3))))[0][0]
    p["sdf.head.bias"] = np.array([-cfg.init_radius - f0])
    return p


def param_nodes(cfg: FieldConfig) -> dict[str, ad.Node]:
    return {name: ad.slot(name, shape, "param") for name, shape in param_shapes(cfg).items()}


def validate_theta_d(cfg: FieldConfig, theta_d) -> tuple[str, ...]:
    theta_d = tuple(theta_d)
    names = param_shapes(cfg)
    if not theta_d:
        raise FieldError("shapeable subset must not be empty")
    for name in theta_d:
        if name not in names or not name.startswith("sdf."):
            raise FieldError(f"{name!r} is not an SDF-branch parameter")
    return theta_d


# ---------------------------------------------------------------------------
# graph builders


def positional_encoding(x: ad.Node, n_freq: int) -> ad.Node:
    """[x, sin(2^k x), cos(2^k x)] for k < n_freq, frequency-major."""
    parts = [x]
    for k in range(n_freq):
        s = x * float(2.0 ** k)
        parts += [ad.sin(s), ad.cos(s)]
    return ad.concat(parts, axis=-1)


def _dense(a, w, b, copies: Mapping[str, ad.Node], wname: str, bname: str):
    if wname in copies:
        # per-point weight copies: (P, in) x (P, in, out) -> (P, out)
        z = ad.sum(ad.reshape(a, a.shape + (1,)) * copies[wname], axis=-2)
    else:
        z = a @ w
    return z + (copies[bname] if bname in copies else b)


@dataclass
class TrunkOutput:
    sdf: ad.Node        # (P,)
    feature: ad.Node    # (P, F)
    hidden: ad.Node     # (P, H), input to the SDF head
    layers: list = field(default_factory=list)


def trunk(cfg: FieldConfig, p: Mapping[str, ad.Node], x: ad.Node,
          copies: Mapping[str, ad.Node] | None = None) -> TrunkOutput:
    """SDF branch on points x (P, 3). `copies` swaps named parameters for per-point replicas."""
    copies = copies or {}
    a = positional_encoding(x, cfg.pe_x)
    layers = []
    for i in range(cfg.depth):
        z = _dense(a, p[f"sdf.l{i}.weight"], p[f"sdf.l{i}.bias"], copies,
                   f"sdf.l{i}.weight", f"sdf.l{i}.bias")
        a = ad.softplus(z, cfg.beta)
        layers.append(a)
    f = _dense(a, p["sdf.head.weight"], p["sdf.head.bias"], copies, "sdf.head.weight", "sdf.head.bias")
    feat = _dense(a, p["sdf.feat.weight"], p["sdf.feat.bias"], copies, "sdf.feat.weight", "sdf.feat.bias")
    f = ad.reshape(f, (x.shape[0],))
    layers += [f, feat]
    return TrunkOutput(f, feat, a, layers)


def color_head(cfg: FieldConfig, p: Mapping[str, ad.Node], feature: ad.Node, v: ad.Node) -> ad.Node:
    a = ad.concat([feature, positional_encoding(v, cfg.pe_v)], axis=-1) if cfg.use_dirs else feature
    for i in range(cfg.color_depth):
        a = ad.tanh(a @ p[f"color.l{i}.weight"] + p[f"color.l{i}.bias"])
    return ad.sigmoid(a @ p["color.out.weight"] + p["color.out.bias"])


def normal_graph(cfg: FieldConfig, p, x: ad.Node, copies=None) -> ad.Node:
    """Surface normal as the spatial gradient of the SDF, itself differentiable."""
    out = trunk(cfg, p, x, copies)
    return ad.grad(ad.sum(out.sdf), x)


def sharpness(p) -> ad.Node:
    return ad.exp(p["log_s"])


def alpha_graph(f_i: ad.Node, f_next: ad.Node, s: ad.Node, with_log_trans: bool = False):
    """Section opacity max((Phi(f_i) - Phi(f_next)) / Phi(f_i), 0), Phi the logistic CDF.

    Written as 1 - exp(log Phi(f_next) - log Phi(f_i)) with
    log Phi(z) = -softplus(-s z) to stay finite for sharp s. With
    `with_log_trans` also returns log(1 - alpha) = min(log ratio, 0), exact
    even where alpha rounds to 1.
    """
    log_ratio = ad.softplus(-(s * f_i)) - ad.softplus(-(s * f_next))
    alpha = ad.relu(1.0 - ad.exp(log_ratio))
    if with_log_trans:
        return alpha, -ad.relu(-log_ratio)
    return alpha


def alpha_from_sdf(f_i, f_next, s) -> np.ndarray:
    if np.any(np.asarray(s) <= 0):
        raise FieldError("sharpness must be positive")
    f_i = np.asarray(f_i, dtype=np.float64)
    f_next = np.asarray(f_next, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    log_ratio = np.logaddexp(0.0, -s * f_i) - np.logaddexp(0.0, -s * f_next)
    return np.clip(1.0 - np.exp(log_ratio), 0.0, 1.0)


# ---------------------------------------------------------------------------
# convenience evaluation


class Field:
    """A configured field with concrete parameter values."""

    def __init__(self, cfg: FieldConfig | None = None, params: Mapping[str, np.ndarray] | None = None,
                 seed: int = 0, theta_d=DEFAULT_THETA_D):
        self.cfg = cfg or FieldConfig()
        self.params = dict(params) if params is not None else init_params(self.cfg, seed)
        self.theta_d = validate_theta_d(self.cfg, theta_d)
        self.nodes = param_nodes(self.cfg)
        self._graphs: dict = {}

    @property
    def s(self) -> float:
        return float(np.exp(self.params["log_s"]))

    def _graph(self, kind: str, n: int) -> ad.Graph:
        key = (kind, n)
        g = self._graphs.get(key)
        if g is not None:
            return g
        x = ad.slot("x", (n, 3))
        out = trunk(self.cfg, self.nodes, x)
        if kind == "sdf":
            g = ad.Graph([out.sdf] + out.layers)
        elif kind == "normal":
            g = ad.Graph([ad.grad(ad.sum(out.sdf), x)] + out.layers)
        else:
            v = ad.slot("v", (n, 3))
            g = ad.Graph([color_head(self.cfg, self.nodes, out.feature, v)] + out.layers)
        self._graphs[key] = g
        return g

    def _run(self, kind, x, v=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != 3:
            raise FieldError(f"points must have 3 coordinates, got shape {x.shape}")
        b = dict(self.params, x=x)
        if v is not None:
            b["v"] = v
        outs = self._graph(kind, len(x)).evaluate(b)
        for i, layer in enumerate(outs[1:]):
            if not np.all(np.isfinite(layer)):
                raise NonFiniteError(f"non-finite activation in layer {i}", layer=i)
        if not np.all(np.isfinite(outs[0])):
            raise NonFiniteError("non-finite field output", layer=len(outs) - 2)
        return outs[0]

    def sdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = self._run("sdf", x)
        return out[0] if x.ndim == 1 else out

    def normal(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = self._run("normal", x)
        return out[0] if x.ndim == 1 else out

    def color(self, x, v) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > 1e-6):
            raise FieldError("view direction must be unit length")
        out = self._run("color", x, np.broadcast_to(v, np.atleast_2d(x).shape))
        return out[0] if x.ndim == 1 else out

    def sdf_grid(self, res: int, lo: float = -1.0, hi: float = 1.0, chunk: int = 65536) -> np.ndarray:
        """SDF sampled on a res^3 lattice over [lo, hi]^3, indexed [ix, iy, iz]."""
        axis = np.linspace(lo, hi, res)
        pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
        out = np.empty(len(pts))
        for start in range(0, len(pts), chunk):
            out[start:start + chunk] = self._run("sdf", pts[start:start + chunk])
        return out.reshape(res, res, res)

    def save(self, path) -> None:
        entries = {"meta/field": self.cfg.as_array()}
        entries.update({f"param/{k}": v for k, v in self.params.items()})
        write_checkpoint(path, entries)

    @classmethod
    def load(cls, path, theta_d=DEFAULT_THETA_D) -> "Field":
        entries = read_checkpoint(path)
        if "meta/field" not in entries:
            raise CheckpointError("checkpoint has no field configuration")
        cfg = FieldConfig.from_array(entries["meta/field"])
        params = {k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")}
        missing = set(param_shapes(cfg)) - set(params)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
        return cls(cfg, params, theta_d=theta_d)


# ---------------------------------------------------------------------------
# checkpoint container


def write_checkpoint(path, entries: Mapping[str, np.ndarray]) -> None:
    """NSHAPE01 container: named float64 arrays, little-endian, trailing CRC32."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", len(entries))
    for name, arr in entries.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError("checkpoint truncated")
    magic = data[:len(CHECKPOINT_MAGIC)]
    if magic != CHECKPOINT_MAGIC:
        if magic[:6] == CHECKPOINT_MAGIC[:6]:
            raise CheckpointError(f"checkpoint version mismatch: {magic!r}")
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(body):
                raise CheckpointError("checkpoint truncated")
            out[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError("checkpoint truncated") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


def config_dict(cfg: FieldConfig) -> dict:
    return asdict(cfg)
