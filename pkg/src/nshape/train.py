"""Loss composition, the optimizer loop, checkpoints and shaping-target ablations."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .field import (
    DEFAULT_THETA_D,
    FieldConfig,
    init_params,
    param_nodes,
    param_shapes,
    read_checkpoint,
    trunk,
    validate_theta_d,
    write_checkpoint,
)
from .mishape import abs_cosine_graph, fo_graph, infonce_graph
from .pairing import FeatureIndex, PairBatch, draw_batch
from .render import (
    ZERO_WEIGHT,
    Camera,
    color_jacobian_graph,
    cube_bounds,
    make_rays,
    normal_jacobian_graph,
    pixel_centers,
    ray_bindings,
    ray_graph,
    rendered_normal_graph,
    sample_ray,
    sdf_jacobian_graph,
    top_weight_selection,
)

SHAPINGS = ("normal", "sdf", "color", "fo", "none")
METRICS_HEADER = "step,L_C,L_E,L_M,total,seconds"
STREAMS = ("rays", "eikonal", "pairs")


class TrainError(Exception):
    pass


class NonFiniteLossError(TrainError):
    def __init__(self, message: str, dump: Path | None = None):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    lambda_e: float = 0.1
    lambda_m: float = 0.01
    shaping: str = "normal"
    beta_s: float = 0.65
    beta_g: float = 0.99
    rays: int = 64
    samples: int = 64
    steps: int = 20000
    lr: float = 5e-4
    seed: int = 0
    theta_d: str = ",".join(DEFAULT_THETA_D)
    warmup: int = 1000
    temperature: float = 1.0
    include_positives: bool = True
    positives: int = 8
    negatives: int = 64
    window: int = 2
    eikonal_points: int = 256
    eikonal_sigma: float = 0.01
    chunks: int = 2
    log_every: int = 10
    unit_jacobian: bool = False
    jacobian_samples: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.shaping not in SHAPINGS:
            raise TrainError(f"shaping must be one of {', '.join(SHAPINGS)}; got {self.shaping!r}")
        if self.lambda_e < 0 or self.lambda_m < 0:
            raise TrainError("loss weights must be non-negative")
        if self.steps < 1:
            raise TrainError("steps must be at least 1")
        if self.rays % self.chunks or self.eikonal_points % self.chunks:
            raise TrainError("rays and eikonal points must divide evenly into chunks")
        if self.eikonal_points % 2:
            raise TrainError("eikonal point count must be even")
        if self.samples < 2:
            raise TrainError("need at least 2 samples per ray")
        if self.temperature <= 0:
            raise TrainError("temperature must be positive")
        if self.jacobian_samples < 0:
            raise TrainError("jacobian_samples must be non-negative")

    @property
    def theta_d_names(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.theta_d.split(",") if s.strip())

    @property
    def jacobian_select(self) -> int:
        """Samples kept per ray in the normal Jacobian; 0 keeps every interval."""
        k = self.jacobian_samples
        return k if 0 < k < self.samples - 1 else 0

    @property
    def shaping_active(self) -> bool:
        return self.shaping != "none" and self.lambda_m > 0

    # key=value text form
    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def parse_value(cls, key: str, text: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise TrainError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in ("bool", bool):
                low = text.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(text)
                return low in ("1", "true", "yes")
            if kind in ("int", int):
                return int(text)
            if kind in ("float", float):
                return float(text)
        except ValueError as exc:
            raise TrainError(f"bad value for {key}: {text!r}") from exc
        return text.strip()

    @classmethod
    def read_file(cls, path) -> dict:
        out = {}
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise TrainError(f"cannot read config {path}: {exc}") from exc
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TrainError(f"{path}:{n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = cls.parse_value(k, v)
        return out


# ---------------------------------------------------------------------------
# component losses


def photometric_loss(rendered, target) -> float:
    """Mean absolute error over pixels and channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise TrainError(f"shape mismatch: {rendered.shape} vs {target.shape}")
    return float(np.abs(rendered - target).mean())


def eikonal_graph(sdf_fn: Callable[[ad.Node], ad.Node], x: ad.Node, scale: float | None = None) -> ad.Node:
    """sum_i (|grad f(x_i)| - 1)^2 * scale, with scale defaulting to 1/N."""
    n = ad.grad(ad.sum(sdf_fn(x)), x)
    r = ad.sqrt(ad.sum(ad.square(n), axis=1)) - 1.0
    return ad.sum(ad.square(r)) * (1.0 / x.shape[0] if scale is None else scale)


def eikonal_loss(points, sdf_fn: Callable[[ad.Node], ad.Node], bindings: Mapping | None = None) -> float:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x = ad.slot("eik_x", points.shape)
    return float(ad.evaluate(eikonal_graph(sdf_fn, x), dict(bindings or {}, eik_x=points)))


# ---------------------------------------------------------------------------
# symbolic step programs


@dataclass
class Programs:
    """Compiled graphs for one training configuration."""
    base: ad.Graph            # [L_C part, L_E part, grads...] for one chunk
    probe: ad.Graph | None    # per-ray weight sums of the shaping rays
    shape: ad.Graph | None    # [L_M, grads...]
    param_names: list[str]
    n_shape_rays: int


def _shaping_vectors(fcfg: FieldConfig, p, tcfg: TrainConfig, R: int):
    n = tcfg.samples
    theta_d = tcfg.theta_d_names
    if tcfg.shaping == "normal":
        J, rg, _ = normal_jacobian_graph(fcfg, p, R, n, theta_d, prefix="m", select=tcfg.jacobian_select)
    elif tcfg.shaping == "sdf":
        J, rg = sdf_jacobian_graph(fcfg, p, R, n, theta_d, prefix="m")
    elif tcfg.shaping == "color":
        J, rg = color_jacobian_graph(fcfg, p, R, n, theta_d, prefix="m")
    elif tcfg.shaping == "fo":
        rg = ray_graph(fcfg, p, R, n, "m", with_color=False)
        N = ad.grad(ad.sum(rg.trunk.sdf), rg.points)
        J = rendered_normal_graph(rg, N)
    else:
        raise TrainError(f"no shaping vectors for {tcfg.shaping!r}")
    if tcfg.unit_jacobian:
        J = J / ad.sqrt(ad.sum(ad.square(J), axis=1, keepdims=True) + 1e-300)
    return J, rg


def shaping_loss_graph(fcfg: FieldConfig, p, tcfg: TrainConfig):
    """L_M over fixed slots: ray 0 is the anchor, then positives, then negatives.

    Masks `mpos` and `mneg` (0/1) disable padded or empty rays.
    """
    P = tcfg.positives
    Nn = 0 if tcfg.shaping == "fo" else tcfg.negatives
    R = 1 + P + Nn
    J, rg = _shaping_vectors(fcfg, p, tcfg, R)
    anchor = ad.reshape(ad.slice_axis(J, 0, 0, 1), (J.shape[1],))
    mpos = ad.slot("mpos", (P,))
    cos_pos = abs_cosine_graph(anchor, ad.slice_axis(J, 0, 1, 1 + P))
    if tcfg.shaping == "fo":
        loss = fo_graph(cos_pos, mpos, tcfg.temperature)
    else:
        mneg = ad.slot("mneg", (Nn,))
        cos_neg = abs_cosine_graph(anchor, ad.slice_axis(J, 0, 1 + P, R))
        loss = infonce_graph(cos_pos, cos_neg, mpos, mneg, tcfg.temperature, tcfg.include_positives)
    return loss, rg, R


def base_loss_graph(fcfg: FieldConfig, p, tcfg: TrainConfig, total_rays: int | None = None,
                    total_eik: int | None = None):
    """Photometric and eikonal parts for one chunk, scaled by the full batch sizes."""
    Rc = tcfg.rays // tcfg.chunks
    Ec = tcfg.eikonal_points // tcfg.chunks
    total_rays = total_rays or tcfg.rays
    total_eik = total_eik or tcfg.eikonal_points
    rg = ray_graph(fcfg, p, Rc, tcfg.samples, "c")
    gt = ad.slot("gt", (Rc, 3))
    lc = ad.sum(ad.abs(rg.rgb - gt)) * (1.0 / (3 * total_rays))
    x = ad.slot("eik_x", (Ec, 3))
    le = eikonal_graph(lambda q: trunk(fcfg, p, q).sdf, x, 1.0 / total_eik)
    return lc, le


def build_programs(fcfg: FieldConfig, tcfg: TrainConfig) -> Programs:
    p = param_nodes(fcfg)
    names = list(param_shapes(fcfg))
    lc, le = base_loss_graph(fcfg, p, tcfg)
    obj = lc + tcfg.lambda_e * le if tcfg.lambda_e else lc
    base = ad.Graph([lc, le] + ad.grad(obj, [p[k] for k in names]), name="base")
    probe = shape = None
    R = 0
    if tcfg.shaping_active:
        loss, rg, R = shaping_loss_graph(fcfg, p, tcfg)
        probe = ad.Graph([ad.sum(rg.weights, axis=1), rg.weights], name="probe")
        shape = ad.Graph([loss] + ad.grad(loss, [p[k] for k in names]), name="shape")
    return Programs(base, probe, shape, names, R)


def total_loss_graph(fcfg: FieldConfig, tcfg: TrainConfig) -> ad.Node:
    """L = L_C + lambda_E L_E + lambda_M L_M as one node over a single chunk (for checks)."""
    p = param_nodes(fcfg)
    lc, le = base_loss_graph(fcfg, p, TrainConfig(**{**asdict(tcfg), "chunks": 1}))
    total = lc + tcfg.lambda_e * le
    if tcfg.shaping_active:
        lm, _, _ = shaping_loss_graph(fcfg, p, tcfg)
        total = total + tcfg.lambda_m * lm
    return total


# ---------------------------------------------------------------------------
# optimizer and state


class Adam:
    def __init__(self, lr: float = 5e-4, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def update(self, params: dict, grads: Mapping[str, np.ndarray], m: dict, v: dict, t: int) -> None:
        """In-place bias-corrected update at step t (1-based), in sorted name order."""
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for k in sorted(grads):
            g = grads[k]
            m[k] = self.b1 * m[k] + (1.0 - self.b1) * g
            v[k] = self.b2 * v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)


def _rng_to_array(rng: np.random.Generator) -> np.ndarray:
    raw = json.dumps(rng.bit_generator.state, sort_keys=True).encode("ascii")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _rng_from_array(arr: np.ndarray) -> np.random.Generator:
    state = json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("ascii"))
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def _text_to_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _array_to_text(arr) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


@dataclass
class TrainState:
    fcfg: FieldConfig
    tcfg: TrainConfig
    params: dict
    m: dict
    v: dict
    step: int
    rngs: dict

    @classmethod
    def fresh(cls, fcfg: FieldConfig, tcfg: TrainConfig) -> "TrainState":
        validate_theta_d(fcfg, tcfg.theta_d_names)
        params = init_params(fcfg, tcfg.seed)
        zeros = {k: np.zeros_like(v) for k, v in params.items()}
        children = np.random.SeedSequence(tcfg.seed).spawn(len(STREAMS))
        rngs = {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}
        return cls(fcfg, tcfg, params, zeros, {k: v.copy() for k, v in zeros.items()}, 0, rngs)

    def save(self, path) -> None:
        entries = {"meta/field": self.fcfg.as_array(), "meta/train": _text_to_array(self.tcfg.dumps()),
                   "state/step": np.array(float(self.step))}
        for k in sorted(self.params):
            entries[f"param/{k}"] = self.params[k]
        for k in sorted(self.m):
            entries[f"adam_m/{k}"] = self.m[k]
            entries[f"adam_v/{k}"] = self.v[k]
        for name in STREAMS:
            entries[f"rng/{name}"] = _rng_to_array(self.rngs[name])
        write_checkpoint(path, entries)

    @classmethod
    def load(cls, path) -> "TrainState":
        from .field import CheckpointError

        e = read_checkpoint(path)
        try:
            fcfg = FieldConfig.from_array(e["meta/field"])
            kv = {}
            for line in _array_to_text(e["meta/train"]).splitlines():
                k, v = line.split("=", 1)
                kv[k] = TrainConfig.parse_value(k, v)
            tcfg = TrainConfig(**kv)
            params = {k[6:]: v for k, v in e.items() if k.startswith("param/")}
            m = {k[7:]: v for k, v in e.items() if k.startswith("adam_m/")}
            v_ = {k[7:]: v for k, v in e.items() if k.startswith("adam_v/")}
            rngs = {name: _rng_from_array(e[f"rng/{name}"]) for name in STREAMS}
            step = int(e["state/step"])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks entry {exc}") from exc
        return cls(fcfg, tcfg, params, m, v_, step, rngs)


# ---------------------------------------------------------------------------
# data and batches


@dataclass
class TrainData:
    images: list[np.ndarray]          # (H, W, 3) each
    cameras: list[Camera]
    index: FeatureIndex | None = None

    @classmethod
    def from_dataset(cls, ds) -> "TrainData":
        return cls(ds.images, ds.cameras, FeatureIndex.build(ds.sem, ds.geo))

    @property
    def n_pixels(self) -> np.ndarray:
        return np.array([c.npix for c in self.cameras])


def pixel_rays(data: TrainData, pixels: Sequence[tuple[int, int]]):
    """Origins, directions and colors for (image, pixel index) pairs, in order."""
    o = np.empty((len(pixels), 3))
    d = np.empty((len(pixels), 3))
    rgb = np.empty((len(pixels), 3))
    for i, (img, pix) in enumerate(pixels):
        cam = data.cameras[img]
        oo, dd = make_rays(cam, pixel_centers(cam, [pix]))
        o[i], d[i] = oo[0], dd[0]
        rgb[i] = data.images[img].reshape(-1, 3)[pix]
    return o, d, rgb


def random_pixels(data: TrainData, n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    counts = data.n_pixels
    flat = rng.integers(counts.sum(), size=n)
    img = np.searchsorted(np.cumsum(counts), flat, side="right")
    offs = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return [(int(i), int(f - offs[i])) for i, f in zip(img, flat)]


def stratified_t(o, d, n: int, rng: np.random.Generator) -> np.ndarray:
    near, far = cube_bounds(o, d)
    return sample_ray(near, far, n, "stratified", rng)


def eikonal_points(t_rays, o, d, count: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Half uniform in the cube, half jittered ray samples."""
    half = count // 2
    uni = rng.uniform(-1.0, 1.0, size=(half, 3))
    R, n = t_rays.shape
    k = rng.integers(R * n, size=count - half)
    r, s = np.divmod(k, n)
    pts = o[r] + t_rays[r, s, None] * d[r] + sigma * rng.standard_normal((count - half, 3))
    return np.concatenate([uni, pts])


# ---------------------------------------------------------------------------
# trainer


@dataclass
class StepLog:
    step: int
    L_C: float
    L_E: float
    L_M: float
    total: float
    seconds: float
    shaped: bool = False


class Trainer:
    def __init__(self, state: TrainState, data: TrainData, threads: int = 1):
        self.state = state
        self.data = data
        self.threads = max(1, int(threads))
        self.programs = build_programs(state.fcfg, state.tcfg)
        self.adam = Adam(state.tcfg.lr)
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def shaping_batch(self, rng) -> tuple[PairBatch, dict] | None:
        """Draw a pair batch and bind its rays; None when the batch is unusable."""
        tc = self.state.tcfg
        idx = self.data.index
        if idx is None:
            raise TrainError("shaping needs feature maps")
        batch = draw_batch(idx, rng, tc.window, tc.beta_s, tc.beta_g, tc.positives,
                           max(tc.negatives, 1))
        if not batch.positives:
            return None
        P = tc.positives
        pos = list(batch.positives) + [batch.anchor] * (P - len(batch.positives))
        rays = [batch.anchor] + pos
        if tc.shaping != "fo":
            rays += batch.negatives[:tc.negatives]
        o, d, _ = pixel_rays(self.data, rays)
        t = stratified_t(o, d, tc.samples, rng)
        b = ray_bindings(o, d, t, "m")
        mpos = np.zeros(P)
        mpos[:len(batch.positives)] = 1.0
        b["mpos"] = mpos
        if tc.shaping != "fo":
            b["mneg"] = np.ones(tc.negatives)
        return batch, b

    def _shape_term(self, bindings: dict):
        """Evaluate L_M and its gradient; None when anchor or all partners carry no weight."""
        pr = self.programs
        tc = self.state.tcfg
        (wsum, weights), cache = pr.probe.evaluate(bindings, keep=True)
        if tc.shaping == "normal" and tc.jacobian_select:
            bindings["mts"], bindings["msel"] = top_weight_selection(bindings["mt"], weights,
                                                                     tc.jacobian_select)
        valid = wsum >= ZERO_WEIGHT
        P = tc.positives
        if not valid[0]:
            return None
        bindings["mpos"] = bindings["mpos"] * valid[1:1 + P]
        if not bindings["mpos"].any():
            return None
        if tc.shaping != "fo":
            bindings["mneg"] = bindings["mneg"] * valid[1 + P:]
            if not bindings["mneg"].any():
                return None
        return pr.shape.evaluate(bindings, cache=cache)

    def step(self) -> StepLog:
        st, tc = self.state, self.state.tcfg
        t0 = time.perf_counter()
        rr, re, rp = st.rngs["rays"], st.rngs["eikonal"], st.rngs["pairs"]
        pixels = random_pixels(self.data, tc.rays, rr)
        o, d, gt = pixel_rays(self.data, pixels)
        t = stratified_t(o, d, tc.samples, rr)
        eik = eikonal_points(t, o, d, tc.eikonal_points, tc.eikonal_sigma, re)
        C = tc.chunks
        Rc, Ec = tc.rays // C, tc.eikonal_points // C
        jobs = []
        for c in range(C):
            sl = slice(c * Rc, (c + 1) * Rc)
            b = dict(st.params, **ray_bindings(o[sl], d[sl], t[sl], "c"))
            b["gt"] = gt[sl]
            b["eik_x"] = eik[c * Ec:(c + 1) * Ec]
            jobs.append(("base", b))
        shaped = tc.shaping_active and st.step >= tc.warmup
        if shaped:
            sb = self.shaping_batch(rp)
            if sb is not None:
                jobs.append(("shape", dict(st.params, **sb[1])))

        def run(job):
            kind, b = job
            if kind == "base":
                return self.programs.base.evaluate(b)
            return self._shape_term(b)

        results = self._map(run, jobs)
        names = self.programs.param_names
        lc = le = lm = 0.0
        grads = None
        for (kind, _), res in zip(jobs, results):
            if kind == "base":
                lc += float(res[0])
                le += float(res[1])
                g = res[2:]
                grads = list(g) if grads is None else [a + b for a, b in zip(grads, g)]
            elif res is not None:
                lm = float(res[0])
                grads = [a + tc.lambda_m * b for a, b in zip(grads, res[1:])]
        total = lc + tc.lambda_e * le + tc.lambda_m * lm
        if not all(math.isfinite(v) for v in (lc, le, lm, total)) or not all(
                np.all(np.isfinite(g)) for g in grads):
            raise NonFiniteLossError(f"non-finite loss at step {st.step}: L_C={lc} L_E={le} L_M={lm}")
        st.step += 1
        self.adam.update(st.params, dict(zip(names, grads)), st.m, st.v, st.step)
        return StepLog(st.step, lc, le, lm, total, time.perf_counter() - t0, shaped)

    def run(self, steps: int | None = None, metrics_path=None, wallclock: bool = False,
            checkpoint_path=None, checkpoint_every: int = 0, progress=None) -> list[StepLog]:
        """Run to `steps` total steps, appending rows every `log_every` steps."""
        tc = self.state.tcfg
        target = tc.steps if steps is None else steps
        logs = []
        fh = None
        if metrics_path is not None:
            mp = Path(metrics_path)
            fresh = self.state.step == 0 or not mp.exists()
            fh = open(mp, "w" if fresh else "a")
            if fresh:
                fh.write(METRICS_HEADER + "\n")
        try:
            while self.state.step < target:
                try:
                    log = self.step()
                except NonFiniteLossError as exc:
                    if checkpoint_path is not None:
                        dump = Path(str(checkpoint_path) + ".nonfinite")
                        self.state.save(dump)
                        exc.dump = dump
                    raise
                logs.append(log)
                if fh is not None and (log.step % tc.log_every == 0 or log.step == target or log.step == 1):
                    secs = log.seconds if wallclock else 0.0
                    fh.write(f"{log.step},{log.L_C!r},{log.L_E!r},{log.L_M!r},{log.total!r},{secs!r}\n")
                if checkpoint_path is not None and checkpoint_every and log.step % checkpoint_every == 0:
                    self.state.save(checkpoint_path)
                if progress is not None:
                    progress(log)
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_path is not None:
            self.state.save(checkpoint_path)
        return logs
