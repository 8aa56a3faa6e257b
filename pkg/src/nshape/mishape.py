"""Mutual-information shaping: cosine proxy, InfoNCE and first-order losses,
closed-form MI of perturbed normals, and Monte Carlo entropy oracles.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from . import autodiff as ad

DEGENERATE = 1e-12
SATURATION_CLAMP = 1e3
MIN_SAMPLES = 10_000


class MIError(Exception):
    pass


class DegenerateVectorError(MIError):
    pass


class RankDeficientError(MIError):
    pass


class SaturationWarning(RuntimeWarning):
    """Raised (as a warning) when a projection residual vanishes: MI is unbounded."""


# ---------------------------------------------------------------------------
# proxy and losses (numeric)


def mi_proxy(a, b) -> float:
    """|cos(a, b)|, a monotone surrogate for the MI of the perturbed normals."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= DEGENERATE:
        raise DegenerateVectorError("first vector is degenerate (near-zero length)")
    if nb <= DEGENERATE:
        raise DegenerateVectorError("second vector is degenerate (near-zero length)")
    return float(min(abs(a @ b) / (na * nb), 1.0))


@dataclass
class MIBatch:
    anchor: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64).ravel()
        self.positives = np.atleast_2d(np.asarray(self.positives, dtype=np.float64))
        self.negatives = np.atleast_2d(np.asarray(self.negatives, dtype=np.float64))
        if self.positives.size == 0:
            raise MIError("batch needs at least one positive")
        if self.negatives.size == 0:
            raise MIError("batch needs at least one negative")
        D = self.anchor.size
        if self.positives.shape[1] != D or self.negatives.shape[1] != D:
            raise MIError("all Jacobian vectors must have the same length")
        for arr in (self.anchor, self.positives, self.negatives):
            if not np.all(np.isfinite(arr)):
                raise MIError("non-finite entry in MI batch")

    def cosines(self) -> tuple[np.ndarray, np.ndarray]:
        pos = np.array([mi_proxy(self.anchor, q) for q in self.positives])
        neg = np.array([mi_proxy(self.anchor, q) for q in self.negatives])
        return pos, neg


def infonce_from_cosines(pos, neg, temperature: float = 1.0, include_positives: bool = True) -> float:
    """-log( sum_pos exp(c/T) / sum_den exp(c/T) ); den = pos + neg or neg only."""
    pos = np.asarray(pos, dtype=np.float64).ravel() / temperature
    neg = np.asarray(neg, dtype=np.float64).ravel() / temperature
    if pos.size == 0 or neg.size == 0:
        raise MIError("empty positive or negative set")
    den = np.concatenate([pos, neg]) if include_positives else neg
    m = max(pos.max(), den.max())
    log_num = m + math.log(np.exp(pos - m).sum())
    log_den = m + math.log(np.exp(den - m).sum())
    return float(log_den - log_num)


def infonce_loss(batch: MIBatch, temperature: float = 1.0, include_positives: bool = True) -> float:
    pos, neg = batch.cosines()
    return infonce_from_cosines(pos, neg, temperature, include_positives)


def fo_loss(anchor_normal, positive_normals, temperature: float = 1.0) -> float:
    """-log sum_pos exp(|cos(N_anchor, N_pos)| / T) on rendered normals."""
    positive_normals = np.atleast_2d(np.asarray(positive_normals, dtype=np.float64))
    if len(positive_normals) == 0:
        raise MIError("first-order loss needs at least one positive")
    try:
        c = np.array([mi_proxy(anchor_normal, q) for q in positive_normals])
    except DegenerateVectorError as exc:
        raise MIError(f"zero-length normal: {exc}") from exc
    return float(-np.log(np.exp(c / temperature).sum()))


# ---------------------------------------------------------------------------
# graph versions for training


def abs_cosine_graph(anchor: ad.Node, others: ad.Node, eps: float = 1e-30) -> ad.Node:
    """|cos| between anchor (D,) and each row of others (K, D) -> (K,)."""
    na = ad.sqrt(ad.sum(ad.square(anchor)) + eps)
    no = ad.sqrt(ad.sum(ad.square(others), axis=1) + eps)
    dots = ad.sum(others * anchor, axis=1)
    return ad.abs(dots / (no * na))


def infonce_graph(cos_pos: ad.Node, cos_neg: ad.Node, mask_pos: ad.Node, mask_neg: ad.Node,
                  temperature: float = 1.0, include_positives: bool = True) -> ad.Node:
    """Masked InfoNCE over fixed-size positive/negative slots (masks are 0/1)."""
    ep = ad.exp(cos_pos * (1.0 / temperature)) * mask_pos
    en = ad.exp(cos_neg * (1.0 / temperature)) * mask_neg
    num = ad.sum(ep)
    den = num + ad.sum(en) if include_positives else ad.sum(en)
    return ad.log(den) - ad.log(num)


def fo_graph(cos_pos: ad.Node, mask_pos: ad.Node, temperature: float = 1.0) -> ad.Node:
    return -ad.log(ad.sum(ad.exp(cos_pos * (1.0 / temperature)) * mask_pos))


# ---------------------------------------------------------------------------
# closed-form MI of perturbed normals


def _orthonormal_basis(basis, tol: float = 1e-9) -> np.ndarray:
    B = np.atleast_2d(np.asarray(basis, dtype=np.float64))
    if B.size == 0:
        return np.zeros((0, 0))
    Q, R = np.linalg.qr(B.T)
    sv = np.linalg.svd(B, compute_uv=False)
    if sv[-1] <= tol * max(sv[0], 1.0) or len(sv) < len(B):
        raise RankDeficientError(f"basis of {len(B)} vectors is rank deficient")
    return Q


def projection_residual(v, basis) -> np.ndarray:
    """v minus its orthogonal projection onto span(basis)."""
    v = np.asarray(v, dtype=np.float64)
    B = np.atleast_2d(np.asarray(basis, dtype=np.float64))
    if len(B) == 0:
        return v.copy()
    if B.shape[1] != v.size:
        raise MIError("basis and vector dimensions differ")
    Q = _orthonormal_basis(B)
    r = v - Q @ (Q.T @ v)
    # one re-orthogonalization pass keeps the residual orthogonal to 1e-9
    return r - Q @ (Q.T @ r)


@dataclass
class JacobianTriple:
    """Axis blocks gamma * length_k * dir_k of a ray-aggregated normal Jacobian."""
    lengths: np.ndarray       # (3,)
    dirs: np.ndarray          # (3, m), unit rows
    gamma: float = 1.0

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.float64).reshape(3)
        self.dirs = np.asarray(self.dirs, dtype=np.float64)
        if self.dirs.ndim != 2 or self.dirs.shape[0] != 3:
            raise MIError("directions must be three vectors")
        if np.any(self.lengths < 0):
            raise MIError("block lengths must be non-negative")
        if np.abs(np.linalg.norm(self.dirs, axis=1) - 1.0).max() > 1e-9:
            raise MIError("block directions must be unit vectors")

    @classmethod
    def from_vector(cls, vec, gamma: float = 1.0) -> "JacobianTriple":
        """Split a concatenated (x, y, z) Jacobian into lengths and unit directions."""
        blocks = np.asarray(vec, dtype=np.float64).reshape(3, -1) / gamma
        lengths = np.linalg.norm(blocks, axis=1)
        if np.any(lengths <= DEGENERATE):
            raise DegenerateVectorError("zero-length Jacobian block")
        return cls(lengths, blocks / lengths[:, None], gamma)

    def blocks(self) -> np.ndarray:
        return self.gamma * self.lengths[:, None] * self.dirs

    def vector(self) -> np.ndarray:
        return self.blocks().ravel()


def _log_residuals(pairs) -> float:
    """Sum of log |P(v, basis)| over (v, basis) pairs; +inf once any residual vanishes."""
    total = 0.0
    for v, basis in pairs:
        try:
            r = np.linalg.norm(projection_residual(v, basis))
        except RankDeficientError:
            # the growing basis already captured this direction
            r = 0.0
        if r < DEGENERATE:
            return -math.inf
        total += math.log(r)
    return total


def _saturated(name: str) -> float:
    warnings.warn(f"{name}: projection residual vanished, MI saturates", SaturationWarning, stacklevel=3)
    return math.inf


def mi_exact(A: JacobianTriple, B: JacobianTriple) -> float:
    """Log-ratio of projection residuals; the additive entropy constants are omitted."""
    ax, ay, az = A.dirs
    num = _log_residuals([(ay, [ax]), (az, [ax, ay])])
    if num == -math.inf:
        raise MIError("A directions are linearly dependent")
    Bs = list(B.dirs)
    _orthonormal_basis(Bs)
    den = _log_residuals([(ax, Bs), (ay, [ax] + Bs), (az, [ax, ay] + Bs)])
    if den == -math.inf:
        return _saturated("mi_exact")
    return num - den


def mi_approx(A: JacobianTriple, B: JacobianTriple) -> float:
    """-sum_k log |P(A_k, B_k)|: per-axis pairs only."""
    den = _log_residuals([(A.dirs[k], [B.dirs[k]]) for k in range(3)])
    if den == -math.inf:
        return _saturated("mi_approx")
    return -den


def clamp_mi(value: float) -> float:
    return min(value, SATURATION_CLAMP)


# ---------------------------------------------------------------------------
# Monte Carlo entropy


@dataclass
class EntropyEstimate:
    value: float
    stderr: float
    n: int
    estimator: str


def sphere_samples(D: int, n: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, D))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def mc_generator(seed, *key: int) -> np.random.Generator:
    """Counter-based stream for (seed, key...); distinct keys give independent streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def knn_entropy(y: np.ndarray, k: int = 5) -> float:
    """Kozachenko-Leonenko differential entropy estimate (nats), Euclidean balls."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n, d = y.shape
    tree = cKDTree(y)
    dist, _ = tree.query(y, k=k + 1)
    eps = dist[:, k]
    eps = np.maximum(eps, np.finfo(float).tiny)
    log_vd = (d / 2) * math.log(math.pi) - gammaln(d / 2 + 1)
    return float(digamma(n) - digamma(k) + log_vd + d * np.mean(np.log(eps)))


def _fd_bins(x: np.ndarray) -> int:
    q75, q25 = np.percentile(x, [75, 25])
    h = 2 * (q75 - q25) * len(x) ** (-1 / 3)
    if h <= 0:
        return 1
    return max(1, int(math.ceil((x.max() - x.min()) / h)))


def histogram_entropy(y: np.ndarray) -> float:
    """Plug-in entropy with Freedman-Diaconis bins per axis."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    bins = [_fd_bins(y[:, j]) for j in range(y.shape[1])]
    counts, edges = np.histogramdd(y, bins=bins)
    vol = np.ones_like(counts)
    for j, e in enumerate(edges):
        shape = [1] * len(edges)
        shape[j] = -1
        vol = vol * np.diff(e).reshape(shape)
    p = counts / counts.sum()
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz] / vol[nz])).sum())


def entropy_mc(D: int, directions, scales=1.0, samples: int = 200_000, seed: int = 0,
               estimator: str = "knn", batches: int = 10, stream: int = 0) -> EntropyEstimate:
    """Entropy of (scale_j * n . dir_j)_j with n uniform on the unit sphere in R^D.

    Directions live in R^D. The standard error comes from batch means over
    `batches` disjoint sub-samples.
    """
    if D < 3:
        raise MIError("dimension must be at least 3")
    if samples < MIN_SAMPLES:
        raise MIError(f"too few samples: {samples} < {MIN_SAMPLES}")
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if dirs.shape[1] != D:
        raise MIError(f"directions must have {D} components")
    if np.abs(np.linalg.norm(dirs, axis=1) - 1.0).max() > 1e-9:
        raise MIError("directions must be unit vectors")
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (len(dirs),))
    rng = mc_generator(seed, D, stream)
    y = (sphere_samples(D, samples, rng) @ dirs.T) * scales
    est = {"knn": knn_entropy, "histogram": histogram_entropy}.get(estimator)
    if est is None:
        raise MIError(f"unknown estimator {estimator!r}")
    value = est(y)
    parts = np.array([est(chunk) for chunk in np.array_split(y, batches)])
    stderr = float(parts.std(ddof=1) / math.sqrt(batches))
    return EntropyEstimate(value, stderr, samples, estimator)


def unit_pair(D: int, angle: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Two unit vectors in R^D at the given angle, randomly oriented."""
    rng = rng or np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.standard_normal((D, 2)))
    e1, e2 = Q[:, 0], Q[:, 1]
    return np.stack([e1, math.cos(angle) * e1 + math.sin(angle) * e2])


@dataclass
class CheckResult:
    name: str
    target: float
    estimate: float
    stderr: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.estimate) and abs(self.estimate - self.target) <= self.tol)


def verify_entropy_laws(dims: Sequence[int] = (3, 8), samples: int = 200_000, seed: int = 0,
                        scales: Sequence[float] = (0.5, 2.0, 10.0)) -> list[CheckResult]:
    """Scaling law, the D=3 closed form, and the conditional sine law."""
    out = []
    stream = 0

    def draw(D, dirs, scale=1.0):
        nonlocal stream
        stream += 1
        return entropy_mc(D, dirs, scale, samples, seed, stream=stream)

    for D in dims:
        e = np.zeros(D)
        e[0] = 1.0
        base = draw(D, e)
        if D == 3:
            out.append(CheckResult("marginal D=3", math.log(2.0), base.value, base.stderr, 0.02))
        for c in scales:
            est = draw(D, e, c)
            se = math.hypot(base.stderr, est.stderr)
            out.append(CheckResult(f"scaling D={D} c={c:g}", math.log(c), est.value - base.value, se,
                                   max(0.02, 3 * se)))
        if D >= 5:
            rng = mc_generator(seed, D, 999)
            h90 = draw(D, unit_pair(D, math.pi / 2, rng))
            h30 = draw(D, unit_pair(D, math.pi / 6, rng))
            se = math.hypot(h90.stderr, h30.stderr)
            out.append(CheckResult(f"sine law D={D}", math.log(2.0), h90.value - h30.value, se, 0.05))
    return out


def format_report(results: Sequence[CheckResult]) -> str:
    lines = ["check\ttarget\testimate\tstderr\tresult"]
    for r in results:
        lines.append(f"{r.name}\t{r.target:.6f}\t{r.estimate:.6f}\t{r.stderr:.6f}\t"
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
