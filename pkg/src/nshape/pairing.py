"""Feature maps and correlated pixel-pair selection for shaping batches."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

FEATURE_MAGIC = b"NFEAT01"
MODALITIES = {"semantic": 0, "geometric": 1}
_HEADER = len(FEATURE_MAGIC) + 1 + 12

DEFAULT_BETA_S = 0.65
DEFAULT_BETA_G = 0.99


class FeatureError(Exception):
    pass


class PairingError(Exception):
    pass


@dataclass
class FeatureMap:
    width: int
    height: int
    channels: int
    data: np.ndarray           # (height, width, channels) float32
    modality: str = "semantic"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise FeatureError(f"unknown modality {self.modality!r}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(
            self.height, self.width, self.channels)
        if self.modality == "geometric" and self.channels != 3:
            raise FeatureError("geometric feature maps need 3 channels")

    def rows(self) -> np.ndarray:
        return self.data.reshape(-1, self.channels).astype(np.float64)


def normalize_geometric(data: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Rescale non-zero rows to unit length; rows already unit within tol are left bit-exact."""
    flat = data.reshape(-1, data.shape[-1])
    n = np.linalg.norm(flat.astype(np.float64), axis=1)
    fix = (n > 0) & (np.abs(n - 1.0) > tol)
    if np.any(fix):
        flat = flat.copy()
        flat[fix] = (flat[fix] / n[fix, None]).astype(flat.dtype)
    return flat.reshape(data.shape)


def save_feature_map(path, fmap: FeatureMap) -> None:
    buf = bytearray(FEATURE_MAGIC)
    buf += struct.pack("<B", MODALITIES[fmap.modality])
    buf += struct.pack("<III", fmap.width, fmap.height, fmap.channels)
    buf += fmap.data.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_feature_map(path) -> FeatureMap:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FeatureError(f"cannot read feature file {path}: {exc}") from exc
    if data[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FeatureError(f"{path}: bad magic, not an NFEAT01 file")
    if len(data) < _HEADER:
        raise FeatureError(f"{path}: truncated header: expected {_HEADER} bytes, got {len(data)}")
    (mod,) = struct.unpack_from("<B", data, len(FEATURE_MAGIC))
    w, h, c = struct.unpack_from("<III", data, len(FEATURE_MAGIC) + 1)
    expected = _HEADER + 4 * w * h * c + 4
    if len(data) != expected:
        raise FeatureError(f"{path}: truncated payload: expected {expected} bytes, got {len(data)}")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FeatureError(f"{path}: CRC mismatch")
    names = {v: k for k, v in MODALITIES.items()}
    if mod not in names:
        raise FeatureError(f"{path}: unknown modality code {mod}")
    arr = np.frombuffer(data, dtype="<f4", count=w * h * c, offset=_HEADER).reshape(h, w, c)
    if not np.all(np.isfinite(arr)):
        raise FeatureError(f"{path}: NaN or infinite entries in payload")
    arr = arr.astype(np.float32)
    if names[mod] == "geometric":
        arr = normalize_geometric(arr)
    return FeatureMap(w, h, c, arr, names[mod])


# ---------------------------------------------------------------------------
# selection


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


@dataclass
class FeatureIndex:
    """Per-image unit-normalized semantic/geometric rows, built once per run."""
    sem: list[np.ndarray]
    geo: list[np.ndarray]
    valid: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def build(cls, sem_maps: Sequence[FeatureMap], geo_maps: Sequence[FeatureMap]) -> "FeatureIndex":
        if len(sem_maps) != len(geo_maps):
            raise PairingError("semantic and geometric map counts differ")
        sem = [_unit_rows(m.rows()) for m in sem_maps]
        geo = [_unit_rows(m.rows()) for m in geo_maps]
        valid = [np.flatnonzero((np.abs(s).sum(1) > 0) & (np.abs(g).sum(1) > 0)) for s, g in zip(sem, geo)]
        return cls(sem, geo, valid)

    @property
    def n_images(self) -> int:
        return len(self.sem)

    def npix(self, image: int) -> int:
        return len(self.sem[image])


def neighbor_images(image: int, n_images: int, window: int = 2) -> list[int]:
    """The `window` images on each side in capture order, without wrap-around."""
    return [j for j in range(image - window, image + window + 1) if j != image and 0 <= j < n_images]


def select_positives(anchor: tuple[int, int], neighbors: Sequence[int], index: FeatureIndex,
                     beta_s: float = DEFAULT_BETA_S, beta_g: float = DEFAULT_BETA_G,
                     cap: int | None = 8) -> list[tuple[int, int]]:
    """Pixels passing both cosine thresholds, ranked by the product of the two cosines.

    Ties are broken by (image, pixel) order, so the result is deterministic.
    """
    if not (0 < beta_s < 1 and 0 < beta_g < 1):
        raise PairingError("thresholds must lie strictly between 0 and 1")
    img, pix = anchor
    a_sem, a_geo = index.sem[img][pix], index.geo[img][pix]
    if not a_sem.any() or not a_geo.any():
        raise PairingError(f"anchor {anchor} has a degenerate (zero) feature vector")
    cand_img, cand_pix, score = [], [], []
    for j in neighbors:
        cs = index.sem[j] @ a_sem
        cg = index.geo[j] @ a_geo
        hit = np.flatnonzero((cs >= beta_s) & (cg >= beta_g))
        hit = hit[~((j == img) & (hit == pix))]
        cand_img.append(np.full(len(hit), j))
        cand_pix.append(hit)
        score.append(cs[hit] * cg[hit])
    if not cand_pix:
        return []
    ci, cp, sc = np.concatenate(cand_img), np.concatenate(cand_pix), np.concatenate(score)
    order = np.lexsort((cp, ci, -sc))
    if cap is not None:
        order = order[:cap]
    return [(int(ci[k]), int(cp[k])) for k in order]


def select_negatives(anchor: tuple[int, int], positives: Sequence[tuple[int, int]],
                     images: Sequence[int], index_or_sizes, count: int = 64,
                     rng=None) -> list[tuple[int, int]]:
    """Uniform draw without replacement over the images' pixels, excluding anchor and positives."""
    if count < 1:
        raise PairingError("negative count must be at least 1")
    if rng is None or not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if isinstance(index_or_sizes, FeatureIndex):
        sizes = {j: index_or_sizes.npix(j) for j in images}
    elif isinstance(index_or_sizes, Mapping):
        sizes = {j: int(index_or_sizes[j]) for j in images}
    else:
        sizes = {j: int(index_or_sizes) for j in images}
    offsets = np.cumsum([0] + [sizes[j] for j in images])
    excluded = {anchor, *positives}
    banned = np.array(sorted(offsets[images.index(i)] + p for i, p in excluded if i in images),
                      dtype=np.int64)
    pool = int(offsets[-1]) - len(banned)
    if pool < count:
        raise PairingError(f"pixel pool of {pool} is smaller than the {count} negatives requested")
    # draw ranks among the allowed pixels, then map ranks past the banned ones
    ranks = np.sort(rng.choice(pool, size=count, replace=False))
    flat = ranks.copy()
    for b in banned:
        flat[flat >= b] += 1
    perm = rng.permutation(count)
    flat = flat[perm]
    out = []
    for f in flat:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        out.append((int(images[k]), int(f - offsets[k])))
    return out


@dataclass
class PairBatch:
    anchor: tuple[int, int]
    positives: list[tuple[int, int]]
    negatives: list[tuple[int, int]]

    def __post_init__(self):
        if set(self.positives) & set(self.negatives):
            raise PairingError("positives and negatives overlap")
        if self.anchor in self.negatives:
            raise PairingError("anchor appears among negatives")


def draw_batch(index: FeatureIndex, rng: np.random.Generator, window: int = 2,
               beta_s: float = DEFAULT_BETA_S, beta_g: float = DEFAULT_BETA_G,
               cap: int = 8, n_neg: int = 64) -> PairBatch:
    """Random valid anchor, its positives in neighboring images, and negatives there."""
    counts = np.array([len(v) for v in index.valid])
    if counts.sum() == 0:
        raise PairingError("no pixel has usable features")
    k = int(rng.integers(counts.sum()))
    img = int(np.searchsorted(np.cumsum(counts), k, side="right"))
    pix = int(index.valid[img][k - (np.cumsum(counts)[img] - counts[img])])
    nbrs = neighbor_images(img, index.n_images, window)
    if not nbrs:
        nbrs = [img]
    pos = select_positives((img, pix), nbrs, index, beta_s, beta_g, cap)
    neg = select_negatives((img, pix), pos, nbrs, index, n_neg, rng)
    return PairBatch((img, pix), pos, neg)
