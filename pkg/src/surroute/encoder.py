"""Hashed n-gram features and a trainable linear projection onto the unit sphere."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .textmodel import _as_array

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_MAX_ORDER = 3  # n-gram codes are packed 16 bits per token into an int64


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


def ngram_bytes(gram) -> bytes:
    return ",".join(str(int(t)) for t in gram).encode("ascii")


@lru_cache(maxsize=1 << 18)
def _bucket(code: int, order: int, dim: int) -> int:
    gram = [(code >> (16 * (order - 1 - j))) & 0xFFFF for j in range(order)]
    return fnv1a_64(ngram_bytes(gram)) % dim


@dataclass(frozen=True)
class FeatureConfig:
    ngram_orders: tuple[int, ...] = (1, 2, 3)
    hash_dim: int = 512
    embed_dim: int = 64

    def __post_init__(self):
        orders = tuple(sorted({int(o) for o in self.ngram_orders}))
        object.__setattr__(self, "ngram_orders", orders)
        if not orders or orders[0] < 1 or orders[-1] > _MAX_ORDER:
            raise ValueError(f"ngram orders must lie in 1..{_MAX_ORDER}")
        if not self.hash_dim >= self.embed_dim >= 2:
            raise ValueError("need hash_dim >= embed_dim >= 2")


@dataclass
class EncoderParams:
    W: np.ndarray
    config: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.shape != (self.config.embed_dim, self.config.hash_dim):
            raise ValueError(f"W has shape {self.W.shape}, expected "
                             f"{(self.config.embed_dim, self.config.hash_dim)}")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("W has non-finite entries")

    @classmethod
    def init(cls, config: FeatureConfig, rng: np.random.Generator) -> "EncoderParams":
        d, d_in = config.embed_dim, config.hash_dim
        limit = np.sqrt(6.0 / (d + d_in))
        return cls(rng.uniform(-limit, limit, size=(d, d_in)), config)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.W.copy(), self.config)


def featurize_batch(X, config: FeatureConfig) -> np.ndarray:
    """Unit-norm hashed n-gram count vectors for a (B, n) batch of equal-length texts."""
    X = np.asarray(X, dtype=np.int64)
    if X.ndim == 1:
        X = X[None, :]
    B, n = X.shape
    if n == 0:
        raise ValueError("sequences must be non-empty")
    if X.min() < 0 or X.max() > 0xFFFF:
        raise ValueError("token ids must fit in 16 bits")
    dim = config.hash_dim
    F = np.zeros(B * dim)
    for o in config.ngram_orders:
        if n < o:
            continue
        codes = np.zeros((B, n - o + 1), dtype=np.int64)
        for j in range(o):
            codes |= X[:, j:n - o + 1 + j] << (16 * (o - 1 - j))
        uniq, inv = np.unique(codes, return_inverse=True)
        buckets = np.array([_bucket(int(c), o, dim) for c in uniq], dtype=np.int64)
        flat = (np.arange(B)[:, None] * dim + buckets[inv.reshape(codes.shape)]).reshape(-1)
        F += np.bincount(flat, minlength=B * dim)
    F = F.reshape(B, dim)
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    return F


def featurize_corpus(corpus, config: FeatureConfig) -> np.ndarray:
    out = np.empty((len(corpus), config.hash_dim))
    groups: dict[int, list[int]] = {}
    for i, x in enumerate(corpus):
        groups.setdefault(len(x), []).append(i)
    for _, idx in sorted(groups.items()):
        out[idx] = featurize_batch(np.stack([_as_array(corpus[i]) for i in idx]), config)
    return out


def featurize(x, config: FeatureConfig) -> np.ndarray:
    return featurize_batch(_as_array(x)[None, :], config)[0]


def project(F: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """z = normalize(W f) for each row of F; also returns the pre-norm lengths."""
    U = F @ W.T
    norms = np.linalg.norm(U, axis=1)
    if np.any(norms == 0):
        raise ValueError("degenerate projection: W f = 0")
    return U / norms[:, None], norms


def project_backward(F: np.ndarray, Z: np.ndarray, norms: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. W given upstream dL/dz for each row.

    d z / d u = (I - z z^T) / |u|, so the radial part of G is discarded.
    """
    Gu = (G - Z * np.sum(Z * G, axis=1, keepdims=True)) / norms[:, None]
    return Gu.T @ F


def embed(x, params: EncoderParams) -> np.ndarray:
    f = featurize(x, params.config)
    Z, _ = project(f[None, :], params.W)
    return Z[0]


def embed_backward(x, params: EncoderParams, upstream_grad) -> np.ndarray:
    f = featurize(x, params.config)[None, :]
    Z, norms = project(f, params.W)
    return project_backward(f, Z, norms, np.asarray(upstream_grad, dtype=np.float64)[None, :])
