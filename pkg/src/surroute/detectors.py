"""Zero-shot detection statistics and AUROC.

Every score is oriented so that larger means more machine-like: entropy,
rank and log-rank are negated relative to their textbook definitions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .textmodel import MarkovModel, TokenSequence, _as_array


class Criterion(str, enum.Enum):
    LIKELIHOOD = "likelihood"
    ENTROPY = "entropy"
    RANK = "rank"
    LOGRANK = "logrank"
    LLR = "llr"
    FAST_DETECT_GPT = "fastdetectgpt"

    @classmethod
    def parse(cls, name) -> "Criterion":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("-", "").replace("_", "")
        for c in cls:
            if c.value == key:
                return c
        raise ValueError(f"unknown criterion {name!r}")


ALL_CRITERIA = tuple(Criterion)


@dataclass(frozen=True)
class DetectorSpec:
    surrogate_id: str
    criterion: Criterion

    def __post_init__(self):
        object.__setattr__(self, "criterion", Criterion.parse(self.criterion))

    @property
    def name(self) -> str:
        return f"{self.surrogate_id}:{self.criterion.value}"


@dataclass(frozen=True)
class DetectionScore:
    value: float
    criterion: Criterion
    surrogate_id: str | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("detection score must be finite")


@dataclass(frozen=True)
class RocResult:
    auroc: float
    n_machine: int
    n_human: int


def token_ranks(dists: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """1-based rank of each actual token in descending-probability order.

    Equal probabilities are ordered by token index.
    """
    p_act = np.take_along_axis(dists, ids[..., None], axis=-1)
    higher = (dists > p_act).sum(axis=-1)
    V = dists.shape[-1]
    tied_before = ((dists == p_act) & (np.arange(V) < ids[..., None])).sum(axis=-1)
    return 1 + higher + tied_before


def batch_scores(X, model: MarkovModel, criteria: Sequence = ALL_CRITERIA) -> dict[Criterion, np.ndarray]:
    """Scores for a (B, n) batch of token ids under one surrogate."""
    X = np.asarray(X, dtype=np.int64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] < 1:
        raise ValueError("sequences must be non-empty")
    criteria = [Criterion.parse(c) for c in criteria]
    dists = model.conditionals(X)
    logd = np.log(dists)
    lp = np.take_along_axis(logd, X[..., None], axis=-1)[..., 0]
    out: dict[Criterion, np.ndarray] = {}
    need_rank = {Criterion.RANK, Criterion.LOGRANK, Criterion.LLR} & set(criteria)
    ranks = token_ranks(dists, X) if need_rank else None
    for c in criteria:
        if c is Criterion.LIKELIHOOD:
            out[c] = lp.mean(axis=1)
        elif c is Criterion.ENTROPY:
            out[c] = (dists * logd).sum(axis=-1).mean(axis=1)
        elif c is Criterion.RANK:
            out[c] = -ranks.mean(axis=1)
        elif c is Criterion.LOGRANK:
            out[c] = -np.log(ranks).mean(axis=1)
        elif c is Criterion.LLR:
            den = np.log(ranks).sum(axis=1)
            num = -lp.sum(axis=1)
            safe = np.where(den > 0, den, 1.0)
            out[c] = np.where(den > 0, num / safe, 0.0)
        elif c is Criterion.FAST_DETECT_GPT:
            mu = (dists * logd).sum(axis=-1)
            var = (dists * logd ** 2).sum(axis=-1) - mu ** 2
            var_total = np.maximum(var, 0.0).sum(axis=1)
            num = lp.sum(axis=1) - mu.sum(axis=1)
            ok = var_total >= 1e-12
            out[c] = np.where(ok, num / np.sqrt(np.where(ok, var_total, 1.0)), 0.0)
    return out


def _single(x, surrogate: MarkovModel, criterion: Criterion) -> DetectionScore:
    ids = _as_array(x)
    if ids.size < 1:
        raise ValueError("sequence must be non-empty")
    v = float(batch_scores(ids[None, :], surrogate, [criterion])[criterion][0])
    return DetectionScore(v, criterion, surrogate.model_id)


def likelihood_score(x, surrogate: MarkovModel) -> DetectionScore:
    """Mean token log-probability."""
    return _single(x, surrogate, Criterion.LIKELIHOOD)


def entropy_score(x, surrogate: MarkovModel) -> DetectionScore:
    """Negated mean predictive entropy (nats)."""
    return _single(x, surrogate, Criterion.ENTROPY)


def rank_score(x, surrogate: MarkovModel) -> DetectionScore:
    return _single(x, surrogate, Criterion.RANK)


def log_rank_score(x, surrogate: MarkovModel) -> DetectionScore:
    return _single(x, surrogate, Criterion.LOGRANK)


def llr_score(x, surrogate: MarkovModel) -> DetectionScore:
    """Log-likelihood / log-rank ratio; 0 when every token has rank 1."""
    return _single(x, surrogate, Criterion.LLR)


def fast_detect_gpt_score(x, surrogate: MarkovModel) -> DetectionScore:
    """Analytic sampling discrepancy: log-likelihood standardized by its
    per-position mean and variance under the surrogate itself."""
    return _single(x, surrogate, Criterion.FAST_DETECT_GPT)


SCORERS = {
    Criterion.LIKELIHOOD: likelihood_score,
    Criterion.ENTROPY: entropy_score,
    Criterion.RANK: rank_score,
    Criterion.LOGRANK: log_rank_score,
    Criterion.LLR: llr_score,
    Criterion.FAST_DETECT_GPT: fast_detect_gpt_score,
}


def score(x, surrogate: MarkovModel, criterion) -> DetectionScore:
    return SCORERS[Criterion.parse(criterion)](x, surrogate)


def auroc(machine_scores, human_scores) -> RocResult:
    """Mann-Whitney AUROC via rank sums; ties count one half."""
    m = np.asarray(machine_scores, dtype=np.float64).reshape(-1)
    h = np.asarray(human_scores, dtype=np.float64).reshape(-1)
    if m.size == 0 or h.size == 0:
        raise ValueError("both score lists must be non-empty")
    ranks = rankdata(np.concatenate([m, h]))
    u = ranks[:m.size].sum() - m.size * (m.size + 1) / 2.0
    return RocResult(float(u / (m.size * h.size)), int(m.size), int(h.size))


def _resolve(pool: Sequence[DetectorSpec], registry: Mapping[str, MarkovModel]):
    if not pool:
        raise ValueError("detector pool is empty")
    for d in pool:
        if d.surrogate_id not in registry:
            raise KeyError(f"surrogate {d.surrogate_id!r} is not registered")


def score_pool(x, pool: Sequence[DetectorSpec], registry: Mapping[str, MarkovModel]) -> np.ndarray:
    """Score vector s with s[k] = score of detector k on x, in pool order."""
    ids = _as_array(x)
    return score_pool_batch(ids[None, :], pool, registry)[0]


def score_pool_batch(X, pool: Sequence[DetectorSpec], registry: Mapping[str, MarkovModel]) -> np.ndarray:
    """(B, len(pool)) score matrix for equal-length texts."""
    _resolve(pool, registry)
    X = np.asarray(X, dtype=np.int64)
    by_sur: dict[str, set] = {}
    for d in pool:
        by_sur.setdefault(d.surrogate_id, set()).add(d.criterion)
    cache = {sid: batch_scores(X, registry[sid], sorted(cs, key=lambda c: c.value))
             for sid, cs in by_sur.items()}
    return np.stack([cache[d.surrogate_id][d.criterion] for d in pool], axis=1)


def score_corpus(corpus: Sequence[TokenSequence], pool: Sequence[DetectorSpec],
                 registry: Mapping[str, MarkovModel]) -> np.ndarray:
    """Score a corpus of possibly unequal-length texts; rows follow corpus order."""
    _resolve(pool, registry)
    out = np.empty((len(corpus), len(pool)))
    groups: dict[int, list[int]] = {}
    for i, x in enumerate(corpus):
        groups.setdefault(len(x), []).append(i)
    for _, idx in sorted(groups.items()):
        X = np.stack([corpus[i].token_ids for i in idx])
        out[idx] = score_pool_batch(X, pool, registry)
    return out
