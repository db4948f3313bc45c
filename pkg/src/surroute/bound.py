"""Numerical checks for the mismatch risk bound and its ingredients.

The bound states that for a statistic with |T| <= B,

    |E_src T - E_sur T| <= 2 B TV(src, sur) <= B sqrt(2 KL(src || sur)),

the second step being Pinsker's inequality.  Everything here works on
finite outcome spaces: either explicit categorical vectors or the set of all
length-h sequences of a pair of Markov models.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .detectors import Criterion, batch_scores
from .textmodel import DEFAULT_ENUM_CAP, CategoricalDistribution, MarkovModel, joint_log_probs

SLACK_TOL = 1e-9


def _vec(p) -> np.ndarray:
    if isinstance(p, CategoricalDistribution):
        return p.probs
    return np.asarray(p, dtype=np.float64).reshape(-1)


def tv_distance(p, q) -> float:
    p, q = _vec(p), _vec(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.size} vs {q.size}")
    return 0.5 * float(np.abs(p - q).sum())


def kl_categorical(p, q) -> float:
    """sum_j p_j ln(p_j / q_j) with the 0 ln 0 = 0 convention."""
    p, q = _vec(p), _vec(q)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.size} vs {q.size}")
    live = p > 0
    if np.any(q[live] <= 0):
        raise ValueError("p is not absolutely continuous with respect to q")
    return float(max(np.sum(p[live] * (np.log(p[live]) - np.log(q[live]))), 0.0))


def pinsker_check(p, q) -> bool:
    return tv_distance(p, q) <= math.sqrt(kl_categorical(p, q) / 2.0) + SLACK_TOL


@dataclass(frozen=True)
class BoundReport:
    gap: float
    tv: float
    kl: float
    bound: float
    B: float
    holds: bool
    slack: float
    mu_src: float = float("nan")
    mu_sur: float = float("nan")

    @property
    def tv_bound(self) -> float:
        """Intermediate link 2 B TV."""
        return 2.0 * self.B * self.tv

    def chain_slacks(self) -> tuple[float, float]:
        """Slack of (gap <= 2B TV, 2B TV <= B sqrt(2 KL))."""
        return self.tv_bound - self.gap, self.bound - self.tv_bound

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tv_bound"] = self.tv_bound
        return d


def report_from_distributions(values, p, q, B: float) -> BoundReport:
    """Gap, TV and KL for a statistic tabulated over a finite outcome space."""
    values, p, q = _vec(values), _vec(p), _vec(q)
    if not B > 0:
        raise ValueError("B must be positive")
    if values.shape != p.shape or p.shape != q.shape:
        raise ValueError("statistic and distributions must share the outcome space")
    if np.any(np.abs(values) > B + SLACK_TOL):
        raise ValueError(f"statistic exceeds declared bound B={B}: max |T| = {np.abs(values).max()}")
    mu_src = float(p @ values)
    mu_sur = float(q @ values)
    gap = abs(mu_src - mu_sur)
    tv = min(tv_distance(p, q), 1.0)
    kl = kl_categorical(p, q)
    bound = B * math.sqrt(2.0 * kl)
    return BoundReport(gap=gap, tv=tv, kl=kl, bound=bound, B=float(B),
                       holds=gap <= bound + SLACK_TOL, slack=bound - gap,
                       mu_src=mu_src, mu_sur=mu_sur)


def enumerate_sequences(V: int, horizon: int) -> np.ndarray:
    """All V**horizon sequences as a (V**horizon, horizon) array, lexicographic."""
    idx = np.arange(V ** horizon, dtype=np.int64)
    out = np.empty((idx.size, horizon), dtype=np.int64)
    for j in range(horizon - 1, -1, -1):
        idx, out[:, j] = np.divmod(idx, V)
    return out


def mismatch_gap(T: Callable[[np.ndarray], np.ndarray] | np.ndarray, p_src: MarkovModel,
                 p_sur: MarkovModel, horizon: int, B: float = 1.0,
                 cap: int = DEFAULT_ENUM_CAP) -> BoundReport:
    """Exact mean-statistic gap between two sequence models over a horizon.

    ``T`` is either a vectorised callable mapping a (M, horizon) id array to M
    values, or a precomputed array over the lexicographically enumerated
    sequences.  The KL reported is the sequence-level total, not a rate.
    """
    if p_src.vocab != p_sur.vocab:
        raise ValueError("models must share a vocabulary")
    p = np.exp(joint_log_probs(p_src, horizon, cap))
    q = np.exp(joint_log_probs(p_sur, horizon, cap))
    if callable(T):
        values = np.asarray(T(enumerate_sequences(p_src.V, horizon)), dtype=np.float64)
    else:
        values = np.asarray(T, dtype=np.float64).reshape(-1)
    return report_from_distributions(values, p, q, B)


def detector_statistic(surrogate: MarkovModel, criterion=Criterion.LIKELIHOOD,
                       B: float = 1.0, scale: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """A detection score divided by ``scale`` and clipped into [-B, B]."""
    crit = Criterion.parse(criterion)

    def T(X):
        return np.clip(batch_scores(X, surrogate, [crit])[crit] / scale, -B, B)

    return T


def finite_sample_bound(B: float, kl: float, n: int, delta: float) -> float:
    """B sqrt(2 KL) + 2B sqrt(ln(2/delta) / (2n))."""
    if not B > 0:
        raise ValueError("B must be positive")
    if kl < 0:
        raise ValueError("kl must be non-negative")
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return B * math.sqrt(2.0 * kl) + 2.0 * B * math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def empirical_gaps(values, p, q, n: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    """|mean T over n draws from p - mean T over n draws from q|, per trial."""
    values, p, q = _vec(values), _vec(p), _vec(q)
    a = rng.choice(values.size, size=(trials, n), p=p / p.sum())
    b = rng.choice(values.size, size=(trials, n), p=q / q.sum())
    return np.abs(values[a].mean(axis=1) - values[b].mean(axis=1))
