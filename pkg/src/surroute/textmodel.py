"""Exact order-k Markov text models used as both sources and surrogates.

A model keeps raw (possibly fractional) context counts and derives its
conditionals by add-alpha smoothing, so every conditional is strictly
positive and KL divergences between models are always finite.

Contexts are encoded as integers with the most recent token as the least
significant base-V digit.  A prefix of length t therefore has the same code
as its lexicographic index, which lets the enumeration routines grow joint
probabilities position by position without materialising sequences.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HUMAN = "human"
MACHINE = "machine"
LABELS = (HUMAN, MACHINE)

MODEL_FORMAT = "surroute.markov/1"

# dense conditional tables are cached up to this many float entries
DENSE_LIMIT = 1 << 22
DEFAULT_ENUM_CAP = 1_000_000


class EnumerationLimitError(ValueError):
    """Raised when an exact enumeration would exceed the configured cap."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(tokens) < 2:
            raise ValueError("vocabulary needs at least two tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self._index[token]

    def __contains__(self, token) -> bool:
        return token in self._index

    @classmethod
    def characters(cls) -> "Vocabulary":
        """Lowercase a-z, space and a single UNK token (V = 28)."""
        return cls(tuple(string.ascii_lowercase) + (" ", UNK))


UNK = "<unk>"


@dataclass(frozen=True, eq=False)
class TokenSequence:
    token_ids: np.ndarray
    label: str = MACHINE
    source_id: str | None = None

    def __post_init__(self):
        ids = np.array(self.token_ids, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise ValueError("token sequence must be non-empty")
        if ids.min() < 0:
            raise ValueError("token ids must be non-negative")
        ids.setflags(write=False)
        object.__setattr__(self, "token_ids", ids)
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")

    def __len__(self) -> int:
        return self.token_ids.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            np.array_equal(self.token_ids, other.token_ids)
            and self.label == other.label
            and self.source_id == other.source_id
        )

    def __hash__(self):
        return hash((self.token_ids.tobytes(), self.label, self.source_id))

    def check(self, vocab: Vocabulary) -> None:
        if self.token_ids.max() >= vocab.size:
            raise ValueError(
                f"token id {int(self.token_ids.max())} out of range for V={vocab.size}"
            )


@dataclass(frozen=True, eq=False)
class CategoricalDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64).reshape(-1)
        if p.size < 1:
            raise ValueError("empty distribution")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.probs.size


def tokenize(text: str, vocab: Vocabulary | None = None, label: str = HUMAN,
             source_id: str | None = None) -> TokenSequence:
    """Lowercase character-level tokenisation; unknown characters map to UNK."""
    vocab = vocab or Vocabulary.characters()
    unk = vocab.index(UNK) if UNK in vocab else None
    ids = []
    for ch in text.lower():
        if ch in vocab:
            ids.append(vocab.index(ch))
        elif unk is not None:
            ids.append(unk)
        else:
            raise ValueError(f"character {ch!r} not in vocabulary and no UNK token")
    return TokenSequence(ids, label=label, source_id=source_id)


def detokenize(x: TokenSequence, vocab: Vocabulary) -> str:
    return "".join(vocab.tokens[i] if len(vocab.tokens[i]) == 1 else "?" for i in x.token_ids)


def _as_array(x) -> np.ndarray:
    if isinstance(x, TokenSequence):
        return x.token_ids
    return np.asarray(x, dtype=np.int64)


class MarkovModel:
    """Add-alpha smoothed order-k Markov model over a fixed vocabulary.

    ``counts`` maps a context tuple (oldest token first, length <= order) to a
    length-V count vector.  Positions i < order are conditioned on the full
    (shorter) prefix, so the model is a proper distribution over sequences of
    any length.
    """

    def __init__(self, vocab: Vocabulary, order: int, alpha: float,
                 counts: dict[tuple[int, ...], np.ndarray] | None = None,
                 model_id: str | None = None):
        if order < 0:
            raise ValueError("order must be non-negative")
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.vocab = vocab
        self.order = int(order)
        self.alpha = float(alpha)
        self.model_id = model_id
        V = vocab.size
        self.counts: dict[tuple[int, ...], np.ndarray] = {}
        for ctx, c in (counts or {}).items():
            ctx = tuple(int(t) for t in ctx)
            c = np.asarray(c, dtype=np.float64)
            if len(ctx) > self.order or c.shape != (V,) or np.any(c < 0):
                raise ValueError(f"bad context entry {ctx}")
            if any(t < 0 or t >= V for t in ctx):
                raise ValueError(f"context {ctx} has out-of-range token")
            c = c.copy()
            c.setflags(write=False)
            self.counts[ctx] = c
        self._tables: dict[int, np.ndarray] = {}

    @property
    def V(self) -> int:
        return self.vocab.size

    def __repr__(self):
        return (f"MarkovModel(id={self.model_id!r}, order={self.order}, "
                f"alpha={self.alpha}, V={self.V}, contexts={len(self.counts)})")

    def _row(self, ctx: tuple[int, ...]) -> np.ndarray:
        c = self.counts.get(ctx)
        if c is None:
            return np.full(self.V, 1.0 / self.V)
        return (c + self.alpha) / (c.sum() + self.alpha * self.V)

    def table(self, length: int) -> np.ndarray | None:
        """Dense (V**length, V) conditional table, or None when too large."""
        if length in self._tables:
            return self._tables[length]
        V = self.V
        n_rows = V ** length
        if n_rows * V > DENSE_LIMIT:
            return None
        tab = np.full((n_rows, V), 1.0 / V)
        for ctx, c in self.counts.items():
            if len(ctx) == length:
                tab[encode_context(ctx, V)] = (c + self.alpha) / (c.sum() + self.alpha * V)
        tab.setflags(write=False)
        self._tables[length] = tab
        return tab

    def rows(self, length: int, codes: np.ndarray) -> np.ndarray:
        """Conditional distributions for an array of context codes of one length."""
        codes = np.asarray(codes, dtype=np.int64)
        tab = self.table(length)
        if tab is not None:
            return tab[codes]
        uniq, inv = np.unique(codes.reshape(-1), return_inverse=True)
        block = np.stack([self._row(decode_context(int(c), length, self.V)) for c in uniq])
        return block[inv].reshape(codes.shape + (self.V,))

    def conditionals(self, X) -> np.ndarray:
        """Next-token distributions at every position of a batch.

        ``X`` is an int array of shape (B, n) or (n,).  Returns (B, n, V) (or
        (n, V)) where entry [b, i] is p(. | X[b, :i]).
        """
        X = np.asarray(X, dtype=np.int64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        B, n = X.shape
        if n and (X.min() < 0 or X.max() >= self.V):
            raise ValueError("token id out of range")
        out = np.empty((B, n, self.V))
        k = self.order
        for i in range(min(k, n)):
            out[:, i] = self.rows(i, _codes(X[:, :i], self.V))
        if n > k:
            codes = np.zeros((B, n - k), dtype=np.int64)
            for j in range(1, k + 1):
                codes += X[:, k - j:n - j] * (self.V ** (j - 1))
            out[:, k:] = self.rows(k, codes)
        return out[0] if single else out

    # persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        entries = []
        for ctx in sorted(self.counts, key=lambda c: (len(c), c)):
            c = self.counts[ctx]
            vals = [int(v) if float(v).is_integer() else float(v) for v in c]
            entries.append([list(ctx), vals])
        return {
            "format": MODEL_FORMAT,
            "model_id": self.model_id,
            "vocabulary": list(self.vocab.tokens),
            "order": self.order,
            "alpha": self.alpha,
            "contexts": entries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarkovModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        vocab = Vocabulary(tuple(d["vocabulary"]))
        counts = {tuple(ctx): np.asarray(c, dtype=np.float64) for ctx, c in d["contexts"]}
        return cls(vocab, d["order"], d["alpha"], counts, model_id=d.get("model_id"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MarkovModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def encode_context(ctx: Sequence[int], V: int) -> int:
    code = 0
    for t in ctx:
        code = code * V + int(t)
    return code


def decode_context(code: int, length: int, V: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        code, r = divmod(code, V)
        out.append(r)
    return tuple(reversed(out))


def _codes(X: np.ndarray, V: int) -> np.ndarray:
    code = np.zeros(X.shape[0], dtype=np.int64)
    for j in range(X.shape[1]):
        code = code * V + X[:, j]
    return code


# training ---------------------------------------------------------------

def train_from_corpus(corpus: Iterable, vocab: Vocabulary, order: int,
                      alpha: float = 0.5, model_id: str | None = None) -> MarkovModel:
    """Count-based estimate p(t|c) = (count(c,t) + alpha) / (count(c) + alpha V)."""
    seqs = [_as_array(x) for x in corpus]
    if not seqs:
        raise ValueError("corpus is empty")
    if order < 0:
        raise ValueError("order must be non-negative")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    V = vocab.size
    for s in seqs:
        if s.size == 0:
            raise ValueError("corpus contains an empty sequence")
        if s.min() < 0 or s.max() >= V:
            raise ValueError("token id out of range")

    # accumulate (context length, context code, token) triples
    keys: dict[int, list[np.ndarray]] = {}
    for s in seqs:
        n = s.size
        for i in range(min(order, n)):
            keys.setdefault(i, []).append(np.array([encode_context(s[:i], V) * V + s[i]]))
        if n > order:
            code = np.zeros(n - order, dtype=np.int64)
            for j in range(1, order + 1):
                code += s[order - j:n - j] * (V ** (j - 1))
            keys.setdefault(order, []).append(code * V + s[order:])
    counts: dict[tuple[int, ...], np.ndarray] = {}
    for length in sorted(keys):
        joint, n = np.unique(np.concatenate(keys[length]), return_counts=True)
        ctx_codes, toks = np.divmod(joint, V)
        for c in np.unique(ctx_codes):
            row = np.zeros(V)
            sel = ctx_codes == c
            row[toks[sel]] = n[sel]
            counts[decode_context(int(c), length, V)] = row
    return MarkovModel(vocab, order, alpha, counts, model_id=model_id)


def next_token_distribution(model: MarkovModel, context) -> CategoricalDistribution:
    ctx = _as_array(context)
    if ctx.size and (ctx.min() < 0 or ctx.max() >= model.V):
        raise ValueError("token id out of range")
    tail = tuple(int(t) for t in ctx[max(0, ctx.size - model.order):]) if model.order else ()
    return CategoricalDistribution(model._row(tail))


def sequence_log_probs(model: MarkovModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-position log p(x_i | x_<i) and the full conditional at each position.

    Returns ``(log_probs, dists)`` with shapes (n,) and (n, V).
    """
    ids = _as_array(x)
    if ids.size == 0:
        raise ValueError("sequence must be non-empty")
    dists = model.conditionals(ids)
    lp = np.log(dists[np.arange(ids.size), ids])
    return lp, dists


# sampling ---------------------------------------------------------------

def nucleus_filter(probs: np.ndarray, top_p: float = 1.0, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scale then keep the smallest top-probability prefix with mass >= top_p.

    Ties in probability are ordered by token index.  Works on (..., V) arrays.
    """
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(probs, dtype=np.float64)
    if temperature != 1.0:
        with np.errstate(divide="ignore"):
            logits = np.log(p) / temperature
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
    if top_p < 1.0:
        order = np.argsort(-p, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(p, order, axis=-1)
        before = np.cumsum(sorted_p, axis=-1) - sorted_p
        keep_sorted = before < top_p
        keep = np.zeros_like(keep_sorted)
        np.put_along_axis(keep, order, keep_sorted, axis=-1)
        p = np.where(keep, p, 0.0)
        p /= p.sum(axis=-1, keepdims=True)
    return p


def sample_batch(model: MarkovModel, prompts, length: int, top_p: float = 1.0,
                 temperature: float = 1.0, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Sample continuations for a batch of equal-length prompts.

    ``prompts`` is a (B, p) int array (p may be 0).  Returns (B, length).
    Row b consumes only its own row of pre-drawn uniforms, so results are a
    deterministic function of the generator state and batch size.
    """
    if length <= 0:
        raise ValueError("length must be positive")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(rng)
    P = np.asarray(prompts, dtype=np.int64)
    if P.ndim == 1:
        P = P[None, :]
    B, plen = P.shape
    U = rng.random((B, length))
    V, k = model.V, model.order
    buf = np.empty((B, plen + length), dtype=np.int64)
    buf[:, :plen] = P
    for t in range(length):
        pos = plen + t
        clen = min(k, pos)
        codes = _codes(buf[:, pos - clen:pos], V)
        probs = nucleus_filter(model.rows(clen, codes), top_p, temperature)
        cdf = np.cumsum(probs, axis=-1)
        choice = (cdf > (U[:, t:t + 1] * cdf[:, -1:])).argmax(axis=-1)
        buf[:, pos] = choice
    return buf[:, plen:]


def sample(model: MarkovModel, prompt=(), length: int = 128, top_p: float = 0.96,
           temperature: float = 1.0, seed: int = 0, label: str = MACHINE) -> TokenSequence:
    """Sample one continuation (prompt excluded) from the nucleus-filtered model."""
    P = np.asarray(_as_array(prompt), dtype=np.int64).reshape(1, -1)
    out = sample_batch(model, P, length, top_p, temperature, np.random.default_rng(seed))
    return TokenSequence(out[0], label=label, source_id=model.model_id)


# exact divergences ------------------------------------------------------

def _check_pair(p: MarkovModel, q: MarkovModel) -> None:
    if p.vocab != q.vocab:
        raise ValueError("models must share a vocabulary")


def joint_log_probs(model: MarkovModel, horizon: int, cap: int = DEFAULT_ENUM_CAP) -> np.ndarray:
    """Log-probabilities of all V**horizon sequences, in lexicographic order."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    V = model.V
    if V ** horizon > cap:
        raise EnumerationLimitError(f"V**horizon = {V ** horizon} exceeds cap {cap}")
    lp = np.zeros(1)
    for t in range(horizon):
        clen = min(t, model.order)
        codes = np.arange(V ** t, dtype=np.int64) % (V ** clen)
        with np.errstate(divide="ignore"):
            lp = (lp[:, None] + np.log(model.rows(clen, codes))).reshape(-1)
    return lp


def sequence_kl(p_src: MarkovModel, p_sur: MarkovModel, horizon: int,
                cap: int = DEFAULT_ENUM_CAP) -> float:
    """KL between the length-horizon sequence distributions, by enumeration."""
    _check_pair(p_src, p_sur)
    a = joint_log_probs(p_src, horizon, cap)
    b = joint_log_probs(p_sur, horizon, cap)
    pa = np.exp(a)
    live = pa > 0
    if np.any(np.isneginf(b[live])):
        raise ValueError("surrogate assigns zero probability where source does not")
    return float(max(np.sum(pa[live] * (a[live] - b[live])), 0.0))


def exact_kl(p_src: MarkovModel, p_sur: MarkovModel, horizon: int = 8,
             cap: int = DEFAULT_ENUM_CAP) -> float:
    """Per-token KL rate over a finite horizon, by exhaustive enumeration."""
    return sequence_kl(p_src, p_sur, horizon, cap) / horizon


def kl_rate(p_src: MarkovModel, p_sur: MarkovModel, horizon: int = 8) -> float:
    """Same quantity as :func:`exact_kl`, computed with the KL chain rule.

    The state is the last max(order) tokens, so the cost is
    O(horizon * V**(max_order + 1)) instead of V**horizon.
    """
    _check_pair(p_src, p_sur)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    V = p_src.V
    K = max(p_src.order, p_sur.order)
    pi = np.ones(1)
    total = 0.0
    for t in range(horizon):
        L = min(t, K)
        codes = np.arange(V ** L, dtype=np.int64)
        ps = p_src.rows(min(t, p_src.order), codes % (V ** min(t, p_src.order)))
        qs = p_sur.rows(min(t, p_sur.order), codes % (V ** min(t, p_sur.order)))
        if np.any((qs == 0) & (ps > 0)):
            raise ValueError("surrogate assigns zero probability where source does not")
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(ps > 0, ps * (np.log(ps) - np.log(qs)), 0.0)
        total += float(pi @ terms.sum(axis=1))
        pi = (pi[:, None] * ps).reshape(-1)
        if L + 1 > K:
            pi = pi.reshape(V, -1).sum(axis=0)
    return max(total, 0.0) / horizon


def entropy_rate(model: MarkovModel, horizon: int = 8) -> float:
    """Per-token entropy (nats) of the length-horizon sequence distribution."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    V, k = model.V, model.order
    pi = np.ones(1)
    total = 0.0
    for t in range(horizon):
        L = min(t, k)
        rows = model.rows(L, np.arange(V ** L, dtype=np.int64))
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(rows > 0, rows * np.log(rows), 0.0).sum(axis=1)
        total += float(pi @ h)
        pi = (pi[:, None] * rows).reshape(-1)
        if L + 1 > k:
            pi = pi.reshape(V, -1).sum(axis=0)
    return total / horizon


# corpus files -----------------------------------------------------------

def write_corpus(path, corpus: Iterable[TokenSequence], vocab: Vocabulary) -> None:
    with open(path, "w") as fh:
        for x in corpus:
            rec = {"tokens": [vocab.tokens[i] for i in x.token_ids],
                   "label": x.label, "source_id": x.source_id}
            fh.write(json.dumps(rec) + "\n")


def read_corpus(path, vocab: Vocabulary) -> list[TokenSequence]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                ids = [vocab.index(t) for t in rec["tokens"]]
            except KeyError as e:
                raise ValueError(f"{path}:{lineno}: unknown token {e}") from None
            out.append(TokenSequence(ids, label=rec["label"], source_id=rec.get("source_id")))
    return out


def stack(corpus: Sequence[TokenSequence]) -> np.ndarray:
    """Stack equal-length sequences into a (B, n) array."""
    lengths = {len(x) for x in corpus}
    if len(lengths) != 1:
        raise ValueError("sequences must share a length to be stacked")
    return np.stack([x.token_ids for x in corpus])
