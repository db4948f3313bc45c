"""Prototype router: distance-softmax affinities, two training stages, inference.

Each router class (a surrogate, or a surrogate/criterion pair in composite
mode) owns K prototypes.  A text's distance to a class is the distance from
its embedding to the nearest of that class's prototypes; affinities are a
softmax of negative distances at temperature ``tau``.

Stage 1 fits the encoder and prototypes with cross-entropy on labelled
white-box texts.  Stage 2 matches the affinity distribution to a target
built from detector scores while anchoring prototypes to their Stage-1
positions.  All gradients are written out by hand; ``min`` over prototypes
sends its subgradient to the achieving prototype (lowest index on ties).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detectors import Criterion, DetectionScore, DetectorSpec, score
from .encoder import (EncoderParams, FeatureConfig, featurize, featurize_corpus, project,
                      project_backward)
from .textmodel import MarkovModel, TokenSequence

ROUTER_FORMAT = "surroute.router/1"
_CHUNK = 512


@dataclass
class PrototypeBank:
    prototypes: np.ndarray
    class_ids: tuple[str, ...]
    anchors: np.ndarray | None = None

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.class_ids = tuple(self.class_ids)
        if self.prototypes.ndim != 3 or self.prototypes.shape[0] != len(self.class_ids):
            raise ValueError("prototypes must have shape (N, K, d) matching class_ids")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class ids must be unique")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValueError("prototypes must be finite")
        if self.anchors is not None:
            self.anchors = np.asarray(self.anchors, dtype=np.float64)
            if self.anchors.shape != self.prototypes.shape:
                raise ValueError("anchors must match the prototype shape")

    @property
    def N(self) -> int:
        return self.prototypes.shape[0]

    @property
    def K(self) -> int:
        return self.prototypes.shape[1]

    @property
    def d(self) -> int:
        return self.prototypes.shape[2]

    @classmethod
    def init(cls, class_ids: Sequence[str], K: int, d: int, rng: np.random.Generator) -> "PrototypeBank":
        N = len(class_ids)
        limit = math.sqrt(6.0 / (d + N * K))
        return cls(rng.uniform(-limit, limit, size=(N, K, d)), tuple(class_ids))

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.prototypes.copy(), self.class_ids,
                             None if self.anchors is None else self.anchors.copy())

    def freeze_anchors(self) -> None:
        self.anchors = self.prototypes.copy()


@dataclass(frozen=True)
class RouterHyper:
    tau: float = 0.1
    margin: float = 0.5
    lambda_sep: float = 1e-3
    lambda_norm: float = 1e-4
    lambda_anc: float = 1.0
    target_temperature: float = 1.0
    lambda_ce2: float = 0.0  # optional auxiliary Stage-2 cross-entropy on argmax Q

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.target_temperature > 0:
            raise ValueError("target_temperature must be positive")
        if self.margin < 0 or min(self.lambda_sep, self.lambda_norm, self.lambda_anc,
                                  self.lambda_ce2) < 0:
            raise ValueError("margin and loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr_stage1: float = 1e-2
    lr_stage2: float = 5e-3
    warmup_steps: int = 200
    weight_decay: float = 0.01
    seed: int = 0
    K: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.K < 1:
            raise ValueError("epochs, batch_size and K must be positive")
        if not (self.lr_stage1 > 0 and self.lr_stage2 > 0):
            raise ValueError("learning rates must be positive")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ValueError("warmup_steps and weight_decay must be non-negative")


@dataclass(frozen=True)
class AffinityDistribution:
    probs: np.ndarray
    distances: np.ndarray


@dataclass
class RouterModel:
    encoder: EncoderParams
    bank: PrototypeBank
    hyper: RouterHyper = field(default_factory=RouterHyper)
    criterion: Criterion = Criterion.FAST_DETECT_GPT
    score_mean: np.ndarray | None = None
    score_std: np.ndarray | None = None
    history: list = field(default_factory=list)

    @property
    def class_ids(self) -> tuple[str, ...]:
        return self.bank.class_ids

    def copy(self) -> "RouterModel":
        return RouterModel(self.encoder.copy(), self.bank.copy(), self.hyper, self.criterion,
                           None if self.score_mean is None else self.score_mean.copy(),
                           None if self.score_std is None else self.score_std.copy(),
                           list(self.history))

    def to_dict(self) -> dict:
        cfg = self.encoder.config
        return {
            "format": ROUTER_FORMAT,
            "feature_config": {"ngram_orders": list(cfg.ngram_orders),
                               "hash_dim": cfg.hash_dim, "embed_dim": cfg.embed_dim},
            "W": self.encoder.W.tolist(),
            "class_ids": list(self.bank.class_ids),
            "prototypes": self.bank.prototypes.tolist(),
            "anchors": None if self.bank.anchors is None else self.bank.anchors.tolist(),
            "hyper": asdict(self.hyper),
            "criterion": self.criterion.value,
            "score_mean": None if self.score_mean is None else self.score_mean.tolist(),
            "score_std": None if self.score_std is None else self.score_std.tolist(),
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouterModel":
        if d.get("format") != ROUTER_FORMAT:
            raise ValueError(f"unsupported router format {d.get('format')!r}")
        cfg = FeatureConfig(tuple(d["feature_config"]["ngram_orders"]),
                            d["feature_config"]["hash_dim"], d["feature_config"]["embed_dim"])
        bank = PrototypeBank(np.array(d["prototypes"]), tuple(d["class_ids"]),
                             None if d["anchors"] is None else np.array(d["anchors"]))
        arr = lambda v: None if v is None else np.array(v, dtype=np.float64)  # noqa: E731
        return cls(EncoderParams(np.array(d["W"]), cfg), bank, RouterHyper(**d["hyper"]),
                   Criterion.parse(d["criterion"]), arr(d["score_mean"]), arr(d["score_std"]),
                   list(d.get("history", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RouterModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


# distances and affinities ----------------------------------------------

def distances_batch(Z: np.ndarray, prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-prototype distance per class, (B, N), and the achieving k, (B, N)."""
    Z = np.atleast_2d(Z)
    B = Z.shape[0]
    N, K, _ = prototypes.shape
    D = np.empty((B, N))
    arg = np.empty((B, N), dtype=np.int64)
    for s in range(0, B, _CHUNK):
        diff = Z[s:s + _CHUNK, None, None, :] - prototypes[None]
        dist = np.sqrt(np.einsum("bnkd,bnkd->bnk", diff, diff))
        arg[s:s + _CHUNK] = dist.argmin(axis=2)
        D[s:s + _CHUNK] = np.take_along_axis(dist, arg[s:s + _CHUNK, :, None], axis=2)[..., 0]
    return D, arg


def class_distances(z: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (bank.d,):
        raise ValueError(f"embedding has shape {z.shape}, expected ({bank.d},)")
    return distances_batch(z[None, :], bank.prototypes)[0][0]


def softmax_neg(D: np.ndarray, tau: float) -> np.ndarray:
    logits = -np.asarray(D, dtype=np.float64) / tau
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def class_probabilities(distances, tau: float) -> AffinityDistribution:
    if not tau > 0:
        raise ValueError("tau must be positive")
    d = np.asarray(distances, dtype=np.float64)
    return AffinityDistribution(softmax_neg(d, tau), d)


def build_target_distribution(s, pool_mean, pool_std, T_target: float = 1.0) -> AffinityDistribution:
    """Softmax over detectors of z-scored detection scores at temperature T_target.

    Detectors with non-positive std get a z-score of 0.  Works on (N,) or (B, N).
    """
    if not T_target > 0:
        raise ValueError("T_target must be positive")
    s = np.asarray(s, dtype=np.float64)
    mean = np.asarray(pool_mean, dtype=np.float64)
    std = np.asarray(pool_std, dtype=np.float64)
    ok = std > 0
    z = np.where(ok, (s - mean) / np.where(ok, std, 1.0), 0.0)
    return AffinityDistribution(softmax_neg(-z, T_target), z)


# losses ------------------------------------------------------------------

@dataclass
class LossResult:
    value: float
    grad_prototypes: np.ndarray
    grad_Z: np.ndarray
    parts: dict


def sep_loss(prototypes: np.ndarray, margin: float) -> tuple[float, np.ndarray]:
    """Hinge-squared penalty on cross-class prototype pairs closer than the margin.

    Normalised by Z = N (N - 1) K^2, the number of ordered cross-class pairs.
    """
    N, K, d = prototypes.shape
    if N < 2 or margin <= 0:
        return 0.0, np.zeros_like(prototypes)
    flat = prototypes.reshape(N * K, d)
    cls = np.repeat(np.arange(N), K)
    diff = flat[:, None, :] - flat[None, :, :]
    r = np.sqrt(np.einsum("abd,abd->ab", diff, diff))
    active = (cls[:, None] != cls[None, :]) & (r < margin)
    Z = N * (N - 1) * K * K
    h = np.where(active, margin - r, 0.0)
    value = float((h ** 2).sum() / Z)
    safe_r = np.where(active & (r > 0), r, 1.0)
    coef = np.where(active & (r > 0), -4.0 * h / safe_r, 0.0) / Z
    grad = np.einsum("ab,abd->ad", coef, diff)
    return value, grad.reshape(N, K, d)


def norm_loss(prototypes: np.ndarray) -> tuple[float, np.ndarray]:
    return float((prototypes ** 2).sum()), 2.0 * prototypes


def anchor_loss(prototypes: np.ndarray, anchors: np.ndarray) -> tuple[float, np.ndarray]:
    diff = prototypes - anchors
    return float((diff ** 2).sum()), 2.0 * diff


def _fit_term(Z: np.ndarray, prototypes: np.ndarray, Q: np.ndarray, tau: float):
    """mean_b KL(Q_b || P_b) with its gradients w.r.t. prototypes and Z."""
    B, N = Q.shape
    D, arg = distances_batch(Z, prototypes)
    logits = -D / tau
    logits -= logits.max(axis=1, keepdims=True)
    logP = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    P = np.exp(logP)
    with np.errstate(divide="ignore", invalid="ignore"):
        qlogq = np.where(Q > 0, Q * np.log(Q), 0.0)
    value = float((qlogq - Q * logP).sum() / B)
    gD = (Q - P) / (tau * B)
    near = prototypes[np.arange(N)[None, :], arg]          # (B, N, d)
    diff = Z[:, None, :] - near
    unit = np.where(D[..., None] > 0, diff / np.where(D > 0, D, 1.0)[..., None], 0.0)
    contrib = gD[..., None] * unit                         # dL/dz share per class
    grad_Z = contrib.sum(axis=1)
    grad_P = np.zeros_like(prototypes)
    np.add.at(grad_P, (np.broadcast_to(np.arange(N), (B, N)), arg), -contrib)
    return value, grad_P, grad_Z, P


def stage1_loss(Z: np.ndarray, labels, bank: PrototypeBank, hyper: RouterHyper) -> LossResult:
    """L_CE + lambda_sep L_sep + lambda_norm L_norm."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (Z.shape[0],) or y.min() < 0 or y.max() >= bank.N:
        raise ValueError("labels must be valid class indices, one per embedding")
    Q = np.zeros((Z.shape[0], bank.N))
    Q[np.arange(y.size), y] = 1.0
    P_ = bank.prototypes
    ce, gP, gZ, _ = _fit_term(Z, P_, Q, hyper.tau)
    sep, g_sep = sep_loss(P_, hyper.margin)
    nrm, g_nrm = norm_loss(P_)
    value = ce + hyper.lambda_sep * sep + hyper.lambda_norm * nrm
    gP = gP + hyper.lambda_sep * g_sep + hyper.lambda_norm * g_nrm
    return LossResult(value, gP, gZ, {"ce": ce, "sep": sep, "norm": nrm})


def stage2_loss(Z: np.ndarray, targets, bank: PrototypeBank, hyper: RouterHyper) -> LossResult:
    """L_KL + lambda_anc L_anchor + lambda_sep L_sep + lambda_norm L_norm (+ optional CE)."""
    if bank.anchors is None:
        raise ValueError("stage 2 needs frozen anchors from stage 1")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if Q.shape != (Z.shape[0], bank.N):
        raise ValueError("need one target distribution over the classes per embedding")
    P_ = bank.prototypes
    kl, gP, gZ, _ = _fit_term(Z, P_, Q, hyper.tau)
    anc, g_anc = anchor_loss(P_, bank.anchors)
    sep, g_sep = sep_loss(P_, hyper.margin)
    nrm, g_nrm = norm_loss(P_)
    value = kl + hyper.lambda_anc * anc + hyper.lambda_sep * sep + hyper.lambda_norm * nrm
    gP = gP + hyper.lambda_anc * g_anc + hyper.lambda_sep * g_sep + hyper.lambda_norm * g_nrm
    parts = {"kl": kl, "anchor": anc, "sep": sep, "norm": nrm}
    if hyper.lambda_ce2 > 0:
        onehot = np.zeros_like(Q)
        onehot[np.arange(Q.shape[0]), Q.argmax(axis=1)] = 1.0
        ce, gP2, gZ2, _ = _fit_term(Z, P_, onehot, hyper.tau)
        value += hyper.lambda_ce2 * ce
        gP = gP + hyper.lambda_ce2 * gP2
        gZ = gZ + hyper.lambda_ce2 * gZ2
        parts["ce"] = ce
    return LossResult(value, gP, gZ, parts)


def full_loss(W: np.ndarray, prototypes: np.ndarray, F: np.ndarray, targets, stage: int,
              bank: PrototypeBank, hyper: RouterHyper):
    """Loss through the encoder; returns (value, dW, dprototypes, parts)."""
    Z, norms = project(F, W)
    b = PrototypeBank(prototypes, bank.class_ids, bank.anchors)
    res = stage1_loss(Z, targets, b, hyper) if stage == 1 else stage2_loss(Z, targets, b, hyper)
    gW = project_backward(F, Z, norms, res.grad_Z)
    return res.value, gW, res.grad_prototypes, res.parts


# optimisation ------------------------------------------------------------

class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: list[np.ndarray], weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * self.wd * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(step: int, total: int, base: float, warmup: int) -> float:
    """Linear warmup to ``base`` then linear decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    return base * max(0.0, (total - step) / span)


def _run(W, prototypes, F, targets, stage, bank, hyper, config: TrainConfig, lr: float,
         rng: np.random.Generator):
    n = F.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    opt = AdamW([W, prototypes], weight_decay=config.weight_decay)
    history = []
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses, weights = [], []
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            value, gW, gP, _ = full_loss(W, prototypes, F[idx], targets[idx], stage, bank, hyper)
            opt.step([gW, gP], lr_at(step, total, lr, config.warmup_steps))
            losses.append(value)
            weights.append(idx.size)
            step += 1
        history.append({"stage": stage, "epoch": epoch + 1,
                        "loss": float(np.average(losses, weights=weights))})
    return history


def _features(data, config: FeatureConfig) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if data.ndim != 2 or data.shape[1] != config.hash_dim:
            raise ValueError("feature matrix has the wrong shape")
        return data
    return featurize_corpus(list(data), config)


def train_stage1(corpus: Sequence[TokenSequence], config: TrainConfig = TrainConfig(),
                 features: FeatureConfig = FeatureConfig(), hyper: RouterHyper = RouterHyper(),
                 class_ids: Sequence[str] | None = None,
                 criterion=Criterion.FAST_DETECT_GPT, F: np.ndarray | None = None) -> RouterModel:
    """Jointly fit W and the prototypes on source-labelled texts.

    Labels are taken from each text's ``source_id``.  Anchors are frozen from
    the final prototypes.
    """
    labels = [x.source_id for x in corpus]
    if any(lab is None for lab in labels):
        raise ValueError("every stage-1 text needs a source_id")
    class_ids = tuple(class_ids) if class_ids is not None else tuple(sorted(set(labels)))
    if len(class_ids) < 2:
        raise ValueError("stage 1 needs at least two classes")
    pos = {c: i for i, c in enumerate(class_ids)}
    if any(lab not in pos for lab in labels):
        raise ValueError("text labelled with a class outside class_ids")
    y = np.array([pos[lab] for lab in labels], dtype=np.int64)
    counts = np.bincount(y, minlength=len(class_ids))
    if counts.min() < config.K:
        bad = class_ids[int(counts.argmin())]
        raise ValueError(f"class {bad!r} has {counts.min()} samples, fewer than K={config.K}")
    F = _features(corpus if F is None else F, features)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    enc = EncoderParams.init(features, rng)
    bank = PrototypeBank.init(class_ids, config.K, features.embed_dim, rng)
    W, P_ = enc.W, bank.prototypes
    history = _run(W, P_, F, y, 1, bank, hyper, config, config.lr_stage1, rng)
    bank.freeze_anchors()
    return RouterModel(enc, bank, hyper, Criterion.parse(criterion), history=history)


def train_stage2(model: RouterModel, corpus: Sequence[TokenSequence] | None = None,
                 scores: np.ndarray | None = None, config: TrainConfig = TrainConfig(),
                 targets: np.ndarray | None = None, F: np.ndarray | None = None,
                 hyper: RouterHyper | None = None) -> RouterModel:
    """Align affinities with detector-score targets; returns a new model.

    ``scores`` is (B, N) in class order (from the detector pool); targets are
    built from per-detector z-scores over this training set.  Explicit
    ``targets`` bypass score standardisation.
    """
    if model.bank.anchors is None:
        raise ValueError("stage 2 needs a stage-1 model with frozen anchors")
    out = model.copy()
    if hyper is not None:
        out.hyper = hyper
    if corpus is not None and any(x.label != "machine" for x in corpus):
        raise ValueError("stage 2 trains on machine-generated texts only")
    Fm = _features(corpus if F is None else F, out.encoder.config)
    if targets is None:
        if scores is None:
            raise ValueError("stage 2 needs detector scores (or explicit targets)")
        S = np.asarray(scores, dtype=np.float64)
        if S.shape != (Fm.shape[0], out.bank.N) or not np.all(np.isfinite(S)):
            raise ValueError("scores must be a finite (texts x classes) matrix")
        out.score_mean = S.mean(axis=0)
        out.score_std = S.std(axis=0)
        targets = build_target_distribution(S, out.score_mean, out.score_std,
                                            out.hyper.target_temperature).probs
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (Fm.shape[0], out.bank.N):
        raise ValueError("targets must be (texts x classes)")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    out.history = out.history + _run(out.encoder.W, out.bank.prototypes, Fm, targets, 2,
                                     out.bank, out.hyper, config, config.lr_stage2, rng)
    return out


# inference ---------------------------------------------------------------

@dataclass(frozen=True)
class RouteResult:
    class_id: str
    index: int
    distances: np.ndarray
    probs: np.ndarray


def embed_features(model: RouterModel, F: np.ndarray) -> np.ndarray:
    return project(F, model.encoder.W)[0]


def route_features(model: RouterModel, F: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(k*, distances, probabilities) for each row of a feature matrix."""
    Z = embed_features(model, F)
    D, _ = distances_batch(Z, model.bank.prototypes)
    return D.argmin(axis=1), D, softmax_neg(D, model.hyper.tau)


def route_corpus(model: RouterModel, corpus: Sequence[TokenSequence]) -> np.ndarray:
    return route_features(model, featurize_corpus(list(corpus), model.encoder.config))[0]


def route(x, model: RouterModel) -> RouteResult:
    f = featurize(x, model.encoder.config)[None, :]
    k, D, P = route_features(model, f)
    return RouteResult(model.class_ids[int(k[0])], int(k[0]), D[0], P[0])


def detector_for(class_id: str, default: Criterion) -> DetectorSpec:
    """Class ids are surrogate ids, or ``surrogate:criterion`` in composite mode."""
    if ":" in class_id:
        sid, crit = class_id.rsplit(":", 1)
        return DetectorSpec(sid, Criterion.parse(crit))
    return DetectorSpec(class_id, default)


def route_and_score(x, model: RouterModel, registry: Mapping[str, MarkovModel],
                    criterion=None) -> DetectionScore:
    crit = model.criterion if criterion is None else Criterion.parse(criterion)
    spec = detector_for(route(x, model).class_id, crit)
    if spec.surrogate_id not in registry:
        raise KeyError(f"surrogate {spec.surrogate_id!r} is not registered")
    return score(x, registry[spec.surrogate_id], spec.criterion)


def with_hyper(model: RouterModel, **changes) -> RouterModel:
    out = model.copy()
    out.hyper = replace(model.hyper, **changes)
    return out
