"""Synthetic cross-model experiments: suites, score tables, reports.

A suite is a pool of Markov generators ("white-box" surrogates), black-box
variants of each pool member, and a higher-entropy human-proxy model, plus
the corpora sampled from them:

* ``affinity`` - every pool generator continues the same human prompts; the
  matching human texts are included.  Used for affinity matrices.
* ``stage1``   - pool-labelled texts under varied conditioning regimes.
* ``stage2``   - texts from the black-box training variants.
* ``heldout``  - fresh texts from pool sources and black-box evaluation
  variants, plus human texts.  Used for routing evaluation.

Reports are computed from persisted score and routing tables only, so they
can be regenerated bit-exactly from artifacts.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .bound import BoundReport, mismatch_gap
from .detectors import ALL_CRITERIA, Criterion, DetectorSpec, auroc, score_pool_batch
from .encoder import featurize_corpus
from .router import (RouterModel, TrainConfig, embed_features,
                     route_features, train_stage1, train_stage2)
from .textmodel import (HUMAN, MACHINE, MarkovModel, TokenSequence, Vocabulary, kl_rate,
                        read_corpus, sample_batch, train_from_corpus, write_corpus)

SPLITS = ("affinity", "stage1", "stage2", "heldout")
MANIFEST = "manifest.json"


def substream(root: int, *keys) -> np.random.Generator:
    """Independent generator for a named stage, derived from one root seed."""
    words = [int(root)]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass(frozen=True)
class ExperimentConfig:
    n_generators: int = 6
    gen_order: int = 2
    gen_alpha: float = 0.5
    gen_concentration: float = 0.1
    gen_corpus_size: int = 400
    gen_corpus_length: int = 160
    human_order: int = 2
    human_alpha: float = 0.5
    human_concentration: float = 1.0
    blackbox_mix: float = 0.3
    samples_per_cell: int = 500
    seq_length: int = 128
    prompt_length: int = 30
    top_p: float = 0.96
    temperature: float = 1.0
    stage1_per_class: int = 200
    stage2_per_source: int = 200
    eval_per_source: int = 200
    criteria: tuple[str, ...] = tuple(c.value for c in ALL_CRITERIA)
    router_criterion: str = Criterion.FAST_DETECT_GPT.value
    kl_horizon: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "criteria", tuple(Criterion.parse(c).value for c in self.criteria))
        object.__setattr__(self, "router_criterion", Criterion.parse(self.router_criterion).value)
        if self.n_generators < 1:
            raise ValueError("n_generators must be >= 1")
        for name in ("gen_corpus_size", "gen_corpus_length", "samples_per_cell", "seq_length",
                     "stage1_per_class", "stage2_per_source", "eval_per_source", "kl_horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.prompt_length < 0:
            raise ValueError("prompt_length must be non-negative")
        for name in ("gen_alpha", "human_alpha", "gen_concentration", "human_concentration",
                     "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gen_order < 0 or self.human_order < 0:
            raise ValueError("orders must be non-negative")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if not 0 <= self.blackbox_mix <= 1:
            raise ValueError("blackbox_mix must be in [0, 1]")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


# suite construction ------------------------------------------------------

def _teacher(vocab: Vocabulary, order: int, concentration: float, rng: np.random.Generator,
             model_id: str) -> MarkovModel:
    """Dirichlet-random transition structure stored as large pseudo-counts."""
    V = vocab.size
    counts = {}
    for length in range(order + 1):
        rows = rng.dirichlet(np.full(V, concentration), size=V ** length)
        for code in range(V ** length):
            ctx = tuple(int(t) for t in np.unravel_index(code, (V,) * length)) if length else ()
            counts[ctx] = rows[code] * 1e6
    return MarkovModel(vocab, order, 1e-3, counts, model_id=model_id)


def _blend(parent: MarkovModel, other: MarkovModel, mix: float, model_id: str) -> MarkovModel:
    counts = {}
    for ctx in parent.counts:
        a, b = parent._row(ctx), other._row(ctx)
        counts[ctx] = ((1 - mix) * a + mix * b) * 1e6
    return MarkovModel(parent.vocab, parent.order, parent.alpha, counts, model_id=model_id)


def _fit_from_teacher(teacher: MarkovModel, cfg: ExperimentConfig, order: int, alpha: float,
                      rng: np.random.Generator, model_id: str) -> MarkovModel:
    corpus = sample_batch(teacher, np.zeros((cfg.gen_corpus_size, 0), dtype=np.int64),
                          cfg.gen_corpus_length, 1.0, 1.0, rng)
    return train_from_corpus(corpus, teacher.vocab, order, alpha, model_id=model_id)


@dataclass
class Suite:
    config: ExperimentConfig
    vocab: Vocabulary
    models: dict[str, MarkovModel]
    pool_ids: tuple[str, ...]
    blackbox_train_ids: tuple[str, ...]
    blackbox_eval_ids: tuple[str, ...]
    human_id: str
    corpora: dict[str, list[TokenSequence]] = field(default_factory=dict)

    @property
    def registry(self) -> dict[str, MarkovModel]:
        return {k: self.models[k] for k in self.pool_ids}

    def family(self, source_id: str) -> str:
        """Pool generator a black-box variant was derived from."""
        for prefix in ("bbtrain", "bbeval"):
            if source_id.startswith(prefix + "-"):
                return source_id[len(prefix) + 1:]
        return source_id

    # persistence
    def save(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        (out / "models").mkdir(parents=True, exist_ok=True)
        (out / "corpora").mkdir(parents=True, exist_ok=True)
        written = []
        for mid in sorted(self.models):
            p = out / "models" / f"{mid}.json"
            self.models[mid].save(p)
            written.append(p)
        for split in SPLITS:
            p = out / "corpora" / f"{split}.jsonl"
            write_corpus(p, self.corpora.get(split, []), self.vocab)
            written.append(p)
        manifest = {
            "format": "surroute.suite/1",
            "config": asdict(self.config),
            "vocabulary": list(self.vocab.tokens),
            "pool_ids": list(self.pool_ids),
            "blackbox_train_ids": list(self.blackbox_train_ids),
            "blackbox_eval_ids": list(self.blackbox_eval_ids),
            "human_id": self.human_id,
            "files": [str(p.relative_to(out)) for p in written],
        }
        p = out / MANIFEST
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return written + [p]

    @classmethod
    def load(cls, in_dir) -> "Suite":
        src = Path(in_dir)
        man = json.loads((src / MANIFEST).read_text())
        cfg = dict(man["config"])
        cfg["criteria"] = tuple(cfg["criteria"])
        vocab = Vocabulary(tuple(man["vocabulary"]))
        ids = man["pool_ids"] + man["blackbox_train_ids"] + man["blackbox_eval_ids"] + [man["human_id"]]
        models = {}
        for mid in ids:
            path = src / "models" / f"{mid}.json"
            if not path.exists():
                raise FileNotFoundError(path)
            models[mid] = MarkovModel.load(path)
        corpora = {}
        for split in SPLITS:
            path = src / "corpora" / f"{split}.jsonl"
            if not path.exists():
                raise FileNotFoundError(path)
            corpora[split] = read_corpus(path, vocab)
        return cls(ExperimentConfig(**cfg), vocab, models, tuple(man["pool_ids"]),
                   tuple(man["blackbox_train_ids"]), tuple(man["blackbox_eval_ids"]),
                   man["human_id"], corpora)


def _continue(model: MarkovModel, prompts: np.ndarray, cfg: ExperimentConfig,
              rng: np.random.Generator, temperature: float | None = None) -> np.ndarray:
    temp = cfg.temperature if temperature is None else temperature
    cont = sample_batch(model, prompts, cfg.seq_length, cfg.top_p, temp, rng)
    return np.concatenate([prompts, cont], axis=1)


def _seqs(X: np.ndarray, label: str, source_id: str) -> list[TokenSequence]:
    return [TokenSequence(row, label=label, source_id=source_id) for row in X]


def build_suite(config: ExperimentConfig = ExperimentConfig(), vocab: Vocabulary | None = None) -> Suite:
    vocab = vocab or Vocabulary.characters()
    cfg, root = config, config.seed
    models: dict[str, MarkovModel] = {}
    teachers = []
    pool_ids = tuple(f"gen{i}" for i in range(cfg.n_generators))
    for i, gid in enumerate(pool_ids):
        t = _teacher(vocab, cfg.gen_order, cfg.gen_concentration, substream(root, "teacher", i), gid)
        teachers.append(t)
        models[gid] = _fit_from_teacher(t, cfg, cfg.gen_order, cfg.gen_alpha,
                                        substream(root, "gen-corpus", i), gid)
    bb_train, bb_eval = [], []
    for i, gid in enumerate(pool_ids):
        for role, bucket in (("bbtrain", bb_train), ("bbeval", bb_eval)):
            vid = f"{role}-{gid}"
            noise = _teacher(vocab, cfg.gen_order, cfg.gen_concentration,
                             substream(root, role + "-noise", i), vid)
            vt = _blend(teachers[i], noise, cfg.blackbox_mix, vid)
            models[vid] = _fit_from_teacher(vt, cfg, cfg.gen_order, cfg.gen_alpha,
                                            substream(root, role + "-corpus", i), vid)
            bucket.append(vid)
    human_id = "human"
    ht = _teacher(vocab, cfg.human_order, cfg.human_concentration, substream(root, "teacher", "human"),
                  human_id)
    models[human_id] = _fit_from_teacher(ht, cfg, cfg.human_order, cfg.human_alpha,
                                         substream(root, "gen-corpus", "human"), human_id)
    human = models[human_id]
    total = cfg.prompt_length + cfg.seq_length
    empty = lambda n: np.zeros((n, 0), dtype=np.int64)  # noqa: E731

    def human_texts(n, key):
        return sample_batch(human, empty(n), total, 1.0, 1.0, substream(root, "human", key))

    corpora: dict[str, list[TokenSequence]] = {}
    # affinity: shared prompts, one corpus per pool generator
    H = human_texts(cfg.samples_per_cell, "affinity")
    prompts = H[:, :cfg.prompt_length]
    aff = _seqs(H, HUMAN, human_id)
    for i, gid in enumerate(pool_ids):
        aff += _seqs(_continue(models[gid], prompts, cfg, substream(root, "affinity", i)), MACHINE, gid)
    corpora["affinity"] = aff

    # stage 1: generate / polish / rewrite conditioning regimes
    s1 = []
    n1 = cfg.stage1_per_class
    P1 = human_texts(n1, "stage1")[:, :cfg.prompt_length]
    thirds = [n1 - 2 * (n1 // 3), n1 // 3, n1 // 3]
    for i, gid in enumerate(pool_ids):
        g = models[gid]
        rng = substream(root, "stage1", i)
        a, b = thirds[0], thirds[0] + thirds[1]
        parts = [_continue(g, P1[:a], cfg, rng)]
        if thirds[1]:
            parts.append(_continue(g, P1[a:b], cfg, rng, temperature=0.7 * cfg.temperature))
        if thirds[2]:
            other = models[pool_ids[(i + 1) % len(pool_ids)]]
            foreign = _continue(other, P1[b:], cfg, rng)[:, -cfg.prompt_length:] if cfg.prompt_length else P1[b:]
            parts.append(_continue(g, foreign, cfg, rng))
        s1 += _seqs(np.concatenate(parts), MACHINE, gid)
    corpora["stage1"] = s1

    # stage 2: black-box training variants
    P2 = human_texts(cfg.stage2_per_source, "stage2")[:, :cfg.prompt_length]
    s2 = []
    for i, vid in enumerate(bb_train):
        s2 += _seqs(_continue(models[vid], P2, cfg, substream(root, "stage2", i)), MACHINE, vid)
    corpora["stage2"] = s2

    # held-out evaluation: pool sources, black-box eval variants, humans
    He = human_texts(cfg.eval_per_source, "heldout")
    Pe = He[:, :cfg.prompt_length]
    ho = _seqs(He, HUMAN, human_id)
    for i, sid in enumerate(pool_ids + tuple(bb_eval)):
        ho += _seqs(_continue(models[sid], Pe, cfg, substream(root, "heldout", i)), MACHINE, sid)
    corpora["heldout"] = ho
    return Suite(cfg, vocab, models, pool_ids, tuple(bb_train), tuple(bb_eval), human_id, corpora)


# score tables --------------------------------------------------------------

@dataclass
class ScoreTable:
    """Raw per-text detector scores for every split of a suite."""
    split: list[str]
    index: list[int]
    source_id: list[str]
    label: list[str]
    detectors: list[DetectorSpec]
    values: np.ndarray

    def select(self, split: str) -> np.ndarray:
        return np.array([s == split for s in self.split])

    def column(self, surrogate_id: str, criterion) -> np.ndarray:
        key = DetectorSpec(surrogate_id, Criterion.parse(criterion))
        return self.values[:, self.detectors.index(key)]

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["split", "index", "source_id", "label"] + [d.name for d in self.detectors])
            for r in range(len(self.split)):
                w.writerow([self.split[r], self.index[r], self.source_id[r], self.label[r]]
                           + [repr(float(v)) for v in self.values[r]])

    @classmethod
    def load(cls, path) -> "ScoreTable":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
        head = rows[0]
        dets = [DetectorSpec(*h.rsplit(":", 1)) for h in head[4:]]
        body = rows[1:]
        return cls([r[0] for r in body], [int(r[1]) for r in body], [r[2] for r in body],
                   [r[3] for r in body], dets,
                   np.array([[float(v) for v in r[4:]] for r in body]).reshape(len(body), len(dets)))


def _score_group(args):
    X, pool, registry = args
    return score_pool_batch(X, pool, registry)


def score_suite(suite: Suite, criteria: Sequence | None = None, splits: Sequence[str] = SPLITS,
                workers: int = 1) -> ScoreTable:
    """Score every text of the chosen splits under every pool surrogate x criterion."""
    crits = [Criterion.parse(c) for c in (criteria or suite.config.criteria)]
    pool = [DetectorSpec(sid, c) for sid in suite.pool_ids for c in crits]
    registry = suite.registry
    meta, jobs = [], []
    for split in splits:
        corpus = suite.corpora.get(split, [])
        for i, x in enumerate(corpus):
            meta.append((split, i, x.source_id, x.label))
        groups: dict[int, list[int]] = {}
        for i, x in enumerate(corpus):
            groups.setdefault(len(x), []).append(i)
        for _, idx in sorted(groups.items()):
            for s in range(0, len(idx), 500):
                chunk = idx[s:s + 500]
                jobs.append((split, chunk, np.stack([corpus[i].token_ids for i in chunk])))
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_score_group, [(X, pool, registry) for _, _, X in jobs]))
    else:
        results = [_score_group((X, pool, registry)) for _, _, X in jobs]
    offset = {}
    pos = 0
    for split in splits:
        offset[split] = pos
        pos += len(suite.corpora.get(split, []))
    values = np.empty((pos, len(pool)))
    for (split, chunk, _), res in zip(jobs, results):
        values[[offset[split] + i for i in chunk]] = res
    return ScoreTable([m[0] for m in meta], [m[1] for m in meta], [m[2] for m in meta],
                      [m[3] for m in meta], pool, values)


# affinity matrices and summaries ------------------------------------------------

@dataclass
class AffinityMatrix:
    values: np.ndarray
    sources: tuple[str, ...]
    surrogates: tuple[str, ...]
    criterion: Criterion

    def rows(self) -> list[list]:
        return [[src] + [repr(float(v)) for v in row] for src, row in zip(self.sources, self.values)]


def affinity_matrix(table: ScoreTable, criterion, sources: Sequence[str],
                    surrogates: Sequence[str], split: str = "affinity") -> AffinityMatrix:
    """Cell (i, j): AUROC of surrogate j on source-i machine text vs the split's human text."""
    crit = Criterion.parse(criterion)
    sel = table.select(split)
    src = np.array(table.source_id)
    lab = np.array(table.label)
    human = sel & (lab == HUMAN)
    M = np.empty((len(sources), len(surrogates)))
    for j, sur in enumerate(surrogates):
        col = table.column(sur, crit)
        for i, s in enumerate(sources):
            mach = sel & (lab == MACHINE) & (src == s)
            M[i, j] = auroc(col[mach], col[human]).auroc
    return AffinityMatrix(M, tuple(sources), tuple(surrogates), crit)


def matched_cross_summary(matrices: Sequence[AffinityMatrix]) -> list[dict]:
    """Matched (diagonal) and cross (off-diagonal) means, row extremes and the best/worst gap."""
    out = []
    for m in matrices:
        A = np.asarray(m.values)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("matched/cross summary needs a square matrix")
        n = A.shape[0]
        diag = np.diag(A)
        off = A[~np.eye(n, dtype=bool)]
        row_max, row_min = A.max(axis=1), A.min(axis=1)
        gap = np.where(row_max > 0, (row_max - row_min) / np.where(row_max > 0, row_max, 1.0), 0.0)
        out.append({
            "criterion": m.criterion.value,
            "matched": float(diag.mean()),
            "cross": float(off.mean()) if off.size else float("nan"),
            "mean": float(A.mean()),
            "max": float(row_max.mean()),
            "min": float(row_min.mean()),
            "gap": float(gap.mean()),
            "row_max": row_max.tolist(),
            "row_min": row_min.tolist(),
        })
    return out


# router training on a suite ------------------------------------------------

def _split_corpus(suite: Suite, split: str) -> list[TokenSequence]:
    return suite.corpora[split]


def stage2_scores(table: ScoreTable, router_classes: Sequence[str], criterion,
                  split: str = "stage2") -> np.ndarray:
    sel = table.select(split)
    order = np.argsort(np.array(table.index)[sel], kind="stable")
    cols = [table.column(c, criterion)[sel][order] for c in router_classes]
    return np.stack(cols, axis=1)


def train_router(suite: Suite, table: ScoreTable | None = None, config: TrainConfig = TrainConfig(),
                 stage: str = "both", model: RouterModel | None = None,
                 stage2_fraction: float = 1.0, **kw) -> RouterModel:
    """Stage 1 on pool-labelled texts, Stage 2 on black-box training variants."""
    crit = Criterion.parse(suite.config.router_criterion)
    if stage in ("1", "both"):
        model = train_stage1(_split_corpus(suite, "stage1"), config, class_ids=suite.pool_ids,
                             criterion=crit, **kw)
    if stage in ("2", "both"):
        if model is None or model.bank.anchors is None:
            raise ValueError("stage 2 needs a stage-1 model with anchors")
        if table is None:
            raise ValueError("stage 2 needs a score table")
        corpus = _split_corpus(suite, "stage2")
        S = stage2_scores(table, model.class_ids, crit)
        if not 0 < stage2_fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        idx = np.arange(len(corpus))
        if stage2_fraction < 1:
            n = int(round(stage2_fraction * len(corpus)))
            if n < 1:
                raise ValueError("stage-2 subsample is empty")
            rng = substream(config.seed, "stage2-fraction", int(round(stage2_fraction * 1e6)))
            idx = np.sort(rng.choice(len(corpus), size=n, replace=False))
        model = train_stage2(model, [corpus[i] for i in idx], S[idx], config)
    return model


# routing evaluation ------------------------------------------------------------

@dataclass
class RoutingTable:
    """Router decisions for every text of one split."""
    split: str
    source_id: list[str]
    label: list[str]
    choice: np.ndarray
    class_ids: tuple[str, ...]

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["split", "index", "source_id", "label", "choice"])
            for i, (s, lab, k) in enumerate(zip(self.source_id, self.label, self.choice)):
                w.writerow([self.split, i, s, lab, self.class_ids[int(k)]])


def routing_table(suite: Suite, router: RouterModel, split: str = "heldout") -> RoutingTable:
    corpus = suite.corpora[split]
    k, _, _ = route_features(router, featurize_corpus(corpus, router.encoder.config))
    return RoutingTable(split, [x.source_id for x in corpus], [x.label for x in corpus], k,
                        router.class_ids)


def routed_vs_fixed(table: ScoreTable, routes: RoutingTable, sources: Sequence[str], criterion) -> dict:
    """Per-source AUROC of the routed detector vs every fixed surrogate.

    Both machine and human texts are scored by the surrogate the router picks
    for them.  ``mean_*`` fields average over sources.
    """
    crit = Criterion.parse(criterion)
    sel = table.select(routes.split)
    order = np.argsort(np.array(table.index)[sel], kind="stable")
    cols = np.stack([table.column(c, crit)[sel][order] for c in routes.class_ids], axis=1)
    routed_scores = cols[np.arange(cols.shape[0]), routes.choice]
    src = np.array(routes.source_id)
    lab = np.array(routes.label)
    human = lab == HUMAN
    per_source = []
    for s in sources:
        mach = (lab == MACHINE) & (src == s)
        fixed = [auroc(cols[mach, j], cols[human, j]).auroc for j in range(cols.shape[1])]
        per_source.append({"source": s,
                           "routed": auroc(routed_scores[mach], routed_scores[human]).auroc,
                           "fixed": fixed})
    fixed = np.array([r["fixed"] for r in per_source])       # sources x surrogates
    fixed_means = fixed.mean(axis=0)
    return {
        "criterion": crit.value,
        "routed": float(np.mean([r["routed"] for r in per_source])),
        "best_fixed": float(fixed_means.max()),
        "best_fixed_id": routes.class_ids[int(fixed_means.argmax())],
        "mean_fixed": float(fixed_means.mean()),
        "fixed": dict(zip(routes.class_ids, fixed_means.tolist())),
        "per_source": per_source,
    }


def routing_distribution(routes: RoutingTable, sources: Sequence[str] | None = None,
                         machine_only: bool = True) -> dict[str, np.ndarray]:
    """Per-source counts of the selected class."""
    src = np.array(routes.source_id)
    keep = np.array(routes.label) == MACHINE if machine_only else np.ones(src.size, bool)
    sources = sources or sorted(set(src[keep]))
    n = len(routes.class_ids)
    return {s: np.bincount(routes.choice[keep & (src == s)], minlength=n) for s in sources}


def kl_oracle(suite: Suite, sources: Sequence[str], horizon: int | None = None) -> dict[str, np.ndarray]:
    """Per-token KL rate from each source to every pool surrogate."""
    h = horizon or suite.config.kl_horizon
    return {s: np.array([kl_rate(suite.models[s], suite.models[k], h) for k in suite.pool_ids])
            for s in sources}


def kl_agreement(routes: RoutingTable, oracle: dict[str, np.ndarray]) -> dict:
    """Fraction of machine texts routed to the KL-nearest pool surrogate."""
    src = np.array(routes.source_id)
    lab = np.array(routes.label)
    per, hits, total = {}, 0, 0
    for s, kl in oracle.items():
        mask = (lab == MACHINE) & (src == s)
        target = int(np.argmin(kl))
        h = int((routes.choice[mask] == target).sum())
        per[s] = h / max(int(mask.sum()), 1)
        hits += h
        total += int(mask.sum())
    return {"agreement": hits / max(total, 1), "per_source": per}


def data_efficiency_sweep(suite: Suite, table: ScoreTable, stage1: RouterModel,
                          fractions: Sequence[float], config: TrainConfig = TrainConfig()) -> list[dict]:
    """Routed AUROC on held-out black-box sources vs fraction of Stage-2 data."""
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    crit = suite.config.router_criterion
    curve = []
    for f in fractions:
        model = train_router(suite, table, config, stage="2", model=stage1, stage2_fraction=f)
        rep = routed_vs_fixed(table, routing_table(suite, model), suite.blackbox_eval_ids, crit)
        curve.append({"fraction": float(f), "routed": rep["routed"],
                      "best_fixed": rep["best_fixed"], "mean_fixed": rep["mean_fixed"]})
    return curve


def embedding_dump(suite: Suite, router: RouterModel, path, split: str = "heldout") -> int:
    """Write embeddings (one row per text) and prototypes as a TSV; returns the row count."""
    corpus = suite.corpora[split]
    Z = embed_features(router, featurize_corpus(corpus, router.encoder.config))
    d = Z.shape[1]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["kind", "label", "source_id"] + [f"e{j}" for j in range(d)])
        for x, z in zip(corpus, Z):
            w.writerow(["text", x.label, x.source_id] + [repr(float(v)) for v in z])
            rows += 1
        for i, cid in enumerate(router.class_ids):
            for k in range(router.bank.K):
                w.writerow(["prototype", f"k{k}", cid]
                           + [repr(float(v)) for v in router.bank.prototypes[i, k]])
                rows += 1
    return rows


def bound_suite(suite: Suite, horizon: int = 3, criteria: Sequence = ("likelihood", "logrank",
                "fastdetectgpt"), B: float = 1.0) -> list[tuple[str, str, str, BoundReport]]:
    """Mismatch-bound check for each (statistic, source, surrogate) over the pool.

    Each statistic is the criterion under the surrogate, scaled by its largest
    absolute value over the enumerated sequences so |T| <= B holds exactly.
    """
    from .bound import enumerate_sequences
    from .detectors import batch_scores
    X = enumerate_sequences(suite.vocab.size, horizon)
    out = []
    for c in criteria:
        crit = Criterion.parse(c)
        for sur in suite.pool_ids:
            raw = batch_scores(X, suite.models[sur], [crit])[crit]
            scale = max(float(np.abs(raw).max()), 1e-12) / B
            values = np.clip(raw / scale, -B, B)
            for src in suite.pool_ids:
                rep = mismatch_gap(values, suite.models[src], suite.models[sur], horizon, B)
                out.append((crit.value, src, sur, rep))
    return out
