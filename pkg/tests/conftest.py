import time

import numpy as np
import pytest

from surroute.harness import ExperimentConfig, build_suite, score_suite, train_router
from surroute.router import TrainConfig
from surroute.textmodel import MarkovModel, Vocabulary

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def random_model(V: int, order: int, rng: np.random.Generator, alpha: float = 0.5,
                 concentration: float = 0.5, scale: float = 20.0, model_id=None) -> MarkovModel:
    """Markov model with random fractional counts on every context."""
    vocab = Vocabulary(tuple(f"t{i}" for i in range(V)))
    counts = {}
    for length in range(order + 1):
        for code in range(V ** length):
            ctx = tuple(int(t) for t in np.unravel_index(code, (V,) * length)) if length else ()
            counts[ctx] = rng.dirichlet(np.full(V, concentration)) * scale
    return MarkovModel(vocab, order, alpha, counts, model_id=model_id)


def brute_auroc(m, h) -> float:
    wins = sum((a > b) + 0.5 * (a == b) for a in m for b in h)
    return wins / (len(m) * len(h))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_run():
    """Default N=6 suite (seed 0), full score table and a two-stage router."""
    t0 = time.perf_counter()
    suite = build_suite(ExperimentConfig(seed=0))
    table = score_suite(suite)
    seconds = time.perf_counter() - t0
    cfg = TrainConfig(seed=0)
    stage1 = train_router(suite, table, cfg, stage="1")
    router = train_router(suite, table, cfg, stage="2", model=stage1)
    return {"suite": suite, "table": table, "stage1": stage1, "router": router, "config": cfg,
            "seconds": seconds}


@pytest.fixture(scope="session")
def small_suite():
    cfg = ExperimentConfig(n_generators=3, samples_per_cell=60, stage1_per_class=40,
                           stage2_per_source=40, eval_per_source=40, gen_corpus_size=150,
                           seq_length=64, prompt_length=10, seed=7)
    suite = build_suite(cfg)
    return suite, score_suite(suite)


@pytest.fixture
def acceptance():
    def record(name: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((name, bool(passed), detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def loss_gradient_errors(stage: int, seed: int, B: int = 4, N: int = 3, K: int = 2,
                         d: int = 3, d_in: int = 6, eps: float = 1e-6) -> tuple[float, float]:
    """Relative error of the analytic W and prototype gradients of the full
    loss against central finite differences on one random instance."""
    from surroute.router import PrototypeBank, RouterHyper, full_loss

    r = np.random.default_rng(seed)
    F = r.normal(size=(B, d_in))
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    W = r.normal(size=(d, d_in))
    P = r.normal(scale=0.5, size=(N, K, d))
    anchors = P + r.normal(scale=0.1, size=P.shape)
    bank = PrototypeBank(P, tuple(f"c{i}" for i in range(N)), anchors)
    # small margin-active pool plus non-trivial weights so every term matters
    hyper = RouterHyper(tau=float(r.uniform(0.2, 1.0)), margin=1.0, lambda_sep=0.5,
                        lambda_norm=0.05, lambda_anc=0.7, lambda_ce2=0.3 if stage == 2 else 0.0)
    if stage == 1:
        targets = r.integers(0, N, B)
    else:
        targets = r.dirichlet(np.ones(N), size=B)

    def f(W_, P_):
        return full_loss(W_, P_, F, targets, stage, bank, hyper)[0]

    _, gW, gP, _ = full_loss(W, P, F, targets, stage, bank, hyper)
    nW, nP = np.zeros_like(W), np.zeros_like(P)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += eps
        Wm[idx] -= eps
        nW[idx] = (f(Wp, P) - f(Wm, P)) / (2 * eps)
    for idx in np.ndindex(P.shape):
        Pp, Pm = P.copy(), P.copy()
        Pp[idx] += eps
        Pm[idx] -= eps
        nP[idx] = (f(W, Pp) - f(W, Pm)) / (2 * eps)
    return rel_err(gW, nW), rel_err(gP, nP)


def separable_corpus(n_per_class: int, n_classes: int, seed: int, length: int = 40,
                     label: str = "machine"):
    """Order-0 generators over 8 tokens, each favouring its own disjoint pair."""
    from surroute.textmodel import TokenSequence, sample_batch

    vocab = Vocabulary(tuple(f"t{i}" for i in range(8)))
    corpus = []
    for c in range(n_classes):
        p = np.full(8, 0.02)
        p[2 * c:2 * c + 2] = 0.45
        p /= p.sum()
        m = MarkovModel(vocab, 0, 1e-9, {(): p * 1e9}, model_id=f"g{c}")
        X = sample_batch(m, np.zeros((n_per_class, 0), dtype=np.int64), length, 1.0, 1.0,
                         np.random.default_rng([seed, c]))
        corpus += [TokenSequence(x, label, f"g{c}") for x in X]
    return corpus


MINIMAL_INI = """\
[suite]
n_generators = 2
samples_per_cell = 40
stage1_per_class = 40
stage2_per_source = 40
eval_per_source = 40
gen_corpus_size = 80
gen_corpus_length = 80
seq_length = 48
prompt_length = 8
seed = 11

[train]
epochs = 3
k = 4
warmup_steps = 10
"""


def run_pipeline(root, config_text: str = MINIMAL_INI, seed=None) -> dict:
    """gen-suite, score, train both stages and every report; returns {relpath: bytes}."""
    from pathlib import Path
    from surroute.cli import REPORTS, main

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.ini"
    cfg.write_text(config_text)
    suite = root / "suite"
    extra = ["--seed", str(seed)] if seed is not None else []
    assert main(["gen-suite", "--config", str(cfg), "--out", str(suite)] + extra) == 0
    assert main(["score", "--suite", str(suite)]) == 0
    assert main(["train-router", "--suite", str(suite), "--stage", "both"]) == 0
    router = str(suite / "router.json")
    for kind in REPORTS:
        argv = ["eval", "--suite", str(suite), "--router", router, "--report", kind]
        if kind == "sweep":
            argv += ["--fractions", "0.5", "1.0"]
        if kind == "bound":
            argv += ["--horizon", "2"]
        assert main(argv) == 0, kind
    return {str(p.relative_to(suite)): p.read_bytes() for p in sorted(suite.rglob("*")) if p.is_file()}
