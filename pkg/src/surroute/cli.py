"""Command-line driver: gen-suite, score, train-router, eval.

Exit codes: 0 success, 2 config/usage error, 3 missing artifact,
4 pipeline-order violation.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .detectors import Criterion
from .encoder import FeatureConfig
from .harness import (ExperimentConfig, ScoreTable, Suite, affinity_matrix, bound_suite,
                      build_suite, data_efficiency_sweep, embedding_dump, kl_agreement, kl_oracle,
                      matched_cross_summary, routed_vs_fixed, routing_distribution, routing_table,
                      score_suite, train_router)
from .router import RouterHyper, RouterModel, TrainConfig

ENV_PREFIX = "SURROUTE_"
SECTIONS = {"suite": ExperimentConfig, "train": TrainConfig, "features": FeatureConfig,
            "router": RouterHyper}
REPORTS = ("matrix", "summary", "routed", "sweep", "histogram", "bound", "embed-dump", "kl")
SCORES = "scores.tsv"
CONFIG = "config.ini"


class CliError(Exception):
    code = 1


class ConfigError(CliError):
    code = 2


class MissingArtifact(CliError):
    code = 3


class PipelineError(CliError):
    code = 4


# configuration -------------------------------------------------------------

def _convert(cls, name: str, raw: str):
    default = next(f for f in dataclasses.fields(cls) if f.name == name).default
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.replace(",", " ").split() if s.strip()]
            return tuple(int(s) for s in items) if default and isinstance(default[0], int) else tuple(items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{cls.__name__}] {name}: cannot parse {raw!r}") from None


def load_config(path: str | None) -> dict[str, dict]:
    """Parse an INI file into per-section keyword dicts; unknown keys are errors."""
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    if path is None:
        return out
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"config file not found: {p}")
    parser = configparser.ConfigParser()
    try:
        parser.read(p)
    except configparser.Error as e:
        raise ConfigError(f"malformed config {p}: {e}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = SECTIONS[section]
        # configparser lower-cases keys, so match field names case-insensitively
        names = {f.name.lower(): f.name for f in dataclasses.fields(cls)}
        for key, raw in parser[section].items():
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            out[section][names[key]] = _convert(cls, names[key], raw)
    return out


def build(section: str, values: dict):
    cls = SECTIONS[section]
    try:
        return cls(**values)
    except ValueError as e:
        raise ConfigError(f"[{section}] invalid value: {e}") from None


def write_config(path: Path, sections: dict[str, dict]) -> None:
    parser = configparser.ConfigParser()
    for name in SECTIONS:
        if sections.get(name):
            parser[name] = {k: (" ".join(map(str, v)) if isinstance(v, tuple) else str(v))
                            for k, v in sorted(sections[name].items())}
    with open(path, "w") as fh:
        parser.write(fh)


def _env(name: str, value):
    if value is not None:
        return value
    return os.environ.get(ENV_PREFIX + name.upper())


def _suite_config(args) -> dict[str, dict]:
    cfg_path = _env("config", args.config)
    if cfg_path is None and getattr(args, "suite", None):
        stored = Path(args.suite) / CONFIG
        cfg_path = str(stored) if stored.exists() else None
    sections = load_config(cfg_path)
    seed = _env("seed", args.seed)
    if seed is not None:
        try:
            seed = int(seed)
        except ValueError:
            raise ConfigError(f"seed must be an integer, got {seed!r}") from None
        sections["suite"]["seed"] = seed
        sections["train"].setdefault("seed", seed)
    if "seed" in sections["suite"]:
        sections["train"].setdefault("seed", sections["suite"]["seed"])
    return sections


def _workers(args) -> int:
    w = _env("workers", args.workers)
    try:
        return max(1, int(w)) if w is not None else 1
    except ValueError:
        raise ConfigError(f"workers must be an integer, got {w!r}") from None


def _load_suite(path) -> Suite:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise MissingArtifact(f"no suite manifest in {p}")
    try:
        return Suite.load(p)
    except FileNotFoundError as e:
        raise MissingArtifact(f"missing suite artifact: {e}") from None


def _load_scores(suite_dir) -> ScoreTable:
    p = Path(suite_dir) / SCORES
    if not p.exists():
        raise MissingArtifact(f"score table not found: {p} (run `surroute score` first)")
    return ScoreTable.load(p)


def _load_router(path) -> RouterModel:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"router model not found: {p}")
    return RouterModel.load(p)


def _tsv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(v) -> str:
    return repr(float(v))


# commands ------------------------------------------------------------------

def cmd_gen_suite(args) -> int:
    sections = _suite_config(args)
    cfg = build("suite", sections["suite"])
    out = Path(_env("out", args.out) or "suite")
    suite = build_suite(cfg)
    suite.save(out)
    write_config(out / CONFIG, sections)
    print(f"suite written to {out}: {len(suite.models)} models, "
          + ", ".join(f"{k}={len(v)}" for k, v in suite.corpora.items()))
    return 0


def cmd_score(args) -> int:
    suite = _load_suite(args.suite)
    crits = args.criteria or list(suite.config.criteria)
    try:
        crits = [Criterion.parse(c) for c in crits]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if args.pool:
        missing = [p for p in args.pool if p not in suite.models]
        if missing:
            raise MissingArtifact(f"no model file for surrogate(s) {missing}")
    table = score_suite(suite, crits, workers=_workers(args))
    if args.pool:
        keep = [i for i, d in enumerate(table.detectors) if d.surrogate_id in args.pool]
        table = ScoreTable(table.split, table.index, table.source_id, table.label,
                           [table.detectors[i] for i in keep], table.values[:, keep])
    out = Path(_env("out", args.out) or Path(args.suite) / SCORES)
    table.save(out)
    print(f"{len(table.split)} texts x {len(table.detectors)} detectors -> {out}")
    return 0


def cmd_train_router(args) -> int:
    suite = _load_suite(args.suite)
    sections = _suite_config(args)
    config = build("train", sections["train"])
    features = build("features", sections["features"])
    hyper = build("router", sections["router"])
    out = Path(_env("out", args.out) or Path(args.suite) / "router.json")
    stage1_path = out.with_suffix(".stage1.json")
    model = None
    table = None
    if args.stage in ("2", "both"):
        table = _load_scores(args.suite)
    if args.stage == "2":
        src = Path(args.init) if args.init else stage1_path
        if not src.exists():
            raise PipelineError(f"stage 2 needs a stage-1 router at {src}")
        model = RouterModel.load(src)
        if model.bank.anchors is None:
            raise PipelineError(f"router {src} has no frozen anchors; run stage 1 first")
    if args.stage in ("1", "both"):
        model = train_router(suite, None, config, stage="1", features=features, hyper=hyper)
        model.save(stage1_path)
    if args.stage in ("2", "both"):
        model = train_router(suite, table, config, stage="2", model=model)
    model.save(out)
    log = out.with_suffix(".log.tsv")
    _tsv(log, ["stage", "epoch", "loss"],
         [[h["stage"], h["epoch"], _f(h["loss"])] for h in model.history])
    print(f"router ({args.stage}) -> {out}; log -> {log}")
    return 0


def cmd_eval(args) -> int:
    suite = _load_suite(args.suite)
    out = Path(_env("out", args.out) or Path(args.suite) / "reports")
    out.mkdir(parents=True, exist_ok=True)
    kind = args.report
    crits = [Criterion.parse(c) for c in (args.criteria or suite.config.criteria)]
    written: list[Path] = []

    if kind in ("matrix", "summary"):
        table = _load_scores(args.suite)
        mats = [affinity_matrix(table, c, suite.pool_ids, suite.pool_ids) for c in crits]
        if kind == "matrix":
            for m in mats:
                p = out / f"matrix_{m.criterion.value}.tsv"
                _tsv(p, ["source"] + list(m.surrogates), m.rows())
                written.append(p)
        else:
            rows = matched_cross_summary(mats)
            p = out / "summary.tsv"
            _tsv(p, ["criterion", "matched", "cross", "mean", "max", "min", "gap"],
                 [[r["criterion"]] + [_f(r[k]) for k in ("matched", "cross", "mean", "max", "min", "gap")]
                  for r in rows])
            written.append(p)
    elif kind == "bound":
        rows = bound_suite(suite, horizon=args.horizon)
        p = out / "bound.tsv"
        _tsv(p, ["statistic", "source", "surrogate", "gap", "tv_bound", "bound", "tv", "kl", "B",
                 "slack", "holds"],
             [[c, s, r, _f(b.gap), _f(b.tv_bound), _f(b.bound), _f(b.tv), _f(b.kl), _f(b.B),
               _f(b.slack), str(b.holds).lower()] for c, s, r, b in rows])
        written.append(p)
    else:
        if args.router is None and kind != "sweep":
            raise ConfigError(f"report {kind!r} needs --router")
        router = _load_router(args.router or Path(args.suite) / "router.json") if kind != "sweep" else None
        if kind == "routed":
            table = _load_scores(args.suite)
            routes = routing_table(suite, router)
            routes.save(out / "routes_heldout.tsv")
            rep = routed_vs_fixed(table, routes, suite.blackbox_eval_ids, router.criterion)
            ids = list(routes.class_ids)
            rows = [[r["source"], _f(r["routed"])] + [_f(v) for v in r["fixed"]] for r in rep["per_source"]]
            p = out / "routed.tsv"
            _tsv(p, ["source", "routed"] + [f"fixed:{i}" for i in ids], rows)
            p2 = out / "routed_summary.tsv"
            _tsv(p2, ["criterion", "routed", "best_fixed", "best_fixed_id", "mean_fixed"],
                 [[rep["criterion"], _f(rep["routed"]), _f(rep["best_fixed"]), rep["best_fixed_id"],
                   _f(rep["mean_fixed"])]])
            written += [out / "routes_heldout.tsv", p, p2]
        elif kind == "histogram":
            routes = routing_table(suite, router)
            hist = routing_distribution(routes, list(suite.pool_ids + suite.blackbox_eval_ids))
            p = out / "histogram.tsv"
            _tsv(p, ["source"] + list(routes.class_ids), [[s] + [int(v) for v in h] for s, h in hist.items()])
            written.append(p)
        elif kind == "kl":
            routes = routing_table(suite, router)
            oracle = kl_oracle(suite, suite.pool_ids + suite.blackbox_eval_ids)
            agree = kl_agreement(routes, oracle)
            p = out / "kl_agreement.tsv"
            _tsv(p, ["source", "kl_nearest", "agreement"] + [f"kl:{k}" for k in suite.pool_ids],
                 [[s, suite.pool_ids[int(np.argmin(v))], _f(agree["per_source"][s])] + [_f(x) for x in v]
                  for s, v in oracle.items()])
            written.append(p)
        elif kind == "embed-dump":
            p = out / "embeddings.tsv"
            try:
                embedding_dump(suite, router, p)
            except OSError as e:
                raise ConfigError(f"cannot write {p}: {e}") from None
            written.append(p)
        elif kind == "sweep":
            table = _load_scores(args.suite)
            base = Path(args.router) if args.router else Path(args.suite) / "router.json"
            s1 = base.with_suffix(".stage1.json") if not base.name.endswith(".stage1.json") else base
            if not s1.exists():
                raise PipelineError(f"sweep needs a stage-1 router at {s1}")
            stage1 = RouterModel.load(s1)
            sections = _suite_config(args)
            config = build("train", sections["train"])
            curve = data_efficiency_sweep(suite, table, stage1, args.fractions, config)
            p = out / "sweep.tsv"
            _tsv(p, ["fraction", "routed", "best_fixed", "mean_fixed"],
                 [[_f(c["fraction"]), _f(c["routed"]), _f(c["best_fixed"]), _f(c["mean_fixed"])] for c in curve])
            written.append(p)
    manifest = {"report": kind, "suite": str(Path(args.suite).name), "seed": suite.config.seed,
                "router": None if args.router is None else Path(args.router).name,
                "files": sorted(p.name for p in written)}
    (out / f"manifest_{kind}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{kind}: " + ", ".join(str(p) for p in written))
    return 0


# entry point -------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="surroute", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, suite=True):
        p.add_argument("--config", help="INI config with [suite]/[train]/[features]/[router]")
        p.add_argument("--seed", help="root seed (overrides config)")
        p.add_argument("--workers", help="worker processes for scoring")
        p.add_argument("--out", help="output path")
        if suite:
            p.add_argument("--suite", required=True, help="suite directory")

    p = sub.add_parser("gen-suite", help="build generators and corpora")
    common(p, suite=False)
    p.set_defaults(func=cmd_gen_suite, suite=None)

    p = sub.add_parser("score", help="score every text with every pool detector")
    common(p)
    p.add_argument("--criteria", nargs="+")
    p.add_argument("--pool", nargs="+", help="restrict to these surrogate ids")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train-router", help="train the prototype router")
    common(p)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--init", help="stage-1 router to continue from (stage 2)")
    p.set_defaults(func=cmd_train_router)

    p = sub.add_parser("eval", help="write a report")
    common(p)
    p.add_argument("--router")
    p.add_argument("--report", required=True, choices=REPORTS)
    p.add_argument("--criteria", nargs="+")
    p.add_argument("--horizon", type=int, default=3, help="enumeration horizon for the bound report")
    p.add_argument("--fractions", type=float, nargs="+", default=[0.1, 0.25, 0.5, 1.0])
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
