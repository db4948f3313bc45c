import csv
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import MINIMAL_INI, run_pipeline
from surroute.cli import load_config, main
from surroute.detectors import score_corpus
from surroute.harness import ScoreTable, Suite


def _tsv(path):
    with open(path) as fh:
        return list(csv.reader(fh, delimiter="\t"))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    t0 = time.perf_counter()
    files = run_pipeline(root)
    return root / "suite", files, time.perf_counter() - t0


def test_expected_file_set(pipeline):
    suite, files, _ = pipeline
    for name in ("manifest.json", "config.ini", "models/gen0.json", "models/human.json",
                 "models/bbeval-gen1.json", "corpora/heldout.jsonl", "scores.tsv", "router.json",
                 "router.stage1.json", "router.log.tsv", "reports/bound.tsv",
                 "reports/matrix_likelihood.tsv", "reports/summary.tsv", "reports/routed.tsv",
                 "reports/sweep.tsv", "reports/histogram.tsv", "reports/embeddings.tsv",
                 "reports/kl_agreement.tsv", "reports/manifest_routed.json"):
        assert name in files, name


def test_pipeline_runtime(pipeline):
    assert pipeline[2] < 60


def test_score_rows_and_spot_check(pipeline):
    suite_dir, _, _ = pipeline
    suite = Suite.load(suite_dir)
    table = ScoreTable.load(suite_dir / "scores.tsv")
    n_texts = sum(len(c) for c in suite.corpora.values())
    assert table.values.size == n_texts * len(suite.pool_ids) * 6
    sel = np.where(table.select("stage2"))[0][:5]
    direct = score_corpus(suite.corpora["stage2"][:5], table.detectors, suite.registry)
    assert np.array_equal(table.values[sel], direct)


def test_matrix_is_two_by_two(pipeline):
    rows = _tsv(pipeline[0] / "reports" / "matrix_fastdetectgpt.tsv")
    assert rows[0] == ["source", "gen0", "gen1"] and len(rows) == 3


def test_bound_rows_hold(pipeline):
    rows = _tsv(pipeline[0] / "reports" / "bound.tsv")[1:]
    assert len(rows) == 3 * 2 * 2
    assert all(r[-1] == "true" for r in rows)


def test_log_finite(pipeline):
    rows = _tsv(pipeline[0] / "router.log.tsv")[1:]
    assert [r[0] for r in rows] == ["1"] * 3 + ["2"] * 3
    assert all(np.isfinite(float(r[2])) for r in rows)


def test_summary_recomputes_from_scores(pipeline):
    from surroute.harness import affinity_matrix, matched_cross_summary
    suite_dir = pipeline[0]
    suite = Suite.load(suite_dir)
    table = ScoreTable.load(suite_dir / "scores.tsv")
    rows = {r[0]: r for r in _tsv(suite_dir / "reports" / "summary.tsv")[1:]}
    for c in ("likelihood", "rank"):
        s = matched_cross_summary([affinity_matrix(table, c, suite.pool_ids, suite.pool_ids)])[0]
        assert float(rows[c][1]) == s["matched"] and float(rows[c][2]) == s["cross"]


def test_single_detector_score(tmp_path, pipeline):
    out = tmp_path / "one.tsv"
    assert main(["score", "--suite", str(pipeline[0]), "--criteria", "rank", "--pool", "gen1",
                 "--out", str(out)]) == 0
    rows = _tsv(out)
    assert rows[0][4:] == ["gen1:rank"]
    full = ScoreTable.load(pipeline[0] / "scores.tsv")
    assert np.array_equal(ScoreTable.load(out).values[:, 0], full.column("gen1", "rank"))


def test_invalid_alpha_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[suite]\ngen_alpha = 0\n")
    assert main(["gen-suite", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert "gen_alpha" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nlearning_rate = 1\n")
    assert main(["gen-suite", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert "learning_rate" in capsys.readouterr().err
    cfg.write_text("[bogus]\nx = 1\n")
    assert main(["gen-suite", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2


def test_unknown_report_exit_2(pipeline):
    with pytest.raises(SystemExit) as e:
        main(["eval", "--suite", str(pipeline[0]), "--report", "tsne"])
    assert e.value.code == 2


def test_missing_model_exit_3(tmp_path, pipeline):
    import shutil
    copy = tmp_path / "suite"
    shutil.copytree(pipeline[0], copy)
    (copy / "models" / "gen0.json").unlink()
    assert main(["score", "--suite", str(copy)]) == 3
    assert main(["score", "--suite", str(tmp_path / "nowhere")]) == 3
    assert main(["score", "--suite", str(pipeline[0]), "--pool", "gen9"]) == 3


def test_stage2_without_stage1_exit_4(tmp_path, pipeline):
    import shutil
    copy = tmp_path / "suite"
    shutil.copytree(pipeline[0], copy)
    (copy / "router.stage1.json").unlink()
    assert main(["train-router", "--suite", str(copy), "--stage", "2"]) == 4


def test_stage2_without_scores_exit_3(tmp_path, pipeline):
    import shutil
    copy = tmp_path / "suite"
    shutil.copytree(pipeline[0], copy)
    (copy / "scores.tsv").unlink()
    assert main(["train-router", "--suite", str(copy), "--stage", "2"]) == 3


def test_stage2_resumes_bit_identical(tmp_path, pipeline):
    out = tmp_path / "r2.json"
    assert main(["train-router", "--suite", str(pipeline[0]), "--stage", "2",
                 "--init", str(pipeline[0] / "router.stage1.json"), "--out", str(out)]) == 0
    assert out.read_bytes() == pipeline[1]["router.json"]


def test_env_overrides(tmp_path, monkeypatch):
    cfg = tmp_path / "env.ini"
    cfg.write_text(MINIMAL_INI)
    monkeypatch.setenv("SURROUTE_CONFIG", str(cfg))
    monkeypatch.setenv("SURROUTE_SEED", "5")
    monkeypatch.setenv("SURROUTE_OUT", str(tmp_path / "envsuite"))
    assert main(["gen-suite"]) == 0
    assert Suite.load(tmp_path / "envsuite").config.seed == 5


def test_load_config_types(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[suite]\ncriteria = likelihood, rank\nn_generators = 3\n"
                   "[features]\nngram_orders = 1 2\n[router]\ntau = 0.25\n")
    c = load_config(str(cfg))
    assert c["suite"] == {"criteria": ("likelihood", "rank"), "n_generators": 3}
    assert c["features"]["ngram_orders"] == (1, 2) and c["router"]["tau"] == 0.25


def test_console_script_exit_codes(tmp_path):
    env = dict(os.environ)
    r = subprocess.run([sys.executable, "-m", "surroute.cli", "eval", "--suite", str(tmp_path),
                        "--report", "matrix"], capture_output=True, text=True, env=env)
    assert r.returncode == 3
    r = subprocess.run([sys.executable, "-m", "surroute.cli", "frobnicate"], capture_output=True,
                       text=True, env=env)
    assert r.returncode == 2
