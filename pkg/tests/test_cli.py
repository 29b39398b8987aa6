from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest

from morephy.cli import build_parser, main
from morephy.pipeline import ExperimentConfig

from test_pipeline import TINY


def write_config(path, **kw):
    path.write_text(ExperimentConfig(**{**TINY, **kw}).dumps())
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Four variants on one tiny Burgers scenario, driven through the CLI."""
    root = tmp_path_factory.mktemp("runs")
    for variant in ("DON", "PI-DON", "PI-FDON", "Morephy"):
        cfg = write_config(root / f"{variant}.txt", variant=variant)
        out = root / variant
        assert run("generate", "--config", cfg, "--out", out) == 0
        assert run("train", "--config", cfg, "--out", out) == 0
        if variant == "Morephy":
            assert run("sample", "--config", cfg, "--out", out) == 0
        assert run("evaluate", "--config", cfg, "--out", out) == 0
    return root


def test_parser_accepts_documented_flags():
    args = build_parser().parse_args(["train", "--config", "c.txt", "--seed", str(2**64 - 1), "--out", "o",
                                      "--workers", "4"])
    assert (args.command, args.seed, args.workers) == ("train", 2**64 - 1, 4)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["fly"])


def test_generate_is_byte_identical_per_seed(tmp_path):
    cfg = write_config(tmp_path / "c.txt", noise_ratio=0.5)
    run("generate", "--config", cfg, "--out", tmp_path / "a", "--seed", 7)
    run("generate", "--config", cfg, "--out", tmp_path / "b", "--seed", 7)
    a, b = (tmp_path / "a" / "dataset.txt").read_bytes(), (tmp_path / "b" / "dataset.txt").read_bytes()
    assert a == b
    text = a.decode()
    assert "noise_ratio = 0.5" in text
    assert f"param = {0.01 / math.pi!r}" in text
    assert "seed = 7" in (tmp_path / "a" / "config.txt").read_text()


def test_run_directories_hold_expected_outputs(runs):
    assert (runs / "PI-FDON" / "model.ckpt").exists()
    assert (runs / "PI-FDON" / "train_history.csv").exists()
    morephy = runs / "Morephy"
    meta = json.loads((morephy / "candidates" / "candidates.json").read_text())
    assert 1 <= len(meta) <= TINY["n_sel"]
    assert (morephy / "evolution_log.csv").exists()
    assert (morephy / "samples" / "trace_0.csv").exists()
    metrics = json.loads((morephy / "metrics.json").read_text())
    assert metrics["ensemble_size"] > 1 and metrics["coverage_95"] is not None


def test_cli_matches_library_run(runs, tmp_path):
    from morephy.pipeline import run_experiment

    cfg = ExperimentConfig(**{**TINY, "variant": "PI-FDON"})
    lib = run_experiment(cfg).metrics
    cli = json.loads((runs / "PI-FDON" / "metrics.json").read_text())
    assert cli["l2_rel"] == lib["l2_rel"]


def test_field_band_is_ordered(runs):
    with open(runs / "Morephy" / "field.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"x", "t", "benchmark", "mean", "lower", "upper"}
    for r in rows:
        assert float(r["lower"]) <= float(r["mean"]) <= float(r["upper"])


def test_report_has_one_row_per_variant_and_is_idempotent(runs):
    out = runs / "report"
    assert run("report", "--out", out, *[runs / v for v in ("DON", "PI-DON", "PI-FDON", "Morephy")]) == 0
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sorted(r["variant"] for r in rows) == ["DON", "Morephy", "PI-DON", "PI-FDON"]
    for r in rows:
        metrics = json.loads((runs / r["run"] / "metrics.json").read_text())
        assert float(r["l2_rel"]) == metrics["l2_rel"]
    assert (out / "fields" / "Morephy.csv").exists() and (out / "l1_error" / "DON.csv").exists()
    first = (out / "summary.md").read_bytes()
    run("report", "--out", out, *[runs / v for v in ("DON", "PI-DON", "PI-FDON", "Morephy")])
    assert (out / "summary.md").read_bytes() == first


def test_report_lists_missing_runs(runs, tmp_path, capsys):
    (tmp_path / "ghost").mkdir()
    assert run("report", "--out", tmp_path / "rep", runs / "DON", tmp_path / "ghost") == 0
    assert "ghost" in capsys.readouterr().err
    assert "Missing runs" in (tmp_path / "rep" / "summary.md").read_text()
    with open(tmp_path / "rep" / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 1


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.txt")
    assert run("train", "--config", cfg, "--out", tmp_path / "none") == 1
    assert "generate" in capsys.readouterr().err
    bad = tmp_path / "bad.txt"
    bad.write_text("variant = DON\nmode = inverse\n")
    assert run("generate", "--config", bad, "--out", tmp_path / "x") == 1


def test_workers_flag_and_environment_do_not_change_outputs(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.txt", variant="Morephy")
    outs = []
    for name, flag in (("one", ["--workers", "1"]), ("env", [])):
        if not flag:
            monkeypatch.setenv("MOREPHY_WORKERS", "3")
        out = tmp_path / name
        for cmd in ("generate", "train", "sample", "evaluate"):
            assert run(cmd, "--config", cfg, "--out", out, *flag) == 0
        outs.append(out)
    assert "workers = 3" in (outs[1] / "config.txt").read_text()
    a, b = (json.loads((o / "metrics.json").read_text()) for o in outs)
    assert a == b
    np.testing.assert_array_equal(np.load(outs[0] / "samples" / "candidate_0.npy"),
                                  np.load(outs[1] / "samples" / "candidate_0.npy"))
