"""Command-line driver: ``morephy generate|train|sample|evaluate|report``.

Every subcommand reads a flat ``key = value`` config (``--config``), applies
``--seed`` and ``--workers`` on top, and works inside one run directory
(``--out``). The run directory accumulates::

    config.txt           effective configuration
    dataset.txt          observations and collocation sets   (generate)
    model.ckpt           trained baseline                     (train, baselines)
    train_history.csv    epoch, train loss, validation loss   (train, baselines)
    candidates/          RPS candidate checkpoints + weights   (train, Morephy)
    evolution_log.csv    per-generation best objectives        (train, Morephy)
    samples/             cold-chain samples and traces         (sample, Morephy)
    metrics.json, field.csv, l1_error.csv                      (evaluate)

``report`` gathers the metrics of several run directories into one table and
collects their field and L1-error CSVs under ``fields/`` and ``l1_error/``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from morephy.data import read_dataset, write_dataset
from morephy.evoopt import Individual
from morephy.opnet import load_checkpoint, save_checkpoint
from morephy.physics import LossWeights
from morephy.pipeline import (
    CandidateSet,
    ExperimentConfig,
    MorephyResult,
    StageError,
    TrainingDivergence,
    ensemble_metrics,
    evaluation_field,
    make_dataset,
    model_metrics,
    morephy_candidates,
    morephy_sample,
    reference_field,
    resolve_workers,
    train_adam,
)
from morephy.resgld import SampleStore, SwapStats, write_trace
from morephy.uqbench import l1_error_field, write_metrics

log = logging.getLogger("morephy")

SUMMARY_COLUMNS = ("problem", "mode", "noise_ratio", "variant", "seed", "l2_rel", "mean_l1", "true_param",
                   "predicted_param", "coverage_95", "loss_data", "loss_pde", "loss_bc")


class CliError(RuntimeError):
    pass


# --- helpers -----------------------------------------------------------------

def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.read(args.config) if args.config else ExperimentConfig()
    updates = {"workers": resolve_workers(args.workers, cfg.workers)}
    if args.seed is not None:
        updates["seed"] = int(args.seed)
    return cfg.replace(**updates)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["%.17g" % v if isinstance(v, float) else v for v in row])


def _dataset(out: Path):
    path = out / "dataset.txt"
    if not path.exists():
        raise CliError(f"{path} is missing; run 'morephy generate' first")
    return read_dataset(path)


# --- subcommands -------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    write_dataset(make_dataset(cfg), out / "dataset.txt")
    log.info("wrote %s", out / "dataset.txt")


def cmd_train(cfg: ExperimentConfig, out: Path) -> None:
    dataset = _dataset(out)
    cfg.write(out / "config.txt")
    if cfg.variant != "Morephy":
        res = train_adam(cfg, dataset)
        save_checkpoint(res.model, out / "model.ckpt")
        _write_csv(out / "train_history.csv", ("epoch", "train_loss", "validation_loss"), res.history)
        log.info("%s stopped after %d epochs (best %d, validation %.3e)", cfg.variant, res.epochs,
                 res.best_epoch, res.best_val)
        return
    base = load_checkpoint(cfg.init_checkpoint) if cfg.init_checkpoint else None
    cands = morephy_candidates(cfg, dataset, base)
    save_candidates(cands, out / "candidates")
    header = ("generation", "best_data", "best_pde", "best_bc", "front1_size", "hypervolume")
    _write_csv(out / "evolution_log.csv", header, cands.evo_log)
    log.info("kept %d of %d first-front models", len(cands.selected), len(cands.front))


def save_candidates(cands: CandidateSet, folder: Path) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    meta = []
    for j, ind in enumerate(cands.candidates):
        save_checkpoint(cands.model.with_values(ind.values), folder / f"candidate_{j}.ckpt")
        w = cands.weights[j]
        meta.append({"index": cands.selected[j], "objectives": [float(v) for v in ind.objectives],
                     "weights": [w.w_data, w.w_pde, w.w_bc]})
    (folder / "candidates.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_candidates(folder: Path) -> CandidateSet:
    path = folder / "candidates.json"
    if not path.exists():
        raise CliError(f"{path} is missing; run 'morephy train' first")
    meta = json.loads(path.read_text())
    models = [load_checkpoint(folder / f"candidate_{j}.ckpt") for j in range(len(meta))]
    front = [Individual(m.params, np.array(d["objectives"])) for m, d in zip(models, meta)]
    return CandidateSet(front, front, list(range(len(front))), [LossWeights(*d["weights"]) for d in meta], [],
                        models[0])


def cmd_sample(cfg: ExperimentConfig, out: Path) -> None:
    if cfg.variant != "Morephy":
        raise CliError("'sample' applies to the Morephy variant only")
    dataset = _dataset(out)
    cands = load_candidates(out / "candidates")
    res = morephy_sample(cfg, dataset, cands, trace=True)
    folder = out / "samples"
    folder.mkdir(exist_ok=True)
    stats = []
    for j, (store, st, rows) in enumerate(zip(res.stores, res.stats, res.traces)):
        np.save(folder / f"candidate_{j}.npy", store.as_array())
        write_trace(rows, folder / f"trace_{j}.csv")
        stats.append({"attempts": st.attempts, "acceptances": st.acceptances, "sigma2": st.sigma2,
                      "steps": store.steps})
    (folder / "stats.json").write_text(json.dumps(stats) + "\n")
    log.info("collected %d samples", sum(len(s) for s in res.stores))


def load_samples(out: Path, cands: CandidateSet) -> MorephyResult:
    folder = out / "samples"
    meta_path = folder / "stats.json"
    if not meta_path.exists():
        raise CliError(f"{meta_path} is missing; run 'morephy sample' first")
    meta = json.loads(meta_path.read_text())
    stores, stats = [], []
    for j, m in enumerate(meta):
        arr = np.load(folder / f"candidate_{j}.npy")
        store = SampleStore(list(arr), list(m["steps"]))
        stores.append(store)
        stats.append(SwapStats(m["attempts"], m["acceptances"], m["sigma2"]))
    return MorephyResult(cands, stores, stats, [])


def cmd_evaluate(cfg: ExperimentConfig, out: Path) -> dict:
    dataset = _dataset(out)
    ref = reference_field(cfg)
    ev = evaluation_field(cfg, ref)
    if cfg.variant == "Morephy":
        res = load_samples(out, load_candidates(out / "candidates"))
        metrics, fields = ensemble_metrics(cfg, res, dataset, ev)
    else:
        path = out / "model.ckpt"
        if not path.exists():
            raise CliError(f"{path} is missing; run 'morephy train' first")
        metrics, fields = model_metrics(cfg, load_checkpoint(path), dataset, ev, cfg.variant)
    write_metrics(metrics, out / "metrics.json")
    write_fields(out, ev, fields)
    log.info("%s %s: L2 relative error %.4g", cfg.problem, cfg.variant, metrics["l2_rel"])
    return metrics


def write_fields(out: Path, ev, fields: dict) -> None:
    pts = ev.points()
    bench = ev.u.ravel()
    rows = zip(pts[:, 0], pts[:, 1], bench, fields["mean"], fields["lower"], fields["upper"])
    _write_csv(out / "field.csv", ("x", "t", "benchmark", "mean", "lower", "upper"),
               [tuple(float(v) for v in r) for r in rows])
    l1 = l1_error_field(fields["mean"], bench)
    _write_csv(out / "l1_error.csv", ("x", "t", "l1"), [(float(a), float(b), float(c)) for a, b, c in zip(pts[:, 0], pts[:, 1], l1)])


def summary_row(metrics: dict) -> list:
    losses = metrics.get("losses") or {}
    row = [metrics.get(k) for k in SUMMARY_COLUMNS[:10]]
    row += [losses.get("data"), losses.get("pde"), losses.get("bc")]
    return ["" if v is None else v for v in row]


def cmd_report(out: Path, runs: list[Path]) -> list[Path]:
    """Summary table plus per-run field CSVs; returns the runs lacking metrics.

    Without explicit ``runs`` every subdirectory of ``out`` holding a
    ``config.txt`` counts as a run.
    """
    if not runs:
        runs = sorted(p for p in out.iterdir() if (p / "config.txt").exists()) if out.exists() else []
    out.mkdir(parents=True, exist_ok=True)
    rows, missing = [], []
    for run in runs:
        path = run / "metrics.json"
        if not path.exists():
            missing.append(run)
            continue
        metrics = json.loads(path.read_text())
        rows.append((run.name, summary_row(metrics)))
        for src, sub in (("field.csv", "fields"), ("l1_error.csv", "l1_error")):
            if (run / src).exists():
                (out / sub).mkdir(exist_ok=True)
                shutil.copyfile(run / src, out / sub / f"{run.name}.csv")
    rows.sort(key=lambda r: [str(v) for v in r[1][:5]] + [r[0]])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("run",) + SUMMARY_COLUMNS)
        for name, row in rows:
            w.writerow([name] + row)
    lines = ["| run | " + " | ".join(SUMMARY_COLUMNS) + " |", "|" + "---|" * (len(SUMMARY_COLUMNS) + 1)]
    for name, row in rows:
        lines.append("| " + " | ".join([name] + [_cell(v) for v in row]) + " |")
    if missing:
        lines += ["", "Missing runs: " + ", ".join(str(m) for m in missing)]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    return missing


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morephy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("generate", "build the reference field and write the dataset"),
                       ("train", "train a baseline, or evolve and select Morephy candidates"),
                       ("sample", "run replica-exchange SGLD from the Morephy candidates"),
                       ("evaluate", "score the trained run and write metrics and field CSVs"),
                       ("report", "summarize the metrics of several run directories")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="flat 'key = value' config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
        p.add_argument("--workers", type=int, help="worker threads (fallback: MOREPHY_WORKERS)")
        if name == "report":
            p.add_argument("runs", nargs="*", type=Path, help="run directories (default: subdirectories of --out)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            missing = cmd_report(args.out, args.runs)
            for m in missing:
                print(f"missing metrics: {m}", file=sys.stderr)
            return 0
        cfg = load_config(args)
        out = args.out
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "sample":
            cmd_sample(cfg, out)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, out)
    except TrainingDivergence as exc:
        print(f"error: {exc} (last finite epoch {exc.epoch})", file=sys.stderr)
        return 2
    except (CliError, StageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
