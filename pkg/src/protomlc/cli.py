"""Command line: ``protomlc synth | train | eval | ablate``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path


from . import diffcore as dc
from . import evaluate as ev
from . import trainer as tr
from .config import ConfigError, RunConfig, load_run_config, resolve_output
from .datamodel import (Dataset, DatasetError, _atomic_write, cooccurrence_matrix, generate_synthetic,
                        label_matrix, load_dataset)
from .losses import LossContractError

logger = logging.getLogger("protomlc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SUMMARY_METRICS = ("lrap", "micro_aupr", "macro_aupr", "r@0.8")


# -- synth ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    out = resolve_output(args.out)
    dataset, _ = generate_synthetic(cfg.synth, out)
    _atomic_write(out / "config.resolved.json", cfg.to_json())
    print(f"wrote dataset to {out}")
    for split in ("train", "val", "test"):
        print(f"  {split}: {len(dataset.split(split))} samples")
    labels = label_matrix(dataset.split("train"), dataset.manifest.num_classes)
    co = cooccurrence_matrix(labels)
    names = dataset.manifest.class_names
    width = max(len(n) for n in names)
    print("label co-occurrence (train, fraction of samples):")
    print(" " * width + "".join(f"{i:>7d}" for i in range(len(names))))
    for name, row in zip(names, co):
        print(f"{name:<{width}}" + "".join(f"{v:7.3f}" for v in row))
    return EXIT_OK


# -- train ----------------------------------------------------------------------


def _check_compatible(dataset: Dataset, cfg: RunConfig) -> None:
    if cfg.train.loss == "supcon" and dataset.manifest.task_mode != "singlelabel":
        raise LossContractError("supcon needs a single-label dataset")
    if cfg.train.hierarchy_weight > 0 and dataset.manifest.superclass_of is None:
        raise ConfigError("hierarchy_weight > 0 but the dataset has no superclass map")


def run_training(cfg: RunConfig, dataset: Dataset, out: Path, resume: str | None = None,
                 eval_split: str = "val") -> ev.EvalReport | None:
    """Train (or resume) into ``out``; returns the report on ``eval_split``."""
    out.mkdir(parents=True, exist_ok=True)
    _check_compatible(dataset, cfg)
    _atomic_write(out / "config.resolved.json", cfg.to_json())
    if resume:
        ckpt = tr.load_checkpoint(resume, expected_hash=tr.config_hash(cfg.train, cfg.encoder))
        log = tr.EventLog(out / "events.jsonl")
        log.emit("resume", step=ckpt.step, source=str(resume))
    else:
        ckpt = tr.new_checkpoint(dataset, cfg.train, cfg.encoder)
        (out / "events.jsonl").unlink(missing_ok=True)
        log = tr.EventLog(out / "events.jsonl")
    try:
        trainer = tr.Trainer(ckpt, dataset, log)
        every = cfg.checkpoint_every
        while not trainer.done:
            trainer.step()
            s = trainer.ckpt.step
            if s == trainer.stage1_steps and s > 0:
                tr.save_checkpoint(trainer.ckpt, out / "stage1.mlck")
            if every and s % every == 0:
                tr.save_checkpoint(trainer.ckpt, out / "last.mlck")
        trainer.finalize()
        tr.save_checkpoint(trainer.ckpt, out / "last.mlck")
        tr.save_checkpoint(trainer.ckpt, out / "final.mlck")
        log.emit("done", step=trainer.ckpt.step)
    finally:
        log.close()
    samples = dataset.split(eval_split)
    if not samples:
        return None
    report = ev.evaluate(trainer.ckpt, samples, dataset.manifest.class_names, dataset.manifest.task_mode, cfg.eval)
    _atomic_write(out / "metrics.json", ev.metrics_json(report))
    return report


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.loss:
        cfg.train = replace(cfg.train, loss=args.loss)
        cfg.validate()
    dataset = load_dataset(args.data)
    out = resolve_output(args.out or cfg.output_dir or "run")
    report = run_training(cfg, dataset, out, args.resume)
    if report is not None:
        print(json.dumps(report.summary(), sort_keys=True))
    print(f"checkpoint: {out / 'final.mlck'}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------


def _parse_fractions(text: str) -> list[float]:
    try:
        fr = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --fractions {text!r}") from exc
    if not fr or any(not 0 <= f <= 1 for f in fr):
        raise ConfigError("--fractions must be comma-separated values in [0, 1]")
    return fr


def write_eval_outputs(ckpt, dataset: Dataset, out: Path, opts: ev.EvalOptions, modalities, fractions) -> ev.EvalReport:
    samples = dataset.split(opts.split)
    names = dataset.manifest.class_names
    mode = dataset.manifest.task_mode
    report = ev.evaluate(ckpt, samples, names, mode, opts)
    rows = []
    for mod in modalities:
        rows += ev.robustness_eval(ckpt, samples, names, mod, fractions, mode, opts)
    report.robustness = rows
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "metrics.json", ev.metrics_json(report))
    _atomic_write(out / "pr_curves.csv", ev.pr_curves_csv(report))
    _atomic_write(out / "robustness.csv", ev.robustness_csv(rows))
    return report


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    opts = cfg.eval
    if args.split:
        opts = replace(opts, split=args.split)
    dataset = load_dataset(args.data)
    try:
        ckpt = tr.load_checkpoint(args.ckpt)
    except tr.CheckpointError as exc:
        raise DatasetError(f"cannot use checkpoint {args.ckpt}: {exc}") from exc
    if ckpt.dataset_signature != dataset.manifest.signature():
        raise DatasetError("checkpoint was trained on an incompatible dataset (class list or dimensions differ)")
    modalities = [args.drop_modality] if args.drop_modality else ["v", "t"]
    fractions = _parse_fractions(args.fractions)
    out = resolve_output(args.out)
    report = write_eval_outputs(ckpt, dataset, out, opts, modalities, fractions)
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


# -- ablate ---------------------------------------------------------------------------


def parse_grid(items) -> dict:
    grid = {"losses": ["mlc"], "protos": ["orthogonal"], "fusion_layers": [None], "seeds": 1}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or key not in grid:
            raise ConfigError(f"bad grid item {item!r}; expected losses=, protos=, fusion_layers= or seeds=")
        if key == "seeds":
            try:
                grid["seeds"] = int(value)
            except ValueError as exc:
                raise ConfigError("seeds must be an integer") from exc
            if grid["seeds"] < 1:
                raise ConfigError("seeds must be >= 1")
        elif key == "fusion_layers":
            try:
                grid[key] = [int(v) for v in value.split(",")]
            except ValueError as exc:
                raise ConfigError("fusion_layers must be integers") from exc
        else:
            grid[key] = value.split(",")
    for loss in grid["losses"]:
        if loss not in tr.LOSSES:
            raise ConfigError(f"unknown loss {loss!r}")
    for proto in grid["protos"]:
        if proto not in ("random", "orthogonal"):
            raise ConfigError(f"unknown prototype init {proto!r}")
    return grid


def grid_cells(grid: dict, base: RunConfig) -> list[dict]:
    """Cross-product of the grid; prototype init only varies for the prototype loss."""
    cells = []
    fusion = [base.encoder.layers_f if f is None else f for f in grid["fusion_layers"]]
    for loss, layers in itertools.product(grid["losses"], fusion):
        protos = grid["protos"] if loss == "mlc" else ["-"]
        for proto in protos:
            cells.append({"loss": loss, "protos": proto, "fusion_layers": layers})
    return cells


def _cell_name(cell: dict) -> str:
    return f"{cell['loss']}_{cell['protos']}_f{cell['fusion_layers']}"


def _run_cell(job) -> dict:
    cfg_doc, cell, seed, data_dir, out_dir = job
    row = {**cell, "seed": seed}
    try:
        doc = json.loads(json.dumps(cfg_doc))
        doc["seed"] = seed
        for sec in ("synth", "encoder", "train", "eval"):
            for key in ("seed", "drop_seed"):
                doc.get(sec, {}).pop(key, None)
        doc.setdefault("train", {})["loss"] = cell["loss"]
        if cell["protos"] != "-":
            doc["train"]["prototype_init"] = cell["protos"]
        doc.setdefault("encoder", {})["layers_f"] = cell["fusion_layers"]
        cfg = RunConfig.from_dict(doc)
        dataset = load_dataset(data_dir)
        report = run_training(cfg, dataset, Path(out_dir), eval_split="test")
        row.update(report.summary())
        row["status"] = "ok"
    except Exception as exc:  # a failed cell is recorded and the sweep continues
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return row


def summarize_cells(rows: list[dict], cells: list[dict]) -> list[dict]:
    out = []
    for cell in cells:
        mine = [r for r in rows if all(r[k] == cell[k] for k in cell)]
        ok = [r for r in mine if r["status"] == "ok"]
        rec = {**cell, "n_seeds": len(ok), "failures": len(mine) - len(ok)}
        for m in SUMMARY_METRICS:
            vals = [r[m] for r in ok if m in r]
            rec[f"{m}_mean"] = statistics.fmean(vals) if vals else float("nan")
            rec[f"{m}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0 if vals else float("nan")
        out.append(rec)
    return out


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _pm(rec: dict, metric: str) -> str:
    return f"{100 * rec[metric + '_mean']:.1f} ± {100 * rec[metric + '_std']:.1f}"


def ablation_report(summary: list[dict]) -> str:
    lines = ["# Ablation summary", "", "Values are mean ± sample stdev over seeds, in percent.", ""]

    def table(title, rows, key_cols):
        if not rows:
            return
        lines.append(f"## {title}")
        lines.append("")
        head = key_cols + ["AUPR", "LRAP", "R@80", "runs"]
        lines.append("| " + " | ".join(head) + " |")
        lines.append("|" + "---|" * len(head))
        for r in rows:
            keys = [str(r[k]) for k in key_cols]
            vals = [_pm(r, "micro_aupr"), _pm(r, "lrap"), _pm(r, "r@0.8"), str(r["n_seeds"])]
            lines.append("| " + " | ".join(keys + vals) + " |")
        lines.append("")

    table("Loss", summary, ["loss", "protos", "fusion_layers"])
    mlc = [r for r in summary if r["loss"] == "mlc"]
    if len({r["protos"] for r in mlc}) > 1:
        table("Class prototypes", mlc, ["protos", "fusion_layers"])
    if len({r["fusion_layers"] for r in summary}) > 1:
        table("Fusion encoder size", sorted(summary, key=lambda r: (r["loss"], r["fusion_layers"])),
              ["fusion_layers", "loss", "protos"])
    failed = [r for r in summary if r["failures"]]
    if failed:
        lines.append("## Failed runs")
        lines.append("")
        for r in failed:
            lines.append(f"- {_cell_name(r)}: {r['failures']} failed (see runs.csv)")
        lines.append("")
    return "\n".join(lines)


def run_ablation(cfg_doc: dict, data_dir, grid: dict, out: Path, workers: int = 1) -> tuple[list, list]:
    base = RunConfig.from_dict(cfg_doc)
    cells = grid_cells(grid, base)
    root_seed = base.seed or 0
    jobs = []
    for cell in cells:
        for i in range(grid["seeds"]):
            seed = root_seed + i
            jobs.append((cfg_doc, cell, seed, str(data_dir), str(out / "cells" / _cell_name(cell) / f"seed_{seed}")))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    summary = summarize_cells(rows, cells)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "runs.csv", _csv(rows))
    _atomic_write(out / "ablation.csv", _csv(summary))
    _atomic_write(out / "report.md", ablation_report(summary))
    return rows, summary


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    cfg_doc = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    grid = parse_grid(args.grid)
    load_dataset(args.data)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.resolved.json", cfg.to_json())
    rows, summary = run_ablation(cfg_doc, args.data, grid, out, args.workers)
    print((out / "report.md").read_text(encoding="utf-8"))
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        print(f"{failed} of {len(rows)} runs failed; see {out / 'runs.csv'}", file=sys.stderr)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protomlc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--resume")
    t.add_argument("--loss", choices=tr.LOSSES)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--split", choices=("train", "val", "test"))
    e.add_argument("--drop-modality", choices=("v", "t"))
    e.add_argument("--fractions", default="0,0.1,0.3,0.5,1")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep losses / prototype init / fusion depth over seeds")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", nargs="+", default=[])
    a.add_argument("--out", required=True)
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, LossContractError, tr.TrainingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except tr.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (dc.NumericalError, dc.DegenerateInputError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
