"""Command-line entry point: ``mgfd <subcommand> --config run.json --out DIR``.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mgfd import checkpoint
from mgfd.distill import DistillConfig, StudentModel, export_coefficients, mlp_forward, train_student, write_coefficients_csv
from mgfd.evalbench import EvalReport, _eval_row, bench_inference, production_scope, run_production_eval
from mgfd.mgraph import (
    MultiplexGraph,
    ProductionSplit,
    SplitSpec,
    generate,
    load_dataset,
    make_production_split,
    remove_cross_edges,
    save_dataset,
    spec_from_dict,
)
from mgfd.numkit import AdamConfig
from mgfd.teacher import TeacherConfig, TeacherModel, export_soft_labels, train_teacher, write_log_csv

log = logging.getLogger("mgfd")

EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


class ValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str | dict
    teacher: TeacherConfig
    distill: DistillConfig
    ind_fraction: float = 0.2
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None
    base_dir: Path = Path(".")

    def load_graph(self) -> tuple[MultiplexGraph, SplitSpec]:
        if isinstance(self.dataset, dict):
            return generate(spec_from_dict(self.dataset["generator"]))
        return load_dataset(self.dataset)


def _adam(section: dict) -> AdamConfig:
    return AdamConfig(learning_rate=float(section.pop("lr", 0.01)), weight_decay=float(section.pop("weight_decay", 0.0)))


def parse_run_config(doc: dict, base_dir: Path = Path(".")) -> RunConfig:
    doc = json.loads(json.dumps(doc))
    if "dataset" not in doc:
        raise ValidationError("config needs a 'dataset' entry (a path or {'generator': {...}})")
    dataset = doc["dataset"]
    if isinstance(dataset, str):
        p = Path(dataset)
        dataset = str(p if p.is_absolute() else (base_dir / p))
        if not Path(dataset).is_dir():
            raise ValidationError(f"dataset directory does not exist: {dataset}")
    elif not (isinstance(dataset, dict) and "generator" in dataset):
        raise ValidationError("'dataset' must be a path or {'generator': {...}}")
    t = dict(doc.get("teacher", {}))
    teacher = TeacherConfig(adam=_adam(t), **t)
    d = dict(doc.get("distill", {}))
    if "lambda" in d:
        d["lam"] = d.pop("lambda")
    distill = DistillConfig(adam=_adam(d), **d)
    seeds = [int(s) for s in doc.get("seeds", [0])]
    if not seeds:
        raise ValidationError("'seeds' must be non-empty")
    ind_fraction = float(doc.get("split", {}).get("ind_fraction", 0.2))
    if not 0.0 <= ind_fraction <= 1.0:
        raise ValidationError("ind_fraction must lie in [0, 1]")
    return RunConfig(dataset, teacher, distill, ind_fraction, seeds, doc.get("out"), base_dir)


def load_run_config(path, args) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    cfg = parse_run_config(json.loads(p.read_text(encoding="utf-8")), p.parent)
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "ind_fraction", None) is not None:
        if not 0.0 <= args.ind_fraction <= 1.0:
            raise ValidationError("--ind-fraction must lie in [0, 1]")
        cfg.ind_fraction = args.ind_fraction
    if getattr(args, "mode", None) is not None:
        cfg.distill = replace(cfg.distill, mode=args.mode)
    return cfg


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = args.out or (cfg.out if cfg is not None else None)
    if out is None:
        raise ValidationError("no output directory: pass --out or set 'out' in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _regime(cfg: RunConfig, seed: int):
    g, splits = cfg.load_graph()
    prod = make_production_split(splits, cfg.ind_fraction, seed)
    return g, prod, remove_cross_edges(g, prod.ind)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    p = Path(args.config)
    if not p.is_file():
        raise ValidationError(f"generator spec not found: {p}")
    doc = json.loads(p.read_text(encoding="utf-8"))
    doc = doc.get("generator", doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    g, splits = generate(spec_from_dict(doc))
    out = _out_dir(args)
    save_dataset(g, splits, out)
    edges = ", ".join(f"{name}={v.num_edges}" for name, v in zip(g.view_names, g.views))
    print(f"wrote {out}: n={g.n} r={g.r} d={g.d} k={g.k} edges: {edges}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = load_run_config(args.config, args)
    out = _out_dir(args, cfg)
    seed = cfg.seeds[0]
    _, prod, train_graph = _regime(cfg, seed)
    model, history = train_teacher(train_graph, prod.base, replace(cfg.teacher, seed=seed))
    checkpoint.write_json(model.to_dict(), out / "teacher.json")
    write_log_csv(history, out / "teacher_log.csv")
    best = max((h.val_acc for h in history), default=float("nan"))
    print(f"teacher -> {out / 'teacher.json'} (best val acc {best:.4f})")
    return 0


def _load_teacher(path) -> TeacherModel:
    return TeacherModel.from_dict(checkpoint.read_json(path))


def _load_student(path) -> StudentModel:
    return StudentModel.from_dict(checkpoint.read_json(path))


def cmd_distill(args) -> int:
    cfg = load_run_config(args.config, args)
    out = _out_dir(args, cfg)
    seed = cfg.seeds[0]
    g, prod, train_graph = _regime(cfg, seed)
    teacher = _load_teacher(args.teacher)
    bundle = export_soft_labels(teacher, train_graph, production_scope(g.n, prod))
    dcfg = replace(cfg.distill, seed=seed)
    student, history = train_student(g.x, g.y, prod.base, bundle, dcfg)
    stem = f"student_{dcfg.mode}"
    checkpoint.write_json(student.to_dict(), out / f"{stem}.json")
    write_log_csv(history, out / f"{stem}_log.csv")
    best = max((h.val_acc for h in history), default=float("nan"))
    print(f"student[{dcfg.mode}] -> {out / (stem + '.json')} (best val acc {best:.4f})")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args)
    out = _out_dir(args, cfg)
    if args.teacher or args.student:
        seed = cfg.seeds[0]
        g, prod, _ = _regime(cfg, seed)
        report = EvalReport()
        if args.teacher:
            from mgfd.teacher import teacher_forward

            pred = teacher_forward(_load_teacher(args.teacher), g).integrated.argmax(axis=1)
            report.rows.append(_eval_row("teacher", seed, pred, g.y, prod, 0.2))
        for path in args.student or []:
            student = _load_student(path)
            pred = student.predict_logits(g.x).argmax(axis=1)
            report.rows.append(_eval_row(student.mode, seed, pred, g.y, prod, 0.2))
    else:
        g, splits = cfg.load_graph()
        prod = make_production_split(splits, cfg.ind_fraction, cfg.seeds[0])
        report = run_production_eval(g, prod, cfg.teacher, {cfg.distill.mode: cfg.distill}, cfg.seeds)
    report.write_csv(out / "eval.csv")
    report.write_json(out / "eval_summary.json")
    for method, s in report.summary().items():
        print(f"{method:12s} prod {s['prod_acc']['mean']:.4f} +- {s['prod_acc']['std']:.4f}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_run_config(args.config, args)
    out = _out_dir(args, cfg)
    if not args.teacher or not args.student:
        raise ValidationError("bench needs --teacher and --student checkpoints")
    g, _ = cfg.load_graph()
    teacher = _load_teacher(args.teacher)
    student = _load_student(args.student[0])
    fanout = None if args.fanout == 0 else args.fanout
    report = bench_inference(g, teacher, student, fanout=fanout, repeats=args.repeats, seed=cfg.seeds[0])
    report.write_csv(out / "bench.csv")
    report.write_json(out / "bench.json")
    for e in report.entries:
        print(f"{e.method:10s} fetched {e.fetched_nodes:7d}  median {e.median_ms:9.3f} ms  x{e.speedup_vs_teacher:.2f}")
    return 0


def _parse_nodes(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(" ", "").split(",") if tok]
    except ValueError as exc:
        raise ValidationError(f"bad node list {text!r}") from exc


def cmd_export_coefs(args) -> int:
    cfg = load_run_config(args.config, args)
    out = _out_dir(args, cfg)
    if not args.student:
        raise ValidationError("export-coefs needs --student")
    student = _load_student(args.student[0])
    if student.factors is None:
        raise ValidationError(f"student mode {student.mode!r} has no node-wise coefficients")
    g, _ = cfg.load_graph()
    nodes = _parse_nodes(args.nodes)
    h, _ = mlp_forward(student.mlp, g.x)
    rows = export_coefficients(h, student.factors, nodes)
    write_coefficients_csv(rows, student.factors.n_teachers, out / "coefficients.csv")
    print(f"{len(rows)} coefficient rows -> {out / 'coefficients.csv'}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-coefs": cmd_export_coefs,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgfd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON (generator spec JSON for gen-data)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if name != "gen-data":
            p.add_argument("--ind-fraction", type=float, default=None)
            p.add_argument("--mode", choices=["mgfnn", "mgfnn-plus", "mean", "para"], default=None)
        if name in ("distill", "eval", "bench"):
            p.add_argument("--teacher", default=None, help="teacher checkpoint JSON")
        if name in ("eval", "bench", "export-coefs"):
            p.add_argument("--student", action="append", default=None, help="student checkpoint JSON (repeatable)")
        if name == "bench":
            p.add_argument("--fanout", type=int, default=10, help="neighbour-sampling fan-out; 0 disables NS")
            p.add_argument("--repeats", type=int, default=20)
        if name == "export-coefs":
            p.add_argument("--nodes", required=True, help="comma-separated node ids")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "distill" and not args.teacher:
        print("mgfd distill: --teacher is required", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except (ValueError, LookupError, TypeError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"mgfd {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"mgfd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
