"""Command-line entry point: ``gnnopf <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import SolveConfig, batch_solve, read_results, write_results
from .case_io import (CaseParseError, CaseValidationError, DatasetError, UnsupportedFeatureError,
                      bundled_case_path, case_digest, load_case, load_dataset, sample_loads,
                      save_dataset)
from .gnn import load_checkpoint, save_checkpoint
from .grid import GridModelError, build_grid_model, combined_admittances
from .loss import PenaltyConfig
from .metrics import MetricsError, feasibility_report, write_error_csv
from .train import (BaselineCosts, TrainingError, config_from_dict, evaluate_test_set, train)

log = logging.getLogger("gnnopf")

MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digests(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file() and f.name != MANIFEST_NAME) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = _sha256(f)
    return out


def _case_path(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    try:
        return bundled_case_path(arg)
    except (FileNotFoundError, KeyError, ValueError):
        raise UsageError(f"case file not found: {arg}") from None


def _load_case(arg: str):
    return load_case(_case_path(arg))


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None


def _grid_kwargs(doc: dict) -> dict:
    g = doc.get("grid", {})
    unknown = set(g) - {"alpha", "beta", "normalize_gso"}
    if unknown:
        raise UsageError(f"unknown grid config keys: {sorted(unknown)}")
    return g


def _solve_config(doc: dict) -> SolveConfig:
    s = dict(doc.get("solver", {}))
    if "penalty" in s:
        s["penalty"] = PenaltyConfig(**s["penalty"])
    return SolveConfig(**s)


def _load_matching_dataset(path, case):
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise UsageError(f"no dataset at {path}")
    ds = load_dataset(p)
    same = (ds.case_digest == case_digest(case)) if ds.case_digest else (ds.case_name == case.name)
    if not same or ds.n_buses != len(case.buses):
        raise UsageError("dataset was sampled from a different case")
    return ds


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, args, config: dict, inputs, seed, started: str) -> None:
    """One run manifest per output directory."""
    doc = {
        "command": ["gnnopf"] + list(args.argv),
        "subcommand": args.command,
        "config": config,
        "input_digests": _digests(inputs),
        "seed": seed,
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(doc, indent=2, default=str))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, default=float))


# --------------------------------------------------------------------------- subcommands

def cmd_parse(args) -> None:
    case = _load_case(args.case)
    demand = case.reference_demand().sum(axis=0)
    summary = {
        "name": case.name,
        "base_mva": case.base_mva,
        "n_buses": len(case.buses),
        "n_generators": len(case.generators),
        "n_branches": len(case.branches),
        "total_demand_pu": [float(demand[0]), float(demand[1])],
        "has_costs": case.has_costs,
        "case_digest": case_digest(case),
    }
    _print_json(summary)
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(summary, indent=2))


def cmd_graph(args) -> None:
    case = _load_case(args.case)
    model = build_grid_model(case, alpha=args.alpha, beta=args.beta, normalize_gso=not args.no_normalize)
    pairs = combined_admittances(case)
    idx = np.array(sorted(pairs))
    kept = model.gso[idx[:, 0], idx[:, 1]] != 0
    stats = {
        "alpha": model.alpha,
        "beta": model.beta,
        "normalized": model.normalize_gso,
        "edges_total": int(len(idx)),
        "edges_kept": int(kept.sum()),
        "edges_dropped": int((~kept).sum()),
        "spectral_radius": model.spectral_radius,
        "gso_sha256": model.fingerprint()["gso_sha256"],
    }
    _print_json(stats)
    if args.edges_csv:
        ids = model.bus_ids
        with open(args.edges_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["from_bus", "to_bus", "weight"])
            for (i, j), k in zip(idx, kept):
                if k:
                    w.writerow([int(ids[i]), int(ids[j]), repr(float(model.gso[i, j]))])


def cmd_sample(args) -> None:
    started = _now()
    case_path = _case_path(args.case)
    case = load_case(case_path)
    if not 0 <= args.low <= args.high:
        raise UsageError(f"need 0 <= low <= high, got {args.low}, {args.high}")
    ds = sample_loads(case, args.n, args.seed, args.low, args.high)
    out = _prepare_out(args.out)
    save_dataset(ds, out)
    write_manifest(out, args, {"n": args.n, "low": args.low, "high": args.high}, [case_path], args.seed, started)
    print(f"wrote {len(ds)} samples to {out}")


def cmd_train(args) -> None:
    started = _now()
    case_path = _case_path(args.case)
    case = load_case(case_path)
    doc = _read_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.workers is not None:
        doc["workers"] = args.workers
    doc.setdefault("workers", os.cpu_count() or 1)
    try:
        cfg = config_from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None
    ds = _load_matching_dataset(args.data, case)
    model = build_grid_model(case, **_grid_kwargs(doc))
    params, history = train(cfg, ds, model)
    out = _prepare_out(args.out)
    save_checkpoint(params, model, out / "checkpoint.json", extra={"best_epoch": history.best_epoch})
    history.write_csv(out / "history.csv")
    snapshot = {"train": cfg.to_dict(), "grid": {"alpha": model.alpha, "beta": model.beta,
                                                 "normalize_gso": model.normalize_gso}}
    write_manifest(out, args, snapshot, [case_path, args.data] + ([args.config] if args.config else []),
                   cfg.seed, started)
    print(f"best epoch {history.best_epoch}: validation loss {min(history.val_loss):.6g}")


def cmd_solve(args) -> None:
    started = _now()
    case_path = _case_path(args.case)
    case = load_case(case_path)
    doc = _read_config(args.config)
    try:
        cfg = _solve_config(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid solver config: {exc}") from None
    ds = _load_matching_dataset(args.data, case)
    model = build_grid_model(case, **_grid_kwargs(doc))
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    batch = batch_solve(model, ds, cfg, workers=workers)
    out = _prepare_out(args.out)
    write_results(out, batch, cfg)
    write_manifest(out, args, {"solver": cfg.to_dict()},
                   [case_path, args.data] + ([args.config] if args.config else []), cfg.seed, started)
    print(f"converged on {batch['convergence_fraction']:.1%} of {len(batch['results'])} samples")


def cmd_eval(args) -> None:
    started = _now()
    case_path = _case_path(args.case)
    case = load_case(case_path)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    doc = json.loads(ckpt.read_text())
    fp = doc.get("gso", {})
    ds = _load_matching_dataset(args.data, case)
    model = build_grid_model(case, alpha=fp.get("alpha"), beta=fp.get("beta", 0.01),
                             normalize_gso=fp.get("normalize", True))
    if fp.get("gso_sha256") not in (None, model.fingerprint()["gso_sha256"]):
        raise UsageError("checkpoint was trained on a different graph shift operator")
    try:
        params = load_checkpoint(ckpt, model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    baseline = None
    inputs = [case_path, args.data, ckpt]
    if args.baseline:
        if not (Path(args.baseline) / "results.json").exists():
            raise UsageError(f"no baseline results at {args.baseline}")
        baseline = BaselineCosts.from_results(read_results(args.baseline))
        inputs.append(args.baseline)
    try:
        report, groups, rels = evaluate_test_set(params, model, ds, baseline)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _prepare_out(args.out)
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2))
    write_error_csv(out / "errors.csv", groups, rels)
    write_manifest(out, args, {"checkpoint": str(ckpt)}, inputs, None, started)
    summary = {k: v for k, v in report.to_dict().items() if k != "max_error_by_kind"}
    _print_json(summary)


def _read_state(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"state file not found: {path}")
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0] and not _is_number(rows[0][0]):
        rows = rows[1:]
    try:
        x = np.array([[float(c) for c in r] for r in rows if r], dtype=float)
    except ValueError as exc:
        raise UsageError(f"state file {path}: {exc}") from None
    if x.ndim != 2 or x.shape[1] != 4:
        raise UsageError(f"state file {path} must have 4 columns p,q,v,delta")
    return x


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def cmd_check(args) -> None:
    case = _load_case(args.case)
    model = build_grid_model(case)
    x = _read_state(args.state)
    if x.shape[0] != model.n_buses:
        raise UsageError(f"state has {x.shape[0]} rows, case has {model.n_buses} buses")
    if args.data:
        ds = _load_matching_dataset(args.data, case)
        if not 0 <= args.sample < len(ds):
            raise UsageError(f"sample {args.sample} outside dataset of {len(ds)}")
        s_d = ds.samples[args.sample]
    else:
        s_d = model.ref_demand
    report = feasibility_report(model, x, s_d, args.tolerance)
    _print_json(report.to_dict())
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))


# --------------------------------------------------------------------------- parser

def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gnnopf", description="Unsupervised GNN optimal power flow.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("parse", help="validate a case file and print a summary")
    s.add_argument("case")
    s.add_argument("--json-out")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("graph", help="build the graph shift operator and print its statistics")
    s.add_argument("case")
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--beta", type=float, default=0.01)
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--edges-csv")
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("sample", help="draw a load dataset around the reference demand")
    s.add_argument("case")
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--low", type=float, default=0.9)
    s.add_argument("--high", type=float, default=1.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    for name, func, helptext in (("train", cmd_train, "train the GNN on a dataset"),
                                 ("solve", cmd_solve, "run the per-instance baseline solver")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("case")
        s.add_argument("--data", required=True)
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        s.add_argument("--workers", type=_positive_int)
        if name == "train":
            s.add_argument("--seed", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a test dataset")
    s.add_argument("case")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--baseline")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check", help="feasibility report for an externally supplied state")
    s.add_argument("case")
    s.add_argument("--state", required=True)
    s.add_argument("--data", help="dataset holding the demand (default: reference demand)")
    s.add_argument("--sample", type=int, default=0)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--out")
    s.set_defaults(func=cmd_check)
    return p


USAGE_ERRORS = (UsageError, CaseParseError, CaseValidationError, UnsupportedFeatureError,
                DatasetError, GridModelError, MetricsError, FileNotFoundError)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except USAGE_ERRORS as exc:
        print(f"gnnopf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, ValueError, RuntimeError, OSError) as exc:
        print(f"gnnopf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
