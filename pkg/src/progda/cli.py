"""Command-line front end.

Exit codes: 0 ok, 1 runtime failure, 2 usage or config error. Any config key
can be set with ``--key value`` (dotted keys allowed), overriding ``--config``
and ``--manifest`` files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod, gradsuite
from .clustering import DbscanParams, bcubed_f, dbscan, nmi
from .data import SOURCE, TARGET, ParseError, SchemaError, generate, load_features, save_features
from .evaluator import split_query_gallery
from .numerics import EvaluationError, encode
from .trainer import (Monitor, TrainingAborted, load_model, retrieval_metrics, run_baseline, save_model,
                      train)


class UsageError(Exception):
    pass


def _parse_overrides(tokens: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        out[key] = value
    return out


def _resolve(args, overrides: dict) -> dict:
    layers = []
    if getattr(args, "manifest", None):
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        layers.append(manifest["config"])
    if getattr(args, "config", None):
        layers.append(cfgmod.read_file(args.config))
    layers.append(overrides)
    return cfgmod.resolve(*layers)


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, np.generic):
        return value.item()
    return value


def _write_manifest(out: Path, command: str, resolved: dict, inputs: dict, outputs: dict) -> None:
    manifest = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in resolved.items()},
        "seed": resolved["seed"],
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_run_data(args, spec):
    """(source, target, target_labels or None, test or None) from --data or the synthetic spec."""
    if not args.data:
        d = generate(spec)
        return d.source, d.target, d.target_labels, d.test, {}
    root = Path(args.data)
    source = load_features(root / "source.csv", domain=SOURCE)
    target = load_features(root / "target.csv", domain=TARGET).unlabeled()
    inputs = {"source": str(root / "source.csv"), "target": str(root / "target.csv")}
    truth = test = None
    if (root / "target_truth.csv").exists():
        truth_ds = load_features(root / "target_truth.csv")
        truth = truth_ds.labels
        inputs["target_truth"] = str(root / "target_truth.csv")
    if (root / "test.csv").exists():
        test = load_features(root / "test.csv")
        inputs["test"] = str(root / "test.csv")
    return source, target, truth, test, inputs


# --- commands ----------------------------------------------------------------

def cmd_generate(args, resolved) -> int:
    spec, _ = cfgmod.build(resolved)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = generate(spec)
    save_features(d.source, out / "source.csv")
    save_features(d.target, out / "target.csv")
    save_features(d.target, out / "target_truth.csv", labels=d.target_labels)
    save_features(d.test, out / "test.csv")
    names = ["source.csv", "target.csv", "target_truth.csv", "test.csv"]
    _write_manifest(out, "generate", resolved, {}, {n: str(out / n) for n in names})
    print(f"wrote {len(d.source)} source, {len(d.target)} target, {len(d.test)} test samples to {out}")
    return 0


def _train_like(args, resolved, runner, command) -> int:
    spec, cfg = cfgmod.build(resolved)
    source, target, truth, test, inputs = _load_run_data(args, spec)
    monitor = Monitor(truth, test, cfg.dbscan) if truth is not None else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = runner(source, target, cfg, monitor)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps({k: _jsonable(v) for k, v in rec.to_dict().items()}) + "\n")
    save_model(result.ema, out / "model.bin")
    _write_manifest(out, command, resolved, inputs,
                    {"metrics": str(out / "metrics.jsonl"), "model": str(out / "model.bin")})
    last = result.records[-1]
    print(json.dumps({"epoch": last.epoch, "mAP": last.mAP, "rank1": last.rank1, "nmi": last.nmi}))
    return 0


def cmd_train(args, resolved) -> int:
    return _train_like(args, resolved, train, "train")


def cmd_baseline(args, resolved) -> int:
    return _train_like(args, resolved, run_baseline, "baseline")


def _ablation_cells(grid: str, cfg):
    if grid == "queue":
        for size in (512, 1024, 2048):
            yield "queue", f"capacity={size}", cfg.replace(queue_capacity=size)
    elif grid == "policy":
        for k in (2, 3, 4):
            yield "policy", f"{k}-step", cfg.replace(schedule=dataclasses.replace(cfg.schedule, kind="k_step", k=k))
        yield "policy", "linear", cfg.replace(schedule=dataclasses.replace(cfg.schedule, kind="linear"))
        s = cfg.schedule
        yield "policy", f"static({s.lambda_s},{s.lambda_t})", cfg.replace(
            schedule=dataclasses.replace(s, kind="static"))
    elif grid == "loss":
        for delta in (0.01, 0.1, 1.0):
            for gamma in (0.0, 0.5, 0.7, 1.0):
                yield "loss", f"delta={delta};gamma={gamma}", cfg.replace(delta=delta, gamma=gamma)
    else:
        raise UsageError(f"unknown grid {grid!r}")


def cmd_ablate(args, resolved) -> int:
    spec, cfg = cfgmod.build(resolved)
    source, target, truth, test, inputs = _load_run_data(args, spec)
    if truth is None or test is None:
        raise UsageError("ablation needs hidden target labels and a test split")
    monitor = Monitor(truth, test, cfg.dbscan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for method, params, cell in _ablation_cells(args.grid, cfg):
        try:
            rec = train(source, target, cell, monitor).records[-1]
            rows.append([method, params, f"{rec.mAP:.4f}", f"{rec.rank1:.4f}"])
        except TrainingAborted as exc:
            rows.append([method, params, "aborted", str(exc)])
        print(",".join(rows[-1]), flush=True)
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "params", "mAP", "rank1"])
        writer.writerows(rows)
    _write_manifest(out, f"ablate:{args.grid}", resolved, inputs, {"table": str(out / "ablation.csv")})
    return 0


def cmd_eval(args, resolved) -> int:
    state = load_model(args.model)
    test = load_features(args.features)
    if test.labels is None:
        raise UsageError("eval needs a labeled feature file")
    q, g = split_query_gallery(test.labels, args.every)
    print(json.dumps(retrieval_metrics(state, test, q, g)))
    return 0


def cmd_cluster(args, resolved) -> int:
    ds = load_features(args.features)
    feats = encode(load_model(args.model), ds.inputs) if args.model else ds.inputs
    params = DbscanParams(resolved["dbscan.eps"], resolved["dbscan.min_pts"])
    lab = dbscan(feats, params)
    summary = {"num_clusters": lab.num_clusters, "outlier_fraction": lab.outlier_fraction}
    if ds.labels is not None:
        summary.update(nmi=nmi(lab.assignment, ds.labels), bcubed_f=bcubed_f(lab.assignment, ds.labels))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["instance_id", "cluster"])
            writer.writerows(zip(ds.instance_ids.tolist(), lab.assignment.tolist()))
    print(json.dumps(summary))
    return 0


def cmd_gradcheck(args, resolved) -> int:
    results = gradsuite.run_suite(args.seeds)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    for name, err in worst.items():
        print(f"{'PASS' if err < gradsuite.TOLERANCE else 'FAIL'} {name}: max rel err {err:.3e} over {args.seeds} seeds")
    return 0 if all(r.passed for r in results) else 1


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.set_defaults(fn=fn)
        return p

    p = add("generate", cmd_generate, "write a synthetic two-domain dataset as CSV")
    p.add_argument("--out", required=True)
    for name, fn in (("train", cmd_train), ("baseline", cmd_baseline)):
        p = add(name, fn, f"run the {'full method' if name == 'train' else 'two-stage baseline'}")
        p.add_argument("--out", required=True)
        p.add_argument("--data", help="directory written by 'generate' (default: generate in memory)")
        p.add_argument("--manifest", help="reuse the resolved config of an earlier run")
    p = add("ablate", cmd_ablate, "run an ablation grid and write a CSV table")
    p.add_argument("--grid", required=True, choices=["queue", "policy", "loss"])
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--manifest")
    p = add("eval", cmd_eval, "retrieval metrics of a saved model on a labeled feature file")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--every", type=int, default=5, help="every n-th sample per identity is a query")
    p = add("cluster", cmd_cluster, "run DBSCAN on a feature file")
    p.add_argument("--features", required=True)
    p.add_argument("--model", help="encode inputs with this model first")
    p.add_argument("--out", help="CSV of instance_id,cluster")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss gradient")
    p.add_argument("--seeds", type=int, default=20)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        resolved = _resolve(args, _parse_overrides(extra))
        return args.fn(args, resolved)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, EvaluationError, ParseError, SchemaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
