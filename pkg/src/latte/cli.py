"""Command-line front end.

Exit codes: 0 success, 1 validation error (bad flags, bad input files,
violated world assumptions), 2 runtime error during a run.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import theory as th
from .adapt import PRESETS, preset
from .data import (
    STREAM_TAG,
    EmbeddingDataset,
    TheoryWorld,
    client_rng,
    load_dataset,
    partition,
    sample_theory_batch,
    save_dataset,
    theory_predictor,
)
from .errors import FormatError, LatteError, ValidationError
from .simulate import ExperimentConfig, run, run_repeats

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

THEORY_QUERIES = ("sphere_volume", "cap_volume", "cap_ratio_bounds", "theta_radius", "analytic_error")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latte", description="Federated test-time adaptation with prototype memories.")
    sub = p.add_subparsers(dest="command", metavar="{synth,partition,run,theory,inspect}", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="sample per-client datasets from a ball-mixture world")
    s.add_argument("--world", required=True, help="JSON world spec (mu, w_pre, b_pre, t_scale, ood_centers)")
    s.add_argument("--clients-id", type=int, required=True, help="number of in-distribution clients")
    s.add_argument("--clients-ood", type=int, default=0, help="number of out-of-distribution clients")
    s.add_argument("--samples", type=int, required=True, help="samples per client")
    s.add_argument("--seed", type=int, required=True, help="random seed")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("partition", help="split a dataset's domains evenly over clients")
    s.add_argument("--dataset", required=True, help="dataset manifest path")
    s.add_argument("--clients", type=int, required=True, help="clients per domain")
    s.add_argument("--seed", type=int, required=True, help="random seed")
    s.add_argument("--out", help="write shards as JSON to this file instead of stdout")

    s = sub.add_parser("run", help="run a federation experiment and print its JSON report")
    s.add_argument("--config", required=True, help="JSON experiment config")
    s.add_argument("--preset", choices=sorted(PRESETS), help="override the config's hyperparameters")
    s.add_argument("--trace", help="write a per-sample CSV trace here")
    s.add_argument("--retrieval-log", help="write a CSV of every retrieved prototype here")
    s.add_argument("--pretty", action="store_true", help="human-readable summary instead of JSON")

    s = sub.add_parser("theory", help="evaluate one analytic quantity")
    s.add_argument("--query", required=True, help="one of: " + ", ".join(THEORY_QUERIES))
    s.add_argument("--params", default="", help="comma-separated k=v pairs, e.g. d=3,theta=0.5")
    s.add_argument("--pretty", action="store_true", help="human-readable output")

    s = sub.add_parser("inspect", help="summarize a dataset or show a hyperparameter preset")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--dataset", help="dataset manifest path")
    g.add_argument("--preset", help="preset name")
    return p


def _emit(obj, pretty: bool = False):
    if pretty:
        for k, v in obj.items():
            print(f"{k:>24}: {v}")
    else:
        print(json.dumps(obj, sort_keys=True))


def cmd_synth(args) -> int:
    try:
        spec = json.loads(Path(args.world).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"world file {args.world!r} not found") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"world file is not valid JSON: {e}") from None
    world = TheoryWorld.from_dict(spec)
    if args.clients_id < 1 or args.clients_ood < 0 or args.samples < 1:
        raise ValidationError("need --clients-id >= 1, --clients-ood >= 0 and --samples >= 1")
    if args.clients_ood and not world.ood_centers:
        raise ValidationError("--clients-ood needs ood_centers in the world spec")
    out = Path(args.out)
    clf = theory_predictor(world).classifier
    clients = []
    for i in range(args.clients_id + args.clients_ood):
        ood = None if i < args.clients_id else (i - args.clients_id) % len(world.ood_centers)
        X, y = sample_theory_batch(world, args.samples, client_rng(args.seed, STREAM_TAG, i), ood)
        name = f"client_{i:03d}"
        save_dataset(EmbeddingDataset(X, y, clf, normalized=False), out / name)
        clients.append({"id": i, "group": "id" if ood is None else "ood", "ood_index": ood, "dataset": f"{name}/manifest.json"})
    fed = {"version": 1, "seed": args.seed, "world": world.to_dict(), "clients": clients}
    (out / "federation.json").write_text(json.dumps(fed, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit({"out": str(out), "clients": len(clients), "samples_per_client": args.samples})
    return EXIT_OK


def cmd_partition(args) -> int:
    ds = load_dataset(args.dataset)
    shards = partition(ds, args.clients, args.seed)
    rows = [{"client": s.client_id, "domain": s.domain, "size": len(s), "indices": s.indices.tolist()} for s in shards]
    if args.out:
        Path(args.out).write_text(json.dumps(rows, sort_keys=True) + "\n", encoding="utf-8")
        _emit({"out": args.out, "shards": len(rows)})
    else:
        for r in rows:
            print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.preset:
        d = cfg.to_dict()
        d["params"] = args.preset
        cfg = ExperimentConfig.from_dict(d, cfg.base_dir)
    if cfg.repeats > 1:
        if args.trace or args.retrieval_log:
            raise ValidationError("--trace/--retrieval-log need repeats = 1")
        summary = run_repeats(cfg)
        if args.pretty:
            _emit({k: v for k, v in summary.items() if k != "reports"}, True)
        else:
            print(json.dumps(summary, sort_keys=True))
        return EXIT_OK
    report = run(cfg, trace=args.trace, retrieval_log=args.retrieval_log)
    if args.pretty:
        flat = {f"total.{k}": v for k, v in report.total.items()}
        flat.update({f"comm.{k}": v for k, v in report.comm.items()})
        if report.theory:
            flat.update({f"theory.{k}": v for k, v in report.theory.items() if k != "per_client"})
        _emit(flat, True)
    else:
        print(report.to_json())
    return EXIT_OK


def _parse_params(text: str) -> dict:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise ValidationError(f"bad parameter {part!r}; expected k=v")
        k, v = part.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise ValidationError(f"parameter {k!r} is not a number: {v!r}") from None
    return out


def _need(params: dict, *names):
    missing = [n for n in names if n not in params]
    if missing:
        raise ValidationError(f"missing parameters: {', '.join(missing)}")
    extra = set(params) - set(names)
    if extra:
        raise ValidationError(f"unexpected parameters: {', '.join(sorted(extra))}")


def _int(v: float, name: str) -> int:
    if v != int(v):
        raise ValidationError(f"{name} must be an integer")
    return int(v)


def cmd_theory(args) -> int:
    if args.query not in THEORY_QUERIES:
        raise ValidationError(f"unknown query {args.query!r}; valid: {', '.join(THEORY_QUERIES)}")
    p = _parse_params(args.params)
    out = {"query": args.query, "params": p}
    if args.query == "sphere_volume":
        _need(p, "d")
        out["value"] = th.sphere_volume(_int(p["d"], "d"))
    elif args.query == "cap_volume":
        _need(p, "d", "theta")
        out["value"] = th.cap_volume(_int(p["d"], "d"), p["theta"])
    elif args.query == "cap_ratio_bounds":
        _need(p, "d", "theta")
        lo, hi = th.cap_ratio_bounds(_int(p["d"], "d"), p["theta"])
        out["values"] = {"lower": lo, "upper": hi}
    elif args.query == "theta_radius":
        _need(p, "N", "k", "d", "delta")
        out["value"] = th.theta_radius(p["N"], _int(p["k"], "k"), _int(p["d"], "d"), p["delta"])
    else:
        _need(p, "d", "margin")
        d = _int(p["d"], "d")
        if not -1 <= p["margin"] <= math.inf:
            raise ValidationError("margin must be >= -1")
        # any unit w with mu.w = margin gives the same error; put mu on w itself
        w = np.zeros(d)
        w[0] = 1.0
        out["value"] = th.analytic_error(w * p["margin"], w)
    _emit(out, args.pretty)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.preset:
        _emit({"preset": args.preset, **preset(args.preset).to_dict()})
        return EXIT_OK
    ds = load_dataset(args.dataset)
    labels, counts = np.unique(ds.labels, return_counts=True)
    dom, dcounts = np.unique(ds.domain_ids(), return_counts=True)
    zs = float(np.mean(ds.classifier.predict(ds.embeddings) == ds.labels)) if len(ds) else 0.0
    _emit(
        {
            "num_samples": len(ds),
            "dim": ds.dim,
            "num_classes": ds.num_classes,
            "normalized": ds.normalized,
            "class_counts": {str(int(l)): int(c) for l, c in zip(labels, counts)},
            "domain_counts": {str(int(d)): int(c) for d, c in zip(dom, dcounts)},
            "zero_shot_accuracy": zs,
        }
    )
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "partition": cmd_partition,
    "run": cmd_run,
    "theory": cmd_theory,
    "inspect": cmd_inspect,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except LatteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
