"""Command-line entry point: generate, evaluate, ablate, correlate, verify.

Every subcommand prints exactly one JSON result line to stdout; all
human-oriented text goes to stderr. Exit codes: 0 success, 1 failed
invariant or acceptance check, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import harness
from .invariants import SCOPES, run_invariant_suite


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, separators=(",", ":")))


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdm-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides config and MDM_LAB_SEED")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        p.add_argument("--steps", type=int, help="denoising step count S")
        p.add_argument("--particles", type=int, help="particle count M")
        p.add_argument("--resample-interval", type=int, dest="resample_interval")
        p.add_argument("--lambda", type=float, dest="lambda_weight", help="resampling temperature")
        p.add_argument("--strategy", help="decoding strategy kind")
        p.add_argument("--backend", help="denoiser backend kind (oracle|perturbed|remote)")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, e.g. --set search.lambda_weight=10",
        )

    add_common(sub.add_parser("generate", help="decode paths per config and write JSONL"))
    ev = sub.add_parser("evaluate", help="re-score an existing paths JSONL")
    ev.add_argument("paths", help="paths.jsonl produced by generate")
    add_common(ev)
    add_common(sub.add_parser("ablate", help="vanilla / e_bon / e_smc sweep with paired seeds"))
    add_common(sub.add_parser("correlate", help="entropy vs log-perplexity study"))
    ver = sub.add_parser("verify", help="run invariant suites")
    ver.add_argument("--scope", default="all", choices=list(SCOPES) + ["all"])
    add_common(ver)
    return parser


def _load_config(args) -> harness.ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = harness.ExperimentConfig.from_json(path)
    else:
        cfg = harness.default_config()

    overrides: dict[str, object] = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.particles is not None:
        overrides["search.n_particles"] = args.particles
    if args.resample_interval is not None:
        overrides["search.resample_interval"] = args.resample_interval
    if args.lambda_weight is not None:
        overrides["search.lambda_weight"] = args.lambda_weight
    if args.strategy is not None:
        overrides["strategy.kind"] = args.strategy
    if args.backend is not None:
        overrides["backend.kind"] = args.backend
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.jobs is not None:
        overrides["jobs"] = args.jobs

    seed = args.seed
    if seed is None and "MDM_LAB_SEED" in os.environ:
        seed = int(os.environ["MDM_LAB_SEED"])
    if seed is not None:
        overrides["seed"] = seed

    for pair in args.set:
        if "=" not in pair:
            raise ValueError(f"override must look like key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        overrides[key] = _parse_override_value(raw)
    return cfg.with_overrides(overrides)


def _cmd_generate(args) -> int:
    cfg = _load_config(args)
    data = harness.build_data_model(cfg)
    backend = harness.build_backend(cfg, data)
    _log(f"generating {cfg.replicates} paths with method={cfg.method} S={cfg.steps}")
    records = []
    for r in range(cfg.replicates):
        rec = harness.generate_one(cfg.method, cfg, backend, r)
        harness._score_record(rec, data)
        records.append(rec)
    path = harness.persist(records, cfg.out_dir)
    mean_h = sum(r.path_entropy for r in records) / len(records)
    mean_nll = sum(r.nll_eval for r in records) / len(records)
    _emit(
        {
            "command": "generate",
            "method": cfg.method,
            "paths": len(records),
            "file": str(path),
            "mean_hde": mean_h,
            "mean_lnppl": mean_nll,
            "seed": cfg.seed,
        }
    )
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    docs = harness.rescore_paths(args.paths, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / "rescored.jsonl"
    with open(dest, "w") as f:
        for doc in docs:
            f.write(json.dumps(doc, separators=(",", ":")) + "\n")
    finite = [d["ln_ppl"] for d in docs if d["ln_ppl"] is not None]
    _emit(
        {
            "command": "evaluate",
            "paths": len(docs),
            "file": str(dest),
            "mean_lnppl": sum(finite) / len(finite) if finite else None,
            "zero_probability": sum(1 for d in docs if d.get("zero_probability")),
        }
    )
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if not cfg.sweep:
        # one-factor default: particle count at the default resampling interval
        cfg = cfg.with_overrides({"sweep": {"particles": [2, 4, 8]}})
    _log(f"ablation over sweep {cfg.sweep}")
    summary = harness.run_ablation(cfg)
    path = harness.persist(summary, cfg.out_dir)
    _emit(
        {
            "command": "ablate",
            "groups": len(summary.groups),
            "rows": len(summary.rows),
            "file": str(path),
            "seed": cfg.seed,
        }
    )
    return 0


def _cmd_correlate(args) -> int:
    cfg = _load_config(args)
    summary = harness.run_correlation_study(cfg)
    path = harness.persist(summary, cfg.out_dir)
    doc = {
        "command": "correlate",
        "groups": len(summary.groups),
        "pooled_pearson": summary.pooled_pearson,
        "file": str(path),
        "seed": cfg.seed,
    }
    if summary.note:
        doc["note"] = summary.note
    _emit(doc)
    return 0


def _cmd_verify(args) -> int:
    cfg = _load_config(args)
    reports = run_invariant_suite(args.scope, seed=cfg.seed)
    ok = all(r.passed for r in reports)
    for r in reports:
        _log(f"suite {r.scope}: {'pass' if r.passed else 'FAIL'} ({r.elapsed_s:.2f}s)")
    _emit(
        {
            "command": "verify",
            "scope": args.scope,
            "passed": ok,
            "suites": [r.to_dict() for r in reports],
        }
    )
    return 0 if ok else 1


_COMMANDS = {
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "correlate": _cmd_correlate,
    "verify": _cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already wrote the usage message to stderr
        return 2 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError) as exc:
        _log(f"error: {exc}")
        return 2
    except OSError as exc:
        _log(f"i/o error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
