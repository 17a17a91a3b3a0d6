"""Command-line entry point: verify, toyset, decompose, train, sample, eval.

Exit codes: 0 success, 1 failed check, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import PRESETS, RunConfig, SampleConfig, load_config
from .denoiser import GraphBatch, init_params
from .evaluation import coverage_matching, summarize
from .graph import GraphError, read_jsonl, torsional_decompose, write_jsonl
from .process import ProcessConfig
from .sampler import sample_ddpm, sample_langevin, sample_subgdiff
from .schedule import ConfigError, ScheduleConfig, build_schedule
from .toyset import TEMPLATE_NAMES, generate_toyset
from .trainer import train_loop
from .verify import FAULTS, SUITES, run_verify

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_verify(args) -> int:
    try:
        report = run_verify(args.suite, fault=args.inject_fault, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_json(args.report, report)
    for s in report["suites"]:
        failed = [c["name"] for c in s["checks"] if not c["passed"]]
        status = "PASS" if s["passed"] else "FAIL"
        detail = f" failing: {', '.join(failed)}" if failed else ""
        print(f"{status} {s['name']} ({s['seconds']:.2f}s){detail}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_CHECK


def cmd_toyset(args) -> int:
    try:
        graphs = generate_toyset(args.num, args.seed, args.templates)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_jsonl(args.out, graphs)
    return EXIT_OK


def cmd_decompose(args) -> int:
    graphs = read_jsonl(args.data)
    lines = []
    for g in graphs:
        rec = torsional_decompose(g).to_record()
        if g.mol_id is not None:
            rec = {"id": g.mol_id, **rec}
        lines.append(json.dumps(rec))
    text = "\n".join(lines) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def _run_meta(run: RunConfig) -> dict:
    return {"schedule": asdict(run.schedule), "p": run.p, "k": run.k,
            "sample": asdict(run.sample), "delta": run.delta}


def cmd_train(args) -> int:
    run = load_config(args.config)
    overrides = {}
    if args.iters is not None:
        overrides["iters"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        tcfg = run.train_config(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    graphs = read_jsonl(args.data)
    if not graphs:
        raise UsageError("training data is empty")
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(run.denoiser_config(), rng)
    res = train_loop(graphs, tcfg, rng=rng, params=params, metrics_path=args.metrics)
    checkpoint.save(args.out, res.params, meta=_run_meta(run))
    last = res.metrics[-1] if res.metrics else None
    if last:
        print(f"iter {last['iter']}: loss {last['loss']:.4f} denoise {last['denoise']:.4f} "
              f"bce {last['bce']:.4f}", file=sys.stderr)
    return EXIT_OK


def _process_from_meta(meta: dict) -> ProcessConfig:
    try:
        sched = build_schedule(ScheduleConfig(**meta["schedule"]))
        return ProcessConfig(meta["p"], meta["k"], sched)
    except KeyError as exc:
        raise UsageError(f"checkpoint lacks process metadata {exc}; pass --config") from None


def _parse_num(text: str) -> tuple[str, int]:
    if text.endswith("x"):
        return "factor", int(text[:-1])
    return "count", int(text)


def cmd_sample(args) -> int:
    params, meta = checkpoint.load(args.ckpt)
    if args.config:
        run = load_config(args.config)
        proc, defaults = run.process(), run.sample
    else:
        proc, defaults = _process_from_meta(meta), SampleConfig(**meta.get("sample", {}))
    mask_mode = args.mask_mode or defaults.mask_mode
    h = defaults.langevin_h if args.langevin_h is None else args.langevin_h
    try:
        kind, n = _parse_num(args.num)
    except ValueError:
        raise UsageError(f"--num must be an integer or '<k>x', got {args.num!r}") from None
    if n < 1:
        raise UsageError("--num must be positive")
    graphs = read_jsonl(args.data)
    counts = [n * max(len(g.conformers), 1) if kind == "factor" else n for g in graphs]
    expanded = [g for g, c in zip(graphs, counts) for _ in range(c)]
    batch = GraphBatch(expanded)
    rng = np.random.default_rng(args.seed)
    if args.sampler == "subgdiff":
        r = sample_subgdiff(params, batch, proc, rng, mask_mode=mask_mode, threshold=args.threshold)
    elif args.sampler == "ddpm":
        r = sample_ddpm(params, batch, proc.schedule, rng)
    else:
        r = sample_langevin(params, batch, proc.schedule, h, rng)
    parts = batch.split(r)
    out, i = [], 0
    for g, c in zip(graphs, counts):
        rec = g.to_record()
        rec["conformers"] = [np.round(x, 6).tolist() for x in parts[i : i + c]]
        out.append(json.dumps(rec))
        i += c
    Path(args.out).write_text("\n".join(out) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.delta > 0:
        raise UsageError("--delta must be positive")
    gen = {g.mol_id: g for g in read_jsonl(args.gen)}
    ref = read_jsonl(args.ref)
    per_mol, missing = {}, []
    for g in ref:
        if g.mol_id not in gen or not gen[g.mol_id].conformers:
            missing.append(g.mol_id)
            continue
        refs = g.conformers or [g.coords]
        per_mol[g.mol_id] = coverage_matching(gen[g.mol_id].conformers, refs, args.delta)
    if not per_mol:
        raise UsageError("no molecule ids shared between --gen and --ref")
    report = {"delta": args.delta, "num_molecules": len(per_mol), "missing": missing,
              "summary": summarize(list(per_mol.values())), "per_molecule": per_mol}
    _write_json(args.out, report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subgdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="enable info logging")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the oracle suites and write a JSON report")
    v.add_argument("--suite", action="append", choices=list(SUITES),
                   help="run only this suite (repeatable; default: all)")
    v.add_argument("--inject-fault", choices=FAULTS, help="deliberately break one kernel")
    v.add_argument("--seed", type=int, default=0, help="seed for random test instances")
    v.add_argument("--report", default="-", help="report path ('-' for stdout)")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("toyset", help="generate the synthetic molecule corpus")
    t.add_argument("--num", type=int, default=64, help="number of molecules")
    t.add_argument("--seed", type=int, default=7, help="generator seed")
    t.add_argument("--templates", nargs="+", choices=TEMPLATE_NAMES, help="restrict templates")
    t.add_argument("--out", required=True, help="output JSONL path")
    t.set_defaults(func=cmd_toyset)

    d = sub.add_parser("decompose", help="print each molecule's subgraph (mask) space")
    d.add_argument("--data", required=True, help="input JSONL dataset")
    d.add_argument("--out", default="-", help="output JSONL path ('-' for stdout)")
    d.set_defaults(func=cmd_decompose)

    tr = sub.add_parser("train", help="train a denoiser")
    tr.add_argument("--config", default="fast", help=f"preset ({', '.join(PRESETS)}) or TOML path")
    tr.add_argument("--data", required=True, help="training JSONL dataset")
    tr.add_argument("--out", required=True, help="checkpoint output path")
    tr.add_argument("--iters", type=int, help="override the number of iterations")
    tr.add_argument("--seed", type=int, help="override the training seed")
    tr.add_argument("--metrics", help="CSV path for per-iteration losses")
    tr.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate conformers from a checkpoint")
    s.add_argument("--ckpt", required=True, help="checkpoint path")
    s.add_argument("--data", required=True, help="JSONL molecules to sample for")
    s.add_argument("--num", default="2x", help="samples per molecule: N or '<k>x' references")
    s.add_argument("--sampler", choices=("subgdiff", "ddpm", "langevin"), default="subgdiff")
    s.add_argument("--mask-mode", choices=("predict", "bernoulli", "subgraph", "ones"),
                   help="how predicted mask logits become binary masks")
    s.add_argument("--threshold", type=float, default=0.5, help="probability cut for predict mode")
    s.add_argument("--langevin-h", type=float, help="Langevin step scale h")
    s.add_argument("--config", help="override the process settings stored in the checkpoint")
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.add_argument("--out", required=True, help="output JSONL path")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="COV/MAT metrics of generated vs reference conformers")
    e.add_argument("--gen", required=True, help="generated JSONL (from sample)")
    e.add_argument("--ref", required=True, help="reference JSONL")
    e.add_argument("--delta", type=float, default=0.5, help="coverage threshold in angstrom")
    e.add_argument("--out", default="-", help="report JSON path ('-' for stdout)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, GraphError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
