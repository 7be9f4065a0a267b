"""Command-line entry point.

Exit codes: 0 on success, 1 when a command fails at runtime, 2 for usage
errors (unknown flags, bad values, unreadable or invalid config files).

Run configs are JSON objects with the keys of :class:`RunConfig`::

    {"task": {"kind": "mqar", "seq_len": 64, "num_pairs": 8, "vocab_size": 128},
     "model": {"vocab_size": 128, "t_max": 128, "lambda_mode": "mlp_softplus"},
     "optim": {"lr": 0.001}, "steps": 2000, "seeds": [0, 1, 2]}

Unknown keys anywhere in the file are rejected. Output goes to ``--out-dir``,
else ``$LLLAB_OUT_DIR``, else ``./runs``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .lam import MODES
from .model import OVERHEAD_BOUND, build, grad_check_model, lambda_overhead, load_checkpoint, parameter_counts
from .presets import MODEL_PRESETS, RUN_PRESETS
from .tasks import EVAL_STREAM, SelectiveCopyConfig, dump_dataset, format_percent, generate
from .train import RunConfig, dumps, evaluate_detail, sweep, sweep_csv, train
from .viz import VIEWS, HeatmapSpec, averaged_profile, export_lambda_csv, render_heatmap, seed_comparison

OUT_DIR_ENV = "LLLAB_OUT_DIR"


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs")


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def _run_config(args) -> RunConfig:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        run = load_run_config(args.config)
    else:
        run = RUN_PRESETS[args.preset or "tiny"]
    if getattr(args, "mode", None):
        run = run.for_mode(args.mode)
    if getattr(args, "steps", None):
        run = replace(run, steps=args.steps)
    return run


def _seeds(args, run: RunConfig) -> list[int]:
    if getattr(args, "seeds", None):
        return list(args.seeds)
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return list(run.seeds)


# ------------------------------------------------------------ subcommands


def cmd_train(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    for seed in _seeds(args, run):
        res = train(run, seed, out_dir=out)
        status = f"collapsed at step {res.collapse_step}" if res.collapsed else "ok"
        print(f"seed {seed}: accuracy {format_percent(res.final_accuracy)}% ({status})")
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    run = _run_config(args)
    modes = args.modes or list(MODES)
    rows = sweep(run, _seeds(args, run), modes, workers=args.workers)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    text = sweep_csv(rows)
    (out / "sweep.csv").write_text(text)
    (out / "sweep_config.json").write_text(dumps({"run": run.to_dict(), "modes": modes}) + "\n")
    sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    if "run" not in extra:
        raise ValueError(f"{args.checkpoint} carries no run config; it was not written by `train`")
    run = RunConfig.from_dict(extra["run"])
    task = run.task.with_seq_len(args.seq_len) if args.seq_len else run.task
    res = evaluate_detail(model, task, run.eval_seed, args.eval_batches or run.eval_batches, run.eval_batch_size)
    print(f"seq_len {task.seq_len}: accuracy {format_percent(res['accuracy'])}% loss {res['loss']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = MODEL_PRESETS[args.preset]
    modes = [args.mode] if args.mode else list(MODES)
    worst = 0.0
    ok = True
    for mode in modes:
        rep = grad_check_model(replace(cfg, lambda_mode=mode, seed=args.seed or 0), seed=args.seed or 0)
        print(f"{mode}: {rep}")
        worst = max(worst, rep.max_error)
        ok &= rep.passed
    print(f"max rel err {worst:.3e}")
    return 0 if ok else 1


def cmd_param_audit(args) -> int:
    cfg = MODEL_PRESETS[args.preset]
    if args.d_h:
        cfg = replace(cfg, d_h=args.d_h)
    if cfg.lambda_mode == "baseline":
        cfg = replace(cfg, lambda_mode="mlp_softplus")
    counts = parameter_counts(cfg)
    frac = lambda_overhead(cfg)
    print(f"total parameters {counts['total']}")
    print(f"lambda-MLP parameters {counts['lambda_mlp']}")
    print(f"overhead {frac.numerator}/{frac.denominator} = {float(frac):.4e} ({100 * float(frac):.5f}%)")
    if cfg.d_h == 2 * cfg.n_levels:
        ok = frac < OVERHEAD_BOUND
        print(f"bound {float(OVERHEAD_BOUND):g} at d_h = 2L = {cfg.d_h}: {'PASS' if ok else 'FAIL'}")
        return 0 if ok else 1
    print(f"d_h = {cfg.d_h} != 2L = {2 * cfg.n_levels}; bound not asserted")
    return 0


def _viz_sources(args):
    """(run, [(seed, model)]) from checkpoints or from an initialized preset/config."""
    if args.checkpoint:
        if args.config or args.preset or args.mode:
            raise UsageError("--checkpoint cannot be combined with --config, --preset or --mode")
        models, run = [], None
        for path in args.checkpoint:
            model, extra = load_checkpoint(path)
            if "run" in extra and run is None:
                run = RunConfig.from_dict(extra["run"])
            models.append((extra.get("seed", model.cfg.seed), model))
        if run is None:
            raise ValueError("no checkpoint carries a run config to draw the input batch from")
        return run, models
    run = _run_config(args)
    return run, [(s, build(replace(run.model, seed=s))) for s in _seeds(args, run)]


def cmd_viz_lambda(args) -> int:
    run, models = _viz_sources(args)
    task = run.task.with_seq_len(args.seq_len) if args.seq_len else run.task
    batch = generate(task, run.eval_seed, max(args.sample + 1, args.batch_size), stream=EVAL_STREAM)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    head = "avg" if args.head == "avg" else int(args.head)
    if args.view == "seed_comparison":
        path = out / "lambda_seeds.csv"
        seed_comparison(models, batch.inputs, path)
        print(f"wrote {path}")
        return 0
    if len(models) != 1:
        raise UsageError(f"view {args.view} takes a single checkpoint or seed")
    seed, model = models[0]
    spec = HeatmapSpec(layer=args.layer, head=head, view=args.view, sample=args.sample)
    spec.validate(model)
    if args.view == "averaged":
        prof = averaged_profile(model, batch.inputs)
        path = out / f"lambda_avg_seed{seed}.csv"
        with open(path, "w") as fh:
            fh.write("layer,head,level,lambda\n")
            for (layer, h, lvl), v in np.ndenumerate(prof):
                fh.write(f"{layer},{h},{lvl},{float(v)!r}\n")
        print(f"wrote {path}")
        return 0
    stem = f"lambda_seed{seed}_layer{spec.layer}_head{spec.head}"
    rows = export_lambda_csv(model, batch.inputs, spec, out / f"{stem}.csv")
    boundary = task.seq_len - task.num_targets if isinstance(task, SelectiveCopyConfig) else None
    lo, hi = render_heatmap(rows, out / f"{stem}.ppm", boundary=boundary, cell=args.cell)
    print(f"wrote {out / stem}.csv and .ppm (lambda range {lo:.6g} .. {hi:.6g})")
    return 0


def cmd_gen_data(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    stream = EVAL_STREAM if args.split == "eval" else 0
    for seed in _seeds(args, run):
        path = out / f"{run.task.kind}_{args.split}_seed{seed}.jsonl"
        dump_dataset(run.task, seed, args.count, path, stream=stream)
        print(f"wrote {path}")
    return 0


# ------------------------------------------------------------ parser


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loglinear-lab", description="Log-linear attention experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def run_args(sp, multi_seed=False):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--preset", choices=sorted(RUN_PRESETS), help="named run config (default tiny)")
        sp.add_argument("--seed", type=int, help="single seed override")
        if multi_seed:
            sp.add_argument("--seeds", type=int, nargs="+", help="seed list override")
        sp.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or ./runs)")

    sp = sub.add_parser("train", help="train one or more seeds")
    run_args(sp, multi_seed=True)
    sp.add_argument("--mode", choices=MODES, help="override the λ mode")
    sp.add_argument("--steps", type=_positive)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="train every mode x seed cell and summarize")
    run_args(sp, multi_seed=True)
    sp.add_argument("--modes", nargs="+", choices=MODES)
    sp.add_argument("--steps", type=_positive)
    sp.add_argument("--workers", type=_positive, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="evaluate a checkpoint, optionally at another length")
    sp.add_argument("checkpoint")
    sp.add_argument("--seq-len", type=_positive)
    sp.add_argument("--eval-batches", type=_positive)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of a model preset")
    sp.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="tiny")
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("param-audit", help="exact λ-MLP parameter overhead")
    sp.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="lm512")
    sp.add_argument("--d-h", type=_positive, help="λ-MLP hidden width override")
    sp.set_defaults(func=cmd_param_audit)

    sp = sub.add_parser("viz-lambda", help="export λ as CSV and PPM heatmaps")
    run_args(sp, multi_seed=True)
    sp.add_argument("--checkpoint", nargs="+", help="checkpoint file(s); otherwise the model at init")
    sp.add_argument("--mode", choices=MODES, help="override the λ mode of the model at init")
    sp.add_argument("--view", choices=VIEWS, default="token_level")
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--head", default="avg", help="head index or 'avg'")
    sp.add_argument("--sample", type=int, default=0)
    sp.add_argument("--batch-size", type=_positive, default=8)
    sp.add_argument("--seq-len", type=_positive)
    sp.add_argument("--cell", type=_positive, default=4, help="pixels per heatmap cell")
    sp.set_defaults(func=cmd_viz_lambda)

    sp = sub.add_parser("gen-data", help="dump generated sequences as JSON lines")
    run_args(sp, multi_seed=True)
    sp.add_argument("--count", type=_positive, default=16)
    sp.add_argument("--split", choices=("train", "eval"), default="train")
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if getattr(args, "head", "avg") != "avg" and not str(args.head).isdigit():
        print(f"loglinear-lab: error: --head must be an integer or 'avg', got {args.head!r}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"loglinear-lab: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"loglinear-lab: {args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
