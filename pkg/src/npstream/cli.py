"""Command-line entry point: train, eval, stream, klgap, bench, datagen.

Exit codes: 0 success, 1 validation error (bad flags, files, configs),
2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tasks as tk
from .bench import BenchError, bench_scaling, fmt, write_bench_csv, write_fit_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import GapDataset, IIDGaussianRule, LastValueRule, NPRule, kl_gap, ll_report
from .models import FAMILIES, build_model, gaussian_logpdf
from .streaming import StreamSession
from .tensor import NonFiniteError
from .training import NumericalError, load_config, train


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Unknown flags and malformed arguments print usage and exit 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


# --- subcommands ----------------------------------------------------------------------


def cmd_train(args) -> int:
    tcfg, mcfg = load_config(args.config)
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.steps is not None:
        tcfg.steps = args.steps
    tcfg.validate()
    model = build_model(mcfg, tcfg.seed)
    res = train(model, tcfg, metrics_path=args.metrics)
    if args.out:
        save_checkpoint(model, args.out)
    last = res.records[-1].train_loss if res.records else float("nan")
    print(f"trained {mcfg.family} for {len(res.records)} steps; final loss {fmt(last)}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint, args.family)
    data = tk.read_tasks(args.tasks)
    if not data:
        raise ValueError("task file holds no tasks")
    rep = ll_report(model, data)
    with open(args.out, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["task_id", "n_context", "n_target", "mean_ll"])
        for i, (t, ll) in enumerate(zip(data, rep.per_task)):
            w.writerow([i, t.n_context, t.n_target, fmt(ll)])
    print(f"tasks={len(data)} mean_ll={fmt(rep.mean)} sem={fmt(rep.sem)}")
    return 0


def cmd_stream(args) -> int:
    model = load_checkpoint(args.checkpoint, args.family)
    data = tk.read_tasks(args.tasks)
    if not 0 <= args.task_index < len(data):
        raise ValueError(f"task index {args.task_index} out of range for {len(data)} tasks")
    task = data[args.task_index]
    if task.n_context < 1:
        raise ValueError("selected task has no context points to stream")
    session = StreamSession(model)
    n_t = task.n_target
    with open(args.out, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["step", "N_s", "ll_factorised", "ll_ar", "cond_ops", "query_ops", "wall_ms"])
        for i in range(task.n_context):
            tic = time.perf_counter()
            session.observe(task.X_c[:, i : i + 1], task.Y_c[:, i : i + 1])
            mean, var = session.predict(task.X_t).arrays()
            ll_f = float(gaussian_logpdf(task.Y_t, mean, var).mean())
            ll_ar = float("nan")
            if not args.no_ar:
                ll_ar = session.predict_ar_teacher_forced(task.X_t, task.Y_t) / n_t
            row = session.ledger.current
            wall = 1e3 * (time.perf_counter() - tic)
            w.writerow([i, session.n_s, fmt(ll_f), fmt(ll_ar), row.cond_ops, row.query_ops, fmt(wall)])
    led = session.ledger
    print(f"steps={len(led.rows)} cond_ops={led.total_cond_ops} query_ops={led.total_query_ops}")
    return 0


def _gap_rule(args):
    if args.checkpoint:
        return NPRule(load_checkpoint(args.checkpoint, args.family))
    if args.rule == "iid":
        return IIDGaussianRule()
    if args.rule == "lastvalue":
        return LastValueRule()
    raise UsageError("klgap needs --checkpoint or --rule")


def cmd_klgap(args) -> int:
    rule = _gap_rule(args)
    rng = np.random.default_rng(args.seed)

    def sampler(r: np.random.Generator) -> GapDataset:
        spec = tk.sample_kernel(args.kernel, r)
        x = r.uniform(*tk.X_RANGE, size=(args.fixed + args.targets, 1))
        y = tk.sample_gp_values(spec.gram(x), tk.SIGMA_OBS, r)[:, None]
        return GapDataset(x[args.fixed :], x[: args.fixed], y[: args.fixed])

    est = kl_gap(
        rule,
        sampler,
        args.datasets,
        n_perm_inner=args.perm_inner,
        n_perm_outer=args.perm_outer,
        n_mc=args.mc,
        rng=rng,
        workers=args.workers,
    )
    with open(args.out, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["dataset_id", "gap", "se"])
        for i, (g, s) in enumerate(est.per_dataset):
            w.writerow([i, fmt(g), fmt(s)])
    print(
        f"gap={fmt(est.gap)} se={fmt(est.se)} datasets={est.n_datasets} "
        f"perm_inner={est.n_perm_inner} perm_outer={est.n_perm_outer} mc={est.n_mc}"
    )
    return 0


def cmd_bench(args) -> int:
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    bad = [f for f in families if f not in FAMILIES]
    if bad or not families:
        raise UsageError(f"unknown families {bad}; choose from {', '.join(FAMILIES)}")
    res = bench_scaling(
        families,
        args.ns,
        repeats=args.repeats,
        n_t=args.n_t,
        seed=args.seed,
        d_model=args.d_model,
        heads=args.heads,
        layers=args.layers,
        dtype=args.dtype,
    )
    write_bench_csv(res, args.out)
    if args.fit_out:
        write_fit_csv(res, args.fit_out)
    for (fam, metric), f in res.fits.items():
        if metric != "wall_us":
            print(f"{fam} {metric} slope={f.slope:.4f} ci95=[{f.lo:.4f}, {f.hi:.4f}]")
    return 0


def cmd_datagen(args) -> int:
    out = []
    for k in range(args.tasks):
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, k]))
        if args.kernel == "tabular":
            spec = tk.TabularPriorSpec(d_x=args.d_x, max_features=args.d_x)
            out.append(tk.sample_tabular_task(spec, (args.n_c_min, args.n_c_max), args.n_t, rng))
        else:
            out.append(
                tk.sample_gp_task(args.kernel, (args.n_c_min, args.n_c_max), args.n_t, args.sigma_obs, 1, rng, d_x=args.d_x)
            )
    if args.format == "csv":
        tk.write_tasks_csv(args.out, out)
    else:
        tk.write_tasks(args.out, out)
    print(f"wrote {len(out)} tasks to {args.out}")
    return 0


# --- parser ------------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="npstream", description="Streaming neural process toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, help_: str):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=0 if name != "train" else None, help="random seed")
        return sp

    sp = add("train", "Meta-train a model from a key=value config file.")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="checkpoint path to write")
    sp.add_argument("--metrics", help="per-step metrics CSV path")
    sp.add_argument("--steps", type=int, help="override the number of optimiser steps")
    sp.set_defaults(func=cmd_train)

    sp = add("eval", "Per-task mean log-likelihood of a checkpoint on a task file.")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tasks", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--family", choices=FAMILIES, help="require this model family")
    sp.set_defaults(func=cmd_eval)

    sp = add("stream", "Replay one task's context point by point and log per-step costs.")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--tasks", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--task-index", type=int, default=0)
    sp.add_argument("--family", choices=FAMILIES)
    sp.add_argument("--no-ar", action="store_true", help="skip the teacher-forced AR column")
    sp.set_defaults(func=cmd_stream)

    sp = add("klgap", "Estimate the KL gap to the permutation-averaged rule.")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--rule", choices=("iid", "lastvalue"))
    sp.add_argument("--family", choices=FAMILIES)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kernel", default="rbf", choices=tk.KERNEL_FAMILIES + ("mixed",))
    sp.add_argument("--datasets", type=int, default=200)
    sp.add_argument("--fixed", type=int, default=2)
    sp.add_argument("--targets", type=int, default=4)
    sp.add_argument("--perm-inner", type=int, default=256)
    sp.add_argument("--perm-outer", type=int, default=128)
    sp.add_argument("--mc", type=int, default=32)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_klgap)

    sp = add("bench", "Attention-op scaling benchmark over a grid of stream lengths.")
    sp.add_argument("--families", default="inctnp,tnpd")
    sp.add_argument("--ns", type=_int_list, default=[128, 256, 512, 1024, 2048, 4096])
    sp.add_argument("--out", required=True)
    sp.add_argument("--fit-out", help="slope-fit CSV path")
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--n-t", type=int, default=16)
    sp.add_argument("--d-model", type=int, default=128)
    sp.add_argument("--heads", type=int, default=8)
    sp.add_argument("--layers", type=int, default=5)
    sp.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    sp.set_defaults(func=cmd_bench)

    sp = add("datagen", "Write synthetic tasks to a binary or CSV task file.")
    sp.add_argument("--kernel", default="rbf", choices=tk.KERNEL_FAMILIES + ("mixed", "tabular"))
    sp.add_argument("--tasks", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=("bin", "csv"), default="bin")
    sp.add_argument("--n-c-min", type=int, default=1)
    sp.add_argument("--n-c-max", type=int, default=64)
    sp.add_argument("--n-t", type=int, default=128)
    sp.add_argument("--d-x", type=int, default=1)
    sp.add_argument("--sigma-obs", type=float, default=tk.SIGMA_OBS)
    sp.set_defaults(func=cmd_datagen)
    return p


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, BenchError, ValueError, OSError, MemoryError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
