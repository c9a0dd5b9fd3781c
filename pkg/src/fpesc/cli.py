"""Command-line entry point: ``fpesc {train,eval,oracle,recover,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import FpescError

STAMPS = tuple(round(0.3 * k, 10) for k in range(11))


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig.default()


def _path(cfg: RunConfig, dt: float, T: float = None):
    from .oracle import evolve_gaussian

    p = cfg["problem"]
    T = float(cfg["integrator"]["T"]) if T is None else T
    return evolve_gaussian(p["mu0"], p["sigma0"], p["mu_inf"], p["sigma_inf"], T, dt)


def _load_field(path):
    from .fields import load_checkpoint

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_train(args) -> int:
    from .training import train

    cfg = _config(args)
    tc = cfg.train_config()

    def progress(step, loss, se, gnorm, ms):
        if step == 1 or step % tc.log_every == 0 or step == tc.steps:
            print(f"step {step:5d}  R {loss:.6g} (se {se:.2g})  |grad| {gnorm:.3g}  {ms:.0f} ms", flush=True)

    _, tlog = train(cfg.field(), cfg.potential(), cfg.initial(), tc, progress=progress)
    print(f"done: log {tc.out_dir / 'train_log.csv'}, final checkpoint {tc.out_dir / 'final.json'}")
    return 0


def _find_train_log(checkpoint: Path):
    for d in (checkpoint.parent, checkpoint.parent.parent):
        if (d / "train_log.csv").is_file():
            return d / "train_log.csv"
    return None


def cmd_eval(args) -> int:
    from .evaluation import EvalGrid, evaluate
    from .plots import write_figure
    from .selfcons import IntegratorSpec
    from .training import TrainLog

    cfg = _config(args)
    field = _load_field(args.checkpoint)
    h = float(args.grid_h if args.grid_h is not None else cfg["eval"]["grid_h"])
    if h < 0.2 - 1e-12 and not args.full_grid:
        raise ValueError(f"h={h} means {int(round(20 / h)) + 1}^2 recoveries per stamp; pass --full-grid to confirm")
    grid = EvalGrid(h)
    dt = float(cfg["eval"]["dt"])
    spec = IntegratorSpec(dt, max(grid.stamps))
    path = _path(cfg, dt / 2.0, spec.T)
    report = evaluate(field, path, cfg.potential(), cfg.initial(), grid, spec, checkpoint=str(args.checkpoint))
    out = Path(args.out)
    report.write_json(out)
    report.write_csv(out.with_suffix(".csv"))
    log_path = _find_train_log(Path(args.checkpoint))
    steps, losses = [], []
    if log_path is not None:
        tlog = TrainLog.read_csv(log_path)
        steps, losses = tlog.steps, tlog.losses
    ts = [s["t"] for s in report.stamps]
    write_figure(
        out.with_suffix(".svg"),
        [
            dict(x=steps, y=losses, title="Objective Value", xlabel="step", ylabel="mean R", logy=True),
            dict(x=ts, y=[s["ls"] for s in report.stamps], title="Score Estimation Error", xlabel="t", ylabel="ls"),
            dict(x=ts, y=[s["ld"] for s in report.stamps], title="Density Estimation Error", xlabel="t", ylabel="ld"),
        ],
    )
    agg = report.aggregate
    print(f"ls {agg['ls']:.6g}  ld {agg['ld']:.6g}  -> {out}, {out.with_suffix('.csv')}, {out.with_suffix('.svg')}")
    return 0


def cmd_oracle(args) -> int:
    cfg = _config(args)
    path = _path(cfg, args.dt)
    times = STAMPS if args.t is None else (args.t,)
    d = path.dim
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["t"] + [f"mu{i + 1}" for i in range(d)] + [f"sigma{i + 1}{j + 1}" for i in range(d) for j in range(d)])
    for t in times:
        mu, S = path.mean(t), path.sigma(t)
        w.writerow([repr(float(t))] + [repr(float(v)) for v in mu] + [repr(float(v)) for v in S.ravel()])
    return 0


def cmd_recover(args) -> int:
    from .evaluation import recover_log_density
    from .selfcons import IntegratorSpec

    cfg = _config(args)
    field = _load_field(args.checkpoint)
    try:
        x = np.array([float(v) for v in args.x.split(",")])
    except ValueError as exc:
        raise ValueError(f"--x must be comma-separated numbers, got {args.x!r}") from exc
    dt = float(args.dt if args.dt is not None else cfg["eval"]["dt"])
    value = recover_log_density(field, cfg.initial(), args.t, x, IntegratorSpec(dt, args.t))
    print(repr(value))
    return 0


def cmd_gradcheck(args) -> int:
    from .adjoint import gradcheck

    cfg = _config(args)
    rows = gradcheck(cfg.potential(), cfg.initial(), seed=args.seed, n_fields=args.cases)
    print("case  loss          err(1e-4)  err(1e-5)  err(1e-6)  result")
    for r in rows:
        errs = "  ".join(f"{e:9.2e}" for e in r.errors)
        print(f"{r.case:4d}  {r.loss:12.6g}  {errs}  {'PASS' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in rows)
    print("gradcheck", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fpesc", description="Self-consistent velocity fields for Fokker-Planck dynamics.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a field from a JSON config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="grid metrics of a checkpoint against the analytic solution")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--grid-h", type=float, default=None)
    s.add_argument("--out", default="report.json")
    s.add_argument("--config")
    s.add_argument("--full-grid", action="store_true", help="allow h < 0.2 (e.g. the 201x201 grid at h=0.1)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("oracle", help="print the analytic Gaussian path as CSV")
    s.add_argument("--t", type=float, default=None)
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--config")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("recover", help="recovered log-density of a checkpoint at one point")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--x", required=True, help="comma-separated coordinates; write --x=-4,-4 when the first is negative")
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--config")
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("gradcheck", help="adjoint vs finite-difference gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cases", type=int, default=5)
    s.add_argument("--config")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FpescError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
