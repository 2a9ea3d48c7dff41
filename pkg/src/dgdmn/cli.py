"""Command-line entry point: ``dgdmn run | resume | suggest | grid | resilience``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime or training error.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ck
from .config import ALGORITHMS, ConfigError, ExperimentConfig
from .dual_memory import suggest_hyperparams
from .experiment import (
    MNIST_ENV,
    execute,
    joint_curve,
    load_run_checkpoint,
    load_suite,
    new_run,
    resolve_config,
    run_resilience,
    suite_ref,
    write_outputs,
)
from .harness import RunAborted

log = logging.getLogger("dgdmn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _widths(text: str) -> tuple:
    try:
        return tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated widths, got {text!r}")


def _gamma(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}")


# flag -> (config field, type)
_OVERRIDES = {
    "suite": str, "algo": str, "seed": int, "n_max": int, "kappa": float, "n_stm": int,
    "gamma_sttm": _gamma, "gamma_ltm": _gamma, "learner_epochs": int, "generator_epochs": int,
    "joint_epochs": int, "batch_size": int, "learner_hidden": _widths, "gen_hidden": _widths,
    "latent_dim": int, "train_count": int, "test_count": int, "ewc_lambda": float,
    "ppr_multiplier": int, "dropout_rate": float, "mnist_dir": str,
}


def _add_config_flags(p: argparse.ArgumentParser, with_suite_algo=True) -> None:
    p.add_argument("--config", help="YAML file of configuration fields; flags override it")
    for name, typ in _OVERRIDES.items():
        if not with_suite_algo and name in ("suite", "algo", "seed"):
            continue
        flag = "--" + name.replace("_", "-")
        kw = {"type": typ, "default": None, "dest": name}
        if name == "algo":
            kw["help"] = " | ".join(ALGORITHMS)
        if name == "mnist_dir":
            kw["help"] = f"directory of MNIST IDX files (default: ${MNIST_ENV}, else synthetic glyphs)"
        p.add_argument(flag, **kw)
    p.add_argument("--gamma", type=_gamma, default=None,
                   help="recognition threshold for both memories of dgdmn-recog, or 'auto'")
    p.add_argument("--cold-start", action="store_true", help="reinitialise models at every consolidation")


def _config_from_args(args) -> ExperimentConfig:
    base = ExperimentConfig.from_yaml(args.config) if args.config else ExperimentConfig()
    updates = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
    if args.gamma is not None:
        updates.setdefault("gamma_sttm", args.gamma)
        updates.setdefault("gamma_ltm", args.gamma)
    if args.cold_start:
        updates["warm_start"] = False
    if getattr(args, "joint", False):
        updates["joint"] = True
    if getattr(args, "output", None):
        updates["output"] = args.output
    cfg = replace(base, **updates)
    cfg.validate()
    return cfg


def _default_output(cfg: ExperimentConfig) -> str:
    return str(Path("runs") / f"{Path(cfg.suite).stem}-{cfg.algo}-seed{cfg.seed}")


def run_config(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output or _default_output(cfg))
    run = new_run(cfg)
    log.info("run %s on %s (%d tasks), seed %d -> %s", run.config.algo, run.suite.name, len(run.suite),
             run.config.seed, out)
    execute(run, out_dir=out)
    joint = joint_curve(run.config, run.suite) if run.config.joint else None
    write_outputs(run, out, joint)
    log.info("ACC %.4f; wrote %s", run.record.metrics["ACC"], out)
    return EXIT_OK


def cmd_run(args) -> int:
    return run_config(_config_from_args(args))


def cmd_resume(args) -> int:
    extra = []
    run, done = load_run_checkpoint(args.checkpoint)
    if args.suite:
        ref = suite_ref(run.config, args.suite)
        load_suite(ref)  # validate before touching anything
        run, done = load_run_checkpoint(args.checkpoint, [ref])
        extra = [ref]
    out = Path(args.output)
    log.info("resuming %s at task %d of %d (%d appended segment(s))", run.config.algo, done + 1, len(run.suite),
             len(extra))
    if done < len(run.suite):
        execute(run, start=done, out_dir=out)
    write_outputs(run, out)
    return EXIT_OK


def cmd_suggest(args) -> int:
    if args.K < 1:
        raise ConfigError("K", f"must be >= 1, got {args.K}")
    kappa, n_stm = suggest_hyperparams(args.K)
    print(f"kappa={kappa:g} n_stm={n_stm}")
    return EXIT_OK


def _grid_cell(cfg: ExperimentConfig) -> tuple[str, int, str]:
    try:
        return cfg.output, run_config(cfg), ""
    except ConfigError as exc:
        return cfg.output, EXIT_CONFIG, str(exc)
    except Exception as exc:  # one failed cell must not sink the grid
        return cfg.output, EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"


def cmd_grid(args) -> int:
    base = _config_from_args(args)
    cells = []
    for suite in args.suites.split(","):
        for algo in args.algos.split(","):
            for seed in (int(s) for s in args.seeds.split(",")):
                out = Path(args.output) / Path(suite).stem / algo / f"seed{seed}"
                cfg = replace(base, suite=suite, algo=algo, seed=seed, output=str(out))
                if algo != "dgdmn-recog":
                    cfg = replace(cfg, gamma_sttm=None, gamma_ltm=None)
                cfg.validate()
                cells.append(cfg)
    worst = EXIT_OK
    with cf.ProcessPoolExecutor(max_workers=args.workers) as pool:
        for out, code, msg in pool.map(_grid_cell, cells):
            print(f"{'ok' if code == 0 else 'FAILED'} {out} {msg}".rstrip())
            worst = max(worst, code)
    return worst


def cmd_resilience(args) -> int:
    cfg = _config_from_args(args)
    cfg = replace(cfg, algo="dgr", gamma_sttm=None, gamma_ltm=None)
    suite = load_suite(suite_ref(cfg))
    cfg = resolve_config(cfg, suite)
    out = Path(args.output or Path("runs") / f"{Path(cfg.suite).stem}-resilience-seed{cfg.seed}")
    table = run_resilience(cfg, suite, out)
    for name, rows in table.items():
        for mode, level, acc in rows:
            print(f"{name} {mode} {level:g} {float(acc):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgdmn", description="Continual learning with generative replay and "
                                                         "a dual short-term / long-term memory.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train sequentially on a task suite and write results")
    _add_config_flags(r)
    r.add_argument("--joint", action="store_true", help="also compute the pooled-training reference curve")
    r.add_argument("--output", help="output directory (default runs/<suite>-<algo>-seed<seed>)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("resume", help="continue a run from its checkpoint, optionally with more tasks")
    s.add_argument("checkpoint")
    s.add_argument("--suite", help="builtin name or suite file whose tasks are appended to the stream")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_resume)

    g = sub.add_parser("suggest", help="print kappa and n_stm for K tasks per consolidation window")
    g.add_argument("K", type=int)
    g.set_defaults(func=cmd_suggest)

    d = sub.add_parser("grid", help="run every suite x algorithm x seed cell in parallel processes")
    _add_config_flags(d, with_suite_algo=False)
    d.add_argument("--suites", required=True)
    d.add_argument("--algos", required=True)
    d.add_argument("--seeds", default="0")
    d.add_argument("--workers", type=int, default=2)
    d.add_argument("--joint", action="store_true")
    d.add_argument("--output", required=True)
    d.set_defaults(func=cmd_grid)

    c = sub.add_parser("resilience", help="noise and occlusion sweep of jointly trained models")
    _add_config_flags(c)
    c.add_argument("--output")
    c.set_defaults(func=cmd_resilience)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ck.CheckpointError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunAborted as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
