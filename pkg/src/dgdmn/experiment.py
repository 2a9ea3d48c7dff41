"""End-to-end runs: build the suite, the algorithm and its random streams, drive
the harness, and persist results and checkpoints."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .algorithms import make_algorithm
from .config import ConfigError, ExperimentConfig
from .data import TaskSuite
from .harness import (
    AccuracyMatrix,
    RunRecord,
    calibrate_gamma,
    plain_pipeline,
    reconstruct_pipeline,
    resilience_sweep,
    run_joint,
    run_sequential,
    svg_line_plot,
    write_resilience_csv,
    write_run_outputs,
)
from .learner import init_learner, learner_train
from .numerics import Streams
from .replay import MemoryArch, TrainSettings, dgr_update, f32, new_dgm
from .suites import BUILTIN, builtin_suite, load_suite_file

MNIST_ENV = "DGDMN_MNIST_DIR"


def suite_ref(config: ExperimentConfig, suite: str | None = None) -> dict:
    train, test = config.sample_counts()
    return {"suite": suite or config.suite, "seed": config.seed, "train_count": train, "test_count": test,
            "mnist_dir": config.mnist_dir or os.environ.get(MNIST_ENV) or None}


def load_suite(ref: dict) -> TaskSuite:
    name = ref["suite"]
    if name in BUILTIN:
        return builtin_suite(name, ref["seed"], ref["train_count"], ref["test_count"], ref["mnist_dir"])
    if not Path(name).is_file():
        raise ConfigError("suite", f"suite file {name!r} does not exist")
    return load_suite_file(name, ref["seed"], ref["mnist_dir"])


def concat_suites(suites: list) -> TaskSuite:
    first = suites[0]
    return TaskSuite("+".join(s.name for s in suites), [sp for s in suites for sp in s.specs],
                     [b for s in suites for b in s.train], [b for s in suites for b in s.test],
                     first.num_classes, dict(first.meta))


def resolve_config(config: ExperimentConfig, suite: TaskSuite) -> ExperimentConfig:
    """Fill defaults, calibrate ``auto`` recognition thresholds, round scalars to float32."""
    cfg = config.resolve([len(b) for b in suite.train])
    if cfg.algo == "dgdmn-recog" and "auto" in (cfg.gamma_sttm, cfg.gamma_ltm):
        arch = MemoryArch(suite.input_dim, suite.num_classes, tuple(cfg.gen_hidden), cfg.latent_dim,
                          tuple(cfg.learner_hidden))
        settings = TrainSettings(cfg.batch_size, cfg.learner_epochs, cfg.generator_epochs, cfg.warm_start)
        try:
            g_sttm, g_ltm = calibrate_gamma(suite, arch, cfg.n_max, cfg.kappa, cfg.seed, settings)
        except ValueError as exc:
            raise ConfigError("gamma_sttm", str(exc)) from exc
        if cfg.gamma_sttm == "auto":
            cfg.gamma_sttm = g_sttm
        if cfg.gamma_ltm == "auto":
            cfg.gamma_ltm = g_ltm
    for k in ("kappa", "gamma_sttm", "gamma_ltm", "ewc_lambda", "dropout_rate"):
        v = getattr(cfg, k)
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            setattr(cfg, k, f32(v))
    return cfg


@dataclass
class Run:
    config: ExperimentConfig
    suite: TaskSuite
    segments: list
    algorithm: object
    matrix: AccuracyMatrix
    record: RunRecord


def new_run(config: ExperimentConfig) -> Run:
    ref = suite_ref(config)
    suite = load_suite(ref)
    cfg = resolve_config(config, suite)
    algorithm = make_algorithm(cfg, suite.input_dim, suite.num_classes, Streams(cfg.seed))
    record = RunRecord(cfg.to_dict(), cfg.hash(), cfg.seed, cfg.algo)
    return Run(cfg, suite, [ref], algorithm, AccuracyMatrix(len(suite)), record)


def execute(run: Run, start: int = 0, out_dir=None) -> Run:
    """Drive the run from task ``start``; on failure the partial matrix is written out."""
    from .harness import RunAborted

    try:
        run_sequential(run.algorithm, run.suite, run.record, run.matrix, start)
    except RunAborted as exc:
        if out_dir is not None:
            write_run_outputs(out_dir, exc.matrix, exc.record, names=[s.name for s in run.suite.specs])
        raise
    return run


def checkpoint_sections(run: Run) -> dict:
    cfg = run.config.to_dict()
    cfg.pop("output")
    return {
        "config": json.dumps(cfg, sort_keys=True),
        "algorithm": {"name": run.algorithm.name, "state": run.algorithm.state_tree()},
        "streams": ck.streams_to_tree(run.algorithm.streams.state()),
        "progress": {"segments": list(run.segments), "matrix": run.matrix.to_tree(),
                     "tasks": list(run.record.tasks), "terminal_sleep": run.record.terminal_sleep},
    }


def save_run_checkpoint(run: Run, path) -> None:
    ck.save(path, checkpoint_sections(run))


def load_run_checkpoint(path, extra_segments=()) -> tuple[Run, int]:
    """Rebuild a run from a checkpoint, optionally appending more task segments.

    Returns the run and the index of the first task still to train.
    """
    sections = ck.load(path)
    for name in ("config", "algorithm", "streams", "progress"):
        if name not in sections:
            raise ck.CheckpointError(f"checkpoint lacks the {name!r} section")
    cfg = ExperimentConfig.from_dict(json.loads(sections["config"]))
    progress = sections["progress"]
    segments = list(progress["segments"]) + list(extra_segments)
    suite = concat_suites([load_suite(ref) for ref in segments])
    streams = Streams(cfg.seed)
    algorithm = make_algorithm(cfg, suite.input_dim, suite.num_classes, streams)
    if algorithm.name != sections["algorithm"]["name"]:
        raise ck.CheckpointError(f"checkpoint holds a {sections['algorithm']['name']!r} run, config says {cfg.algo!r}")
    algorithm.load_state_tree(sections["algorithm"]["state"])
    streams.set_state(ck.streams_from_tree(sections["streams"]))
    matrix = AccuracyMatrix.from_tree(progress["matrix"])
    done = matrix.rows_done
    if len(suite) > matrix.T:
        matrix = matrix.extended(len(suite) - matrix.T)
    record = RunRecord(cfg.to_dict(), cfg.hash(), cfg.seed, cfg.algo, tasks=list(progress["tasks"]),
                       terminal_sleep=progress["terminal_sleep"])
    if done == matrix.T:
        from .harness import summary_metrics

        record.metrics = summary_metrics(matrix)
        record.generator_sample_epochs = int(algorithm.generator_sample_epochs)
    return Run(cfg, suite, segments, algorithm, matrix, record), done


def write_outputs(run: Run, out_dir, joint=None) -> None:
    out = Path(out_dir)
    write_run_outputs(out, run.matrix, run.record, joint=joint, names=[s.name for s in run.suite.specs])
    save_run_checkpoint(run, out / "checkpoint.dgdm")


def joint_curve(cfg: ExperimentConfig, suite: TaskSuite) -> list:
    """Pooled-training reference with a plain net trained ``joint_epochs`` per point."""
    jcfg = replace(cfg, algo="nn", learner_epochs=cfg.joint_epochs, gamma_sttm=None, gamma_ltm=None)
    return run_joint(lambda: make_algorithm(jcfg, suite.input_dim, suite.num_classes, Streams(cfg.seed)), suite)


# --- corruption resilience ----------------------------------------------------


def train_resilience_models(cfg: ExperimentConfig, suite: TaskSuite):
    """A long-term memory and a plain net, both trained jointly on every task's clean data."""
    x = np.concatenate([b.inputs for b in suite.train])
    y = np.concatenate([b.labels for b in suite.train])
    streams = Streams(cfg.seed).child("resilience")
    arch = MemoryArch(suite.input_dim, suite.num_classes, tuple(cfg.gen_hidden), cfg.latent_dim,
                      tuple(cfg.learner_hidden))
    ltm = new_dgm(arch, max(cfg.n_max, len(x)), cfg.kappa, streams.get("init"))
    settings = TrainSettings(cfg.batch_size, cfg.joint_epochs, cfg.generator_epochs, cfg.warm_start)
    ltm = dgr_update(ltm, x, y, {s.name: 1 for s in suite.specs}, streams.child("ltm"), settings)
    nn = init_learner(suite.input_dim, cfg.learner_hidden, suite.num_classes, streams.get("nn-init"))
    nn = learner_train(nn, x, y, cfg.joint_epochs, streams.get("nn-shuffle"), batch_size=cfg.batch_size)
    return ltm, nn


def run_resilience(cfg: ExperimentConfig, suite: TaskSuite, out_dir=None, sigmas=None, factors=None) -> dict:
    ltm, nn = train_resilience_models(cfg, suite)
    x = np.concatenate([b.inputs for b in suite.test])
    y = np.concatenate([b.labels for b in suite.test])
    kw = {}
    if sigmas is not None:
        kw["sigmas"] = sigmas
    if factors is not None:
        kw["factors"] = factors
    table = resilience_sweep({"ltm": reconstruct_pipeline(ltm), "nn": plain_pipeline(nn)}, x, y, seed=cfg.seed, **kw)
    if out_dir is not None:
        out = Path(out_dir)
        for name, rows in table.items():
            (out / name).mkdir(parents=True, exist_ok=True)
            write_resilience_csv(out / name / "resilience.csv", rows)
        for mode, label in (("gaussian", "noise sigma"), ("occlude", "occlusion factor")):
            series = {n: [float(a) for m, _, a in rows if m == mode] for n, rows in table.items()}
            xs = {n: [lv for m, lv, _ in rows if m == mode] for n, rows in table.items()}
            (out / f"resilience-{mode}.svg").write_text(
                svg_line_plot(series, f"accuracy under {label}", label, "accuracy", x_values=xs))
    return table
