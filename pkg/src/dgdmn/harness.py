"""Sequential-training driver, accuracy matrix and metrics, reference curves,
corruption sweeps, and result files (CSV and SVG)."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import TaskSpec, Transform, corrupt
from .generative import vae_reconstruct
from .learner import learner_predict
from .numerics import Streams
from .replay import MemoryArch, TrainSettings, dgr_update, new_dgm, recog_loss
from .suites import build_suite


class AccuracyMatrix:
    """``A[i][j]``: accuracy on task ``j`` after training task ``i`` (0-based, ``j <= i``).

    Entries are stored as exact fractions so metrics are exact rationals.
    """

    def __init__(self, T: int):
        if T < 1:
            raise ValueError("an accuracy matrix needs at least one task")
        self.T = T
        self._rows = [[None] * (i + 1) for i in range(T)]

    def __setitem__(self, ij, value):
        i, j = ij
        if not 0 <= j <= i < self.T:
            raise IndexError(f"entry ({i}, {j}) is outside the lower triangle of a {self.T}-task matrix")
        v = Fraction(value)
        if not 0 <= v <= 1:
            raise ValueError(f"accuracy {float(v)} outside [0, 1]")
        self._rows[i][j] = v

    def __getitem__(self, ij) -> Fraction | None:
        i, j = ij
        if j > i:
            return None
        return self._rows[i][j]

    def row(self, i: int) -> list:
        return list(self._rows[i])

    def row_complete(self, i: int) -> bool:
        return all(v is not None for v in self._rows[i])

    @property
    def rows_done(self) -> int:
        n = 0
        while n < self.T and self.row_complete(n):
            n += 1
        return n

    def extended(self, extra: int) -> "AccuracyMatrix":
        out = AccuracyMatrix(self.T + extra)
        for i, row in enumerate(self._rows):
            out._rows[i] = list(row)
        return out

    def to_tree(self) -> dict:
        return {"T": self.T, "rows": [list(r) for r in self._rows]}

    @classmethod
    def from_tree(cls, tree) -> "AccuracyMatrix":
        m = cls(tree["T"])
        m._rows = [list(r) for r in tree["rows"]]
        return m

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        m = cls(len(rows))
        for i, row in enumerate(rows):
            for j in range(i + 1):
                if j < len(row) and row[j] is not None:
                    m[i, j] = row[j]
        return m

    def as_array(self) -> np.ndarray:
        a = np.full((self.T, self.T), np.nan)
        for i, row in enumerate(self._rows):
            for j, v in enumerate(row):
                if v is not None:
                    a[i, j] = float(v)
        return a


# --- metrics ------------------------------------------------------------------


def _require_row(A: AccuracyMatrix, i: int, what: str):
    if not A.row_complete(i):
        raise ValueError(f"{what}: row {i + 1} of the accuracy matrix is incomplete")


def acc_metric(A: AccuracyMatrix) -> Fraction:
    """Mean of the final row."""
    _require_row(A, A.T - 1, "ACC")
    return sum(A.row(A.T - 1), Fraction(0)) / A.T


def bwt_metric(A: AccuracyMatrix) -> Fraction:
    """Mean over earlier tasks of (final accuracy - accuracy right after training)."""
    if A.T < 2:
        raise ValueError("BWT undefined for a single task")
    _require_row(A, A.T - 1, "BWT")
    last = A.T - 1
    diffs = []
    for i in range(last):
        if A[i, i] is None:
            raise ValueError(f"BWT: diagonal entry {i + 1} is unset")
        diffs.append(A[last, i] - A[i, i])
    return sum(diffs, Fraction(0)) / last


def forgetting_curve(A: AccuracyMatrix) -> list:
    """Point t: mean accuracy over tasks 1..t after training task t."""
    return [sum(A.row(t), Fraction(0)) / (t + 1) for t in range(A.rows_done)]


def last_k_accuracy(A: AccuracyMatrix, K: int) -> list:
    """Point t: mean accuracy over the last ``K`` tasks seen after training task t."""
    if K < 1:
        raise ValueError("K must be >= 1")
    out = []
    for t in range(A.rows_done):
        window = A.row(t)[max(0, t - K + 1): t + 1]
        out.append(sum(window, Fraction(0)) / len(window))
    return out


def exact_accuracy(pred, labels) -> Fraction:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot score an empty test set")
    return Fraction(int(np.sum(np.asarray(pred) == labels)), len(labels))


# --- run records --------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    algorithm: str
    tasks: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    terminal_sleep: bool = False
    generator_sample_epochs: int = 0
    aborted: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class RunAborted(RuntimeError):
    """Raised when training fails mid-run; carries the partial matrix and record."""

    def __init__(self, cause: Exception, matrix: AccuracyMatrix, record: RunRecord):
        super().__init__(f"run aborted at task {len(record.timings) + 1}: {cause}")
        self.cause = cause
        self.matrix = matrix
        self.record = record


def run_sequential(algorithm, suite, record: RunRecord, matrix: AccuracyMatrix | None = None, start: int = 0,
                   on_task_end=None):
    """Train task after task, filling row ``i`` after task ``i``.

    Rows are measured on the algorithm's current state; only before the final
    row does ``algorithm.finish()`` force an end-of-stream consolidation.
    ``on_task_end(i, matrix, record)`` is called after each row.
    """
    T = len(suite)
    if T == 0:
        raise ValueError("the task suite is empty")
    matrix = matrix if matrix is not None else AccuracyMatrix(T)
    for i in range(start, T):
        spec, train = suite.specs[i], suite.train[i]
        try:
            t0 = time.perf_counter()
            algorithm.train_task(spec.name, train.inputs, train.labels)
            if i == T - 1:
                record.terminal_sleep = bool(algorithm.finish())
            record.timings.append(time.perf_counter() - t0)
            record.tasks.append(spec.name)
        except Exception as exc:
            record.aborted = f"{type(exc).__name__}: {exc}"
            raise RunAborted(exc, matrix, record) from exc
        for j in range(i + 1):
            te = suite.test[j]
            matrix[i, j] = exact_accuracy(algorithm.predict(suite.specs[j].name, te.inputs), te.labels)
        record.generator_sample_epochs = int(algorithm.generator_sample_epochs)
        if on_task_end is not None:
            on_task_end(i, matrix, record)
    record.metrics = summary_metrics(matrix)
    return matrix, record


def summary_metrics(A: AccuracyMatrix, K: int = 10) -> dict:
    out = {"ACC": acc_metric(A)}
    if A.T >= 2:
        out["BWT"] = bwt_metric(A)
    out[f"last{K}"] = last_k_accuracy(A, K)[-1]
    return {k: float(v) for k, v in out.items()}


def run_joint(make_algorithm, suite) -> list:
    """Reference curve: for each t a fresh model is trained on tasks 1..t pooled.

    ``make_algorithm()`` must return a freshly initialised algorithm; point t is
    the mean test accuracy over tasks 1..t.
    """
    out = []
    for t in range(len(suite)):
        algo = make_algorithm()
        x = np.concatenate([b.inputs for b in suite.train[: t + 1]])
        y = np.concatenate([b.labels for b in suite.train[: t + 1]])
        algo.train_task(f"joint-{t + 1}", x, y)
        accs = [exact_accuracy(algo.predict(suite.specs[j].name, suite.test[j].inputs), suite.test[j].labels)
                for j in range(t + 1)]
        out.append(sum(accs, Fraction(0)) / (t + 1))
    return out


# --- recognition threshold calibration ----------------------------------------


def calibrate_gamma(suite, ltm_arch: MemoryArch, n_max: int, kappa: float, seed: int,
                    settings: TrainSettings = TrainSettings()) -> tuple[float, float]:
    """Pick recognition thresholds from glyph classes the suite never uses.

    A fresh short-term memory learns one calibration class; its threshold is the
    geometric midpoint between its loss on held-out samples of that class and
    its lowest loss on another class. The long-term threshold repeats this with
    a memory that consolidated two calibration classes.
    """
    used = {t.digit for s in suite.specs for t in s.transforms if t.kind == "class-filter"}
    if not used or any(not any(t.kind == "class-filter" for t in s.transforms) for s in suite.specs):
        raise ValueError("automatic gamma calibration needs a suite of class-filter tasks")
    free = [c for c in range(suite.num_classes) if c not in used]
    if len(free) < 3:
        raise ValueError("automatic gamma calibration needs at least three classes unused by the suite")
    size = suite.meta.get("image_size", 14)
    specs = [TaskSpec(f"calibration-{c}", (Transform("class-filter", digit=c),), suite.specs[0].train_count,
                      suite.specs[0].test_count) for c in free]
    cal = build_suite("calibration", specs, seed + 7919, image_size=size, num_classes=suite.num_classes)
    streams = Streams(seed).child("calibration")

    def midpoint(inside, outside):
        return math.sqrt(max(inside) * min(outside))

    sttm = new_dgm(ltm_arch.halved(), 2**31 - 1, kappa, streams.get("init"))
    sttm = dgr_update(sttm, cal.train[0].inputs, cal.train[0].labels, {"c0": 1}, streams.child("sttm"), settings)
    g_sttm = midpoint([recog_loss(sttm, cal.test[0].inputs)],
                      [recog_loss(sttm, te.inputs) for te in cal.test[1:]])

    ltm = new_dgm(ltm_arch, n_max, kappa, streams.get("init"))
    for k in (0, 1):
        ltm = dgr_update(ltm, cal.train[k].inputs, cal.train[k].labels, {f"c{k}": 1}, streams.child("ltm"), settings)
    g_ltm = midpoint([recog_loss(ltm, cal.test[k].inputs) for k in (0, 1)],
                     [recog_loss(ltm, te.inputs) for te in cal.test[2:]])
    return g_sttm, g_ltm


# --- corruption resilience ----------------------------------------------------


def plain_pipeline(learner):
    return lambda x: learner_predict(learner, x)


def reconstruct_pipeline(dgm):
    """Classify the memory's own reconstruction of each input."""
    return lambda x: learner_predict(dgm.learner, vae_reconstruct(dgm.generator, x))


def resilience_sweep(models: dict, x, y, sigmas=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
                     factors=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6), seed: int = 0) -> dict:
    """Accuracy of each classifier in ``models`` on corrupted copies of ``x``.

    Every model sees the same corrupted inputs. Returns
    ``{name: [(mode, level, accuracy), ...]}``.
    """
    streams = Streams(seed).child("corrupt")
    grid = [("gaussian", s) for s in sigmas] + [("occlude", f) for f in factors]
    out = {name: [] for name in models}
    for mode, level in grid:
        xc = corrupt(x, mode, level, streams.get(f"{mode}-{level!r}"))
        for name, classify in models.items():
            out[name].append((mode, float(level), exact_accuracy(classify(xc), y)))
    return out


# --- result files -------------------------------------------------------------


def _fmt(v) -> str:
    return f"{float(v):.6f}"


def write_matrix_csv(path, A: AccuracyMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trained_task", "eval_task", "accuracy"])
        for i in range(A.T):
            for j in range(i + 1):
                if A[i, j] is not None:
                    w.writerow([i + 1, j + 1, _fmt(A[i, j])])


def read_matrix_csv(path) -> AccuracyMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    T = max(int(r["trained_task"]) for r in rows)
    A = AccuracyMatrix(T)
    for r in rows:
        A[int(r["trained_task"]) - 1, int(r["eval_task"]) - 1] = Fraction(r["accuracy"])
    return A


def write_metrics_csv(path, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, _fmt(v) if isinstance(v, (float, Fraction)) else v])


def write_curve_csv(path, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "value"])
        for t, v in enumerate(values, start=1):
            w.writerow([t, _fmt(v)])


def write_resilience_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "level", "accuracy"])
        for mode, level, acc in rows:
            w.writerow([mode, f"{level:g}", _fmt(acc)])


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
            "#bcbd22", "#17becf")


def svg_line_plot(series: dict, title: str, xlabel: str, ylabel: str, width=560, height=360,
                  x_values: dict | None = None, y_range=(0.0, 1.0)) -> str:
    """Minimal standalone SVG line chart. ``series`` maps a label to y values;
    x defaults to 1, 2, ... unless ``x_values[label]`` is given."""
    left, right, top, bottom = 56, 150, 36, 48
    pw, ph = width - left - right, height - top - bottom
    xs_all = [x for k, ys in series.items() for x in (x_values or {}).get(k, range(1, len(ys) + 1))]
    x0, x1 = (min(xs_all), max(xs_all)) if xs_all else (0, 1)
    if x1 == x0:
        x1 = x0 + 1
    y0, y1 = y_range
    sx = lambda x: left + (x - x0) / (x1 - x0) * pw  # noqa: E731
    sy = lambda y: top + (1 - (min(max(y, y0), y1) - y0) / (y1 - y0)) * ph  # noqa: E731
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{left + pw / 2}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for k in range(6):
        yv = y0 + (y1 - y0) * k / 5
        parts.append(f'<line x1="{left}" x2="{left + pw}" y1="{sy(yv):.1f}" y2="{sy(yv):.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.1f}</text>')
    ticks = sorted(set(xs_all)) if len(set(xs_all)) <= 12 else np.linspace(x0, x1, 6)
    for xv in ticks:
        parts.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:g}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 10}" text-anchor="middle">{_esc(xlabel)}</text>')
    parts.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2})">{_esc(ylabel)}</text>')
    for n, (label, ys) in enumerate(series.items()):
        color = _PALETTE[n % len(_PALETTE)]
        xs = list((x_values or {}).get(label, range(1, len(ys) + 1)))
        pts = " ".join(f"{sx(x):.1f},{sy(float(y)):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(float(y)):.1f}" r="2.2" fill="{color}"/>')
        ly = top + 12 + 16 * n
        parts.append(f'<line x1="{left + pw + 10}" x2="{left + pw + 28}" y1="{ly}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{_esc(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_run_outputs(out_dir, matrix: AccuracyMatrix, record: RunRecord, joint=None, names=None) -> None:
    """matrix.csv, metrics.csv, curve.csv, last10.csv, run_record.json and plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "matrix.csv", matrix)
    metrics = dict(record.metrics)
    metrics["generator_sample_epochs"] = record.generator_sample_epochs
    metrics["terminal_sleep"] = int(record.terminal_sleep)
    metrics["config_hash"] = record.config_hash
    write_metrics_csv(out / "metrics.csv", metrics)
    curve = forgetting_curve(matrix)
    write_curve_csv(out / "curve.csv", curve)
    last10 = last_k_accuracy(matrix, 10)
    write_curve_csv(out / "last10.csv", last10)
    (out / "run_record.json").write_text(record.to_json())
    names = names or [f"task {j + 1}" for j in range(matrix.T)]
    arr = matrix.as_array()
    per_task = {names[j]: list(arr[j:, j]) for j in range(matrix.T)}
    xs = {names[j]: list(range(j + 1, matrix.T + 1)) for j in range(matrix.T)}
    (out / "accuracy.svg").write_text(svg_line_plot(per_task, f"{record.algorithm}: accuracy per task",
                                                    "tasks seen", "test accuracy", x_values=xs))
    curves = {record.algorithm: curve}
    if joint is not None:
        write_curve_csv(out / "joint.csv", joint)
        curves["joint"] = joint
    (out / "curve.svg").write_text(svg_line_plot(curves, "average accuracy on tasks seen", "tasks seen",
                                                 "accuracy"))
    (out / "last10.svg").write_text(svg_line_plot({record.algorithm: last10}, "accuracy on last 10 tasks seen",
                                                  "tasks seen", "accuracy"))
