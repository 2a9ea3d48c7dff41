"""Builtin desk-scale task sequences and the YAML suite description format.

A suite file looks like::

    name: my-suite
    base: synthetic          # or a directory holding the MNIST IDX files
    image_size: 14
    num_classes: 10
    tasks:
      - name: d3
        transforms: [{kind: class-filter, digit: 3}, {kind: mirror}]
        train_count: 2000
        test_count: 500
"""
from __future__ import annotations

import functools
import math
from pathlib import Path

import numpy as np
import yaml

from .data import LabeledBatch, TaskSpec, TaskSuite, Transform, build_task, downsample, load_mnist, synth_glyphs
from .numerics import Streams

BUILTIN = ("digits-mini", "permnist-mini", "tdigits-mini", "glyphs")
RENDER_SIZE = 28


def builtin_specs(name: str, train_count=2000, test_count=500) -> list:
    mk = lambda n, *ts: TaskSpec(n, tuple(ts), train_count, test_count)  # noqa: E731
    if name == "digits-mini":
        return [mk(f"digit-{d}", Transform("class-filter", digit=d)) for d in range(6)]
    if name == "permnist-mini":
        return [
            mk("original", Transform("identity")),
            mk("blacken-4", Transform("patch-blacken", size=4)),
            mk("whiten-4", Transform("patch-whiten", size=4)),
            mk("permute-4", Transform("patch-permute", size=4, seed=401)),
            mk("permute-6", Transform("patch-permute", size=6, seed=601)),
            mk("mirror", Transform("mirror")),
        ]
    if name == "tdigits-mini":
        specs = []
        for kind in ("identity", "mirror", "flip-vertical", "reflect-diagonal"):
            for d in range(5):
                specs.append(mk(f"{kind}-{d}", Transform("class-filter", digit=d), Transform(kind)))
        return specs
    if name == "glyphs":
        return [mk("all-glyphs", Transform("identity"))]
    raise ValueError(f"unknown builtin suite {name!r}; choose from {', '.join(BUILTIN)}")


def _per_class_need(specs, num_classes):
    """Samples per class needed in the train and test pools."""
    train = np.zeros(num_classes, dtype=int)
    test = np.zeros(num_classes, dtype=int)
    for s in specs:
        digits = [t.digit for t in s.transforms if t.kind == "class-filter"]
        if digits:
            train[digits[0]] = max(train[digits[0]], s.train_count)
            test[digits[0]] = max(test[digits[0]], s.test_count)
        else:
            # a little slack so random draws stay roughly class balanced
            train[:] = np.maximum(train, math.ceil(1.25 * s.train_count / num_classes))
            test[:] = np.maximum(test, math.ceil(1.25 * s.test_count / num_classes))
    return train, test


def _glyph_pool(counts, image_size, rng):
    parts = [synth_glyphs(0, int(n), RENDER_SIZE, rng, classes=[c]) for c, n in enumerate(counts) if n > 0]
    x = np.concatenate([p.inputs for p in parts])
    y = np.concatenate([p.labels for p in parts])
    factor = RENDER_SIZE // image_size
    return LabeledBatch(downsample(x, factor), y, "glyphs")


def build_suite(name: str, specs: list, seed: int, image_size=14, num_classes=10, base="synthetic") -> TaskSuite:
    streams = Streams(seed).child("data")
    if base == "synthetic":
        train_need, test_need = _per_class_need(specs, num_classes)
        rng = streams.get("glyphs")
        base_train = _glyph_pool(train_need, image_size, rng)
        base_test = _glyph_pool(test_need, image_size, rng)
    else:
        base_train, base_test = load_mnist(base)
        factor = int(round(math.sqrt(base_train.inputs.shape[1]))) // image_size
        base_train = LabeledBatch(downsample(base_train.inputs, factor), base_train.labels, "mnist")
        base_test = LabeledBatch(downsample(base_test.inputs, factor), base_test.labels, "mnist")
    rng = streams.get("tasks")
    train, test = [], []
    for spec in specs:
        tr, te = build_task(spec, base_train, rng, base_test)
        train.append(tr)
        test.append(te)
    return TaskSuite(name, list(specs), train, test, num_classes,
                     {"base": "synthetic" if base == "synthetic" else str(base), "image_size": image_size})


@functools.lru_cache(maxsize=8)
def _cached_builtin(name, seed, train_count, test_count, mnist_dir):
    return build_suite(name, builtin_specs(name, train_count, test_count), seed,
                       base=mnist_dir if mnist_dir else "synthetic")


def builtin_suite(name: str, seed: int = 0, train_count=2000, test_count=500, mnist_dir=None) -> TaskSuite:
    """Builtin suite; results are cached per process (treat them as read-only)."""
    return _cached_builtin(name, int(seed), int(train_count), int(test_count), mnist_dir)


def load_suite_file(path, seed: int = 0, mnist_dir=None) -> TaskSuite:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "tasks" not in doc:
        raise ValueError(f"{path}: suite file needs a 'tasks' list")
    specs = [TaskSpec.from_dict(t) for t in doc["tasks"]]
    if not specs:
        raise ValueError(f"{path}: suite has no tasks")
    base = doc.get("base", "synthetic")
    if base != "synthetic":
        base = str((Path(path).parent / base).resolve()) if not Path(base).is_absolute() else base
    elif mnist_dir:
        base = mnist_dir
    return build_suite(doc.get("name", Path(path).stem), specs, seed, int(doc.get("image_size", 14)),
                       int(doc.get("num_classes", 10)), base)


def dump_suite_file(suite_name: str, specs: list, path, base="synthetic", image_size=14, num_classes=10):
    doc = {"name": suite_name, "base": base, "image_size": image_size, "num_classes": num_classes,
           "tasks": [s.to_dict() for s in specs]}
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
