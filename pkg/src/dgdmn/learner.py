"""Feedforward softmax classifier (the learner of every memory and the NN baselines)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Cache,
    NonFiniteError,
    ParamSet,
    RMSProp,
    all_finite,
    backward,
    copy_params,
    first_nonfinite_layer,
    forward,
    init_params,
    minibatches,
    mlp,
    softmax_cross_entropy,
)

LEARNER_OPTIMIZER = RMSProp(learning_rate=0.001, rho=0.9, epsilon=1e-8)


@dataclass
class LearnerParams:
    params: ParamSet
    input_dim: int
    hidden: tuple
    num_classes: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def arch(self):
        return mlp("fc", (self.input_dim, *self.hidden, self.num_classes), out_act="softmax")

    def copy(self) -> "LearnerParams":
        return LearnerParams(copy_params(self.params), self.input_dim, tuple(self.hidden),
                             self.num_classes, self.dropout_rate)


def init_learner(input_dim, hidden, num_classes, rng, dropout_rate=0.0, dtype=np.float32) -> LearnerParams:
    learner = LearnerParams({}, int(input_dim), tuple(int(h) for h in hidden), int(num_classes), dropout_rate)
    learner.params = init_params(learner.arch, rng, dtype)
    return learner


def learner_train(learner: LearnerParams, x, y, epochs: int, rng: np.random.Generator,
                  opt: RMSProp | None = None, batch_size: int = 128, penalty=None) -> LearnerParams:
    """Minibatch RMSProp on cross-entropy; returns an updated copy.

    ``y`` holds int labels or soft-target rows. ``penalty(params)`` may return an
    extra ``(value, grads)`` pair added to every step (used by EWC).
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("cannot train on an empty batch")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} inputs but {len(y)} targets")
    if y.ndim == 1 and (y.min() < 0 or y.max() >= learner.num_classes):
        raise ValueError(f"labels must lie in [0, {learner.num_classes})")
    learner = learner.copy()
    opt = (opt or LEARNER_OPTIMIZER).fresh()
    arch = learner.arch
    x = x.astype(learner.params["fc0/W"].dtype, copy=False)
    if y.ndim == 2:
        y = y.astype(x.dtype, copy=False)
    for _ in range(epochs):
        for idx in minibatches(len(x), batch_size, rng):
            cache = Cache()
            logits = forward(learner.params, arch, x[idx], logits=True, cache=cache,
                             dropout=learner.dropout_rate, rng=rng if learner.dropout_rate > 0 else None)
            loss, d = softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(first_nonfinite_layer(arch, cache), "loss")
            grads, _ = backward(learner.params, arch, cache, d)
            if penalty is not None:
                _, pgrads = penalty(learner.params)
                for k, g in pgrads.items():
                    grads[k] = grads[k] + g
            opt.apply(learner.params, grads)
        if not all_finite(learner.params):
            raise NonFiniteError("learner", "parameter")
    return learner


def learner_proba(learner: LearnerParams, x):
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros((0, learner.num_classes))
    return forward(learner.params, learner.arch, x)


def learner_predict(learner: LearnerParams, x):
    """Argmax class per row; ties go to the lowest index. Dropout is never applied."""
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    logits = forward(learner.params, learner.arch, x, logits=True)
    return np.argmax(logits, axis=1).astype(np.int64)


def accuracy(learner: LearnerParams, x, y) -> float:
    return float(np.mean(learner_predict(learner, x) == np.asarray(y))) if len(x) else 0.0
