"""Comparison methods: plain and dropout nets, pseudopattern rehearsal, EWC, and
generative replay on a single memory."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .learner import LearnerParams, learner_proba, learner_train
from .numerics import ParamSet, Streams, forward, per_sample_sq_grads, softmax
from .replay import DgmState, TrainSettings, dgr_update

SEQUENTIAL_EPOCHS = 6
DROPOUT_RATE = 0.2
EWC_LAMBDA = 100.0
PPR_MULTIPLIER = 3


def nn_train_task(learner: LearnerParams, x, y, streams: Streams, epochs=SEQUENTIAL_EPOCHS, batch_size=128):
    return learner_train(learner, x, y, epochs, streams.get("shuffle"), batch_size=batch_size)


def nn_sequential_train(stream, learner: LearnerParams, streams: Streams, epochs=SEQUENTIAL_EPOCHS,
                        batch_size=128) -> LearnerParams:
    """Train task after task with no forgetting mitigation. ``stream`` yields ``(t, x, y)``."""
    for _, x, y in stream:
        learner = nn_train_task(learner, x, y, streams, epochs, batch_size)
    return learner


# --- pseudopattern rehearsal --------------------------------------------------


@dataclass
class PprMemory:
    capacity: int
    inputs: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __len__(self):
        return 0 if self.inputs is None else len(self.inputs)


def ppr_train_task(learner: LearnerParams, mem: PprMemory, x, y, streams: Streams,
                   epochs=SEQUENTIAL_EPOCHS, batch_size=128):
    """Fill the free memory with uniform random inputs labelled by the current net's
    softmax, then train on the task plus those pseudopatterns."""
    x = np.asarray(x)
    y = np.asarray(y)
    fill = max(mem.capacity - len(x), 0)
    if fill == 0:
        new_mem = PprMemory(mem.capacity)
        return nn_train_task(learner, x, y, streams, epochs, batch_size), new_mem
    dtype = learner.params["fc0/W"].dtype
    pseudo = streams.get("pseudo").random((fill, learner.input_dim)).astype(dtype)
    soft = learner_proba(learner, pseudo).astype(dtype)
    onehot = np.eye(learner.num_classes, dtype=dtype)[y]
    x_tr = np.concatenate([x.astype(dtype, copy=False), pseudo])
    t_tr = np.concatenate([onehot, soft])
    learner = learner_train(learner, x_tr, t_tr, epochs, streams.get("shuffle"), batch_size=batch_size)
    return learner, PprMemory(mem.capacity, pseudo, soft)


# --- elastic weight consolidation ---------------------------------------------


@dataclass
class EwcState:
    lam: float = EWC_LAMBDA
    anchors: list = field(default_factory=list)
    fishers: list = field(default_factory=list)


def ewc_penalty(params: ParamSet, ewc: EwcState):
    """``(lam / 2) * sum_tasks sum_i F_i (theta_i - anchor_i)^2`` and its gradient."""
    value = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for anchor, fisher in zip(ewc.anchors, ewc.fishers):
        for k, theta in params.items():
            diff = theta - anchor[k]
            value += 0.5 * ewc.lam * float(np.sum(fisher[k] * diff * diff))
            grads[k] += ewc.lam * fisher[k] * diff
    return value, grads


def fisher_diagonal(learner: LearnerParams, x) -> ParamSet:
    """Empirical Fisher at the mode: mean squared gradient of log p(argmax class | x)."""
    x = np.asarray(x, dtype=learner.params["fc0/W"].dtype)
    logits = forward(learner.params, learner.arch, x, logits=True)
    p = softmax(logits)
    d = p.copy()
    d[np.arange(len(x)), np.argmax(logits, axis=1)] -= 1.0
    sq = per_sample_sq_grads(learner.params, learner.arch, x, d)
    return {k: (v / len(x)).astype(learner.params[k].dtype) for k, v in sq.items()}


def ewc_train_task(learner: LearnerParams, ewc: EwcState, x, y, streams: Streams,
                   epochs=SEQUENTIAL_EPOCHS, batch_size=128):
    penalty = None
    if ewc.anchors and ewc.lam != 0:
        penalty = lambda params: ewc_penalty(params, ewc)  # noqa: E731
    learner = learner_train(learner, x, y, epochs, streams.get("shuffle"), batch_size=batch_size, penalty=penalty)
    anchor = {k: v.copy() for k, v in learner.params.items()}
    new = EwcState(ewc.lam, ewc.anchors + [anchor], ewc.fishers + [fisher_diagonal(learner, x)])
    return learner, new


# --- generative replay on one memory ------------------------------------------


def dgr_sequential_train(stream, dgm: DgmState, streams: Streams, settings: TrainSettings = TrainSettings()):
    """One replay consolidation per incoming task, no short-term memories."""
    for t, x, y in stream:
        dgm = dgr_update(dgm, x, y, {t: 1}, streams, settings)
    return dgm
