"""Dual-memory network: short-term task memories feeding a long-term memory.

Each incoming task is learnt by its own small memory (an STTM slot). When a new
task arrives and every slot is taken, the network sleeps: each slot generates
samples of its task, the long-term memory (LTM) absorbs them by generative
replay, and the slots are freed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .generative import vae_reconstruct, vae_sample
from .learner import learner_predict
from .numerics import Streams
from .replay import (
    DgmState,
    MemoryArch,
    TrainSettings,
    TrainingDivergence,
    dgm_predict,
    dgr_update,
    f32,
    merge_dictionaries,
    new_dgm,
    recog_loss,
    recognize,
)

# Short-term memories hold one task each, so their capacity never binds.
STTM_CAPACITY = 2**31 - 1


class SlotTrainingError(RuntimeError):
    def __init__(self, slot: int, cause: TrainingDivergence):
        super().__init__(f"STTM slot {slot}: {cause}")
        self.slot = slot
        self.phase = cause.phase


@dataclass
class SttmSlot:
    dgm: DgmState | None = None
    assigned_task: str | None = None
    trained_sample_count: int = 0

    @property
    def free(self) -> bool:
        return self.assigned_task is None


@dataclass(frozen=True)
class DualSettings:
    ltm: TrainSettings = TrainSettings()
    sttm: TrainSettings = TrainSettings()


@dataclass
class DgdmnState:
    ltm: DgmState
    sttm_pool: list
    sttm_arch: MemoryArch
    sleep_count: int = 0
    anon_counter: int = 0
    # generator sample-epochs spent by STTMs that have since been cleared
    retired_sample_epochs: int = 0
    budgets: list = field(default_factory=list, compare=False)

    @property
    def n_stm(self) -> int:
        return len(self.sttm_pool)

    def slot_of(self, task: str) -> int | None:
        for i, slot in enumerate(self.sttm_pool):
            if slot.assigned_task == task:
                return i
        return None

    def free_slot(self) -> int | None:
        for i, slot in enumerate(self.sttm_pool):
            if slot.free:
                return i
        return None

    @property
    def generator_sample_epochs(self) -> int:
        live = sum(s.dgm.generator_sample_epochs for s in self.sttm_pool if s.dgm is not None)
        return self.ltm.generator_sample_epochs + self.retired_sample_epochs + live


def new_dgdmn(ltm_arch: MemoryArch, n_max: int, kappa: float, n_stm: int, rng: np.random.Generator,
              sttm_arch: MemoryArch | None = None) -> DgdmnState:
    if n_stm < 1:
        raise ValueError("n_stm must be >= 1")
    ltm = new_dgm(ltm_arch, n_max, kappa, rng)
    return DgdmnState(ltm, [SttmSlot() for _ in range(n_stm)], sttm_arch or ltm_arch.halved())


def _copy_state(state: DgdmnState) -> DgdmnState:
    return replace(state, sttm_pool=[replace(s) for s in state.sttm_pool], budgets=list(state.budgets))


def _slot_update(state, i, x, y, task, streams, settings):
    slot = state.sttm_pool[i]
    try:
        dgm = dgr_update(slot.dgm, x, y, {task: 1}, streams.child("sttm"), settings.sttm)
    except TrainingDivergence as exc:
        raise SlotTrainingError(i, exc) from exc
    return dgm


def _retrain(state, i, x, y, streams, settings):
    slot = state.sttm_pool[i]
    dgm = _slot_update(state, i, x, y, slot.assigned_task, streams, settings)
    state.sttm_pool[i] = SttmSlot(dgm, slot.assigned_task, slot.trained_sample_count + len(x))
    return state


def _allocate(state, task, x, y, augment: bool, streams, settings):
    i = state.free_slot()
    x_tr, y_tr = x, y
    if augment:
        # the LTM already knows this task: send its reconstructions along
        x_aug = vae_reconstruct(state.ltm.generator, x)
        y_aug = learner_predict(state.ltm.learner, x_aug)
        x_tr = np.concatenate([np.asarray(x, dtype=x_aug.dtype), x_aug])
        y_tr = np.concatenate([np.asarray(y, dtype=np.int64), y_aug])
    fresh = new_dgm(state.sttm_arch, STTM_CAPACITY, state.ltm.kappa, streams.get("sttm-init"))
    state.sttm_pool[i] = SttmSlot(fresh, task, 0)
    dgm = _slot_update(state, i, x_tr, y_tr, task, streams, settings)
    state.sttm_pool[i] = SttmSlot(dgm, task, len(x))
    return state


def train_task(state: DgdmnState, task: str, x, y, streams: Streams,
               settings: DualSettings = DualSettings()) -> DgdmnState:
    """Learn one task batch; may trigger a sleep first. Returns the new state."""
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} inputs but {len(y)} labels")
    state = _copy_state(state)
    i = state.slot_of(task)
    if i is not None:
        return _retrain(state, i, x, y, streams, settings)
    if state.free_slot() is None:
        state = sleep(state, streams, settings)
    return _allocate(state, task, x, y, task in state.ltm.dictionary, streams, settings)


def sleep(state: DgdmnState, streams: Streams, settings: DualSettings = DualSettings()) -> DgdmnState:
    """Consolidate every occupied slot into the LTM and clear the pool."""
    assigned = [s for s in state.sttm_pool if not s.free]
    if not assigned:
        raise ValueError("sleep called with no occupied STTM slot")
    rng = streams.get("sleep-latent")
    xs, ys = [], []
    for slot in assigned:
        xi = vae_sample(slot.dgm.generator, slot.trained_sample_count, rng)
        xs.append(xi)
        ys.append(dgm_predict(slot.dgm, xi))
    d_tasks = merge_dictionaries(*(s.dgm.dictionary for s in assigned))
    ltm = dgr_update(state.ltm, np.concatenate(xs), np.concatenate(ys), d_tasks, streams.child("ltm"), settings.ltm)
    retired = sum(s.dgm.generator_sample_epochs for s in assigned)
    return replace(state, ltm=ltm, sttm_pool=[SttmSlot() for _ in state.sttm_pool],
                   sleep_count=state.sleep_count + 1,
                   retired_sample_epochs=state.retired_sample_epochs + retired,
                   budgets=state.budgets + [ltm.last_budget])


def predict(state: DgdmnState, task: str, x):
    """Resident STTM answers for its task; everything else goes to the LTM."""
    i = state.slot_of(task)
    if i is not None:
        return dgm_predict(state.sttm_pool[i].dgm, x)
    return dgm_predict(state.ltm, x)


# --- descriptor-free operation ------------------------------------------------


def route(state: DgdmnState, x, gamma_sttm: float) -> int | None:
    """Index of the occupied slot that recognises ``x`` best, if any passes ``gamma_sttm``."""
    best, best_loss = None, math.inf
    for i, slot in enumerate(state.sttm_pool):
        if slot.free:
            continue
        loss = recog_loss(slot.dgm, x)
        if loss < gamma_sttm and loss < best_loss:
            best, best_loss = i, loss
    return best


def train_task_descriptorfree(state: DgdmnState, x, y, gamma_sttm: float, gamma_ltm: float, streams: Streams,
                              settings: DualSettings = DualSettings()) -> DgdmnState:
    """As :func:`train_task`, but residency and prior consolidation are decided by
    reconstruction-based recognition. New tasks get minted ``anon-<n>`` names."""
    x = np.asarray(x)
    y = np.asarray(y)
    state = _copy_state(state)
    i = route(state, x, gamma_sttm)
    if i is not None:
        return _retrain(state, i, x, y, streams, settings)
    if state.free_slot() is None:
        state = sleep(state, streams, settings)
    task = f"anon-{state.anon_counter}"
    state.anon_counter += 1
    known = state.ltm.age > 0 and recognize(state.ltm, x, gamma_ltm)
    return _allocate(state, task, x, y, known, streams, settings)


def predict_descriptorfree(state: DgdmnState, x, gamma_sttm: float):
    i = route(state, x, gamma_sttm)
    if i is not None:
        return dgm_predict(state.sttm_pool[i].dgm, x)
    return dgm_predict(state.ltm, x)


def suggest_hyperparams(K: int) -> tuple[float, int]:
    """``kappa = 0.5 / K`` and ``n_stm = round(0.25 / kappa)`` (half-up, at least 1)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    kappa = Fraction(1, 2 * K)
    n_stm = max(1, math.floor(Fraction(1, 4) / kappa + Fraction(1, 2)))
    return float(kappa), int(n_stm)


def recog_settings(settings: DualSettings, gamma_sttm: float, gamma_ltm: float) -> DualSettings:
    return DualSettings(ltm=replace(settings.ltm, recog_gamma=f32(gamma_ltm)),
                        sttm=replace(settings.sttm, recog_gamma=f32(gamma_sttm)))
