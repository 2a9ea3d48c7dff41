"""Uniform sequential-learner wrappers used by the evaluation harness.

Every algorithm exposes ``train_task(task, x, y)``, ``predict(task, x)``,
``finish()`` (end-of-stream flush; returns True if it consolidated anything),
``state_tree()`` / ``load_state_tree()`` for checkpoints, and
``generator_sample_epochs``.
"""
from __future__ import annotations

from . import baselines as bl
from . import checkpoint as ck
from . import dual_memory as dm
from .learner import LearnerParams, init_learner, learner_predict
from .numerics import Streams
from .replay import DgmState, MemoryArch, TrainSettings, dgm_predict, dgr_update, f32, new_dgm


class SequentialAlgorithm:
    name = "base"

    def __init__(self, streams: Streams):
        self.streams = streams

    def train_task(self, task: str, x, y) -> None:
        raise NotImplementedError

    def predict(self, task: str, x):
        raise NotImplementedError

    def finish(self) -> bool:
        return False

    @property
    def generator_sample_epochs(self) -> int:
        return 0

    def state_tree(self) -> dict:
        raise NotImplementedError

    def load_state_tree(self, tree: dict) -> None:
        raise NotImplementedError


class NNAlgorithm(SequentialAlgorithm):
    name = "nn"

    def __init__(self, learner: LearnerParams, streams: Streams, epochs=bl.SEQUENTIAL_EPOCHS, batch_size=128):
        super().__init__(streams)
        self.learner = learner
        self.epochs = epochs
        self.batch_size = batch_size

    def train_task(self, task, x, y):
        self.learner = bl.nn_train_task(self.learner, x, y, self.streams, self.epochs, self.batch_size)

    def predict(self, task, x):
        return learner_predict(self.learner, x)

    def state_tree(self):
        return {"learner": ck.learner_to_tree(self.learner)}

    def load_state_tree(self, tree):
        self.learner = ck.learner_from_tree(tree["learner"])


class DropNNAlgorithm(NNAlgorithm):
    name = "dropnn"


class PPRAlgorithm(NNAlgorithm):
    name = "ppr"

    def __init__(self, learner, streams, multiplier=bl.PPR_MULTIPLIER, epochs=bl.SEQUENTIAL_EPOCHS, batch_size=128):
        super().__init__(learner, streams, epochs, batch_size)
        self.multiplier = multiplier
        self.memory = bl.PprMemory(0)

    def train_task(self, task, x, y):
        mem = bl.PprMemory(self.multiplier * len(x), self.memory.inputs, self.memory.targets)
        self.learner, self.memory = bl.ppr_train_task(self.learner, mem, x, y, self.streams, self.epochs,
                                                      self.batch_size)

    def state_tree(self):
        return {"learner": ck.learner_to_tree(self.learner), "multiplier": self.multiplier,
                "memory": {"capacity": self.memory.capacity, "inputs": self.memory.inputs,
                           "targets": self.memory.targets}}

    def load_state_tree(self, tree):
        self.learner = ck.learner_from_tree(tree["learner"])
        self.multiplier = tree["multiplier"]
        m = tree["memory"]
        self.memory = bl.PprMemory(m["capacity"], m["inputs"], m["targets"])


class EWCAlgorithm(NNAlgorithm):
    name = "ewc"

    def __init__(self, learner, streams, lam=bl.EWC_LAMBDA, epochs=bl.SEQUENTIAL_EPOCHS, batch_size=128):
        super().__init__(learner, streams, epochs, batch_size)
        self.ewc = bl.EwcState(f32(lam))

    def train_task(self, task, x, y):
        self.learner, self.ewc = bl.ewc_train_task(self.learner, self.ewc, x, y, self.streams, self.epochs,
                                                   self.batch_size)

    def state_tree(self):
        return {"learner": ck.learner_to_tree(self.learner), "lam": self.ewc.lam,
                "anchors": [dict(a) for a in self.ewc.anchors], "fishers": [dict(f) for f in self.ewc.fishers]}

    def load_state_tree(self, tree):
        self.learner = ck.learner_from_tree(tree["learner"])
        self.ewc = bl.EwcState(tree["lam"], [dict(a) for a in tree["anchors"]], [dict(f) for f in tree["fishers"]])


class DGRAlgorithm(SequentialAlgorithm):
    """A single large memory consolidated after every task."""

    name = "dgr"

    def __init__(self, dgm: DgmState, streams: Streams, settings: TrainSettings = TrainSettings()):
        super().__init__(streams)
        self.dgm = dgm
        self.settings = settings
        self.budgets: list = []

    def train_task(self, task, x, y):
        self.dgm = dgr_update(self.dgm, x, y, {task: 1}, self.streams, self.settings)
        self.budgets.append(self.dgm.last_budget)

    def predict(self, task, x):
        return dgm_predict(self.dgm, x)

    @property
    def generator_sample_epochs(self):
        return self.dgm.generator_sample_epochs

    def state_tree(self):
        return {"dgm": ck.dgm_to_tree(self.dgm), "budgets": [ck.budget_to_tree(b) for b in self.budgets]}

    def load_state_tree(self, tree):
        self.dgm = ck.dgm_from_tree(tree["dgm"])
        self.budgets = [ck.budget_from_tree(b) for b in tree["budgets"]]


class DGDMNAlgorithm(SequentialAlgorithm):
    name = "dgdmn"

    def __init__(self, state: dm.DgdmnState, streams: Streams, settings: dm.DualSettings = dm.DualSettings()):
        super().__init__(streams)
        self.state = state
        self.settings = settings

    def train_task(self, task, x, y):
        self.state = dm.train_task(self.state, task, x, y, self.streams, self.settings)

    def predict(self, task, x):
        return dm.predict(self.state, task, x)

    def finish(self) -> bool:
        if all(s.free for s in self.state.sttm_pool):
            return False
        self.state = dm.sleep(self.state, self.streams, self.settings)
        return True

    @property
    def generator_sample_epochs(self):
        return self.state.generator_sample_epochs

    def state_tree(self):
        s = self.state
        return {
            "ltm": ck.dgm_to_tree(s.ltm),
            "slots": [{"dgm": ck.dgm_to_tree(sl.dgm), "assigned_task": sl.assigned_task,
                       "trained_sample_count": sl.trained_sample_count} for sl in s.sttm_pool],
            "sttm_arch": ck.arch_to_tree(s.sttm_arch),
            "sleep_count": s.sleep_count,
            "anon_counter": s.anon_counter,
            "retired_sample_epochs": s.retired_sample_epochs,
            "budgets": [ck.budget_to_tree(b) for b in s.budgets],
        }

    def load_state_tree(self, tree):
        slots = [dm.SttmSlot(ck.dgm_from_tree(t["dgm"]), t["assigned_task"], t["trained_sample_count"])
                 for t in tree["slots"]]
        self.state = dm.DgdmnState(ck.dgm_from_tree(tree["ltm"]), slots, ck.arch_from_tree(tree["sttm_arch"]),
                                   tree["sleep_count"], tree["anon_counter"], tree["retired_sample_epochs"],
                                   [ck.budget_from_tree(b) for b in tree["budgets"]])


class DGDMNRecogAlgorithm(DGDMNAlgorithm):
    """Ignores task descriptors; slots are found by reconstruction-based recognition."""

    name = "dgdmn-recog"

    def __init__(self, state, streams, gamma_sttm: float, gamma_ltm: float, settings=dm.DualSettings()):
        super().__init__(state, streams, dm.recog_settings(settings, gamma_sttm, gamma_ltm))
        self.gamma_sttm = f32(gamma_sttm)
        self.gamma_ltm = f32(gamma_ltm)

    def train_task(self, task, x, y):
        self.state = dm.train_task_descriptorfree(self.state, x, y, self.gamma_sttm, self.gamma_ltm,
                                                  self.streams, self.settings)

    def predict(self, task, x):
        return dm.predict_descriptorfree(self.state, x, self.gamma_sttm)

    def state_tree(self):
        tree = super().state_tree()
        tree["gamma"] = [self.gamma_sttm, self.gamma_ltm]
        return tree

    def load_state_tree(self, tree):
        super().load_state_tree(tree)
        self.gamma_sttm, self.gamma_ltm = tree["gamma"]


def make_algorithm(config, input_dim: int, num_classes: int, streams: Streams) -> SequentialAlgorithm:
    """Build a fresh algorithm from a resolved :class:`~dgdmn.config.ExperimentConfig`."""
    algo = config.algo
    init = streams.get("model-init")
    if algo in ("nn", "dropnn", "ppr", "ewc"):
        rate = f32(config.dropout_rate) if algo == "dropnn" else 0.0
        learner = init_learner(input_dim, config.learner_hidden, num_classes, init, dropout_rate=rate)
        args = dict(epochs=config.learner_epochs, batch_size=config.batch_size)
        if algo == "ppr":
            return PPRAlgorithm(learner, streams, config.ppr_multiplier, **args)
        if algo == "ewc":
            return EWCAlgorithm(learner, streams, config.ewc_lambda, **args)
        cls = DropNNAlgorithm if algo == "dropnn" else NNAlgorithm
        return cls(learner, streams, **args)
    arch = MemoryArch(input_dim, num_classes, tuple(config.gen_hidden), config.latent_dim,
                      tuple(config.learner_hidden))
    settings = TrainSettings(config.batch_size, config.learner_epochs, config.generator_epochs, config.warm_start)
    if algo == "dgr":
        return DGRAlgorithm(new_dgm(arch, config.n_max, config.kappa, init), streams, settings)
    state = dm.new_dgdmn(arch, config.n_max, config.kappa, config.n_stm, init)
    dual = dm.DualSettings(settings, settings)
    if algo == "dgdmn":
        return DGDMNAlgorithm(state, streams, dual)
    if algo == "dgdmn-recog":
        if isinstance(config.gamma_sttm, str) or isinstance(config.gamma_ltm, str):
            raise ValueError("recognition thresholds must be calibrated before building the algorithm")
        return DGDMNRecogAlgorithm(state, streams, config.gamma_sttm, config.gamma_ltm, dual)
    raise ValueError(f"unknown algorithm {algo!r}")

