"""Deep generative memories and the generative-replay consolidation step.

A memory (``DgmState``) pairs a VAE generator with a softmax learner, a
dictionary of task descriptors it has absorbed, and an ``age`` counting the
samples consolidated so far. :func:`dgr_update` folds a new batch into a memory
while replaying self-generated samples of everything it already knows, under a
fixed sample capacity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .generative import VaeParams, init_vae, recons_loss, vae_reconstruct, vae_sample, vae_train
from .learner import LearnerParams, init_learner, learner_predict, learner_train
from .numerics import NonFiniteError, Streams

INTENSITY_FLOOR = 1e-6
RECOG_EPOCH_STEP = 5
RECOG_EPOCH_CAP = 50


class TrainingDivergence(RuntimeError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"{phase} training diverged: {cause}")
        self.phase = phase
        self.layer = getattr(cause, "layer", None)


def f32(value: float) -> float:
    """Round a scalar hyperparameter to the nearest float32 so checkpoints hold it exactly."""
    return float(np.float32(value))


@dataclass(frozen=True)
class MemoryArch:
    """Layer widths for one memory's generator and learner."""

    input_dim: int
    num_classes: int
    gen_hidden: tuple = (128, 64)
    latent_dim: int = 16
    learner_hidden: tuple = (24, 24)

    def halved(self) -> "MemoryArch":
        half = lambda ws: tuple(max(1, w // 2) for w in ws)  # noqa: E731
        return replace(self, gen_hidden=half(self.gen_hidden), latent_dim=max(1, self.latent_dim // 2),
                       learner_hidden=half(self.learner_hidden))


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 128
    learner_epochs: int = 6
    generator_epochs: int = 25
    warm_start: bool = True
    # when set, generator training runs in 5-epoch steps until recog_loss < gamma
    recog_gamma: float | None = None


@dataclass
class DgmState:
    generator: VaeParams
    learner: LearnerParams
    dictionary: dict
    age: int
    n_max: int
    kappa: float
    arch: MemoryArch
    generator_sample_epochs: int = 0
    last_budget: "ReplayBudget | None" = field(default=None, compare=False)

    def __post_init__(self):
        if self.age < 0:
            raise ValueError("age must be non-negative")
        if not 0 < self.kappa <= 1:
            raise ValueError("kappa must lie in (0, 1]")
        if self.kappa * self.n_max < 1:
            raise ValueError("kappa * n_max must be at least 1")


def new_dgm(arch: MemoryArch, n_max: int, kappa: float, rng: np.random.Generator, dtype=np.float32) -> DgmState:
    gen = init_vae(arch.input_dim, arch.gen_hidden, arch.latent_dim, rng, dtype)
    learner = init_learner(arch.input_dim, arch.learner_hidden, arch.num_classes, rng, dtype=dtype)
    return DgmState(gen, learner, {}, 0, int(n_max), f32(kappa), arch)


@dataclass(frozen=True)
class ReplayBudget:
    n_tasks: int
    n_gen: int

    @property
    def n_total(self) -> int:
        return self.n_tasks + self.n_gen

    @property
    def eta_tasks(self) -> float:
        return self.n_tasks / self.n_total if self.n_total else 1.0


def compute_budget(x_count: int, age: int, n_max: int, kappa: float) -> ReplayBudget:
    """Split the capacity between incoming and regenerated samples.

    Fractions are evaluated exactly; the incoming share rounds half-up and the
    generated share takes the remainder so that the total is exactly ``n_max``.
    """
    if x_count < 1:
        raise ValueError("nothing to learn: x_count must be >= 1")
    if not 0 < kappa <= 1:
        raise ValueError("kappa must lie in (0, 1]")
    if x_count + age <= n_max:
        return ReplayBudget(x_count, age)
    eta = max(Fraction(kappa), Fraction(x_count, x_count + age))
    n_tasks = math.floor(eta * n_max + Fraction(1, 2))
    n_total = n_max
    if n_tasks >= x_count:
        n_tasks = x_count
    return ReplayBudget(n_tasks, n_total - n_tasks)


def merge_dictionaries(*dicts) -> dict:
    out: dict = {}
    for d in dicts:
        for k, v in d.items():
            if v < 1:
                raise ValueError(f"descriptor {k!r} has non-positive count {v}")
            out[k] = out.get(k, 0) + int(v)
    return out


def recog_loss(dgm: DgmState, x) -> float:
    """Mean over the batch of reconstruction loss divided by pixel intensity."""
    x = np.asarray(x)
    intensity = np.maximum(x.sum(axis=1, dtype=np.float64), INTENSITY_FLOOR)
    return float(np.mean(recons_loss(dgm.generator, x) / intensity))


def recognize(dgm: DgmState, x, gamma: float) -> bool:
    if len(x) == 0:
        raise ValueError("cannot recognise an empty batch")
    return recog_loss(dgm, x) < gamma


def dgm_predict(dgm: DgmState, x):
    return learner_predict(dgm.learner, x)


def _train_generator(dgm: DgmState, x_tr, x_tasks, settings: TrainSettings, rng) -> tuple[VaeParams, int]:
    if settings.recog_gamma is None:
        gen = vae_train(dgm.generator, x_tr, settings.generator_epochs, rng, batch_size=settings.batch_size)
        return gen, settings.generator_epochs
    gen, done = dgm.generator, 0
    probe = replace(dgm)
    while done < RECOG_EPOCH_CAP:
        gen = vae_train(gen, x_tr, RECOG_EPOCH_STEP, rng, batch_size=settings.batch_size)
        done += RECOG_EPOCH_STEP
        probe.generator = gen
        if recog_loss(probe, x_tasks) < settings.recog_gamma:
            break
    return gen, done


def dgr_update(dgm: DgmState, x, y, d_tasks: dict, streams: Streams, settings: TrainSettings = TrainSettings()) -> DgmState:
    """Consolidate ``(x, y)`` into ``dgm`` by generative replay; returns a new state."""
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} inputs but {len(y)} labels")
    if not d_tasks:
        raise ValueError("d_tasks must name at least one task")
    budget = compute_budget(len(x), dgm.age, dgm.n_max, dgm.kappa)

    if budget.n_tasks < len(x):
        keep = np.sort(streams.get("subsample").choice(len(x), budget.n_tasks, replace=False))
        x_tasks, y_tasks = x[keep], y[keep]
    else:
        x_tasks, y_tasks = x, y

    x_gen = vae_sample(dgm.generator, budget.n_gen, streams.get("latent"))
    y_gen = learner_predict(dgm.learner, x_gen)
    x_tr = np.concatenate([x_tasks.astype(x_gen.dtype, copy=False), x_gen])
    y_tr = np.concatenate([y_tasks.astype(np.int64), y_gen])

    dictionary = merge_dictionaries(dgm.dictionary, d_tasks)
    age = dgm.age + budget.n_total

    generator, learner = dgm.generator, dgm.learner
    if not settings.warm_start:
        init = streams.get("init")
        generator = init_vae(generator.input_dim, generator.hidden, generator.latent_dim, init, x_gen.dtype)
        learner = init_learner(learner.input_dim, learner.hidden, learner.num_classes, init,
                               learner.dropout_rate, x_gen.dtype)
    try:
        generator, epochs = _train_generator(replace(dgm, generator=generator), x_tr, x_tasks, settings,
                                             streams.get("generator"))
    except NonFiniteError as exc:
        raise TrainingDivergence("generator", exc) from exc
    x_recon = vae_reconstruct(generator, x_tasks)
    x_tr = np.concatenate([x_recon, x_gen])
    try:
        learner = learner_train(learner, x_tr, y_tr, settings.learner_epochs, streams.get("shuffle"),
                                batch_size=settings.batch_size)
    except NonFiniteError as exc:
        raise TrainingDivergence("learner", exc) from exc

    return replace(dgm, generator=generator, learner=learner, dictionary=dictionary, age=age,
                   generator_sample_epochs=dgm.generator_sample_epochs + len(x_tr) * epochs,
                   last_budget=budget)
