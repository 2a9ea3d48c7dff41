"""Experiment configuration: a flat YAML mapping with command-line overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import yaml

from .suites import BUILTIN

ALGORITHMS = ("nn", "dropnn", "ppr", "ewc", "dgr", "dgdmn", "dgdmn-recog")

# Desk-scale defaults per builtin suite; suite files fall back to "default".
SUITE_DEFAULTS = {
    "default": dict(learner_hidden=(24, 24), gen_hidden=(128, 64), latent_dim=16, n_stm=2, kappa=0.05,
                    n_max_fraction=1.0),
    "digits-mini": dict(learner_hidden=(24, 24), gen_hidden=(128, 64), latent_dim=16, n_stm=2, kappa=0.05,
                        n_max_fraction=1.0),
    "permnist-mini": dict(learner_hidden=(48, 48), gen_hidden=(256, 128), latent_dim=16, n_stm=2, kappa=0.05,
                          n_max_fraction=1.0, train_count=12000, test_count=1000),
    "tdigits-mini": dict(learner_hidden=(36, 36), gen_hidden=(128, 64), latent_dim=16, n_stm=5, kappa=0.05,
                         n_max_fraction=0.5),
    "glyphs": dict(learner_hidden=(24, 24), gen_hidden=(128, 64), latent_dim=16, n_stm=1, kappa=0.5,
                   n_max_fraction=1.0),
}


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    suite: str = "digits-mini"
    algo: str = "dgdmn"
    seed: int = 0
    n_max: int | None = None
    kappa: float | None = None
    n_stm: int | None = None
    gamma_sttm: float | str | None = None  # a number, or "auto" to calibrate
    gamma_ltm: float | str | None = None
    learner_epochs: int = 6
    generator_epochs: int = 25
    joint_epochs: int = 20
    batch_size: int = 128
    learner_hidden: tuple | None = None
    gen_hidden: tuple | None = None
    latent_dim: int | None = None
    train_count: int | None = None
    test_count: int | None = None
    warm_start: bool = True
    ewc_lambda: float = 100.0
    ppr_multiplier: int = 3
    dropout_rate: float = 0.2
    joint: bool = False
    mnist_dir: str | None = None
    output: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        d = dict(d)
        if "gamma" in d:
            g = d.pop("gamma")
            d.setdefault("gamma_sttm", g)
            d.setdefault("gamma_ltm", g)
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration field")
        for k in ("learner_hidden", "gen_hidden"):
            if d.get(k) is not None:
                d[k] = tuple(int(w) for w in d[k])
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError("config", f"{path} must hold a mapping")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("learner_hidden", "gen_hidden"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def hash(self) -> str:
        """sha256 of the canonical JSON form, ignoring where outputs go."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @property
    def suite_defaults(self) -> dict:
        return SUITE_DEFAULTS.get(self.suite, SUITE_DEFAULTS["default"])

    def sample_counts(self) -> tuple[int, int]:
        """Per-task train and test sizes for builtin suites."""
        d = self.suite_defaults
        return (self.train_count or d.get("train_count", 2000), self.test_count or d.get("test_count", 500))

    def resolve(self, task_sizes) -> "ExperimentConfig":
        """Fill unset fields from the suite defaults and validate against the suite."""
        self.validate()
        dflt = self.suite_defaults
        out = replace(self)
        for k in ("learner_hidden", "gen_hidden", "latent_dim", "n_stm", "kappa"):
            if getattr(out, k) is None:
                setattr(out, k, dflt[k])
        out.train_count, out.test_count = self.sample_counts()
        if out.n_max is None:
            out.n_max = max(int(sum(task_sizes) * dflt["n_max_fraction"]), max(task_sizes))
        out.validate()
        if out.n_max < max(task_sizes):
            raise ConfigError("n_max", f"{out.n_max} is smaller than the largest task ({max(task_sizes)} samples)")
        if out.algo in ("dgr", "dgdmn", "dgdmn-recog") and out.kappa * out.n_max < 1:
            raise ConfigError("kappa", f"kappa * n_max = {out.kappa * out.n_max} must be at least 1")
        return out

    def validate(self) -> None:
        if self.algo not in ALGORITHMS:
            raise ConfigError("algo", f"unknown algorithm {self.algo!r}; choose from {', '.join(ALGORITHMS)}")
        if not self.suite:
            raise ConfigError("suite", "a builtin suite name or suite file path is required")
        if self.suite not in BUILTIN and not self.suite.endswith((".yaml", ".yml")):
            raise ConfigError("suite", f"{self.suite!r} is neither a builtin ({', '.join(BUILTIN)}) nor a .yaml file")
        if self.kappa is not None and not 0 < self.kappa <= 1:
            raise ConfigError("kappa", f"must lie in (0, 1], got {self.kappa}")
        if self.n_stm is not None and self.n_stm < 1:
            raise ConfigError("n_stm", f"must be a positive integer, got {self.n_stm}")
        if self.n_max is not None and self.n_max < 1:
            raise ConfigError("n_max", f"must be positive, got {self.n_max}")
        for k in ("learner_epochs", "generator_epochs", "joint_epochs", "batch_size", "train_count", "test_count"):
            if getattr(self, k) is not None and getattr(self, k) < 1:
                raise ConfigError(k, f"must be positive, got {getattr(self, k)}")
        if self.latent_dim is not None and self.latent_dim < 1:
            raise ConfigError("latent_dim", f"must be positive, got {self.latent_dim}")
        for k in ("learner_hidden", "gen_hidden"):
            v = getattr(self, k)
            if v is not None and (len(v) == 0 or min(v) < 1):
                raise ConfigError(k, f"needs at least one positive width, got {v}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate", f"must lie in [0, 1), got {self.dropout_rate}")
        if self.ewc_lambda < 0:
            raise ConfigError("ewc_lambda", f"must be non-negative, got {self.ewc_lambda}")
        if self.ppr_multiplier < 0:
            raise ConfigError("ppr_multiplier", f"must be non-negative, got {self.ppr_multiplier}")
        gammas = (self.gamma_sttm, self.gamma_ltm)
        if self.algo == "dgdmn-recog":
            for name, g in zip(("gamma_sttm", "gamma_ltm"), gammas):
                if g is None:
                    raise ConfigError(name, "dgdmn-recog needs a recognition threshold (--gamma)")
                if g != "auto" and (isinstance(g, str) or not g > 0):
                    raise ConfigError(name, f"must be a positive number or 'auto', got {g!r}")
        elif any(g is not None for g in gammas):
            raise ConfigError("gamma_sttm" if gammas[0] is not None else "gamma_ltm",
                              "recognition thresholds only apply to dgdmn-recog")
