import pytest

from dgdmn.config import ConfigError, ExperimentConfig


def test_defaults_resolve_per_suite():
    cfg = ExperimentConfig(suite="tdigits-mini").resolve([2000] * 20)
    assert cfg.n_stm == 5 and cfg.learner_hidden == (36, 36) and cfg.n_max == 20000
    cfg = ExperimentConfig(suite="permnist-mini").resolve([12000] * 6)
    assert (cfg.train_count, cfg.test_count) == (12000, 1000)


@pytest.mark.parametrize("kwargs, field", [
    ({"kappa": 1.5}, "kappa"),
    ({"kappa": 0.0}, "kappa"),
    ({"algo": "sgd"}, "algo"),
    ({"suite": "nonsense"}, "suite"),
    ({"n_stm": 0}, "n_stm"),
    ({"dropout_rate": 1.0}, "dropout_rate"),
    ({"algo": "dgdmn-recog"}, "gamma_sttm"),
    ({"algo": "dgdmn", "gamma_sttm": 1.0}, "gamma_sttm"),
    ({"learner_hidden": ()}, "learner_hidden"),
])
def test_validation_names_the_field(kwargs, field):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig(**kwargs).validate()
    assert exc.value.field == field
    assert str(exc.value).startswith(field + ":")


def test_resolve_checks_capacity():
    with pytest.raises(ConfigError, match="n_max"):
        ExperimentConfig(n_max=10).resolve([50, 50])
    with pytest.raises(ConfigError, match="kappa"):
        ExperimentConfig(n_max=50, kappa=0.01).resolve([50])


def test_yaml_and_gamma_shorthand(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("algo: dgdmn-recog\ngamma: auto\nlearner_hidden: [8, 8]\n")
    cfg = ExperimentConfig.from_yaml(p)
    assert cfg.gamma_sttm == cfg.gamma_ltm == "auto" and cfg.learner_hidden == (8, 8)
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_dict({"bogus": 1})


def test_hash_ignores_output_only():
    a = ExperimentConfig(output="x")
    assert a.hash() == ExperimentConfig(output="y").hash()
    assert a.hash() != ExperimentConfig(seed=1).hash()
