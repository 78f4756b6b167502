import pytest

from starpo.config import ExperimentConfig, load_config
from starpo.errors import ConfigError


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.train.algorithm == "starpo-grpo" and cfg.mode == "grpo" and not cfg.stabilized
    assert (cfg.rollout.P, cfg.rollout.N, cfg.rollout.max_turns) == (8, 16, 5)
    assert cfg.optimize.lr == 0.01 and cfg.optimize.update_batch_size == 32
    assert cfg.filter_config().retain_fraction == 1.0
    eff = cfg.effective_optimize()
    assert eff.eps_high == 0.2 and eff.kl_coeff == cfg.optimize.kl_coeff


def test_starpo_s_effective_config():
    cfg = ExperimentConfig.from_dict({"train": {"algorithm": "starpo-s-ppo"}})
    assert cfg.mode == "ppo" and cfg.stabilized
    fc = cfg.filter_config()
    assert fc.retain_fraction == 0.25 and fc.kl_removed and fc.clip_higher
    eff = cfg.effective_optimize()
    assert eff.kl_coeff == 0.0 and eff.eps_high == 0.28 and eff.eps_low == 0.2


def test_starpo_s_overrides():
    cfg = ExperimentConfig.from_dict({"train": {"algorithm": "starpo-s-grpo"},
                                      "starpo_s": {"retain_fraction": 0.5, "preset": False}})
    assert cfg.filter_config().retain_fraction == 0.5
    assert cfg.effective_optimize().eps_high == 0.2


@pytest.mark.parametrize("data, path", [
    ({"nope": {}}, "nope"),
    ({"rollout": {"Q": 1}}, "rollout.Q"),
    ({"rollout": {"P": "8"}}, "rollout.P"),
    ({"rollout": {"temperature": True}}, "rollout.temperature"),
    ({"rollout": {"N": 1}}, "rollout"),
    ({"optimize": {"eps_low": 0.5, "eps_high": 0.2}}, "optimize"),
    ({"train": {"algorithm": "a2c"}}, "train"),
    ({"env": {"name": "chess"}}, "env"),
    ({"starpo_s": {"retain_fraction": 0.0}}, "starpo_s"),
    ({"diagnostics": {"spike_factor": 1.0}}, "diagnostics"),
])
def test_errors_name_field_path(data, path):
    with pytest.raises(ConfigError, match=f"^{path}"):
        ExperimentConfig.from_dict(data)


def test_int_accepted_for_float():
    assert ExperimentConfig.from_dict({"optimize": {"lr": 1}}).optimize.lr == 1


def test_toml_load_and_round_trip(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[env]\nname = "sokoban"\n[rollout]\nP = 4\nN = 4\n[train]\nalgorithm = "starpo-ppo"\nloops = 3\n')
    cfg = load_config(path)
    assert cfg.env.name == "sokoban" and cfg.rollout.P == 4 and cfg.train.loops == 3
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    path.write_text("[env\n")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
