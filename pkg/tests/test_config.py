import pytest

from mmrl.config import RunConfig, canonical_key, parse_config_text, resolve
from mmrl.errors import ConfigError


def test_defaults_validate_and_hash_is_stable():
    cfg = RunConfig()
    assert len(cfg.hash()) == 16 and cfg.hash() == RunConfig().hash()
    assert cfg.train_config().weights.alpha == 0.7 and cfg.train_config().weights.lam == 0.5


def test_hash_ignores_paths_only():
    a = RunConfig()
    assert a.hash() == RunConfig(run_dir="elsewhere").hash()
    assert a.hash() != RunConfig(seed=1).hash()
    assert a.hash() != RunConfig(alpha=0.5).hash()


def test_precedence_default_file_env_flag():
    text = "seed = 3\nalpha = 0.5  # comment\n\nlambda = 2\n"
    assert resolve(text, env={}).seed == 3
    cfg = resolve(text, env={"MMRL_SEED": "7"})
    assert (cfg.seed, cfg.alpha, cfg.lam) == (7, 0.5, 2.0)
    assert resolve(text, {"seed": 9, "alpha": None}, env={"MMRL_SEED": "7"}).seed == 9
    assert resolve(None, env={"MMRL_SEED": " "}).seed == 0


def test_aliases_and_unknown_keys():
    assert canonical_key("lambda") == "lam" and canonical_key("d_r") == "dr"
    assert canonical_key("reg-kind") == "reg_kind"
    with pytest.raises(ConfigError, match="unknown"):
        parse_config_text("tau = 0.1")
    with pytest.raises(ConfigError):
        parse_config_text("seed 3")
    with pytest.raises(ConfigError):
        parse_config_text("seed = three")


@pytest.mark.parametrize(
    "bad",
    [dict(J=0), dict(J=9), dict(K=-1), dict(dr=0), dict(alpha=1.5), dict(lam=-1.0),
     dict(variant="nope"), dict(reg_kind="huber"), dict(seeds="0,x"), dict(classes=1)],
)
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_text_round_trip():
    cfg = RunConfig(seed=4, variant="w/o V", alpha=0.3)
    assert resolve(cfg.to_text(), env={}) == cfg
