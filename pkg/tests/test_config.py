import pytest

from indigo.config import DESK_DEFAULTS, ExperimentConfig, config_from_mapping, parse_config
from indigo.errors import ConfigError


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = parse_config(None)
    assert cfg.values == DESK_DEFAULTS and cfg.preset == "desk"
    path = tmp_path / "echo.toml"
    path.write_text(cfg.replace(**{"loss.lambda": 0.3, "protocol.sources": ["photo"]}).to_toml())
    back = parse_config(path)
    assert back["loss.lambda"] == 0.3 and back["protocol.sources"] == ["photo"]


def test_tables_and_dotted_keys(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('"fusion.K" = 2\n[loss]\nlambda = 0.5\n')
    cfg = parse_config(path)
    assert cfg["fusion.K"] == 2 and cfg["loss.lambda"] == 0.5


def test_paper_scale_preset():
    cfg = parse_config(None, "paper-scale")
    assert cfg["fusion.token_dim"] == 384 and cfg["data.image_size"] == 224 and cfg["visual.depth"] == 12
    assert config_from_mapping({"preset": "paper-scale"}, "desk")["visual.dim"] == 64


def test_int_accepted_for_float():
    assert config_from_mapping({"loss": {"lambda": 1}})["loss.lambda"] == 1.0


@pytest.mark.parametrize("tree,needle", [
    ({"loss": {"lamda": 0.5}}, "loss.lamda"),
    ({"loss": {"lambda": 1.5}}, "loss.lambda"),
    ({"loss": {"lambda": "high"}}, "loss.lambda"),
    ({"fusion": {"K": 1.5}}, "fusion.K"),
    ({"fusion": {"mechanism": "gating"}}, "mechanism"),
    ({"fusion": {"heads": 5}}, "fusion.heads"),
    ({"pipeline": {"kind": "resnet"}}, "pipeline.kind"),
    ({"pipeline": {"kind": "zero_shot", "finetune_mvit": "last_layer"}}, "finetune_mvit"),
    ({"protocol": {"seeds": []}}, "protocol.seeds"),
    ({"protocol": {"seeds": ["a"]}}, "protocol.seeds"),
    ({"protocol": {"selection": "oracle"}}, "protocol.selection"),
    ({"protocol": {"data_fraction": 0.0}}, "protocol.data_fraction"),
    ({"protocol": {"setting": "half"}}, "protocol.setting"),
    ({"optim": {"nesterov": 1}}, "optim.nesterov"),
    ({"schedule": {"epochs": -1}}, "schedule.epochs"),
    ({"stub": {"D": 9}}, "stub.D"),
    ({"stub": {"optimizer": "lbfgs"}}, "stub.optimizer"),
    ({"preset": "huge"}, "preset"),
])
def test_config_errors_name_the_key(tree, needle):
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        config_from_mapping(tree)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[loss\n")
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_replace_checks_keys_and_types():
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError):
        cfg.replace(**{"loss.gamma": 1.0})
    with pytest.raises(ConfigError):
        cfg.replace(**{"fusion.K": "three"})
    assert cfg.replace(**{"fusion.K": 12})["fusion.K"] == 12 and cfg["fusion.K"] == 3


def test_typed_views():
    cfg = ExperimentConfig()
    assert cfg.fusion_config().token_dim == 96
    assert cfg.loss_config().lam == 1.0
    stub = cfg.stub_config(["bar"], ["photo"])
    assert stub.bundle.words == ["bar", "photo"] and stub.optimizer == "adam"
    assert cfg.visual_pretrain_config().steps == 6000
    assert cfg.echo()["preset"] == "desk"
