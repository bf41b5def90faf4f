import json

import pytest

from config import (
    ConfigError,
    ExperimentConfig,
    config_echo,
    experiment_config_from_dict,
    full_scale_synth_config,
    load_experiment_config,
)


def test_empty_config_gives_defaults():
    cfg = experiment_config_from_dict({})
    assert (cfg.fed.rounds, cfg.fed.local_epochs, cfg.fed.client_lr) == (200, 5, 0.01)
    assert (cfg.finetune.epochs, cfg.finetune.lr, cfg.finetune.optimizer) == (200, 0.00005, "adam")
    assert cfg.model.encoder_lengths() == [64, 32, 16, 8]
    assert cfg.model.decoder_lengths()[-1] == 128


def test_seeds_follow_experiment_seed():
    cfg = experiment_config_from_dict({"seed": 7, "finetune": {"seed": 2}})
    assert cfg.fed.seed == 7
    assert cfg.finetune.seed == 2
    assert cfg.data_seed == 7
    assert experiment_config_from_dict({"seed": 7, "data": {"split_seed": 1}}).data_seed == 1


@pytest.mark.parametrize("raw,key", [
    ({"bogus": 1}, "bogus"),
    ({"fed": {"round": 3}}, "fed.round"),
    ({"data": {"synth": {"datasets": [{"tag": "a", "n_clients": 1, "classes": ["W"], "size": 2}]}}},
     "data.synth.datasets[0].size"),
])
def test_unknown_keys_name_their_path(raw, key):
    with pytest.raises(ConfigError, match=key.replace("[", r"\[").replace("]", r"\]")):
        experiment_config_from_dict(raw)


@pytest.mark.parametrize("raw", [
    {"arm": "federated"},
    {"workers": 0},
    {"fed": {"client_fraction": 0}},
    {"finetune": {"lr": 0}},
    {"finetune": {"optimizer": "sgd"}},
    {"model": {"output_padding": 2}},
    {"model": {"window_len": 100}},
    {"data": {"source": "files"}},
    {"data": {"synth": {"datasets": []}}},
    {"data": {"synth": {"datasets": [{"tag": "a", "n_clients": 1, "classes": ["FLY"]}]}}},
])
def test_invalid_values(raw):
    with pytest.raises(ConfigError):
        experiment_config_from_dict(raw)


def test_load_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"arm": "conventional", "fed": {"rounds": 3}}))
    cfg = load_experiment_config(str(path))
    assert cfg.arm == "conventional"
    assert cfg.fed.rounds == 3


def test_invalid_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_experiment_config(str(path))


def test_echo_is_plain_json():
    echo = config_echo(ExperimentConfig())
    assert json.loads(json.dumps(echo)) == echo
    assert echo["model"]["latent_dim"] == 128


def test_full_scale_preset():
    cfg = full_scale_synth_config()
    cfg.validate()
    assert cfg.n_clients == 80


@pytest.mark.parametrize("raw,key", [
    ({"fed": {"rounds": 1.5}}, "fed.rounds"),
    ({"fed": {"rounds": "20"}}, "fed.rounds"),
    ({"finetune": {"freeze_encoder": "false"}}, "finetune.freeze_encoder"),
    ({"workers": True}, "workers"),
    ({"finetune": {"lr": True}}, "finetune.lr"),
    ({"fed": {"client_lr": "0.01"}}, "fed.client_lr"),
    ({"arm": 3}, "arm"),
    ({"data": {"split_seed": 1.0}}, "data.split_seed"),
    ({"data": {"synth": {"datasets": [{"tag": "a", "n_clients": 1, "classes": ["W", 2]}]}}},
     "data.synth.datasets[0].classes[1]"),
    ({"data": {"synth": {"datasets": [{"tag": "a", "n_clients": 1, "classes": ["W"], "class_weights": {"W": "x"}}]}}},
     "data.synth.datasets[0].class_weights.W"),
])
def test_mistyped_values_name_their_path(raw, key):
    with pytest.raises(ConfigError, match=key.replace("[", r"\[").replace("]", r"\]").replace(".", r"\.")):
        experiment_config_from_dict(raw)


def test_integers_widen_to_float():
    cfg = experiment_config_from_dict({"fed": {"client_lr": 1, "client_fraction": 1}, "data": {"split_seed": None}})
    assert isinstance(cfg.fed.client_lr, float)
    assert cfg.fed.client_fraction == 1.0
    assert cfg.data.split_seed is None
    assert experiment_config_from_dict({"finetune": {"freeze_encoder": False}}).finetune.freeze_encoder is False


@pytest.mark.parametrize("raw", [
    {"model": {"in_channels": 3}},
    {"model": {"window_len": 64, "n_conv_layers": 3}},
    {"classifier": {"n_classes": 6}},
])
def test_model_must_match_window_format(raw):
    with pytest.raises(ConfigError):
        experiment_config_from_dict(raw)
