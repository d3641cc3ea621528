import numpy as np
import pytest
import torch
import yaml

from resflow.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from resflow.config import RunConfig, config_to_dict, load_config, parse_config
from resflow.dataset import WindowSpec, build_samples
from resflow.errors import ConfigConflictError, ConfigError
from resflow.evalkit import mae_metric
from resflow.training import TrainConfig, make_variant, train


@pytest.fixture(scope="module")
def trained(small_data):
    attendance, log = small_data
    samples = build_samples(attendance, log, WindowSpec(3, 2))
    fc, _ = train(make_variant("Full", spec=WindowSpec(3, 2)), samples,
                  TrainConfig(max_epochs=3, patience=3))
    return fc, samples


def test_checkpoint_round_trip_is_bit_exact(trained, tmp_path):
    fc, samples = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(fc, path, extra={"variant": "Full"})
    assert path.read_bytes()[:5] == b"EXFC1"
    back, extra = load_checkpoint(path)
    assert extra == {"variant": "Full"}
    for (n, a), (_, b) in zip(fc.model.state_dict().items(), back.model.state_dict().items()):
        assert torch.equal(a, b), n
    y = np.stack([s.y for s in samples])
    assert mae_metric(fc.predict(samples), y) == mae_metric(back.predict(samples), y)


def test_checkpoint_config_conflict(trained, tmp_path):
    fc, _ = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(fc, path)
    with pytest.raises(ConfigConflictError, match="use_adaptive_fusion"):
        load_checkpoint(path, make_variant("w/o AF", spec=WindowSpec(3, 2)))
    load_checkpoint(path, fc.config)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        read_header(p)


def test_config_defaults_and_round_trip(tmp_path):
    assert load_config(None) == RunConfig()
    cfg = parse_config({"window": {"input_days": 3, "horizon_days": 2},
                        "train": {"max_epochs": 4}, "model": {"d_model": 8},
                        "generator": {"num_days": 30,
                                      "shock_calendar": [{"date": "2025-05-03",
                                                          "multiplier": 0.5, "label": "rain"}]}})
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(config_to_dict(cfg)))
    again = load_config(p)
    assert again.window == cfg.window and again.train == cfg.train
    assert again.generator.shock_calendar == cfg.generator.shock_calendar
    assert again.model_config().d_model == 8


@pytest.mark.parametrize("raw", [
    {"trian": {}},
    {"train": {"max_epoch": 3}},
    {"model": {"use_encoder": False}},
    {"generator": {"num_days": 0}},
    {"train_fraction": 1.5},
    {"window": {"out_channels": 3}},
])
def test_config_strict(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_seed_override():
    cfg = RunConfig().with_seed(7)
    assert cfg.generator.seed == 7 and cfg.train.seed == 7
