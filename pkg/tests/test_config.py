"""Flat key-value config format: round trips and rejection of unknown keys."""

import pytest

from deformseg.config import (ConfigBundle, ModelConfig, SceneConfig,
                              TrainConfig, desk_bundle, parse_config_text,
                              serialize_config)
from deformseg.errors import ConfigError


def test_serialize_parse_round_trip():
    bundle = ConfigBundle(ModelConfig.desk(init_seed=9),
                          TrainConfig(epochs=7, base_lr=1e-3),
                          SceneConfig(seed=4, palette_shift=0.2))
    text = serialize_config(bundle)
    back = parse_config_text(text)
    assert back.model == bundle.model
    assert back.train == bundle.train
    assert back.scene == bundle.scene


def test_defaults_apply_for_missing_keys():
    bundle = parse_config_text("model.num_classes = 6\nmodel.embed_width = 32\n"
                               "model.width_factor = 0.125\nmodel.input_size = 128\n")
    assert bundle.model.num_classes == 6
    assert bundle.train.epochs == 100          # untouched default
    assert bundle.train.base_lr == 2e-4
    assert bundle.train.weight_decay == 5e-4
    assert bundle.train.batch_size == 2


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("model.nonexistent = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config_text("banana.count = 3\n")


def test_bad_value_is_an_error():
    with pytest.raises(ConfigError, match="bad value"):
        parse_config_text("train.epochs = soon\n")


def test_comments_and_blank_lines_ok():
    bundle = parse_config_text("# a comment\n\ntrain.epochs = 3  # trailing\n")
    assert bundle.train.epochs == 3


def test_validation_rejects_inconsistent_model():
    with pytest.raises(ConfigError, match="divisible"):
        parse_config_text("model.input_size = 100\n")
    with pytest.raises(ConfigError, match="reduction"):
        parse_config_text("model.embed_width = 24\nmodel.reduction_ratio = 16\n"
                          "model.width_factor = 0.125\nmodel.input_size = 128\n"
                          "model.gn_group_1 = 24\nmodel.gn_group_2 = 12\n"
                          "model.gn_group_3 = 6\n")


def test_desk_bundle_is_valid():
    bundle = desk_bundle()
    bundle.validate()
    assert bundle.model.grid_size == 8
    assert bundle.model.backbone_channels == (32, 64, 128, 256)
    assert bundle.model.decoder_widths == ((128, 32), (32, 16), (16, 8))


def test_paper_scale_defaults_are_valid():
    cfg = ModelConfig().validate()
    assert cfg.grid_size == 64
    assert cfg.backbone_channels == (256, 512, 1024, 2048)
    assert cfg.decoder_widths == ((1024, 256), (256, 128), (128, 64))
    assert cfg.gn_groups == (32, 16, 8)
    assert cfg.num_classes == 19
