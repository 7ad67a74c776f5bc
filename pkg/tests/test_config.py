import pytest

from gramnoise.config import PROFILES, ConfigError, parse_config
from gramnoise.dataset import NormalizationSettings
from gramnoise.sampler import SamplerRun
from gramnoise.trainer import TrainingConfig


def test_empty_config_gives_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("")
    cfg = parse_config(tmp_path / "c.yaml")
    assert cfg.fs == 22050 and cfg.sample_count == 16962
    assert cfg.training == TrainingConfig()
    assert cfg.normalization == NormalizationSettings()
    assert cfg.sampler == SamplerRun()
    assert cfg.network.depth == 6 and cfg.network.downsample_factors == [2, 3, 11, 1, 1, 1]
    assert cfg.guide is None
    assert parse_config().training == cfg.training


def test_documented_defaults():
    cfg = parse_config()
    assert cfg.sampler.steps == 150
    assert cfg.normalization.gain_db == -10.0
    assert cfg.training.learning_rate == 2e-4 and cfg.training.ema_rate == 0.999


def test_unknown_key_is_named(tmp_path):
    (tmp_path / "c.yaml").write_text("training:\n  learnig_rate: 0.1\n")
    with pytest.raises(ConfigError, match="training.learnig_rate"):
        parse_config(tmp_path / "c.yaml")
    with pytest.raises(ConfigError, match="unknown key colour"):
        parse_config(None, ["colour=red"])


def test_override_learning_rate():
    cfg = parse_config("desk", ["training.learning_rate=2e-4"])
    assert cfg.training.learning_rate == 2e-4
    assert isinstance(cfg.training.learning_rate, float)


def test_overrides_apply_after_file(tmp_path):
    (tmp_path / "c.yaml").write_text("fs: 8000\nsampler:\n  steps: 25\n")
    cfg = parse_config(tmp_path / "c.yaml", ["sampler.steps=5", "normalization.mode=literal"])
    assert cfg.sampler.steps == 5 and cfg.fs == 8000 and cfg.sample_count == 6154
    assert cfg.normalization.mode == "literal"


def test_parse_error_reports_position(tmp_path):
    (tmp_path / "c.yaml").write_text("fs: 8000\ntraining:\n  lr: [1, 2\n")
    with pytest.raises(ConfigError, match=r"c\.yaml:\d+:\d+"):
        parse_config(tmp_path / "c.yaml")


def test_validation_errors_name_section():
    with pytest.raises(ConfigError, match="training"):
        parse_config(None, ["training.ema_rate=1.5"])
    with pytest.raises(ConfigError, match="network"):
        parse_config(None, ["network.attention_heads=3"])
    with pytest.raises(ConfigError):
        parse_config(None, ["noequals"])
    with pytest.raises(ConfigError):
        parse_config("missing-file.yaml")


def test_guide_section(tmp_path):
    (tmp_path / "c.yaml").write_text("fs: 8000\nguide:\n  preset: hiss-thumps\n")
    assert parse_config(tmp_path / "c.yaml").guide.thumps
    (tmp_path / "d.yaml").write_text("fs: 8000\nguide:\n  hum:\n    fundamental: 60.0\n")
    assert parse_config(tmp_path / "d.yaml").guide.hum.fundamental == 60.0
    (tmp_path / "e.yaml").write_text("guide:\n  preset: hiss\n  extra: 1\n")
    with pytest.raises(ConfigError, match="guide.extra"):
        parse_config(tmp_path / "e.yaml")


def test_desk_profile():
    cfg = parse_config("desk")
    assert cfg.sample_count == 6154
    assert cfg.network.downsample_factors == [2, 17, 1]
    assert cfg.training.total_iterations == 2000 and cfg.training.batch_size == 4
    assert "desk" in PROFILES


def test_digest_tracks_content():
    assert parse_config("desk").digest() == parse_config("desk").digest()
    assert parse_config("desk").digest() != parse_config("desk", ["sampler.steps=5"]).digest()
