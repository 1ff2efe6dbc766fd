from pathlib import Path

import pytest

from src.config import (
    SEED_ENV,
    config_from_dict,
    config_hash,
    load_stage_config,
    make_stage_config,
    save_stage_config,
)
from src.errors import ConfigError

ROOT = Path(__file__).resolve().parent.parent


@pytest.mark.parametrize("profile", ["desk", "paper"])
@pytest.mark.parametrize("stage", ["prompt", "mae", "finetune"])
def test_shipped_configs_load(profile, stage):
    cfg = load_stage_config(ROOT / "configs" / profile / f"{stage}.yml")
    assert cfg.stage == stage and cfg.profile == profile


def test_paper_profile_values():
    cfg = load_stage_config(ROOT / "configs" / "paper" / "finetune.yml")
    assert cfg.steps == 10000
    assert cfg.lr == pytest.approx(1e-4)
    assert (cfg.num_val, cfg.num_test) == (28, 30)


def test_defaults():
    cfg = make_stage_config("mae")
    assert cfg.mask_rate == 0.75
    assert cfg.mask_source == "prompt"
    assert (cfg.tversky.alpha_fp, cfg.tversky.beta_fn) == (0.3, 0.7)
    assert cfg.beta == 0.5


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.yml"
    path.write_text("stage: mae\nmask_ratio: 0.5\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mask_ratio"):
        load_stage_config(path)


def test_stage_mismatch_rejected(tmp_path):
    path = tmp_path / "prompt.yml"
    path.write_text("stage: prompt\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_stage_config(path, "mae")


@pytest.mark.parametrize("kw", [
    {"mask_rate": 1.5},
    {"mask_source": "noise"},
    {"patch_size": 12, "volume_size": 48},
    {"volume_size": 60},
    {"embed_dim": 30, "num_heads": 4},
    {"depth": 2, "patch_size": 16},
    {"tversky_alpha_fp": 0.5},
    {"labeled": "quarter"},
    {"steps": 2.5},
])
def test_invalid_values(kw):
    with pytest.raises(ConfigError):
        make_stage_config("mae", **kw)


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    assert make_stage_config("prompt").seed == 42
    monkeypatch.setenv(SEED_ENV, "abc")
    with pytest.raises(ConfigError):
        make_stage_config("prompt")


def test_save_load_roundtrip_and_hash(tmp_path):
    cfg = make_stage_config("finetune", steps=7, masked_loss_only=True)
    path = save_stage_config(cfg, tmp_path / "ft.yml")
    back = load_stage_config(path)
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)
    assert config_hash(cfg.with_overrides(steps=8)) != config_hash(cfg)
    assert config_from_dict(cfg.to_dict()) == cfg
