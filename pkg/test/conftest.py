import os
import sys

import hypothesis
import pytest
import torch

# Ensure src is in path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.config import SEED_ENV, make_stage_config
from src.dataset import make_phantom_cases

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("full", max_examples=1000, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))

# 32³ 볼륨, 8³ patch -> 4x4x4 = 64 토큰. CPU 에서 수 초 안에 도는 크기
TINY = dict(
    volume_size=32,
    patch_size=8,
    embed_dim=16,
    depth=3,
    num_heads=2,
    mlp_ratio=2,
    gat_heads=2,
    gat_hidden=8,
    feature_size=2,
    decoder_width=4,
    batch_size=2,
    log_every=1,
)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 수 분 이상 걸리는 end-to-end 검사")


@pytest.fixture(autouse=True)
def _isolate_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    monkeypatch.delenv("DEBUG", raising=False)
    torch.manual_seed(0)


@pytest.fixture
def tiny_cfg():
    def _make(stage, **overrides):
        values = dict(TINY)
        values.update(overrides)
        return make_stage_config(stage, "desk", **values)
    return _make


@pytest.fixture(scope="session")
def tiny_cases():
    return make_phantom_cases(2, "train", 0, (32, 32, 32), 0.4, 20.0)
