from __future__ import annotations
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .errors import ConfigError
from .utils import canonical_json, debug_log, sha256_hex

STAGES = ("prompt", "mae", "finetune")
MASK_SOURCES = ("prompt", "learned", "zero")
LABELED_REGIMES = ("full", "half")
SEED_ENV = "BPARSE_SEED"


@dataclass(frozen=True)
class TverskyParams:
    alpha_fp: float = 0.3
    beta_fn: float = 0.7
    smooth: float = 1e-5

    def __post_init__(self):
        if not (0.0 <= self.alpha_fp <= 1.0 and 0.0 <= self.beta_fn <= 1.0):
            raise ConfigError(f"Tversky 가중치는 [0,1] 범위여야 합니다: {self.alpha_fp}, {self.beta_fn}")
        if abs(self.alpha_fp + self.beta_fn - 1.0) > 1e-9:
            raise ConfigError(f"alpha_fp + beta_fn = 1 이어야 합니다: {self.alpha_fp} + {self.beta_fn}")
        if self.smooth < 0:
            raise ConfigError(f"smooth 는 0 이상이어야 합니다: {self.smooth}")


@dataclass(frozen=True)
class StageConfig:
    stage: str = "prompt"
    profile: str = "desk"
    # 최적화
    steps: int = 300
    batch_size: int = 2
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 2500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 25
    # 손실
    mask_rate: float = 0.75
    beta: float = 0.5
    tversky_alpha_fp: float = 0.3
    tversky_beta_fn: float = 0.7
    smooth: float = 1e-5
    mask_source: str = "prompt"
    masked_loss_only: bool = False
    # 모델 크기
    volume_size: int = 64
    spacing: float = 0.4
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: int = 2
    gat_heads: int = 4
    gat_hidden: int = 64
    negative_slope: float = 0.2
    feature_size: int = 8
    decoder_width: int = 16
    # 데이터 (data_dir 가 비어 있으면 팬텀을 생성)
    data_dir: str = ""
    num_cases: int = 8
    num_val: int = 0
    num_test: int = 0
    noise_sigma: float = 20.0
    val_every: int = 50
    labeled: str = "full"  # 라벨 학습 세트: full 또는 half

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"알 수 없는 stage: {self.stage!r} (허용: {', '.join(STAGES)})")
        if self.profile not in PROFILES:
            raise ConfigError(f"알 수 없는 profile: {self.profile!r}")
        if self.steps < 0:
            raise ConfigError(f"steps >= 0 이어야 합니다: {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size >= 1 이어야 합니다: {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr > 0 이어야 합니다: {self.lr}")
        if not (0 < self.lr_decay_factor <= 1):
            raise ConfigError(f"0 < lr_decay_factor <= 1 이어야 합니다: {self.lr_decay_factor}")
        if self.lr_decay_every < 1:
            raise ConfigError(f"lr_decay_every >= 1 이어야 합니다: {self.lr_decay_every}")
        if not (0.0 <= self.mask_rate <= 1.0):
            raise ConfigError(f"mask_rate 는 [0,1] 범위여야 합니다: {self.mask_rate}")
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError(f"beta 는 [0,1] 범위여야 합니다: {self.beta}")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"알 수 없는 mask_source: {self.mask_source!r}")
        if self.labeled not in LABELED_REGIMES:
            raise ConfigError(f"labeled 는 full/half 중 하나여야 합니다: {self.labeled!r}")
        if not (0.0 < self.negative_slope < 1.0):
            raise ConfigError(f"negative_slope 는 (0,1) 범위여야 합니다: {self.negative_slope}")
        if self.patch_size < 2 or self.patch_size & (self.patch_size - 1):
            raise ConfigError(f"patch_size 는 2 이상의 2의 거듭제곱이어야 합니다: {self.patch_size}")
        if self.volume_size % self.patch_size:
            raise ConfigError(f"volume_size({self.volume_size}) 가 patch_size({self.patch_size}) 로 나누어지지 않습니다")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim({self.embed_dim}) 은 num_heads({self.num_heads}) 의 배수여야 합니다")
        if self.depth < int(math.log2(self.patch_size)):
            raise ConfigError(f"depth({self.depth}) 는 log2(patch_size) 이상이어야 합니다 (skip tap 수)")
        if self.spacing <= 0:
            raise ConfigError(f"spacing 은 양수여야 합니다: {self.spacing}")
        for name in ("num_cases", "num_val", "num_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} >= 0 이어야 합니다: {getattr(self, name)}")
        for name in ("gat_heads", "gat_hidden", "feature_size", "decoder_width", "log_every", "val_every", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} >= 1 이어야 합니다: {getattr(self, name)}")
        if self.smooth <= 0:
            raise ConfigError(f"smooth 는 양수여야 합니다: {self.smooth}")
        TverskyParams(self.tversky_alpha_fp, self.tversky_beta_fn, self.smooth)

    @property
    def tversky(self) -> TverskyParams:
        return TverskyParams(self.tversky_alpha_fp, self.tversky_beta_fn, self.smooth)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.volume_size,) * 3

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **kw) -> "StageConfig":
        return replace(self, **kw)


# =====================================================
# 프로파일: desk (CPU 규모) / paper (실험 설정 원본 값)
# =====================================================
PROFILES: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {
        "prompt": {"steps": 300, "num_cases": 8},
        "mae": {"steps": 300, "num_cases": 8},
        "finetune": {"steps": 500, "batch_size": 1, "num_cases": 2, "num_val": 1, "num_test": 2},
    },
    "paper": {
        "prompt": {"steps": 10000, "lr": 1e-4, "num_cases": 100},
        "mae": {"steps": 10000, "lr": 1e-4, "num_cases": 100},
        "finetune": {"steps": 10000, "lr": 1e-4, "num_cases": 50, "num_val": 28, "num_test": 30},
    },
}

_FIELD_TYPES = {f.name: f.type for f in fields(StageConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    if isinstance(value, (dict, list, tuple)):
        raise ConfigError(f"설정은 평평한 key-value 여야 합니다: {key}")
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("1", "true", "yes"):
                return True
            if str(value).lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} 값의 타입이 올바르지 않습니다: {value!r} (기대: {kind})")


def make_stage_config(stage: str, profile: str = "desk", **overrides) -> StageConfig:
    """프로파일 기본값 위에 overrides 를 얹어 StageConfig 를 만듭니다."""
    if profile not in PROFILES:
        raise ConfigError(f"알 수 없는 profile: {profile!r}")
    if stage not in STAGES:
        raise ConfigError(f"알 수 없는 stage: {stage!r}")
    values: Dict[str, Any] = {"stage": stage, "profile": profile}
    values.update(PROFILES[profile][stage])
    unknown = sorted(k for k in overrides if k not in _FIELD_TYPES)
    if unknown:
        raise ConfigError(f"알 수 없는 설정 키: {', '.join(unknown)}")
    values.update({k: _coerce(k, v) for k, v in overrides.items()})
    seed_env = os.environ.get(SEED_ENV)
    if seed_env not in (None, ""):
        try:
            values["seed"] = int(seed_env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} 는 정수여야 합니다: {seed_env!r}")
    return StageConfig(**values)


def load_stage_config(path: str | os.PathLike, stage: Optional[str] = None) -> StageConfig:
    """YAML(평평한 mapping) 설정 파일을 읽습니다. 알 수 없는 키는 오류입니다."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"설정 파일이 없습니다: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"설정 파일을 해석할 수 없습니다: {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"설정 파일은 key-value mapping 이어야 합니다: {path}")

    file_stage = raw.pop("stage", None)
    stage = stage or file_stage
    if stage is None:
        raise ConfigError(f"stage 가 지정되지 않았습니다: {path}")
    if file_stage is not None and file_stage != stage:
        raise ConfigError(f"설정 파일의 stage({file_stage}) 가 요청한 stage({stage}) 와 다릅니다: {path}")
    profile = raw.pop("profile", "desk")
    cfg = make_stage_config(stage, profile=str(profile), **raw)
    debug_log(f"Loaded {stage} config from {path} (hash={config_hash(cfg)[:12]})")
    return cfg


def save_stage_config(cfg: StageConfig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True, allow_unicode=True)
    return path


def config_hash(cfg: StageConfig) -> str:
    return sha256_hex(canonical_json(cfg.to_dict()).encode("utf-8"))


def config_from_dict(values: Dict[str, Any]) -> StageConfig:
    """체크포인트 메타데이터에 저장된 설정을 복원합니다 (환경 변수 무시)."""
    unknown = sorted(k for k in values if k not in _FIELD_TYPES)
    if unknown:
        raise ConfigError(f"알 수 없는 설정 키: {', '.join(unknown)}")
    return StageConfig(**{k: _coerce(k, v) for k, v in values.items()})


def lr_at(step: int, cfg: StageConfig) -> float:
    """계단식 학습률: lr · factor^floor(step / every)."""
    if step < 0:
        raise ConfigError(f"step >= 0 이어야 합니다: {step}")
    return cfg.lr * cfg.lr_decay_factor ** (step // cfg.lr_decay_every)
