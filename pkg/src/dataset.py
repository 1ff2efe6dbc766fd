from __future__ import annotations
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigError, DataError, DimensionError
from .phantom import PhantomSpec, generate_phantom, load_case_presets, spec_from_preset
from .utils import debug_log
from .volume import BoundaryVolume, LabelVolume, Volume, derive_boundary, load_volume, normalize, save_volume

# 역할별 팬텀 seed 오프셋 (세트끼리 겹치지 않도록)
ROLE_OFFSETS = {"prompt": 1000, "mae": 2000, "train": 3000, "val": 4000, "test": 5000}


@dataclass
class Case:
    name: str
    volume: Volume  # 정규화된 볼륨
    labels: Optional[LabelVolume] = None

    @property
    def boundary(self) -> BoundaryVolume:
        if self.labels is None:
            raise DataError(f"라벨이 없는 케이스입니다: {self.name}")
        return derive_boundary(self.labels)


def make_phantom_cases(
    count: int,
    role: str,
    seed: int,
    shape: Tuple[int, int, int] = (64, 64, 64),
    spacing: float = 0.4,
    noise_sigma: float = 20.0,
    workers: int = 1,
) -> List[Case]:
    """프리셋을 순환하며 팬텀 케이스를 만듭니다. workers > 1 이면 스레드로 병렬 생성."""
    if role not in ROLE_OFFSETS:
        raise ConfigError(f"알 수 없는 역할: {role!r}")
    presets = load_case_presets()
    base = PhantomSpec(shape=shape, spacing=(spacing,) * 3, noise_sigma=noise_sigma)
    specs = []
    for i in range(count):
        preset = presets[i % len(presets)]
        case_seed = seed * 100003 + ROLE_OFFSETS[role] + i
        specs.append((f"{role}-{i:03d}-{preset.get('name', 'case')}", spec_from_preset(preset, base, case_seed)))

    def _build(item):
        name, spec = item
        vol, lab = generate_phantom(spec)
        return Case(name, normalize(vol), lab)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cases = list(pool.map(_build, specs))
    else:
        cases = [_build(item) for item in specs]
    debug_log(f"Built {len(cases)} phantom cases for role={role}")
    return cases


# =====================================================
# 케이스 디렉터리: {name}_image.{json,bin} + (선택) {name}_label.{json,bin}
# =====================================================

def save_cases(cases: Sequence[Case], directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c in cases:
        save_volume(c.volume, directory / f"{c.name}_image")
        if c.labels is not None:
            save_volume(c.labels, directory / f"{c.name}_label")
    return directory


def load_cases(directory: str | os.PathLike, require_labels: bool = False) -> List[Case]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"데이터 디렉터리가 없습니다: {directory}")
    cases = []
    for header in sorted(directory.glob("*_image.json")):
        name = header.name[: -len("_image.json")]
        vol = load_volume(header)
        if not isinstance(vol, Volume):
            raise DataError(f"intensity 볼륨이 아닙니다: {header}")
        label_path = directory / f"{name}_label.json"
        labels = None
        if label_path.exists():
            labels = load_volume(label_path)
            if not isinstance(labels, LabelVolume):
                raise DataError(f"label 볼륨이 아닙니다: {label_path}")
            if labels.shape != vol.shape:
                raise DimensionError(f"{name}: 라벨 shape {labels.shape} != 볼륨 shape {vol.shape}")
        elif require_labels:
            raise DataError(f"라벨 파일이 없습니다: {label_path}")
        cases.append(Case(name, normalize(vol), labels))
    debug_log(f"Loaded {len(cases)} cases from {directory}")
    return cases


# =====================================================
# 배치
# =====================================================

def volume_batch(cases: Sequence[Case], dtype=torch.float32) -> torch.Tensor:
    """(B, 1, W, H, D) 텐서."""
    return torch.from_numpy(np.stack([c.volume.voxels for c in cases])).unsqueeze(1).to(dtype)


def label_batch(cases: Sequence[Case]) -> torch.Tensor:
    return torch.from_numpy(np.stack([c.labels.labels for c in cases]).astype(np.int64))


def boundary_batch(cases: Sequence[Case], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([c.boundary.mask for c in cases])).unsqueeze(1).to(dtype)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> List[int]:
    """step 과 seed 로 결정되는 배치 인덱스 (복원 추출 없이, n 보다 크면 반복)."""
    rng = np.random.default_rng([seed, step])
    if batch_size <= n:
        return sorted(int(i) for i in rng.choice(n, size=batch_size, replace=False))
    return [int(i) for i in rng.integers(0, n, size=batch_size)]


# =====================================================
# 데이터 분할
# =====================================================

@dataclass(frozen=True)
class DatasetSplit:
    pool: Tuple[int, ...]  # 경계 사전학습 + 라벨 학습 후보
    val: Tuple[int, ...]
    test: Tuple[int, ...]
    labeled_full: Tuple[int, ...]
    labeled_half: Tuple[int, ...]

    def labeled(self, mode: str = "full") -> Tuple[int, ...]:
        if mode == "full":
            return self.labeled_full
        if mode == "half":
            return self.labeled_half
        raise ConfigError(f"labeled mode 는 full/half 중 하나여야 합니다: {mode!r}")


def _sizes(n: int, fractions: Sequence[float]) -> List[int]:
    # 최대 나머지 방식: 합이 정확히 n
    raw = [f * n for f in fractions]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split_dataset(n_cases: int, fractions: Sequence[float], seed: int, labeled_fraction: float = 0.5) -> DatasetSplit:
    """seed 로 섞은 뒤 (pool, val, test) 로 나누고, pool 앞부분을 라벨 학습 세트로 고릅니다.

    half 세트는 full 세트의 앞 절반이므로 항상 부분집합입니다.
    """
    if n_cases < 1:
        raise ConfigError(f"n_cases >= 1 이어야 합니다: {n_cases}")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigError(f"fractions 는 합이 1 인 음이 아닌 3개 값이어야 합니다: {fractions}")
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ConfigError(f"labeled_fraction 은 [0,1] 범위여야 합니다: {labeled_fraction}")
    order = np.random.default_rng(seed).permutation(n_cases).tolist()
    n_pool, n_val, _ = _sizes(n_cases, fractions)
    pool = order[:n_pool]
    val = order[n_pool:n_pool + n_val]
    test = order[n_pool + n_val:]
    n_full = int(math.floor(labeled_fraction * n_pool + 1e-9))
    full = pool[:n_full]
    half = full[: n_full // 2]
    return DatasetSplit(tuple(pool), tuple(val), tuple(test), tuple(full), tuple(half))
