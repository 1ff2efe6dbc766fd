from __future__ import annotations
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import (
    ByteCountMismatchError,
    DataError,
    DimensionError,
    DomainError,
    MalformedHeaderError,
    UnsupportedDtypeError,
)

HU_MIN = -1000.0
HU_MAX = 8000.0
NUM_CLASSES = 33

Spacing = Tuple[float, float, float]


def _check_spacing(spacing) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(s > 0 for s in sp):
        raise DataError(f"spacing 은 양수 3개여야 합니다: {spacing}")
    return sp


# =====================================================
# 볼륨 타입 (배열 축 순서: x, y, z = W, H, D)
# =====================================================

@dataclass
class Volume:
    voxels: np.ndarray
    spacing: Spacing = (0.4, 0.4, 0.4)
    normalized: bool = False

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise DimensionError(f"Volume 은 3차원이어야 합니다: shape={self.voxels.shape}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: Spacing = (0.4, 0.4, 0.4)
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise DimensionError(f"LabelVolume 은 3차원이어야 합니다: shape={labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DomainError(f"라벨은 0..{self.num_classes - 1} 범위여야 합니다: [{labels.min()}, {labels.max()}]")
        self.labels = labels.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class BoundaryVolume:
    mask: np.ndarray
    spacing: Spacing = (0.4, 0.4, 0.4)

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 3:
            raise DimensionError(f"BoundaryVolume 은 3차원이어야 합니다: shape={mask.shape}")
        self.mask = mask.astype(bool)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.mask.shape)

    @property
    def positive_fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


AnyVolume = Union[Volume, LabelVolume, BoundaryVolume]


def normalize(v: Volume) -> Volume:
    """[-1000, 8000] 으로 clip 후 [0, 1] 로 선형 변환. 이미 정규화된 볼륨은 그대로 반환."""
    if v.normalized:
        return v
    clipped = np.clip(v.voxels.astype(np.float64), HU_MIN, HU_MAX)
    scaled = (clipped - HU_MIN) / (HU_MAX - HU_MIN)
    return Volume(scaled.astype(np.float32), v.spacing, normalized=True)


def derive_boundary(l: LabelVolume) -> BoundaryVolume:
    """전경 voxel 중 6-이웃(볼륨 내부)에 다른 라벨이 있으면 경계."""
    lab = l.labels
    fg = lab > 0
    edge = np.zeros(lab.shape, dtype=bool)
    for axis in range(3):
        n = lab.shape[axis]
        if n < 2:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        diff = lab[tuple(lo)] != lab[tuple(hi)]
        edge[tuple(lo)] |= diff
        edge[tuple(hi)] |= diff
    return BoundaryVolume(edge & fg, l.spacing)


# =====================================================
# 파일 I/O: {name}.json 헤더 + {name}.bin (little-endian, x 가 가장 빠른 순서)
# =====================================================

_DTYPE_TAGS = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}
_KINDS = ("intensity", "label", "mask")


def _paths(path: str | os.PathLike) -> Tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_volume(v: AnyVolume, path: str | os.PathLike) -> Path:
    header_path, data_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(v, Volume):
        kind, tag, arr = "intensity", "f32le", v.voxels
    elif isinstance(v, LabelVolume):
        kind, tag, arr = "label", "u8", v.labels
    elif isinstance(v, BoundaryVolume):
        kind, tag, arr = "mask", "u8", v.mask.astype(np.uint8)
    else:
        raise DataError(f"저장할 수 없는 타입입니다: {type(v).__name__}")
    header = {
        "shape": [int(s) for s in arr.shape],
        "spacing": [float(s) for s in v.spacing],
        "dtype": tag,
        "kind": kind,
    }
    if isinstance(v, Volume):
        header["normalized"] = bool(v.normalized)
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
    data = np.asarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes(order="F")
    with open(data_path, "wb") as f:
        f.write(data)
    return header_path


def load_volume(path: str | os.PathLike) -> AnyVolume:
    header_path, data_path = _paths(path)
    try:
        with open(header_path, "r", encoding="utf-8") as f:
            header = json.load(f)
    except FileNotFoundError:
        raise DataError(f"볼륨 헤더 파일이 없습니다: {header_path}")
    except ValueError as e:
        raise MalformedHeaderError(f"볼륨 헤더를 해석할 수 없습니다: {header_path}: {e}")
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"볼륨 헤더가 객체가 아닙니다: {header_path}")
    try:
        shape = tuple(int(s) for s in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
        tag = header["dtype"]
        kind = header["kind"]
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"볼륨 헤더 필드가 올바르지 않습니다: {header_path}: {e}")
    if len(shape) != 3 or any(s < 1 for s in shape) or len(spacing) != 3:
        raise MalformedHeaderError(f"shape/spacing 은 3개 값이어야 합니다: {header_path}")
    if kind not in _KINDS:
        raise MalformedHeaderError(f"알 수 없는 kind: {kind!r} ({header_path})")
    dt = _DTYPE_TAGS.get(tag)
    if dt is None:
        raise UnsupportedDtypeError(f"지원하지 않는 dtype: {tag!r} ({header_path})")
    expected_dtype = "f32le" if kind == "intensity" else "u8"
    if tag != expected_dtype:
        raise UnsupportedDtypeError(f"kind={kind} 에는 dtype={expected_dtype} 만 허용됩니다: {tag!r}")

    try:
        with open(data_path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise DataError(f"볼륨 데이터 파일이 없습니다: {data_path}")
    expected = int(np.prod(shape)) * dt.itemsize
    if len(data) != expected:
        raise ByteCountMismatchError(f"바이트 수 불일치: {data_path} ({len(data)} != {expected})")
    arr = np.frombuffer(data, dtype=dt).reshape(shape, order="F")

    if kind == "intensity":
        return Volume(arr.astype(np.float32), spacing, normalized=bool(header.get("normalized", False)))
    if kind == "label":
        return LabelVolume(arr.copy(), spacing)
    return BoundaryVolume(arr.astype(bool), spacing)
