from __future__ import annotations
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, DataError
from .utils import as_plain, canonical_json, debug_log

# 파일 구조: MAGIC | u64 header 길이(LE) | header JSON(UTF-8) | payload 들
# header = {"metadata": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
MAGIC = b"BPCKPT01"

_DTYPES = {
    "f32le": np.dtype("<f4"),
    "f64le": np.dtype("<f8"),
    "i64le": np.dtype("<i8"),
    "u8": np.dtype("u1"),
}
_TAGS = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return str(self.metadata.get("stage", ""))

    @classmethod
    def from_module(cls, module: torch.nn.Module, **metadata) -> "Checkpoint":
        params = {n: t.detach().cpu().numpy().copy() for n, t in module.state_dict().items()}
        return cls(params=params, metadata=as_plain(metadata))

    def state_dict(self) -> Dict[str, torch.Tensor]:
        return {n: torch.from_numpy(np.array(a, copy=True)) for n, a in self.params.items()}

    def require_stage(self, stage: str) -> None:
        if self.stage != stage:
            raise ConfigError(f"체크포인트 stage 가 {stage!r} 이어야 합니다 (실제: {self.stage!r})")


def _as_storable(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    if dt not in _TAGS:
        raise DataError(f"저장할 수 없는 dtype 입니다: {name} ({arr.dtype})")
    return np.ascontiguousarray(arr, dtype=dt)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    payloads = []
    offset = 0
    for name in sorted(ckpt.params):
        arr = _as_storable(name, ckpt.params[name])
        data = arr.tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": _TAGS[arr.dtype],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        payloads.append(data)
        offset += len(data)
    header = canonical_json({"metadata": as_plain(ckpt.metadata), "tensors": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for data in payloads:
            f.write(data)
    debug_log(f"Checkpoint saved: {path} ({len(entries)} tensors, stage={ckpt.stage})")
    return path


def _read_tensor(blob: bytes, base: int, entry: Mapping[str, Any]) -> Tuple[str, np.ndarray]:
    name = str(entry["name"])
    dt = _DTYPES.get(entry["dtype"])
    if dt is None:
        raise CheckpointError(f"지원하지 않는 dtype: {entry['dtype']!r} ({name})")
    shape = tuple(int(s) for s in entry["shape"])
    if min(shape, default=0) < 0:
        raise CheckpointError(f"shape 에 음수가 있습니다: {name} {shape}")
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    lo = base + int(entry["offset"])
    if nbytes != int(entry["nbytes"]) or lo < base or lo + nbytes > len(blob):
        raise CheckpointError(f"체크포인트 payload 크기가 맞지 않습니다: {name}")
    return name, np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=lo).reshape(shape).copy()


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise ConfigError(f"체크포인트 파일이 없습니다: {path}")
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"체크포인트 형식이 아닙니다: {path}")
    (hlen,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
        entries = list(header["tensors"])
        metadata = dict(header["metadata"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"체크포인트 헤더를 읽을 수 없습니다: {path}: {e}")
    base = start + hlen
    params: Dict[str, np.ndarray] = {}
    for i, entry in enumerate(entries):
        try:
            name, arr = _read_tensor(blob, base, entry)
        except CheckpointError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"체크포인트 tensor 항목 {i} 가 잘못되었습니다: {path}: {e!r}")
        params[name] = arr
    return Checkpoint(params=params, metadata=metadata)


def metadata_for(stage: str, step: int, cfg, cfg_hash: str, metrics: Mapping[str, Any] | None = None, **extra) -> Dict[str, Any]:
    meta = {
        "stage": stage,
        "step": int(step),
        "seed": int(cfg.seed),
        "config_hash": cfg_hash,
        "config": cfg.to_dict(),
        "metrics": dict(metrics or {}),
    }
    meta.update(extra)
    return as_plain(meta)


@dataclass
class StageResult:
    """단계 학습 결과: 체크포인트, (step, loss) 기록, 저장 경로."""
    checkpoint: Checkpoint
    loss_log: List[Tuple[int, float]] = field(default_factory=list)
    path: Optional[Path] = None
