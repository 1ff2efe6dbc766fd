from __future__ import annotations
import csv
import hashlib
import json
import os
import random
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Tuple

import numpy as np
import torch


def debug_log(msg: str):
    """
    DEBUG 환경 변수가 '1'일 때만 메세지를 출력합니다.
    """
    if os.environ.get("DEBUG") == "1":
        print(f"[DEBUG] {msg}")


def seed_everything(seed: int) -> None:
    """python / numpy / torch 난수 상태를 한 번에 고정합니다."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def param_hash(params) -> str:
    """nn.Module 또는 {name: tensor/array} 의 전체 파라미터 SHA-256.

    이름 순으로 정렬해 (이름, dtype, shape, 바이트)를 누적합니다.
    """
    if isinstance(params, torch.nn.Module):
        params = params.state_dict()
    h = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().contiguous().numpy()
        arr = np.ascontiguousarray(value)
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def write_loss_log(path: str | os.PathLike, rows: Iterable[Tuple[int, float]]) -> Path:
    """(step, loss) 기록을 `step,loss` CSV 로 저장합니다."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for step, loss in rows:
            w.writerow([int(step), repr(float(loss))])
    return path


def read_loss_log(path: str | os.PathLike) -> list[Tuple[int, float]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(f)]


def smoothed(values: Sequence[float], window: int = 10) -> list[float]:
    # 단순 이동 평균 (앞쪽은 있는 만큼만)
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def as_plain(obj):
    """dataclass/asdict 결과를 JSON 으로 저장 가능한 값으로 정리합니다."""
    if isinstance(obj, Mapping):
        return {str(k): as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = sorted(obj) if isinstance(obj, (set, frozenset)) else obj
        return [as_plain(v) for v in items]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
