from __future__ import annotations
import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DimensionError, UndefinedMetricError
from .utils import debug_log
from .volume import NUM_CLASSES, LabelVolume

METRIC_NAMES = ("dsc", "jaccard", "precision", "recall", "hd95_mm")
CSV_HEADER = ("class", "dsc", "jaccard", "precision", "recall", "hd95_mm")

LabelLike = Union[LabelVolume, np.ndarray]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def empty(self) -> bool:
        """pred 와 gt 모두에 없는 클래스."""
        return self.tp + self.fp + self.fn == 0


def _labels(x: LabelLike) -> np.ndarray:
    return x.labels if isinstance(x, LabelVolume) else np.asarray(x)


def confusion(pred: LabelLike, gt: LabelLike, class_id: int) -> ConfusionCounts:
    p = _labels(pred)
    g = _labels(gt)
    if p.shape != g.shape:
        raise DimensionError(f"pred shape {p.shape} != gt shape {g.shape}")
    pm = p == class_id
    gm = g == class_id
    tp = int(np.count_nonzero(pm & gm))
    fp = int(np.count_nonzero(pm & ~gm))
    fn = int(np.count_nonzero(~pm & gm))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


# 빈 클래스 규칙: pred/gt 모두 없으면 None (macro 에서 제외), 분모가 0 이면 0
def dsc(c: ConfusionCounts) -> Optional[float]:
    if c.empty:
        return None
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn)


def jaccard(c: ConfusionCounts) -> Optional[float]:
    if c.empty:
        return None
    return c.tp / (c.tp + c.fp + c.fn)


def precision(c: ConfusionCounts) -> Optional[float]:
    if c.empty:
        return None
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> Optional[float]:
    if c.empty:
        return None
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


# =====================================================
# 표면 거리
# =====================================================

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def surface_points(mask: np.ndarray) -> np.ndarray:
    """6-연결 기준 경계 voxel 의 인덱스 (K x 3). 볼륨 바깥은 배경으로 봅니다."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.empty((0, mask.ndim), dtype=np.int64)
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return np.argwhere(mask & ~eroded)


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(b).query(a)
    return np.asarray(dist, dtype=np.float64)


def hd95_points(a: np.ndarray, b: np.ndarray, percentile: float = 95.0) -> float:
    """두 점 집합(mm 좌표) 사이의 대칭 percentile 거리 (선형 보간)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetricError("빈 표면에서는 HD95 를 정의할 수 없습니다")
    da = np.percentile(_directed(a, b), percentile, method="linear")
    db = np.percentile(_directed(b, a), percentile, method="linear")
    return float(max(da, db))


def _surface_mm(mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    return surface_points(mask).astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _check_masks(pred_mask, gt_mask) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise DimensionError(f"mask shape 불일치: {p.shape} != {g.shape}")
    if not p.any() or not g.any():
        raise UndefinedMetricError("빈 mask 에서는 HD95 를 정의할 수 없습니다")
    return p, g


def hd95(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing: Sequence[float]) -> float:
    p, g = _check_masks(pred_mask, gt_mask)
    return hd95_points(_surface_mm(p, spacing), _surface_mm(g, spacing))


def hausdorff_max(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing: Sequence[float]) -> float:
    """최대 표면 거리 (percentile 100)."""
    p, g = _check_masks(pred_mask, gt_mask)
    a, b = _surface_mm(p, spacing), _surface_mm(g, spacing)
    return float(max(_directed(a, b).max(), _directed(b, a).max()))


# =====================================================
# 리포트
# =====================================================

@dataclass
class ClassMetrics:
    class_id: int
    dsc: Optional[float]
    jaccard: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    hd95_mm: Optional[float]
    counts: ConfusionCounts

    def row(self) -> Dict[str, Optional[float]]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


@dataclass
class MetricReport:
    per_class: List[ClassMetrics]
    macro: Dict[str, Optional[float]]
    excluded: List[int] = field(default_factory=list)
    undefined_hd95: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "macro": dict(self.macro),
            "excluded": list(self.excluded),
            "undefined_hd95": list(self.undefined_hd95),
            "per_class": [
                {"class": m.class_id, **m.row(), "counts": asdict(m.counts)} for m in self.per_class
            ],
        }

    def to_json(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")
        return path

    def csv_rows(self) -> List[List[str]]:
        def _fmt(v):
            return "" if v is None else repr(float(v))
        return [[str(m.class_id)] + [_fmt(getattr(m, k)) for k in METRIC_NAMES] for m in self.per_class]

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            w.writerows(self.csv_rows())
        return path


def _class_metrics(p: np.ndarray, g: np.ndarray, class_id: int, spacing, surface: bool = True) -> ClassMetrics:
    c = confusion(p, g, class_id)
    hd = None
    if surface and c.tp + c.fp and c.tp + c.fn:
        hd = hd95(p == class_id, g == class_id, spacing)
    return ClassMetrics(class_id, dsc(c), jaccard(c), precision(c), recall(c), hd, c)


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(
    pred: LabelLike,
    gt: LabelLike,
    spacing: Optional[Sequence[float]] = None,
    classes: Optional[Sequence[int]] = None,
    workers: int = 1,
    surface: bool = True,
) -> MetricReport:
    """전경 클래스(기본 1..32)별 지표와 macro 평균.

    surface=False 이면 HD95 를 건너뜁니다 (학습 중 검증처럼 겹침 지표만 필요할 때).
    """
    p = _labels(pred)
    g = _labels(gt)
    if p.shape != g.shape:
        raise DimensionError(f"pred shape {p.shape} != gt shape {g.shape}")
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, LabelVolume) else (1.0, 1.0, 1.0)
    classes = list(classes) if classes is not None else list(range(1, NUM_CLASSES))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda k: _class_metrics(p, g, k, spacing, surface), classes))
    else:
        rows = [_class_metrics(p, g, k, spacing, surface) for k in classes]

    excluded = [m.class_id for m in rows if m.counts.empty]
    present = [m for m in rows if not m.counts.empty]
    undefined = [m.class_id for m in present if m.hd95_mm is None] if surface else []
    macro = {k: _mean([getattr(m, k) for m in present]) for k in METRIC_NAMES}
    debug_log(f"evaluate: classes={len(present)} excluded={len(excluded)} macro_dsc={macro['dsc']}")
    return MetricReport(rows, macro, excluded, undefined)


def summarize_reports(reports: Sequence[MetricReport]) -> Dict[str, Dict[str, Optional[float]]]:
    """케이스별 macro 값의 평균 ± 표준편차 (모표준편차)."""
    out: Dict[str, Dict[str, Optional[float]]] = {}
    for k in METRIC_NAMES:
        vals = [r.macro.get(k) for r in reports if r.macro.get(k) is not None]
        if vals:
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        else:
            out[k] = {"mean": None, "std": None, "n": 0}
    return out
