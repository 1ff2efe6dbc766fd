from __future__ import annotations
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple

import numpy as np
import yaml
from scipy.spatial import cKDTree

from .errors import DataError
from .tooth_graph import NUM_TEETH, arch_index, is_upper, quadrant_position
from .utils import debug_log
from .volume import HU_MAX, HU_MIN, LabelVolume, Volume

TOOTH_HU = (1500.0, 3000.0)
BONE_HU = (300.0, 900.0)
BACKGROUND_HU = -1000.0
TEETH_PER_ARCH = 16
MIN_TOOTH_SPACING = 2.0  # voxel

DEFAULT_PRESETS_PATH = Path(__file__).resolve().parent.parent / "data" / "phantom_cases.yml"


@dataclass(frozen=True)
class PhantomSpec:
    shape: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (0.4, 0.4, 0.4)
    missing_teeth: FrozenSet[int] = frozenset()
    crowding_factor: float = 0.0
    noise_sigma: float = 20.0
    seed: int = 0
    # 치아별 평면 내 위치 흔들림 (치아 간격 대비 비율). oblique 케이스용
    oblique: float = 0.0
    # seed 에 따른 형태 변화의 크기 (아치 폭/깊이, 치아 크기/높이/위치). 0 이면 형태가 seed 와 무관
    shape_variation: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "missing_teeth", frozenset(int(t) for t in self.missing_teeth))
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise DataError(f"shape 는 양의 정수 3개여야 합니다: {self.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing 은 양수 3개여야 합니다: {self.spacing}")
        bad = sorted(t for t in self.missing_teeth if not 1 <= t <= NUM_TEETH)
        if bad:
            raise DataError(f"missing_teeth 는 1..32 범위여야 합니다: {bad}")
        if min(self.crowding_factor, self.noise_sigma, self.oblique, self.shape_variation) < 0:
            raise DataError("crowding_factor, noise_sigma, oblique, shape_variation 은 0 이상이어야 합니다")


# =====================================================
# 케이스 프리셋 (data/phantom_cases.yml)
# =====================================================

def load_case_presets(path: str | Path = DEFAULT_PRESETS_PATH) -> List[Dict[str, Any]]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f) or []
    except FileNotFoundError:
        return [{"name": "normal"}]


def spec_from_preset(preset: Dict[str, Any], base: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(
        base,
        missing_teeth=frozenset(preset.get("missing_teeth", []) or []),
        crowding_factor=float(preset.get("crowding_factor", base.crowding_factor)),
        oblique=float(preset.get("oblique", base.oblique)),
        seed=seed,
    )


# =====================================================
# 아치 기하
# =====================================================

@dataclass
class _Arch:
    centers: np.ndarray  # 16 x 2 (x, y)
    tangents: np.ndarray  # 16 x 2 단위 벡터
    spacing: float  # 치아 간 기본 간격 (voxel)
    curve: np.ndarray  # 조밀 샘플 (M x 2)


@dataclass(frozen=True)
class _ShapeDraw:
    """seed 로 정해지는 형태 변화. 모든 치아에 대해 같은 순서로 뽑습니다."""

    width_scale: float = 1.0
    depth_scale: float = 1.0
    front_shift: float = 0.0  # h 대비 비율
    radius_scale: Optional[np.ndarray] = None  # (33,) 치아 크기 배율
    height_shift: Optional[np.ndarray] = None  # (33,) 세로 반지름 대비 비율
    offset: Optional[np.ndarray] = None  # (33, 2) 치아 간격 대비 비율

    @classmethod
    def draw(cls, rng: np.random.Generator, amount: float) -> "_ShapeDraw":
        arch = rng.uniform(-1.0, 1.0, size=3)
        radius = rng.uniform(-1.0, 1.0, size=NUM_TEETH + 1)
        height = rng.uniform(-1.0, 1.0, size=NUM_TEETH + 1)
        offset = rng.uniform(-1.0, 1.0, size=(NUM_TEETH + 1, 2))
        return cls(
            width_scale=1.0 + 0.06 * amount * arch[0],
            depth_scale=1.0 + 0.08 * amount * arch[1],
            front_shift=0.03 * amount * arch[2],
            radius_scale=1.0 + 0.08 * amount * radius,
            height_shift=0.15 * amount * height,
            offset=0.12 * amount * offset,
        )


def _arch_layout(w: int, h: int, crowding: float, draw: _ShapeDraw = _ShapeDraw()) -> _Arch:
    cx = (w - 1) / 2.0
    half_width = 0.36 * w * draw.width_scale
    y_front = (0.22 + draw.front_shift) * h
    depth = 0.42 * h * draw.depth_scale
    t = np.linspace(-1.0, 1.0, 2001)
    pts = np.stack([cx + half_width * t, y_front + depth * t**2], axis=1)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    base_spacing = total / TEETH_PER_ARCH
    mid = total / 2.0
    # 밀집: 정중선 쪽으로 위치를 당겨 간격을 1/(1+c) 로 줄인다
    targets = mid + ((np.arange(TEETH_PER_ARCH) + 0.5) * base_spacing - mid) / (1.0 + crowding)
    x = np.interp(targets, arc, pts[:, 0])
    y = np.interp(targets, arc, pts[:, 1])
    # 접선: dx/dt = half_width, dy/dt = 2·depth·t
    tt = (x - cx) / half_width
    tan = np.stack([np.full_like(tt, half_width), 2 * depth * tt], axis=1)
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    return _Arch(np.stack([x, y], axis=1), tan, base_spacing, pts)


def _type_scale(tooth_id: int) -> float:
    pos = quadrant_position(tooth_id)
    if pos <= 2:
        return 0.85  # 절치
    if pos <= 5:
        return 1.0  # 견치, 소구치
    return 1.2  # 대구치


def generate_phantom(spec: PhantomSpec) -> Tuple[Volume, LabelVolume]:
    """두 개의 포물선 아치 위에 타원체 치아를 배치한 합성 CBCT 팬텀."""
    w, h, d = spec.shape
    # 크기 검사는 변화 없는 기준 아치로 한다 (shape 의 허용 여부가 seed 에 따라 바뀌지 않도록)
    nominal = _arch_layout(w, h, spec.crowding_factor)
    if nominal.spacing < MIN_TOOTH_SPACING or d < 16:
        raise DataError(
            f"shape {spec.shape} 는 32개 치아를 배치하기에 너무 작습니다 "
            f"(치아 간격 {nominal.spacing:.2f} voxel < {MIN_TOOTH_SPACING}, 또는 D < 16)"
        )
    rng = np.random.default_rng(spec.seed)

    # 모든 치아에 대해 난수를 같은 순서로 뽑아 missing_teeth 와 무관하게 재현되도록 함
    tooth_hu = rng.uniform(*TOOTH_HU, size=NUM_TEETH + 1)
    jitter = rng.normal(0.0, 1.0, size=(NUM_TEETH + 1, 2))
    bone_hu = rng.uniform(*BONE_HU)
    draw = _ShapeDraw.draw(rng, spec.shape_variation)
    arch = _arch_layout(w, h, spec.crowding_factor, draw)

    r_along = 0.45 * arch.spacing
    r_across = 0.55 * arch.spacing
    r_vert = 0.09 * d
    z_upper = 0.62 * (d - 1)
    z_lower = 0.38 * (d - 1)

    labels = np.zeros(spec.shape, dtype=np.uint8)
    best = np.full(spec.shape, np.inf, dtype=np.float64)
    for tooth in range(1, NUM_TEETH + 1):
        if tooth in spec.missing_teeth:
            continue
        k = arch_index(tooth)
        center = arch.centers[k] + arch.spacing * (spec.oblique * 0.3 * jitter[tooth] + draw.offset[tooth])
        tangent = arch.tangents[k]
        normal = np.array([-tangent[1], tangent[0]])
        scale = _type_scale(tooth) * draw.radius_scale[tooth]
        ra, rb, rz = r_along * draw.radius_scale[tooth], r_across * scale, r_vert * scale
        cz = (z_upper if is_upper(tooth) else z_lower) + draw.height_shift[tooth] * r_vert
        reach = max(ra, rb) + 1
        lo = [max(int(np.floor(center[0] - reach)), 0), max(int(np.floor(center[1] - reach)), 0), max(int(np.floor(cz - rz - 1)), 0)]
        hi = [min(int(np.ceil(center[0] + reach)) + 1, w), min(int(np.ceil(center[1] + reach)) + 1, h), min(int(np.ceil(cz + rz + 1)) + 1, d)]
        if any(a >= b for a, b in zip(lo, hi)):
            continue
        gx, gy, gz = np.meshgrid(
            np.arange(lo[0], hi[0]), np.arange(lo[1], hi[1]), np.arange(lo[2], hi[2]), indexing="ij"
        )
        dx = gx - center[0]
        dy = gy - center[1]
        u = dx * tangent[0] + dy * tangent[1]
        v = dx * normal[0] + dy * normal[1]
        dist = (u / ra) ** 2 + (v / rb) ** 2 + ((gz - cz) / rz) ** 2
        box = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
        # 겹치는 영역은 정규화 거리가 더 가까운 치아가 가져간다
        win = (dist <= 1.0) & (dist < best[box])
        best[box] = np.where(win, dist, best[box])
        labels[box] = np.where(win, tooth, labels[box])

    vox = np.full(spec.shape, BACKGROUND_HU, dtype=np.float64)
    vox[_bone_mask(spec.shape, arch, r_across * 1.3, (z_upper, z_lower), r_vert * 1.6)] = bone_hu
    for tooth in range(1, NUM_TEETH + 1):
        vox[labels == tooth] = tooth_hu[tooth]
    if spec.noise_sigma > 0:
        vox += rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    vox = np.clip(vox, HU_MIN, HU_MAX)

    debug_log(f"phantom seed={spec.seed} shape={spec.shape} teeth={len(np.unique(labels)) - 1}")
    return Volume(vox.astype(np.float32), spec.spacing), LabelVolume(labels, spec.spacing)


def _bone_mask(shape, arch: _Arch, half_band: float, z_centers: Iterable[float], half_height: float) -> np.ndarray:
    """아치 곡선에서 평면 거리 half_band 이내, 각 아치 높이 ± half_height 의 뼈 띠."""
    w, h, d = shape
    tree = cKDTree(arch.curve)
    gx, gy = np.meshgrid(np.arange(w), np.arange(h), indexing="ij")
    dist, _ = tree.query(np.stack([gx.ravel(), gy.ravel()], axis=1))
    plane = (dist <= half_band).reshape(w, h)
    z = np.arange(d)
    height = np.zeros(d, dtype=bool)
    for cz in z_centers:
        height |= np.abs(z - cz) <= half_height
    return plane[:, :, None] & height[None, None, :]
