from __future__ import annotations
from collections import deque
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import DimensionError
from .patching import PatchGrid, PatchSequence

NUM_TEETH = 32
NUM_NODES = NUM_TEETH + 1  # 0 = 배경/전역 노드

# =====================================================
# 치아 id (1..32, universal 순서) <-> ISO/FDI 코드
#   1..8   : 상악 우측 (FDI 18 -> 11, 제3대구치 -> 중절치)
#   9..16  : 상악 좌측 (FDI 21 -> 28)
#   17..24 : 하악 좌측 (FDI 38 -> 31)
#   25..32 : 하악 우측 (FDI 41 -> 48)
# 아치를 따라 환자 우측 제3대구치에서 시작해 한 방향으로 이어지는 번호입니다.
# =====================================================

def fdi_code(tooth_id: int) -> int:
    if not 1 <= tooth_id <= NUM_TEETH:
        raise ValueError(f"tooth id 는 1..32 범위여야 합니다: {tooth_id}")
    if tooth_id <= 8:
        return 10 + (9 - tooth_id)
    if tooth_id <= 16:
        return 20 + (tooth_id - 8)
    if tooth_id <= 24:
        return 30 + (25 - tooth_id)
    return 40 + (tooth_id - 24)


FDI_CODES: Dict[int, int] = {t: fdi_code(t) for t in range(1, NUM_TEETH + 1)}
TOOTH_BY_FDI: Dict[int, int] = {v: k for k, v in FDI_CODES.items()}


def is_upper(tooth_id: int) -> bool:
    return 1 <= tooth_id <= 16


def arch_index(tooth_id: int) -> int:
    """아치 위 위치 0..15 (환자 우측 -> 좌측). 같은 index 의 상/하악 치아가 교합 쌍."""
    return tooth_id - 1 if is_upper(tooth_id) else NUM_NODES - 1 - tooth_id


def quadrant_position(tooth_id: int) -> int:
    """사분면 내 위치 1(중절치)..8(제3대구치) = FDI 두 번째 자리."""
    return fdi_code(tooth_id) % 10


def occluding_tooth(tooth_id: int) -> int:
    return NUM_NODES - tooth_id


@dataclass(frozen=True)
class ToothGraph:
    num_nodes: int
    adjacency: np.ndarray  # num_nodes x num_nodes, 0/1, self-loop 포함
    edge_list: FrozenSet[Tuple[int, int]]  # i < j 인 무방향 간선

    def neighbors(self, i: int) -> List[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i]) if j != i]

    def adjacency_tensor(self, dtype=torch.bool) -> torch.Tensor:
        return torch.as_tensor(self.adjacency).to(dtype)

    def is_connected(self) -> bool:
        seen = {0}
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j in self.neighbors(i):
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.num_nodes


def _tooth_edges() -> List[Tuple[int, int]]:
    edges: List[Tuple[int, int]] = []
    # 아치 내 인접 치아 (사분면 안쪽)
    for start in (1, 9, 17, 25):
        edges.extend((t, t + 1) for t in range(start, start + 7))
    # 정중선을 가로지르는 중절치 쌍
    edges.append((8, 9))
    edges.append((24, 25))
    # 교합 쌍 (상악 <-> 마주보는 하악)
    edges.extend((t, occluding_tooth(t)) for t in range(1, 17))
    # 배경 허브
    edges.extend((0, t) for t in range(1, NUM_TEETH + 1))
    return edges


def build_tooth_adjacency() -> ToothGraph:
    adj = np.eye(NUM_NODES, dtype=np.uint8)
    edges = set()
    for i, j in _tooth_edges():
        adj[i, j] = adj[j, i] = 1
        edges.add((min(i, j), max(i, j)))
    return ToothGraph(NUM_NODES, adj, frozenset(edges))


def graph_from_adjacency(adjacency) -> ToothGraph:
    """임의 크기 인접 행렬로 그래프를 만듭니다 (self-loop 추가, 대칭화)."""
    a = np.asarray(adjacency).astype(bool)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"인접 행렬은 정사각이어야 합니다: {a.shape}")
    a = a | a.T | np.eye(a.shape[0], dtype=bool)
    edges = frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(a, 1))))
    return ToothGraph(a.shape[0], a.astype(np.uint8), edges)


def to_dot(graph: ToothGraph) -> str:
    """간선 목록을 DOT 형식으로 내보냅니다. 노드 라벨은 FDI 코드 (0 = bg)."""
    lines = ["graph tooth_adjacency {"]
    for i in range(graph.num_nodes):
        label = "bg" if i == 0 or graph.num_nodes != NUM_NODES else str(fdi_code(i))
        lines.append(f'  n{i} [label="{label}"];')
    for i, j in sorted(graph.edge_list):
        lines.append(f"  n{i} -- n{j};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# =====================================================
# 토큰 축 (N) <-> 노드 축 (33) 선형 사상
# =====================================================

class NodeProjection(nn.Module):
    def __init__(self, num_tokens: int, num_nodes: int = NUM_NODES):
        super().__init__()
        self.num_tokens = num_tokens
        self.num_nodes = num_nodes
        self.to_nodes = nn.Parameter(torch.empty(num_nodes, num_tokens))
        self.to_tokens = nn.Parameter(torch.empty(num_tokens, num_nodes))
        nn.init.uniform_(self.to_nodes, -num_tokens**-0.5, num_tokens**-0.5)
        nn.init.uniform_(self.to_tokens, -num_nodes**-0.5, num_nodes**-0.5)


def tokens_to_nodes(p: PatchSequence, proj: NodeProjection) -> torch.Tensor:
    """B x N x C -> B x 33 x C (토큰 축에 대한 선형 축약)."""
    if p.tokens.shape[1] != proj.num_tokens:
        raise DimensionError(f"토큰 수 {p.tokens.shape[1]} != projection N {proj.num_tokens}")
    return torch.einsum("vn,bnc->bvc", proj.to_nodes, p.tokens)


def nodes_to_tokens(f: torch.Tensor, proj: NodeProjection, grid: PatchGrid) -> PatchSequence:
    """B x 33 x C -> B x N x C."""
    if f.dim() != 3 or f.shape[1] != proj.num_nodes:
        raise DimensionError(f"노드 피처 shape {tuple(f.shape)} 의 노드 축이 {proj.num_nodes} 가 아닙니다")
    if grid.num_tokens != proj.num_tokens:
        raise DimensionError(f"grid N {grid.num_tokens} != projection N {proj.num_tokens}")
    tokens = torch.einsum("nv,bvc->bnc", proj.to_tokens, f)
    return PatchSequence(tokens, grid)
