from __future__ import annotations
from typing import Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, NonFiniteError
from .tooth_graph import ToothGraph


class GATLayerParams(nn.Module):
    """한 헤드의 그래프 어텐션 파라미터: theta_s, theta_t (C x C'), attn_vec a (C')."""

    def __init__(self, in_dim: int, out_dim: int, negative_slope: float = 0.2):
        super().__init__()
        if out_dim < 1:
            raise DimensionError(f"out_dim 은 1 이상이어야 합니다: {out_dim}")
        if not 0.0 < negative_slope < 1.0:
            raise ValueError(f"negative_slope 는 (0,1) 범위여야 합니다: {negative_slope}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.negative_slope = negative_slope
        bound = in_dim**-0.5
        self.theta_s = nn.Parameter(torch.empty(in_dim, out_dim).uniform_(-bound, bound))
        self.theta_t = nn.Parameter(torch.empty(in_dim, out_dim).uniform_(-bound, bound))
        self.attn_vec = nn.Parameter(torch.empty(out_dim).uniform_(-out_dim**-0.5, out_dim**-0.5))

    def forward(self, x: torch.Tensor, graph: Union[ToothGraph, torch.Tensor]) -> torch.Tensor:
        return gat_layer(x, graph, self)


def _adjacency(graph: Union[ToothGraph, torch.Tensor], num_nodes: int, device) -> torch.Tensor:
    adj = graph.adjacency_tensor() if isinstance(graph, ToothGraph) else torch.as_tensor(graph)
    if adj.dim() != 2 or adj.shape[0] != adj.shape[1]:
        raise DimensionError(f"인접 행렬은 정사각이어야 합니다: {tuple(adj.shape)}")
    if adj.shape[0] != num_nodes:
        raise DimensionError(f"인접 행렬 크기 {adj.shape[0]} != 노드 수 {num_nodes}")
    adj = adj.to(device=device).bool()
    # 𝒩(i) ∪ {i}
    return adj | torch.eye(num_nodes, dtype=torch.bool, device=device)


def _check_inputs(x: torch.Tensor, p: GATLayerParams) -> None:
    if x.dim() != 3:
        raise DimensionError(f"노드 피처는 B x V x C 여야 합니다: {tuple(x.shape)}")
    if x.shape[2] != p.theta_s.shape[0]:
        raise DimensionError(f"피처 폭 {x.shape[2]} != theta 입력 폭 {p.theta_s.shape[0]}")
    if not torch.isfinite(x).all():
        raise NonFiniteError("그래프 어텐션 입력에 유한하지 않은 값이 있습니다")


def _scores(x: torch.Tensor, p: GATLayerParams):
    s = x @ p.theta_s  # B x V x C'
    t = x @ p.theta_t
    # e_ij = a^T LeakyReLU(s_i + t_j)
    pre = s.unsqueeze(2) + t.unsqueeze(1)  # B x V x V x C'
    e = F.leaky_relu(pre, p.negative_slope) @ p.attn_vec
    return s, t, e


def attention_coefficients(x: torch.Tensor, graph: Union[ToothGraph, torch.Tensor], p: GATLayerParams) -> torch.Tensor:
    """B x V x V 계수. 행 i 는 𝒩(i)∪{i} 위의 softmax, 간선이 없으면 정확히 0."""
    _check_inputs(x, p)
    adj = _adjacency(graph, x.shape[1], x.device)
    _, _, e = _scores(x, p)
    e = e.masked_fill(~adj, float("-inf"))
    alpha = torch.softmax(e, dim=-1)
    return alpha.masked_fill(~adj, 0.0)


def gat_layer(x: torch.Tensor, graph: Union[ToothGraph, torch.Tensor], p: GATLayerParams) -> torch.Tensor:
    """x'_i = α_ii Θ_s x_i + Σ_{j∈𝒩(i)} α_ij Θ_t x_j."""
    _check_inputs(x, p)
    adj = _adjacency(graph, x.shape[1], x.device)
    s, t, e = _scores(x, p)
    alpha = torch.softmax(e.masked_fill(~adj, float("-inf")), dim=-1).masked_fill(~adj, 0.0)
    eye = torch.eye(x.shape[1], dtype=torch.bool, device=x.device)
    self_w = alpha.diagonal(dim1=1, dim2=2).unsqueeze(-1)  # B x V x 1
    neigh = alpha.masked_fill(eye, 0.0)
    return self_w * s + neigh @ t
