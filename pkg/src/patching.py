from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from .errors import DimensionError, NonFiniteError

_AXES = ("x(W)", "y(H)", "z(D)")


@dataclass(frozen=True)
class PatchGrid:
    """patch_size (pw, ph, pd) 와 grid (gw, gh, gd). 토큰 순서는 x 가 가장 빠른 raster 순서."""
    patch_size: Tuple[int, int, int]
    grid: Tuple[int, int, int]
    embed_dim: int

    def __post_init__(self):
        if len(self.patch_size) != 3 or len(self.grid) != 3:
            raise DimensionError(f"patch_size/grid 는 3축이어야 합니다: {self.patch_size}, {self.grid}")
        if min(self.patch_size) < 1 or min(self.grid) < 1:
            raise DimensionError(f"patch_size/grid 는 1 이상이어야 합니다: {self.patch_size}, {self.grid}")
        if self.embed_dim < 1:
            raise DimensionError(f"embed_dim 은 1 이상이어야 합니다: {self.embed_dim}")

    @classmethod
    def for_shape(cls, shape: Sequence[int], patch_size: Union[int, Sequence[int]], embed_dim: int) -> "PatchGrid":
        ps = (patch_size,) * 3 if isinstance(patch_size, int) else tuple(int(p) for p in patch_size)
        shape = tuple(int(s) for s in shape)
        if len(shape) != 3:
            raise DimensionError(f"볼륨 shape 는 3축이어야 합니다: {shape}")
        for axis, (s, p) in enumerate(zip(shape, ps)):
            if p < 1 or s < p or s % p:
                raise DimensionError(f"{_AXES[axis]} 축 크기 {s} 가 patch 크기 {p} 로 나누어지지 않습니다")
        return cls(ps, tuple(s // p for s, p in zip(shape, ps)), int(embed_dim))

    @property
    def num_tokens(self) -> int:
        gw, gh, gd = self.grid
        return gw * gh * gd

    @property
    def patch_volume(self) -> int:
        pw, ph, pd = self.patch_size
        return pw * ph * pd

    @property
    def volume_shape(self) -> Tuple[int, int, int]:
        return tuple(g * p for g, p in zip(self.grid, self.patch_size))

    def token_index(self, gx: int, gy: int, gz: int) -> int:
        gw, gh, _ = self.grid
        return gx + gw * (gy + gh * gz)


@dataclass
class PatchSequence:
    tokens: torch.Tensor  # B x N x C
    grid: PatchGrid

    def __post_init__(self):
        if self.tokens.dim() != 3:
            raise DimensionError(f"tokens 는 B x N x C 여야 합니다: {tuple(self.tokens.shape)}")
        if self.tokens.shape[1] != self.grid.num_tokens:
            raise DimensionError(f"토큰 수 {self.tokens.shape[1]} != grid N {self.grid.num_tokens}")

    @property
    def batch_size(self) -> int:
        return int(self.tokens.shape[0])

    def check_finite(self) -> "PatchSequence":
        if not torch.isfinite(self.tokens).all():
            raise NonFiniteError("토큰에 유한하지 않은 값이 있습니다")
        return self


def _as_batch(volumes: torch.Tensor) -> torch.Tensor:
    # (B, W, H, D) 또는 (B, 1, W, H, D)
    if volumes.dim() == 5:
        if volumes.shape[1] != 1:
            raise DimensionError(f"채널 수는 1 이어야 합니다: {tuple(volumes.shape)}")
        volumes = volumes[:, 0]
    if volumes.dim() != 4:
        raise DimensionError(f"볼륨 배치는 (B, W, H, D) 여야 합니다: {tuple(volumes.shape)}")
    return volumes


def flatten_patches(volumes: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """(B, W, H, D) -> (B, N, pw*ph*pd). 토큰/패치 내부 모두 x 가 가장 빠른 순서."""
    v = _as_batch(volumes)
    b = v.shape[0]
    if tuple(v.shape[1:]) != grid.volume_shape:
        for axis, (s, e) in enumerate(zip(v.shape[1:], grid.volume_shape)):
            if s != e:
                raise DimensionError(f"{_AXES[axis]} 축 크기 {s} 가 grid 와 맞지 않습니다 (기대 {e})")
    (pw, ph, pd), (gw, gh, gd) = grid.patch_size, grid.grid
    x = v.reshape(b, gw, pw, gh, ph, gd, pd)
    # -> (B, gd, gh, gw, pd, ph, pw)
    x = x.permute(0, 5, 3, 1, 6, 4, 2)
    return x.reshape(b, grid.num_tokens, grid.patch_volume)


def fold_patches(patches: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """flatten_patches 의 역: (B, N, P) -> (B, 1, W, H, D)."""
    b, n, p = patches.shape
    if n != grid.num_tokens or p != grid.patch_volume:
        raise DimensionError(f"패치 배열 shape {tuple(patches.shape)} 가 grid(N={grid.num_tokens}, P={grid.patch_volume}) 와 맞지 않습니다")
    (pw, ph, pd), (gw, gh, gd) = grid.patch_size, grid.grid
    x = patches.reshape(b, gd, gh, gw, pd, ph, pw)
    x = x.permute(0, 3, 6, 2, 5, 1, 4)
    return x.reshape(b, 1, gw * pw, gh * ph, gd * pd)


def patchify(volumes: torch.Tensor, grid: PatchGrid, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> PatchSequence:
    """각 패치를 펼친 뒤 선형 사상 (C x P weight) 으로 C 차원 토큰을 만듭니다."""
    if tuple(weight.shape) != (grid.embed_dim, grid.patch_volume):
        raise DimensionError(f"embed weight shape {tuple(weight.shape)} != ({grid.embed_dim}, {grid.patch_volume})")
    flat = flatten_patches(volumes, grid).to(weight.dtype)
    tokens = nn.functional.linear(flat, weight, bias)
    return PatchSequence(tokens, grid)


def unpatchify(p: PatchSequence, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """토큰을 P 차원으로 되돌려 raster 순서대로 배치합니다. weight: P x C."""
    grid = p.grid
    if p.tokens.shape[1] != grid.num_tokens:
        raise DimensionError(f"토큰 수 {p.tokens.shape[1]} != grid N {grid.num_tokens}")
    if tuple(weight.shape) != (grid.patch_volume, p.tokens.shape[2]):
        raise DimensionError(f"unembed weight shape {tuple(weight.shape)} != ({grid.patch_volume}, {p.tokens.shape[2]})")
    flat = nn.functional.linear(p.tokens, weight, bias)
    return fold_patches(flat, grid)


def tokens_to_grid(tokens: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """(B, N, C) -> (B, C, gw, gh, gd) 피처맵."""
    b, n, c = tokens.shape
    if n != grid.num_tokens:
        raise DimensionError(f"토큰 수 {n} != grid N {grid.num_tokens}")
    gw, gh, gd = grid.grid
    return tokens.reshape(b, gd, gh, gw, c).permute(0, 4, 3, 2, 1).contiguous()


class PatchEmbedding(nn.Module):
    """선형 patch embedding + 학습되는 위치 임베딩."""

    def __init__(self, grid: PatchGrid):
        super().__init__()
        self.grid = grid
        self.proj = nn.Linear(grid.patch_volume, grid.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, grid.num_tokens, grid.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, volumes: torch.Tensor) -> PatchSequence:
        seq = patchify(volumes, self.grid, self.proj.weight, self.proj.bias)
        return PatchSequence(seq.tokens + self.pos_embed, self.grid)
