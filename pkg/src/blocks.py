from __future__ import annotations
import math
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import DimensionError
from .patching import PatchEmbedding, PatchGrid, PatchSequence, tokens_to_grid


class TransformerBlock(nn.Module):
    """pre-norm self-attention + MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ViTEncoder(nn.Module):
    """patch embedding + L 개의 transformer block.

    사전학습 모델과 분할 모델이 같은 클래스를 `encoder` 속성으로 가지므로 파라미터 이름이 일치합니다.
    """

    def __init__(self, grid: PatchGrid, depth: int, num_heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.grid = grid
        self.patch_embed = PatchEmbedding(grid)
        self.blocks = nn.ModuleList([TransformerBlock(grid.embed_dim, num_heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(grid.embed_dim)

    def forward(self, volumes: torch.Tensor) -> Tuple[PatchSequence, List[torch.Tensor]]:
        """(마지막 토큰, 블록별 hidden state 목록) 을 반환합니다."""
        x = self.patch_embed(volumes).tokens
        hidden: List[torch.Tensor] = []
        for blk in self.blocks:
            x = blk(x)
            hidden.append(x)
        return PatchSequence(self.norm(x), self.grid), hidden


class TokenDecoder(nn.Module):
    """토큰 -> voxel 공간. 2단계 transposed convolution (stride p/4, 4) 후 1x1x1 head."""

    def __init__(self, grid: PatchGrid, width: int, out_channels: int = 1):
        super().__init__()
        strides = []
        for p in grid.patch_size:
            if p % 4 and p not in (1, 2):
                raise DimensionError(f"TokenDecoder 는 4 의 배수 patch 크기가 필요합니다: {grid.patch_size}")
            strides.append((max(p // 4, 1), min(p, 4)))
        s1 = tuple(s[0] for s in strides)
        s2 = tuple(s[1] for s in strides)
        self.grid = grid
        self.up1 = nn.ConvTranspose3d(grid.embed_dim, width, kernel_size=s1, stride=s1)
        self.up2 = nn.ConvTranspose3d(width, width, kernel_size=s2, stride=s2)
        self.act = nn.LeakyReLU(0.01)
        self.head = nn.Conv3d(width, out_channels, kernel_size=1)

    def forward(self, seq: PatchSequence) -> torch.Tensor:
        x = tokens_to_grid(seq.tokens, seq.grid)
        x = self.act(self.up1(x))
        x = self.act(self.up2(x))
        return self.head(x)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1)
        self.norm = nn.InstanceNorm3d(out_ch, affine=True)
        self.act = nn.LeakyReLU(0.01)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class UpProject(nn.Module):
    """transformer hidden state 를 m 번 2배 업샘플 (UNETR 의 PrUp 블록 축소판)."""

    def __init__(self, in_ch: int, out_ch: int, times: int):
        super().__init__()
        layers: List[nn.Module] = []
        ch = in_ch
        for _ in range(times):
            layers += [nn.ConvTranspose3d(ch, out_ch, kernel_size=2, stride=2), nn.LeakyReLU(0.01)]
            ch = out_ch
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def skip_taps(depth: int, patch_size: int) -> Tuple[int, ...]:
    """skip 연결에 쓰이는 블록 번호(1부터). 마지막 log2(p) 개 블록."""
    levels = int(round(math.log2(patch_size)))
    if 2**levels != patch_size or levels < 1:
        raise DimensionError(f"patch_size 는 2의 거듭제곱이어야 합니다: {patch_size}")
    if depth < levels:
        raise DimensionError(f"depth({depth}) < skip 단계 수({levels})")
    return tuple(range(depth - levels + 1, depth + 1))


class UnetrDecoder(nn.Module):
    """UNETR 식 decoder. 가장 깊은 tap 에서 시작해 2배씩 올라가며 skip 과 합칩니다."""

    def __init__(self, grid: PatchGrid, depth: int, feature_size: int, out_channels: int):
        super().__init__()
        p = grid.patch_size[0]
        if len(set(grid.patch_size)) != 1:
            raise DimensionError(f"UnetrDecoder 는 정육면체 patch 만 지원합니다: {grid.patch_size}")
        self.grid = grid
        self.taps = skip_taps(depth, p)
        self.levels = len(self.taps)
        c = grid.embed_dim
        k = self.levels
        # 해상도 x2^m 에서의 채널 수
        ch = [feature_size * 2 ** (k - m) for m in range(k + 1)]
        self.stem = ConvBlock(1, ch[k])
        self.skips = nn.ModuleList([UpProject(c, ch[m], m) for m in range(1, k)])
        ups = []
        fuses = []
        prev = c
        for m in range(1, k + 1):
            ups.append(nn.ConvTranspose3d(prev, ch[m], kernel_size=2, stride=2))
            fuses.append(ConvBlock(2 * ch[m], ch[m]))
            prev = ch[m]
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        self.head = nn.Conv3d(ch[k], out_channels, kernel_size=1)

    def forward(self, volumes: torch.Tensor, hidden: Sequence[torch.Tensor]) -> torch.Tensor:
        feats = [tokens_to_grid(hidden[t - 1], self.grid) for t in self.taps]
        # feats[0] 이 가장 얕은 tap -> 가장 높은 해상도 skip
        x = feats[-1]
        for m in range(1, self.levels + 1):
            x = self.ups[m - 1](x)
            if m < self.levels:
                skip = self.skips[m - 1](feats[self.levels - 1 - m])
            else:
                skip = self.stem(volumes)
            x = self.fuses[m - 1](torch.cat([x, skip], dim=1))
        return self.head(x)
