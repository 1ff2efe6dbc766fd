from __future__ import annotations
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .blocks import TokenDecoder, ViTEncoder
from .checkpoint import Checkpoint, StageResult, metadata_for, save_checkpoint
from .config import MASK_SOURCES, StageConfig, config_from_dict, config_hash, lr_at
from .dataset import Case, batch_indices, volume_batch
from .errors import ConfigError, DimensionError, DivergenceError, DomainError, MisuseError
from .losses import mse_reconstruction
from .optim import AdamState, optimizer_step
from .patching import PatchGrid, PatchSequence, fold_patches
from .prompt_branch import PromptBranch, prompt_tokens
from .tooth_graph import ToothGraph, build_tooth_adjacency
from .utils import debug_log, param_hash, seed_everything, write_loss_log


@dataclass(frozen=True)
class MaskPlan:
    mask_rate: float
    masked_indices: Tuple[int, ...]
    seed: int
    num_tokens: int

    def token_mask(self, device=None) -> torch.Tensor:
        m = torch.zeros(self.num_tokens, dtype=torch.bool, device=device)
        if self.masked_indices:
            m[list(self.masked_indices)] = True
        return m


def make_mask_plan(num_tokens: int, mask_rate: float, seed: int) -> MaskPlan:
    """seed 로 고정된 생성기에서 floor(α·N) 개 토큰을 비복원 추출합니다."""
    if not 0.0 <= mask_rate <= 1.0:
        raise DomainError(f"mask_rate 는 [0,1] 범위여야 합니다: {mask_rate}")
    if num_tokens < 1:
        raise DimensionError(f"토큰 수는 1 이상이어야 합니다: {num_tokens}")
    # α 를 10진 표기 그대로의 유리수로 보고 정확히 내림 (0.29·100 이 28.99.. 로 내려가지 않도록)
    k = math.floor(Fraction(str(float(mask_rate))) * num_tokens)
    rng = np.random.default_rng(seed)
    picked = rng.choice(num_tokens, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    return MaskPlan(float(mask_rate), tuple(sorted(int(i) for i in picked)), int(seed), int(num_tokens))


@dataclass
class MaskSource:
    mode: str = "prompt"
    learned_token: Optional[torch.Tensor] = None  # C 벡터 (learned 모드)

    def __post_init__(self):
        if self.mode not in MASK_SOURCES:
            raise ConfigError(f"알 수 없는 mask source: {self.mode!r} (허용: {', '.join(MASK_SOURCES)})")
        if self.mode == "learned" and self.learned_token is None:
            raise ConfigError("learned 모드에는 learned_token 이 필요합니다")


def _source_tokens(
    x_t: PatchSequence,
    src: MaskSource,
    prompt: Optional[PromptBranch],
    raw_patches: Optional[PatchSequence],
    graph: Optional[ToothGraph],
) -> torch.Tensor:
    if src.mode == "zero":
        return torch.zeros_like(x_t.tokens)
    if src.mode == "learned":
        return src.learned_token.reshape(1, 1, -1).to(x_t.tokens.dtype).expand_as(x_t.tokens)
    if prompt is None or not prompt.frozen:
        raise MisuseError("prompt mask source 에는 동결된 prompt branch 가 필요합니다", stage="mae")
    if raw_patches is None:
        raise ConfigError("prompt mask source 에는 raw_patches 가 필요합니다", stage="mae")
    tokens = prompt_tokens(raw_patches, prompt, graph or build_tooth_adjacency()).tokens
    if tokens.shape != x_t.tokens.shape:
        raise DimensionError(f"prompt 토큰 shape {tuple(tokens.shape)} != encoder 토큰 shape {tuple(x_t.tokens.shape)}")
    return tokens.to(x_t.tokens.dtype)


def apply_mask(
    x_t: PatchSequence,
    plan: MaskPlan,
    src: MaskSource,
    prompt: Optional[PromptBranch] = None,
    raw_patches: Optional[PatchSequence] = None,
    graph: Optional[ToothGraph] = None,
) -> PatchSequence:
    """plan 의 토큰 위치만 mask source 토큰으로 바꾸고 나머지는 그대로 둡니다."""
    if plan.num_tokens != x_t.grid.num_tokens:
        raise DimensionError(f"mask plan 토큰 수 {plan.num_tokens} != 시퀀스 토큰 수 {x_t.grid.num_tokens}")
    if not plan.masked_indices:
        return x_t
    source = _source_tokens(x_t, src, prompt, raw_patches, graph)
    mask = plan.token_mask(x_t.tokens.device).view(1, -1, 1)
    return PatchSequence(torch.where(mask, source, x_t.tokens), x_t.grid)


def voxel_mask(plan: MaskPlan, grid: PatchGrid, batch_size: int) -> torch.Tensor:
    """마스크된 토큰이 덮는 voxel 위치 (B, 1, W, H, D)."""
    m = plan.token_mask().to(torch.float32).view(1, -1, 1).expand(batch_size, -1, grid.patch_volume)
    return fold_patches(m, grid) > 0.5


# =====================================================
# 모델
# =====================================================

class MAEModel(nn.Module):
    """ViT encoder + 경량 decoder. learned 모드용 mask_token 을 함께 가집니다."""

    def __init__(self, grid: PatchGrid, depth: int, num_heads: int, mlp_ratio: int = 2, decoder_width: int = 16):
        super().__init__()
        self.grid = grid
        self.encoder = ViTEncoder(grid, depth, num_heads, mlp_ratio)
        self.decoder = TokenDecoder(grid, decoder_width, out_channels=1)
        self.mask_token = nn.Parameter(torch.zeros(grid.embed_dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @classmethod
    def from_config(cls, cfg: StageConfig) -> "MAEModel":
        grid = PatchGrid.for_shape(cfg.shape, cfg.patch_size, cfg.embed_dim)
        return cls(grid, cfg.depth, cfg.num_heads, cfg.mlp_ratio, cfg.decoder_width)

    def mask_source(self, mode: str) -> MaskSource:
        return MaskSource(mode, self.mask_token if mode == "learned" else None)

    def forward(
        self,
        volumes: torch.Tensor,
        plan: MaskPlan,
        src: MaskSource,
        branch: Optional[PromptBranch] = None,
        graph: Optional[ToothGraph] = None,
    ) -> torch.Tensor:
        return pretrain_forward(volumes, self, plan, src, branch, graph)


def pretrain_forward(
    volumes: torch.Tensor,
    model: MAEModel,
    plan: MaskPlan,
    src: MaskSource,
    branch: Optional[PromptBranch] = None,
    graph: Optional[ToothGraph] = None,
) -> torch.Tensor:
    """encode → apply_mask → decode → logistic. 결과는 [0,1] 범위의 재구성 볼륨."""
    encoded, _ = model.encoder(volumes)
    raw = None
    if src.mode == "prompt" and branch is not None and plan.masked_indices:
        with torch.no_grad():
            raw = branch.embed(volumes.to(next(branch.parameters()).dtype))
    masked = apply_mask(encoded, plan, src, branch, raw, graph)
    return torch.sigmoid(model.decoder(masked))


def _plan_seed(seed: int, step: int) -> int:
    return seed * 1_000_003 + step


def pretrain_step(
    volumes: torch.Tensor,
    model: MAEModel,
    branch: Optional[PromptBranch],
    cfg: StageConfig,
    state: AdamState,
    step: int,
    graph: Optional[ToothGraph] = None,
    mask_source: Optional[str] = None,
) -> Tuple[float, MAEModel]:
    """한 번의 재구성 학습 스텝. branch 는 읽기만 합니다."""
    mode = mask_source or cfg.mask_source
    src = model.mask_source(mode)
    if mode == "prompt" and (branch is None or not branch.frozen):
        raise MisuseError("prompt mask source 에는 동결된 prompt branch 가 필요합니다", stage="mae")
    plan = make_mask_plan(model.grid.num_tokens, cfg.mask_rate, _plan_seed(cfg.seed, step))
    recon = pretrain_forward(volumes, model, plan, src, branch, graph)
    target = volumes if volumes.dim() == 5 else volumes.unsqueeze(1)
    vmask = voxel_mask(plan, model.grid, target.shape[0]) if cfg.masked_loss_only and plan.masked_indices else None
    loss = mse_reconstruction(recon, target, vmask)
    if not torch.isfinite(loss):
        raise DivergenceError("재구성 loss 가 발산했습니다", step=step, stage="mae")
    optimizer_step(model, loss, state, lr_at(step, cfg), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return float(loss.detach()), model


def load_mae_model(ckpt: Checkpoint) -> MAEModel:
    ckpt.require_stage("mae")
    model = MAEModel.from_config(config_from_dict(ckpt.metadata["config"]))
    model.load_state_dict(ckpt.state_dict())
    return model


def run_pretraining(
    cases: Sequence[Case],
    cfg: StageConfig,
    branch: Optional[PromptBranch] = None,
    out: Optional[str | Path] = None,
    graph: Optional[ToothGraph] = None,
    mask_source: Optional[str] = None,
) -> Tuple[MAEModel, StageResult]:
    """cfg.steps 번의 pretrain_step 을 돌리고 stage="mae" 체크포인트를 만듭니다."""
    if not cases:
        raise ConfigError("MAE 사전학습 데이터가 비어 있습니다", stage="mae")
    mode = mask_source or cfg.mask_source
    if mode not in MASK_SOURCES:
        raise ConfigError(f"알 수 없는 mask source: {mode!r}", stage="mae")
    if mode == "prompt" and (branch is None or not branch.frozen):
        raise MisuseError("prompt mask source 에는 동결된 prompt branch 가 필요합니다", stage="mae")
    graph = graph or build_tooth_adjacency()
    seed_everything(cfg.seed)
    model = MAEModel.from_config(cfg)
    model.train()
    state = AdamState()
    log: List[Tuple[int, float]] = []
    branch_hash = param_hash(branch) if branch is not None else None

    for step in range(cfg.steps):
        idx = batch_indices(len(cases), cfg.batch_size, step, cfg.seed)
        vols = volume_batch([cases[i] for i in idx])
        loss, model = pretrain_step(vols, model, branch, cfg, state, step, graph, mode)
        log.append((step, loss))
        if step % cfg.log_every == 0:
            debug_log(f"[mae] step={step} loss={loss:.6f} source={mode}")

    if branch is not None and param_hash(branch) != branch_hash:
        raise MisuseError("사전학습 중 prompt branch 파라미터가 바뀌었습니다", stage="mae")
    meta = metadata_for(
        "mae", cfg.steps, cfg, config_hash(cfg),
        {"final_loss": log[-1][1] if log else None},
        mask_source=mode, prompt_hash=branch_hash,
    )
    ckpt = Checkpoint.from_module(model, **meta)
    result = StageResult(ckpt, log)
    if out is not None:
        result.path = save_checkpoint(ckpt, out)
        write_loss_log(str(out) + ".loss.csv", log)
    debug_log(f"[mae] done: steps={cfg.steps} source={mode} hash={param_hash(model)[:12]}")
    return model, result
