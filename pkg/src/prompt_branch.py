from __future__ import annotations
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .blocks import TokenDecoder
from .checkpoint import Checkpoint, StageResult, metadata_for, save_checkpoint
from .config import StageConfig, config_from_dict, config_hash, lr_at
from .dataset import Case, batch_indices, boundary_batch, volume_batch
from .errors import ConfigError, DimensionError, DivergenceError, MisuseError
from .gat import GATLayerParams, gat_layer
from .losses import tversky_loss
from .optim import AdamState, optimizer_step
from .patching import PatchEmbedding, PatchGrid, PatchSequence
from .tooth_graph import NUM_NODES, NodeProjection, ToothGraph, build_tooth_adjacency, nodes_to_tokens, tokens_to_nodes
from .utils import debug_log, param_hash, seed_everything, write_loss_log


class PromptBranch(nn.Module):
    """그래프 어텐션 encoder + 경량 decoder. 1단계 학습 후 동결되어 mask token 을 공급합니다."""

    def __init__(self, grid: PatchGrid, gat_heads: int = 4, hidden: int = 64, negative_slope: float = 0.2, decoder_width: int = 16):
        super().__init__()
        c = grid.embed_dim
        self.grid = grid
        self.patch_embed = PatchEmbedding(grid)
        self.proj = NodeProjection(grid.num_tokens, NUM_NODES)
        self.fc1 = nn.Linear(c, hidden)
        self.heads = nn.ModuleList([GATLayerParams(hidden, hidden, negative_slope) for _ in range(gat_heads)])
        self.fc2 = nn.Linear(hidden, c)
        self.decoder = TokenDecoder(grid, decoder_width, out_channels=1)
        self._frozen = False

    @classmethod
    def from_config(cls, cfg: StageConfig) -> "PromptBranch":
        grid = PatchGrid.for_shape(cfg.shape, cfg.patch_size, cfg.embed_dim)
        return cls(grid, cfg.gat_heads, cfg.gat_hidden, cfg.negative_slope, cfg.decoder_width)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "PromptBranch":
        for p in self.parameters():
            p.requires_grad_(False)
        self._frozen = True
        self.eval()
        return self

    def embed(self, volumes: torch.Tensor) -> PatchSequence:
        return self.patch_embed(volumes)

    def encode(self, x_p: PatchSequence, graph: ToothGraph) -> PatchSequence:
        """decoder 직전까지: Σ_heads fc2(GA_i(h) + h), h = fc1(tokens_to_nodes(x_p))."""
        if graph.num_nodes != NUM_NODES:
            raise DimensionError(f"prompt branch 는 {NUM_NODES}-노드 그래프가 필요합니다: {graph.num_nodes}")
        if x_p.grid.num_tokens != self.grid.num_tokens or x_p.tokens.shape[2] != self.grid.embed_dim:
            raise DimensionError(f"입력 토큰 {tuple(x_p.tokens.shape)} 이 branch grid (N={self.grid.num_tokens}, C={self.grid.embed_dim}) 와 맞지 않습니다")
        h = self.fc1(tokens_to_nodes(x_p, self.proj))
        out = 0
        for head in self.heads:
            out = out + self.fc2(gat_layer(h, graph, head) + h)
        return nodes_to_tokens(out, self.proj, x_p.grid)

    def forward(self, x_p: PatchSequence, graph: ToothGraph) -> torch.Tensor:
        return self.decoder(self.encode(x_p, graph))


def prompt_forward(x_p: PatchSequence, b: PromptBranch, g: ToothGraph) -> torch.Tensor:
    """(B, 1, W, H, D) 경계 logit."""
    if b.frozen:
        with torch.no_grad():
            return b(x_p, g)
    return b(x_p, g)


def prompt_tokens(x_p: PatchSequence, b: PromptBranch, g: ToothGraph) -> PatchSequence:
    if not b.frozen:
        raise MisuseError("prompt_tokens 는 동결된 prompt branch 에서만 호출할 수 있습니다")
    with torch.no_grad():
        return b.encode(x_p, g)


# =====================================================
# 1단계 학습
# =====================================================

def branch_checkpoint(branch: PromptBranch, cfg: StageConfig, step: int, metrics=None) -> Checkpoint:
    return Checkpoint.from_module(branch, **metadata_for("prompt", step, cfg, config_hash(cfg), metrics, frozen=branch.frozen))


def load_prompt_branch(ckpt: Checkpoint) -> PromptBranch:
    """체크포인트에서 동결된 branch 를 복원합니다."""
    ckpt.require_stage("prompt")
    cfg = config_from_dict(ckpt.metadata["config"])
    branch = PromptBranch.from_config(cfg)
    branch.load_state_dict(ckpt.state_dict())
    return branch.freeze()


def train_prompt_branch(
    cases: Sequence[Case],
    cfg: StageConfig,
    out: Optional[str | Path] = None,
    graph: Optional[ToothGraph] = None,
) -> Tuple[PromptBranch, StageResult]:
    """희소 경계 라벨에 대해 Tversky loss 로 학습하고 동결된 branch 를 반환합니다."""
    if not cases:
        raise ConfigError("prompt branch 학습 데이터가 비어 있습니다", stage="prompt")
    graph = graph or build_tooth_adjacency()
    seed_everything(cfg.seed)
    branch = PromptBranch.from_config(cfg)
    branch.train()
    state = AdamState()
    log: List[Tuple[int, float]] = []
    tv = cfg.tversky

    for step in range(cfg.steps):
        idx = batch_indices(len(cases), cfg.batch_size, step, cfg.seed)
        batch = [cases[i] for i in idx]
        vols = volume_batch(batch)
        target = boundary_batch(batch)
        logits = branch(branch.embed(vols), graph)
        loss = tversky_loss(torch.sigmoid(logits), target, tv)
        if not torch.isfinite(loss):
            raise DivergenceError("prompt branch loss 가 발산했습니다", step=step, stage="prompt")
        optimizer_step(branch, loss, state, lr_at(step, cfg), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        log.append((step, float(loss.detach())))
        if step % cfg.log_every == 0:
            debug_log(f"[prompt] step={step} loss={log[-1][1]:.6f} lr={lr_at(step, cfg):.2e}")

    branch.freeze()
    ckpt = branch_checkpoint(branch, cfg, cfg.steps, {"final_loss": log[-1][1] if log else None})
    result = StageResult(ckpt, log)
    if out is not None:
        result.path = save_checkpoint(ckpt, out)
        write_loss_log(str(out) + ".loss.csv", log)
    debug_log(f"[prompt] done: steps={cfg.steps} hash={param_hash(branch)[:12]}")
    return branch, result
