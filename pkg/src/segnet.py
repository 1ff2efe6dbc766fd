from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .blocks import UnetrDecoder, ViTEncoder
from .checkpoint import Checkpoint, StageResult, metadata_for, save_checkpoint
from .config import StageConfig, config_from_dict, config_hash, lr_at
from .dataset import Case, batch_indices, label_batch, volume_batch
from .errors import ConfigError, DimensionError, DivergenceError, TransferError
from .losses import SegLossParams, seg_loss
from .metrics import evaluate
from .optim import AdamState, optimizer_step
from .patching import PatchGrid
from .utils import debug_log, param_hash, seed_everything, write_loss_log
from .volume import NUM_CLASSES, LabelVolume, Volume, normalize

ENCODER_PREFIX = "encoder."


class SegModel(nn.Module):
    """ViT encoder + UNETR 식 skip decoder, 33 채널 출력."""

    def __init__(self, grid: PatchGrid, depth: int, num_heads: int, mlp_ratio: int = 2, feature_size: int = 8):
        super().__init__()
        self.grid = grid
        self.encoder = ViTEncoder(grid, depth, num_heads, mlp_ratio)
        self.decoder = UnetrDecoder(grid, depth, feature_size, NUM_CLASSES)

    @classmethod
    def from_config(cls, cfg: StageConfig) -> "SegModel":
        grid = PatchGrid.for_shape(cfg.shape, cfg.patch_size, cfg.embed_dim)
        return cls(grid, cfg.depth, cfg.num_heads, cfg.mlp_ratio, cfg.feature_size)

    def forward(self, volumes: torch.Tensor) -> torch.Tensor:
        if volumes.dim() == 4:
            volumes = volumes.unsqueeze(1)
        _, hidden = self.encoder(volumes)
        return self.decoder(volumes, hidden)


def seg_forward(v: torch.Tensor, m: SegModel) -> torch.Tensor:
    """(B, 1, W, H, D) 정규화 볼륨 -> (B, 33, W, H, D) logit."""
    return m(v)


def encoder_parameter_names(module: nn.Module) -> List[str]:
    return sorted(n for n in module.state_dict() if n.startswith(ENCODER_PREFIX))


# =====================================================
# 사전학습 가중치 이전
# =====================================================

@dataclass
class TransferReport:
    transferred: List[str] = field(default_factory=list)
    fresh: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, List[str]]:
        return {"transferred": list(self.transferred), "fresh": list(self.fresh)}


def load_pretrained(m: SegModel, ckpt: Checkpoint) -> Tuple[SegModel, TransferReport]:
    """stage="mae" 체크포인트의 encoder.* 를 이름 그대로 복사합니다. decoder 는 새 초기값 유지."""
    ckpt.require_stage("mae")
    own = m.state_dict()
    wanted = encoder_parameter_names(m)
    offenders = []
    for name in wanted:
        arr = ckpt.params.get(name)
        if arr is None:
            offenders.append(f"{name}: 체크포인트에 없음")
        elif tuple(arr.shape) != tuple(own[name].shape):
            offenders.append(f"{name}: shape {tuple(arr.shape)} != {tuple(own[name].shape)}")
    extra = sorted(n for n in ckpt.params if n.startswith(ENCODER_PREFIX) and n not in own)
    offenders += [f"{n}: 모델에 없음" for n in extra]
    if offenders:
        raise TransferError(offenders, stage="finetune")

    with torch.no_grad():
        for name in wanted:
            own[name].copy_(torch.from_numpy(np.array(ckpt.params[name], copy=True)).to(own[name].dtype))
    moved = set(wanted)
    fresh = sorted(n for n in own if n not in moved)
    debug_log(f"load_pretrained: transferred={len(wanted)} fresh={len(fresh)}")
    return m, TransferReport(list(wanted), fresh)


# =====================================================
# 3단계 fine-tuning
# =====================================================

def labels_from_logits(logits: torch.Tensor) -> torch.Tensor:
    return logits.argmax(dim=1).to(torch.uint8)


def _mean_foreground_dsc(model: SegModel, cases: Sequence[Case]) -> float:
    scores = []
    model.eval()
    with torch.no_grad():
        for c in cases:
            pred = labels_from_logits(model(volume_batch([c])))[0].numpy()
            d = evaluate(pred, c.labels.labels, c.labels.spacing, surface=False).macro["dsc"]
            scores.append(0.0 if d is None else d)
    model.train()
    return float(np.mean(scores)) if scores else 0.0


def finetune(
    cases: Sequence[Case],
    m: SegModel,
    cfg: StageConfig,
    val_cases: Sequence[Case] = (),
    out: Optional[str | Path] = None,
    init: str = "random",
) -> StageResult:
    """seg_loss 로 Adam 학습. 검증 세트가 있으면 평균 전경 DSC 가 가장 높은 시점을 저장합니다."""
    if not cases:
        raise ConfigError("fine-tuning 학습 데이터가 비어 있습니다", stage="finetune")
    missing = [c.name for c in list(cases) + list(val_cases) if c.labels is None]
    if missing:
        raise ConfigError(f"라벨이 없는 케이스: {', '.join(missing)}", stage="finetune")
    seed_everything(cfg.seed)
    loss_params = SegLossParams(beta=cfg.beta, smooth=cfg.smooth)
    state = AdamState()
    log: List[Tuple[int, float]] = []
    val_log: List[Tuple[int, float]] = []
    best_state: Optional[Dict[str, torch.Tensor]] = None
    best_step, best_score = cfg.steps, None
    m.train()

    for step in range(cfg.steps):
        idx = batch_indices(len(cases), cfg.batch_size, step, cfg.seed)
        batch = [cases[i] for i in idx]
        logits = m(volume_batch(batch))
        loss = seg_loss(logits, label_batch(batch), loss_params)
        if not torch.isfinite(loss):
            raise DivergenceError("분할 loss 가 발산했습니다", step=step, stage="finetune")
        optimizer_step(m, loss, state, lr_at(step, cfg), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        log.append((step, float(loss.detach())))
        if step % cfg.log_every == 0:
            debug_log(f"[finetune] step={step} loss={log[-1][1]:.6f}")

        done = step + 1
        if val_cases and (done % cfg.val_every == 0 or done == cfg.steps):
            score = _mean_foreground_dsc(m, val_cases)
            val_log.append((done, score))
            debug_log(f"[finetune] step={done} val_dsc={score:.4f}")
            if best_score is None or score > best_score:
                best_score, best_step = score, done
                best_state = {k: v.detach().clone() for k, v in m.state_dict().items()}

    if best_state is not None:
        m.load_state_dict(best_state)
    metrics = {
        "final_loss": log[-1][1] if log else None,
        "best_val_dsc": best_score,
        "val_history": [[s, d] for s, d in val_log],
    }
    meta = metadata_for("finetune", best_step, cfg, config_hash(cfg), metrics, init=init)
    ckpt = Checkpoint.from_module(m, **meta)
    result = StageResult(ckpt, log)
    if out is not None:
        result.path = save_checkpoint(ckpt, out)
        write_loss_log(str(out) + ".loss.csv", log)
    debug_log(f"[finetune] done: best_step={best_step} best_val={best_score} hash={param_hash(m)[:12]}")
    return result


def load_seg_model(ckpt: Checkpoint) -> SegModel:
    ckpt.require_stage("finetune")
    model = SegModel.from_config(config_from_dict(ckpt.metadata["config"]))
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    return model


def predict(v: Volume, ckpt: Checkpoint | SegModel) -> LabelVolume:
    """voxel 별 33 채널 argmax."""
    model = ckpt if isinstance(ckpt, SegModel) else load_seg_model(ckpt)
    if tuple(v.shape) != tuple(model.grid.volume_shape):
        raise DimensionError(f"입력 볼륨 shape {v.shape} 가 모델 입력 shape {model.grid.volume_shape} 와 다릅니다")
    x = torch.from_numpy(normalize(v).voxels.copy()).reshape(1, 1, *v.shape)
    with torch.no_grad():
        labels = labels_from_logits(seg_forward(x, model))[0].numpy()
    return LabelVolume(labels, v.spacing)
