from __future__ import annotations
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .config import TverskyParams
from .errors import DimensionError, DomainError
from .volume import NUM_CLASSES

DEFAULT_SMOOTH = 1e-5


@dataclass(frozen=True)
class SegLossParams:
    beta: float = 0.5
    class_weights: Optional[Sequence[float]] = None
    smooth: float = DEFAULT_SMOOTH

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError(f"beta 는 [0,1] 범위여야 합니다: {self.beta}")
        if self.class_weights is not None and len(self.class_weights) != NUM_CLASSES:
            raise DimensionError(f"class_weights 길이는 {NUM_CLASSES} 여야 합니다: {len(self.class_weights)}")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape 불일치 {tuple(a.shape)} != {tuple(b.shape)}")


def tversky_loss(pred_prob: torch.Tensor, target: torch.Tensor, p: TverskyParams = TverskyParams()) -> torch.Tensor:
    """1 − (TP + s) / (TP + α·FP + β·FN + s), soft count 기준."""
    _same_shape(pred_prob, target, "tversky_loss")
    with torch.no_grad():
        if pred_prob.numel() and (pred_prob.min() < 0 or pred_prob.max() > 1):
            raise DomainError("tversky_loss: 예측 확률은 [0,1] 범위여야 합니다")
    g = target.to(pred_prob.dtype)
    tp = (pred_prob * g).sum()
    fp = (pred_prob * (1 - g)).sum()
    fn = ((1 - pred_prob) * g).sum()
    return 1 - (tp + p.smooth) / (tp + p.alpha_fp * fp + p.beta_fn * fn + p.smooth)


def dice_score_soft(prob: torch.Tensor, target: torch.Tensor, smooth: float = DEFAULT_SMOOTH) -> torch.Tensor:
    """2(Σpg + s) / (Σp + Σg + 2s). s=0 이면 표준 soft Dice."""
    _same_shape(prob, target, "dice_score_soft")
    g = target.to(prob.dtype)
    inter = (prob * g).sum()
    return 2 * (inter + smooth) / (prob.sum() + g.sum() + 2 * smooth)


def mse_reconstruction(pred: torch.Tensor, target: torch.Tensor, voxel_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """(1/N) Σ (y − ŷ)². voxel_mask 가 주어지면 그 voxel 들만 평균합니다."""
    _same_shape(pred, target, "mse_reconstruction")
    err = (pred - target.to(pred.dtype)) ** 2
    if voxel_mask is None:
        return err.mean()
    _same_shape(voxel_mask, pred, "mse_reconstruction mask")
    m = voxel_mask.to(pred.dtype)
    return (err * m).sum() / m.sum().clamp_min(1.0)


def _check_labels(target: torch.Tensor, num_classes: int) -> None:
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= num_classes):
        raise DomainError(f"라벨은 0..{num_classes - 1} 범위여야 합니다: [{int(target.min())}, {int(target.max())}]")


def cross_entropy_term(pred_logits: torch.Tensor, target: torch.Tensor, class_weights=None) -> torch.Tensor:
    w = None
    if class_weights is not None:
        w = torch.as_tensor(class_weights, dtype=pred_logits.dtype, device=pred_logits.device)
    return F.cross_entropy(pred_logits, target.long(), weight=w)


def mean_dice_score(pred_logits: torch.Tensor, target: torch.Tensor, smooth: float = DEFAULT_SMOOTH) -> torch.Tensor:
    """softmax 확률과 one-hot 타깃의 클래스별 soft Dice 평균 (배치+공간 전체)."""
    num_classes = pred_logits.shape[1]
    prob = torch.softmax(pred_logits, dim=1)
    onehot = F.one_hot(target.long(), num_classes).movedim(-1, 1).to(prob.dtype)
    # 클래스 축만 남기고 합산: 클래스별 dice_score_soft 와 같은 값
    dims = (0,) + tuple(range(2, prob.dim()))
    inter = (prob * onehot).sum(dims)
    scores = 2 * (inter + smooth) / (prob.sum(dims) + onehot.sum(dims) + 2 * smooth)
    return scores.mean()


def seg_loss(pred_logits: torch.Tensor, target: torch.Tensor, p: SegLossParams = SegLossParams()) -> torch.Tensor:
    """β · CE + (1 − β) · (1 − 평균 soft Dice)."""
    if pred_logits.dim() < 3 or pred_logits.shape[1] != NUM_CLASSES:
        raise DimensionError(f"seg_loss: logits 는 B x {NUM_CLASSES} x ... 여야 합니다: {tuple(pred_logits.shape)}")
    if target.dim() == pred_logits.dim() and target.shape[1] == 1:
        target = target[:, 0]
    if tuple(target.shape) != (pred_logits.shape[0],) + tuple(pred_logits.shape[2:]):
        raise DimensionError(f"seg_loss: 공간 shape 불일치 {tuple(pred_logits.shape)} vs {tuple(target.shape)}")
    _check_labels(target, NUM_CLASSES)
    ce = cross_entropy_term(pred_logits, target, p.class_weights)
    dice = mean_dice_score(pred_logits, target, p.smooth)
    return p.beta * ce + (1 - p.beta) * (1 - dice)
