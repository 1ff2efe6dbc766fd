import pytest
import torch
from hypothesis import given, strategies as st

from src.config import TverskyParams
from src.errors import ConfigError, DimensionError, DomainError
from src.losses import (
    SegLossParams,
    dice_score_soft,
    mean_dice_score,
    mse_reconstruction,
    seg_loss,
    tversky_loss,
)


def test_tversky_hard_counts_example():
    # TP=4, FP=4, FN=4 -> 1 - 4/(4 + 0.3*4 + 0.7*4) = 0.5
    pred = torch.tensor([1.0] * 8 + [0.0] * 4)
    gt = torch.tensor([1.0] * 4 + [0.0] * 4 + [1.0] * 4)
    loss = tversky_loss(pred, gt, TverskyParams(smooth=0.0))
    assert loss.item() == pytest.approx(0.5)


def test_tversky_perfect_prediction_is_zero():
    gt = (torch.rand(4, 4, 4) > 0.5).float()
    assert tversky_loss(gt, gt).item() == pytest.approx(0.0, abs=1e-6)


@given(st.integers(0, 2**31 - 1))
def test_symmetric_tversky_equals_one_minus_dice(seed):
    g = torch.Generator().manual_seed(seed)
    prob = torch.rand(3, 5, generator=g, dtype=torch.float64)
    gt = (torch.rand(3, 5, generator=g) > 0.5).double()
    t = tversky_loss(prob, gt, TverskyParams(0.5, 0.5, smooth=0.0))
    d = dice_score_soft(prob, gt, smooth=0.0)
    if gt.sum() + prob.sum() > 0:
        assert t.item() == pytest.approx(1 - d.item(), abs=1e-9)


def test_tversky_params_validation():
    with pytest.raises(ConfigError):
        TverskyParams(0.4, 0.4)
    with pytest.raises(ConfigError):
        TverskyParams(1.2, -0.2)


def test_tversky_domain_and_shape():
    with pytest.raises(DomainError):
        tversky_loss(torch.tensor([1.5]), torch.tensor([1.0]))
    with pytest.raises(DimensionError):
        tversky_loss(torch.zeros(2), torch.zeros(3))


def test_tversky_gradcheck():
    prob = torch.rand(2, 6, dtype=torch.float64).clamp(0.05, 0.95).requires_grad_()
    gt = (torch.rand(2, 6) > 0.5).double()
    assert torch.autograd.gradcheck(lambda p: tversky_loss(p, gt), (prob,))


def test_mse_full_and_masked():
    pred = torch.tensor([0.0, 1.0, 2.0, 3.0])
    target = torch.zeros(4)
    assert mse_reconstruction(pred, target).item() == pytest.approx(14 / 4)
    mask = torch.tensor([False, False, True, True])
    assert mse_reconstruction(pred, target, mask).item() == pytest.approx(13 / 2)


def _logits_for(labels, scale=20.0):
    onehot = torch.nn.functional.one_hot(labels, 33).movedim(-1, 1).double()
    return onehot * scale


def test_seg_loss_near_zero_for_confident_correct():
    labels = torch.randint(0, 33, (1, 4, 4, 4))
    loss = seg_loss(_logits_for(labels, 40.0), labels, SegLossParams(beta=1.0))
    assert loss.item() < 1e-6


def test_seg_loss_beta_blend():
    labels = torch.randint(0, 33, (1, 3, 3, 3))
    logits = torch.randn(1, 33, 3, 3, 3, dtype=torch.float64)
    ce = seg_loss(logits, labels, SegLossParams(beta=1.0))
    dice = seg_loss(logits, labels, SegLossParams(beta=0.0))
    mixed = seg_loss(logits, labels, SegLossParams(beta=0.25))
    assert mixed.item() == pytest.approx(0.25 * ce.item() + 0.75 * dice.item(), rel=1e-9)
    assert dice.item() == pytest.approx(1 - mean_dice_score(logits, labels).item(), rel=1e-9)


def test_seg_loss_gradcheck():
    labels = torch.randint(0, 33, (1, 2, 2, 2))
    logits = torch.randn(1, 33, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda z: seg_loss(z, labels), (logits,))


def test_seg_loss_errors():
    with pytest.raises(DimensionError):
        seg_loss(torch.zeros(1, 5, 2, 2, 2), torch.zeros(1, 2, 2, 2, dtype=torch.long))
    with pytest.raises(DimensionError):
        seg_loss(torch.zeros(1, 33, 2, 2, 2), torch.zeros(1, 2, 2, 3, dtype=torch.long))
    with pytest.raises(DomainError):
        seg_loss(torch.zeros(1, 33, 2, 2, 2), torch.full((1, 2, 2, 2), 40, dtype=torch.long))
    with pytest.raises(DomainError):
        SegLossParams(beta=1.5)


def test_small_closed_form_examples():
    tv = tversky_loss(torch.tensor([1.0, 1.0, 0.0, 0.0]), torch.tensor([1.0, 0.0, 1.0, 0.0]), TverskyParams(smooth=0.0))
    assert tv.item() == pytest.approx(0.5)
    assert mse_reconstruction(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 1.0])).item() == pytest.approx(0.5)
    assert dice_score_soft(torch.tensor([0.5, 0.5]), torch.tensor([1.0, 0.0]), smooth=0.0).item() == pytest.approx(0.5)


def test_mse_gradcheck():
    pred = torch.rand(2, 1, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    target = torch.rand(2, 1, 3, 3, 3, dtype=torch.float64)
    mask = torch.rand(2, 1, 3, 3, 3) > 0.5
    assert torch.autograd.gradcheck(lambda p: mse_reconstruction(p, target), (pred,))
    assert torch.autograd.gradcheck(lambda p: mse_reconstruction(p, target, mask), (pred,))


def test_mean_dice_matches_per_class_loop():
    torch.manual_seed(2)
    logits = torch.randn(2, 33, 3, 3, 3, dtype=torch.float64)
    labels = torch.randint(0, 33, (2, 3, 3, 3))
    prob = torch.softmax(logits, dim=1)
    onehot = torch.nn.functional.one_hot(labels, 33).movedim(-1, 1).double()
    per_class = [dice_score_soft(prob[:, c], onehot[:, c]) for c in range(33)]
    assert mean_dice_score(logits, labels).item() == pytest.approx(torch.stack(per_class).mean().item(), rel=1e-12)
