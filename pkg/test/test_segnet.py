import time

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from src.checkpoint import Checkpoint, load_checkpoint
from src.config import make_stage_config
from src.dataset import make_phantom_cases, volume_batch
from src.errors import ConfigError, DimensionError, TransferError
from src.mae import MAEModel, run_pretraining
from src.metrics import evaluate
from src.segnet import (
    SegModel,
    encoder_parameter_names,
    finetune,
    labels_from_logits,
    load_pretrained,
    load_seg_model,
    predict,
    seg_forward,
)
from src.utils import param_hash, seed_everything
from src.volume import LabelVolume, Volume


@pytest.fixture
def model(tiny_cfg):
    return SegModel.from_config(tiny_cfg("finetune"))


@pytest.fixture
def mae_ckpt(tiny_cfg, tiny_cases):
    _, result = run_pretraining(tiny_cases, tiny_cfg("mae", steps=1), None, mask_source="zero")
    return result.checkpoint


def test_output_shape_and_purity(model):
    model.eval()
    x = torch.rand(2, 1, 32, 32, 32)
    a = seg_forward(x, model)
    b = seg_forward(x, model)
    assert a.shape == (2, 33, 32, 32, 32)
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)


def test_zero_head_weights_give_constant_bias(model):
    bias = torch.linspace(-1.0, 1.0, 33)
    with torch.no_grad():
        model.decoder.head.weight.zero_()
        model.decoder.head.bias.copy_(bias)
    out = seg_forward(torch.rand(1, 1, 32, 32, 32), model)
    assert torch.equal(out, bias.view(1, 33, 1, 1, 1).expand_as(out))


def test_encoder_names_match_pretraining_model(tiny_cfg, model):
    mae = MAEModel.from_config(tiny_cfg("mae"))
    assert encoder_parameter_names(model) == encoder_parameter_names(mae)


def test_transfer_copies_encoder(model, mae_ckpt):
    model, report = load_pretrained(model, mae_ckpt)
    own = model.state_dict()
    for name in report.transferred:
        assert name.startswith("encoder.")
        assert np.array_equal(own[name].numpy(), mae_ckpt.params[name])
    assert len(report.transferred) + len(report.fresh) == len(own)
    assert not set(report.transferred) & set(report.fresh)
    assert all(n.startswith("decoder.") for n in report.fresh)


def test_transfer_width_mismatch(tiny_cfg, tiny_cases, model):
    _, result = run_pretraining(tiny_cases, tiny_cfg("mae", steps=0, embed_dim=32), None, mask_source="zero")
    with pytest.raises(TransferError) as e:
        load_pretrained(model, result.checkpoint)
    assert any("encoder.patch_embed.proj.weight" in o for o in e.value.offenders)
    assert e.value.stage == "finetune"


def test_transfer_requires_mae_stage(model):
    with pytest.raises(ConfigError):
        load_pretrained(model, Checkpoint.from_module(model, stage="finetune"))


def test_argmax_labels():
    logits = torch.zeros(1, 33, 2, 1, 1)
    logits[0, 7, 0] = 1.0
    logits[0, 32, 1] = 2.0
    labels = labels_from_logits(logits)
    assert labels.dtype == torch.uint8
    assert labels[0, :, 0, 0].tolist() == [7, 32]


def test_zero_steps_returns_initialization(tiny_cfg, tiny_cases, model):
    cfg = tiny_cfg("finetune", steps=0)
    before = param_hash(model)
    result = finetune(tiny_cases, model, cfg)
    assert param_hash(result.checkpoint.params) == before
    assert result.checkpoint.stage == "finetune"
    assert result.checkpoint.metadata["init"] == "random"


def test_finetune_validation_and_persistence(tiny_cfg, tiny_cases, tmp_path):
    cfg = tiny_cfg("finetune", steps=2, val_every=1)
    seed_everything(cfg.seed)
    result = finetune(tiny_cases, SegModel.from_config(cfg), cfg, tiny_cases[:1], tmp_path / "ft.ckpt")
    metrics = result.checkpoint.metadata["metrics"]
    assert [s for s, _ in metrics["val_history"]] == [1, 2]
    assert metrics["best_val_dsc"] == max(d for _, d in metrics["val_history"])
    assert len(result.loss_log) == 2

    ckpt = load_checkpoint(result.path)
    restored = load_seg_model(ckpt)
    case = tiny_cases[0]
    labels = predict(case.volume, ckpt)
    assert isinstance(labels, LabelVolume)
    assert labels.shape == case.volume.shape
    with torch.no_grad():
        direct = labels_from_logits(seg_forward(volume_batch([case]), restored))[0].numpy()
    assert np.array_equal(labels.labels, direct)


def test_finetune_is_seeded(tiny_cfg, tiny_cases):
    cfg = tiny_cfg("finetune", steps=2)
    logs = []
    for _ in range(2):
        seed_everything(cfg.seed)
        logs.append(finetune(tiny_cases, SegModel.from_config(cfg), cfg).loss_log)
    assert logs[0] == logs[1]


def test_finetune_errors(tiny_cfg, tiny_cases, model):
    cfg = tiny_cfg("finetune", steps=1)
    with pytest.raises(ConfigError):
        finetune([], model, cfg)
    unlabeled = [type(tiny_cases[0])("u", tiny_cases[0].volume, None)]
    with pytest.raises(ConfigError):
        finetune(unlabeled, model, cfg)


def test_predict_shape_mismatch(model):
    with pytest.raises(DimensionError):
        predict(Volume(np.zeros((16, 16, 16))), model)


@pytest.mark.slow
def test_segmentation_loss_decreases(tiny_cfg, tiny_cases):
    from src.utils import smoothed

    cfg = tiny_cfg("finetune", steps=200, log_every=50)
    seed_everything(cfg.seed)
    result = finetune(tiny_cases, SegModel.from_config(cfg), cfg)
    curve = smoothed([v for _, v in result.loss_log], window=20)
    assert curve[-1] < curve[19]


@pytest.mark.slow
def test_overfits_two_desk_phantoms():
    # CPU 규모 기본 설정 그대로: 64³ 팬텀 2개, 500 step
    cfg = make_stage_config("finetune", "desk", num_val=0)
    assert cfg.volume_size == 64 and cfg.steps == 500
    cases = make_phantom_cases(2, "train", cfg.seed, cfg.shape, cfg.spacing, cfg.noise_sigma)
    seed_everything(cfg.seed)
    model = SegModel.from_config(cfg)
    start = time.perf_counter()
    finetune(cases, model, cfg)
    elapsed = time.perf_counter() - start
    scores = [
        evaluate(predict(c.volume, model), c.labels, surface=False).macro["dsc"]
        for c in cases
    ]
    assert min(scores) >= 0.90, scores
    assert elapsed < 15 * 60, elapsed


@pytest.fixture(scope="module")
def eval_model():
    cfg = make_stage_config(
        "finetune", "desk", volume_size=32, patch_size=8, embed_dim=16, depth=3, num_heads=2, mlp_ratio=2, feature_size=2
    )
    torch.manual_seed(1)
    return SegModel.from_config(cfg).eval()


def test_batch_order_does_not_mix_samples(eval_model):
    gen = torch.Generator().manual_seed(3)
    x = torch.rand(3, 1, 32, 32, 32, generator=gen)
    perm = torch.tensor([2, 0, 1])
    with torch.no_grad():
        whole = seg_forward(x, eval_model)
        shuffled = seg_forward(x[perm], eval_model)
    assert torch.allclose(shuffled, whole[perm], atol=1e-5)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_argmax_ignores_positive_scale(seed, scale):
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 33, 3, 2, 2, generator=gen, dtype=torch.float64)
    assert torch.equal(labels_from_logits(logits * scale), labels_from_logits(logits))


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 4.0))
def test_logits_finite_for_random_volumes(eval_model, seed, spread):
    gen = torch.Generator().manual_seed(seed)
    x = spread * (2 * torch.rand(1, 1, 32, 32, 32, generator=gen) - 1)
    with torch.no_grad():
        out = seg_forward(x, eval_model)
    assert torch.isfinite(out).all()
