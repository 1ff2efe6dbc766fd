from __future__ import annotations
from dataclasses import dataclass, field
from typing import Dict, Tuple

import torch

from .errors import DivergenceError


@dataclass
class AdamState:
    step: int = 0
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)


def adam_update(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, torch.Tensor], AdamState]:
    """bias correction 을 포함한 표준 Adam 한 스텝 (params 를 제자리에서 갱신).

    grads 에 없는 이름은 건너뜁니다(기울기가 흐르지 않은 파라미터).
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise DivergenceError(f"기울기에 유한하지 않은 값이 있습니다: {name}", step=state.step)

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise DivergenceError(f"기울기 shape 불일치: {name} {tuple(g.shape)} != {tuple(p.shape)}", step=t)
            m = state.exp_avg.get(name)
            v = state.exp_avg_sq.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            state.exp_avg[name] = m
            state.exp_avg_sq[name] = v
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


def trainable_parameters(module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {n: p for n, p in module.named_parameters() if p.requires_grad}


def optimizer_step(
    module: torch.nn.Module,
    loss: torch.Tensor,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """loss 역전파 후 module 의 학습 가능 파라미터에 adam_update 를 적용합니다."""
    params = trainable_parameters(module)
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    adam_update(params, grads, state, lr, beta1, beta2, eps)
    for p in params.values():
        p.grad = None
    return state
