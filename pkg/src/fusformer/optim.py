"""Bias-corrected Adam over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeError, Tensor


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_init(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
        step=0,
    )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update; increments the step counter."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient {g.shape} vs parameter {p.data.shape} for '{name}'"
            )
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ShapeError(f"adam_step: moment {m.shape} vs parameter {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
