"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError


def init_adamw_state(params):
    return {
        "t": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One in-place AdamW update; ``grads`` entries may be None (skipped)."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"AdamW shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = init_adamw_state(self.params)

    def step(self, lr=None):
        adamw_step(
            self.params, [p.grad for p in self.params], self.state,
            self.lr if lr is None else lr, self.betas, self.eps, self.weight_decay,
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_lr(step, total_steps, peak, warmup_frac=0.05, floor_frac=1e-6):
    """Linear warmup over ``warmup_frac`` of training, then cosine decay to ``floor_frac * peak``."""
    warmup = int(math.ceil(warmup_frac * total_steps))
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    progress = min((step - warmup) / span, 1.0)
    floor = peak * floor_frac
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))
