from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("cosine schedule needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(params, grads, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over dicts of arrays; returns new ``(params, m, v)``."""
    if step < 1:
        raise ValueError("Adam step counter starts at 1")
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or m[name].shape != p.shape or v[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        mt = beta1 * m[name] + (1 - beta1) * g
        vt = beta2 * v[name] + (1 - beta2) * g * g
        m_hat = mt / (1 - beta1**step)
        v_hat = vt / (1 - beta2**step)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = mt, vt
    return new_p, new_m, new_v
