"""Learning-rate and EMA-decay schedules."""

from __future__ import annotations

import math


def lambda_schedule(step: int, lambda_b: float, lambda_e: float, n_warmup: int) -> float:
    """EMA decay: linear from ``lambda_b`` to ``lambda_e`` over ``n_warmup``
    updates, then held at ``lambda_e``. With ``n_warmup == 0`` the final value
    is used from the start."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if n_warmup <= 0 or step >= n_warmup:
        return lambda_e
    return lambda_b + (lambda_e - lambda_b) * step / n_warmup


def tri_stage_lr(step: int, peak: float, total: int, warmup: float = 0.03, hold: float = 0.90, final_scale: float = 0.05) -> float:
    """Linear warmup, constant hold, then exponential decay to ``final_scale * peak``.

    ``warmup`` and ``hold`` are fractions of ``total``; decay takes the rest.
    """
    n_warm = int(round(warmup * total))
    n_hold = int(round(hold * total))
    n_decay = max(total - n_warm - n_hold, 1)
    if step < n_warm:
        return peak * (step + 1) / n_warm
    if step < n_warm + n_hold:
        return peak
    frac = min((step - n_warm - n_hold) / n_decay, 1.0)
    return peak * math.exp(math.log(final_scale) * frac)


def warmup_decay_lr(step: int, peak: float, warmup: int, decay: int, final_scale: float = 0.05) -> float:
    """Linear warmup over ``warmup`` steps, then exponential decay over ``decay`` steps."""
    if step < warmup:
        return peak * (step + 1) / warmup
    frac = min((step - warmup) / max(decay, 1), 1.0)
    return peak * math.exp(math.log(final_scale) * frac)
