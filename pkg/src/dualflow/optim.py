"""AdamW with global-norm clipping, and parameter EMA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .diffcore import NonFiniteError


@dataclass
class OptimState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.02
    clip_norm: float = 0.5
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ValueError("lr and weight decay must be >= 0, clip norm > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kw) -> "OptimState":
        st = cls(**kw)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    # fixed summation order, so a checkpoint-restored dict (sorted) matches a live one
    return float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


def clip_grads(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    scale = max_norm / norm if norm > max_norm else 1.0
    return {k: g * scale for k, g in grads.items()}, norm


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    trainable: Iterable[str] | None = None,
) -> tuple[dict, float]:
    """One AdamW update. Returns (new params, pre-clip gradient norm).

    Parameters outside ``trainable`` are returned untouched (no moments, no decay).
    """
    names = list(params) if trainable is None else [k for k in params if k in set(trainable)]
    sub = {k: grads[k] for k in names}
    for k, g in sub.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
    sub, norm = clip_grads(sub, state.clip_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    out = dict(params)
    for k in names:
        g = sub[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        upd = (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + state.eps)
        p = params[k]
        out[k] = p - state.lr * upd - state.lr * state.weight_decay * p
    return out, norm


@dataclass
class EmaState:
    shadow: dict
    decay: float

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError("EMA decay must lie in [0, 1)")

    @classmethod
    def of(cls, params: Mapping[str, np.ndarray], decay: float) -> "EmaState":
        return cls({k: p.copy() for k, p in params.items()}, decay)


def ema_update(ema: EmaState, params: Mapping[str, np.ndarray]) -> EmaState:
    d = ema.decay
    # d*s + (1-d)*p, arranged so a shadow equal to the parameters stays exactly put
    ema.shadow = {k: ema.shadow[k] + (1 - d) * (params[k] - ema.shadow[k]) for k in ema.shadow}
    return ema
