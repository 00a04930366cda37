"""Flow-matching primitives. Time runs from t=0 (pure noise) to t=1 (clean data)."""

from __future__ import annotations

import numpy as np

from .diffcore import ShapeError


def _check(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def _check_t(t) -> None:
    t = np.asarray(t)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"diffusion time outside [0, 1]: {t}")


def interpolate(x0, eps, t):
    """x_t = t * x0 + (1 - t) * eps. ``t`` may be a scalar or broadcast against x0."""
    x0, eps = np.asarray(x0, dtype=float), np.asarray(eps, dtype=float)
    _check(x0, eps, "interpolate")
    _check_t(t)
    return t * x0 + (1.0 - t) * eps


def target_velocity(x0, eps):
    x0, eps = np.asarray(x0, dtype=float), np.asarray(eps, dtype=float)
    _check(x0, eps, "target_velocity")
    return x0 - eps


def fm_loss(v_pred, u) -> float:
    v_pred, u = np.asarray(v_pred, dtype=float), np.asarray(u, dtype=float)
    _check(v_pred, u, "fm_loss")
    d = v_pred - u
    return float(np.mean(d * d))


def v_to_x0(x_t, t1, v):
    """Clean-sample estimate reached by following ``v`` from t1 to 1."""
    _check_t(t1)
    return np.asarray(x_t, dtype=float) + (1.0 - t1) * np.asarray(v, dtype=float)


def sample_noise(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)
