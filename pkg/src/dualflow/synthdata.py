"""Seeded two-modality stream generators with known structure, and their oracles.

Three regimes:

* GAUSSIAN: every token of both modalities is i.i.d. N(mu, sigma^2) per coordinate.
* OSCILLATOR: A is a 2-D rotation at a fixed period plus noise; B is a saturating
  transform of A at the same instant.
* LAGGED: A is a smooth AR(1) process; B repeats A ``lag`` chunks later plus noise.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Chunk, Condition

COND_DIM = 3


class RegimeKind(enum.Enum):
    GAUSSIAN = "gaussian"
    OSCILLATOR = "oscillator"
    LAGGED = "lagged"


@dataclass(frozen=True)
class Regime:
    kind: RegimeKind
    mu: float = 1.0
    sigma: float = 0.5
    period: float = 3.0  # time units (a chunk lasts `duration`)
    amplitude: float = 1.0
    lag: int = 1  # chunks
    rho: float = 0.7  # token-level AR(1) coefficient
    noise: float = 0.05

    def __post_init__(self):
        if self.sigma <= 0 or self.period <= 0 or self.amplitude <= 0:
            raise ValueError("sigma, period and amplitude must be positive")
        if self.lag < 0 or self.noise < 0 or not (0 <= self.rho < 1):
            raise ValueError("invalid lag / noise / rho")

    @classmethod
    def gaussian(cls, mu: float = 1.0, sigma: float = 0.5) -> "Regime":
        return cls(RegimeKind.GAUSSIAN, mu=mu, sigma=sigma)

    @classmethod
    def oscillator(cls, period: float = 3.0, noise: float = 0.05) -> "Regime":
        return cls(RegimeKind.OSCILLATOR, period=period, noise=noise)

    @classmethod
    def lagged(cls, lag: int = 1, noise: float = 0.05, rho: float = 0.7) -> "Regime":
        return cls(RegimeKind.LAGGED, lag=lag, noise=noise, rho=rho)

    @classmethod
    def parse(cls, name: str) -> "Regime":
        kind = RegimeKind(name.lower())
        return {RegimeKind.GAUSSIAN: cls.gaussian, RegimeKind.OSCILLATOR: cls.oscillator,
                RegimeKind.LAGGED: cls.lagged}[kind]()

    @property
    def true_lag(self) -> float | None:
        """Cross-modal lag in chunks, or None where the regime has no synchrony."""
        return {RegimeKind.GAUSSIAN: None, RegimeKind.OSCILLATOR: 0.0, RegimeKind.LAGGED: float(self.lag)}[self.kind]


@dataclass(frozen=True)
class StreamSpec:
    num_chunks: int
    tokens_per_chunk: int = 4
    d_a: int = 2
    d_b: int = 3
    duration: float = 1.0

    def __post_init__(self):
        for k in ("num_chunks", "tokens_per_chunk", "d_a", "d_b"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def tokens(self) -> int:
        return self.num_chunks * self.tokens_per_chunk

    def token_times(self) -> np.ndarray:
        return np.arange(self.tokens) * (self.duration / self.tokens_per_chunk)


def _lift(x: np.ndarray, d: int) -> np.ndarray:
    """Map 2-D features to d columns: copy, then append normalized sums."""
    out = np.empty((len(x), d))
    for j in range(d):
        out[:, j] = x[:, j] if j < x.shape[1] else x.sum(axis=1) / np.sqrt(x.shape[1])
    return out


def _tokens(regime: Regime, spec: StreamSpec, rng: np.random.Generator):
    n = spec.tokens
    if regime.kind is RegimeKind.GAUSSIAN:
        a = regime.mu + regime.sigma * rng.standard_normal((n, spec.d_a))
        b = regime.mu + regime.sigma * rng.standard_normal((n, spec.d_b))
        return a, b, np.array([regime.mu, regime.sigma, 0.0])
    if regime.kind is RegimeKind.OSCILLATOR:
        phase = rng.uniform(0, 2 * np.pi)
        ang = 2 * np.pi * spec.token_times() / regime.period + phase
        base = regime.amplitude * np.stack([np.sin(ang), np.cos(ang)], axis=1)
        a = _lift(base, spec.d_a) + regime.noise * rng.standard_normal((n, spec.d_a))
        b = np.tanh(1.5 * _lift(base, spec.d_b)) + regime.noise * rng.standard_normal((n, spec.d_b))
        return a, b, np.array([np.cos(phase), np.sin(phase), 1.0])
    # LAGGED: stationary unit-variance AR(1) with a burn-in covering the lag
    shift = regime.lag * spec.tokens_per_chunk
    total = n + shift
    z = np.empty((total, 2))
    z[0] = rng.standard_normal(2)
    innov = np.sqrt(1 - regime.rho ** 2) * rng.standard_normal((total - 1, 2))
    for i in range(1, total):
        z[i] = regime.rho * z[i - 1] + innov[i - 1]
    a = _lift(z[shift:], spec.d_a)
    b = _lift(z[:n], spec.d_b) + regime.noise * rng.standard_normal((n, spec.d_b))
    return a, b, np.array([0.0, 0.0, 1.0])


def gen_stream(regime: Regime, spec: StreamSpec, seed: int) -> tuple[list[Chunk], Condition]:
    rng = np.random.default_rng(seed)
    a, b, c = _tokens(regime, spec, rng)
    F = spec.tokens_per_chunk
    ts = spec.token_times()
    chunks = [Chunk(a[k * F:(k + 1) * F], b[k * F:(k + 1) * F], ts[k * F:(k + 1) * F])
              for k in range(spec.num_chunks)]
    return chunks, Condition(c)


def gen_streams(regime: Regime, spec: StreamSpec, seeds: Sequence[int]):
    out = [gen_stream(regime, spec, s) for s in seeds]
    return [o[0] for o in out], [o[1] for o in out]


def stream_tokens(chunks: Sequence[Chunk]) -> tuple[np.ndarray, np.ndarray]:
    return np.concatenate([c.a for c in chunks]), np.concatenate([c.b for c in chunks])


def gaussian_posterior(x_t, t, mu: float, sigma: float):
    """(E[x0 | x_t], E[eps | x_t]) for x0 ~ N(mu, sigma^2), eps ~ N(0, 1), x_t = t x0 + (1-t) eps."""
    x_t = np.asarray(x_t, dtype=float)
    t = np.asarray(t, dtype=float)
    var = t * t * sigma * sigma + (1 - t) ** 2
    r = x_t - t * mu
    return mu + t * sigma * sigma * r / var, (1 - t) * r / var


def optimal_velocity_gaussian(x_t, t, regime: Regime):
    """Minimizer of the flow-matching regression, E[x0 - eps | x_t], per coordinate."""
    if regime.kind is not RegimeKind.GAUSSIAN:
        raise ValueError("closed-form velocity exists only for the GAUSSIAN regime")
    x0, eps = gaussian_posterior(x_t, t, regime.mu, regime.sigma)
    return x0 - eps


@dataclass(frozen=True)
class LagEstimate:
    lag: int | None  # None when undefined (constant input)
    score: float
    threshold: float
    reliable: bool
    curve: np.ndarray  # score per shift, shifts -max_lag..max_lag


def _standardize(x: np.ndarray) -> np.ndarray | None:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    sd = x.std(axis=0)
    if np.any(sd < 1e-12):
        return None
    return (x - x.mean(axis=0)) / sd


def ncc_curve(za: np.ndarray, zb: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation for shifts s in [-max_lag, max_lag].

    Inputs are standardized column-wise; coordinate i of A is paired with
    coordinate i of B and the signed correlations are averaged. A positive shift
    means B trails A.
    """
    T = len(za)
    d = min(za.shape[1], zb.shape[1])
    za, zb = za[:, :d], zb[:, :d]
    out = np.empty(2 * max_lag + 1)
    for i, s in enumerate(range(-max_lag, max_lag + 1)):
        if s >= 0:
            pa, pb = za[: T - s], zb[s:]
        else:
            pa, pb = za[-s:], zb[: T + s]
        out[i] = float(np.mean(pa * pb)) if len(pa) else 0.0
    return out


def sync_lag(stream_a, stream_b, max_lag: int, n_perm: int = 200, alpha: float = 0.05, seed: int = 0) -> LagEstimate:
    """Integer shift maximizing normalized cross-correlation, with a significance check.

    The null distribution comes from random circular offsets of B (preserving its
    autocorrelation); the estimate is reliable when the peak beats the (1 - alpha)
    quantile of the null peaks.
    """
    za, zb = _standardize(stream_a), _standardize(stream_b)
    T = len(np.asarray(stream_a))
    if len(np.asarray(stream_b)) != T:
        raise ValueError("streams must have equal length")
    if not 0 <= max_lag < T:
        raise ValueError("max_lag must be smaller than the stream length")
    if za is None or zb is None:
        return LagEstimate(None, float("nan"), float("nan"), False, np.full(2 * max_lag + 1, np.nan))
    curve = ncc_curve(za, zb, max_lag)
    best = int(np.argmax(curve))
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    lo = min(max_lag + 1, T - 1)
    for i in range(n_perm):
        off = int(rng.integers(lo, T - lo + 1)) if T - lo >= lo else int(rng.integers(1, T))
        null[i] = ncc_curve(za, np.roll(zb, off, axis=0), max_lag).max()
    thr = float(np.quantile(null, 1 - alpha))
    return LagEstimate(best - max_lag, float(curve[best]), thr, bool(curve[best] > thr), curve)


def write_stream_csv(path: str | Path, chunks: Sequence[Chunk], stream_id: int = 0, append: bool = False) -> None:
    """One row per token: stream, chunk, timestamp, modality, coordinates (blank-padded)."""
    width = max(max(c.a.shape[1], c.b.shape[1]) for c in chunks)
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["stream", "chunk", "timestamp", "modality"] + [f"x{j}" for j in range(width)])
        for k, ch in enumerate(chunks):
            for mod, arr in (("a", ch.a), ("b", ch.b)):
                for ts, row in zip(ch.timestamps, arr):
                    vals = [repr(float(v)) for v in row] + [""] * (width - len(row))
                    w.writerow([stream_id, k, repr(float(ts)), mod] + vals)
