"""Probability-flow ODE samplers and causal stream generation.

Integrators work on any velocity field ``field(x, t1, t2, mode) -> v``; the model is
bound to that interface by ``ModelField``. NFE counts denoiser passes per stream:
a batched call over several streams counts once, CFG calls count twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .diffcore import NonFiniteError
from .model import Chunk, Condition, DualModeModel, Mode, StreamContext, make_query

MAX_FEW_STEPS = 8


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("time grid needs at least two points")
        if t[0] != 0.0 or t[-1] != 1.0:
            raise ValueError("time grid must start at 0 and end at 1")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, n: int) -> "TimeGrid":
        if n < 1:
            raise ValueError("need at least one step")
        t = np.linspace(0.0, 1.0, n + 1)
        t[-1] = 1.0
        return cls(t)

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def intervals(self):
        return zip(self.times[:-1], self.times[1:])


@dataclass
class NfeCounter:
    count: int = 0
    cfg: bool = False

    def add(self, passes: int) -> None:
        if passes < 0:
            raise ValueError("NFE cannot decrease")
        self.count += passes


class ModelField:
    """Velocity field of the model for a fixed batch of histories and conditions.

    The state is flattened per stream: ``[a tokens..., b tokens...]``.
    With ``cfg_scale != 1`` every call runs the conditional and the null-condition
    pass and combines them; such a field counts two passes.
    """

    def __init__(
        self,
        model: DualModeModel,
        contexts: Sequence[StreamContext],
        conds: Sequence[Condition],
        timestamps: np.ndarray,
        cfg_scale: float = 1.0,
    ):
        self.model = model
        self.contexts = list(contexts)
        self.conds = list(conds)
        self.timestamps = np.asarray(timestamps, float)
        self.cfg_scale = float(cfg_scale)
        c = model.cfg
        self.F = c.tokens_per_chunk
        self.na = self.F * c.d_a

    def subset(self, idx) -> "ModelField":
        idx = np.asarray(idx)
        ts = self.timestamps if self.timestamps.ndim == 1 else self.timestamps[idx]
        return ModelField(self.model, [self.contexts[i] for i in idx], [self.conds[i] for i in idx],
                          ts, self.cfg_scale)

    def with_model(self, model: DualModeModel, cfg_scale: float | None = None) -> "ModelField":
        return ModelField(model, self.contexts, self.conds, self.timestamps,
                          self.cfg_scale if cfg_scale is None else cfg_scale)

    @property
    def passes(self) -> int:
        return 1 if self.cfg_scale == 1.0 else 2

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = self.model.cfg
        B = len(x)
        return x[:, : self.na].reshape(B, self.F, c.d_a), x[:, self.na:].reshape(B, self.F, c.d_b)

    @staticmethod
    def join(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.concatenate([a.reshape(len(a), -1), b.reshape(len(b), -1)], axis=1)

    def velocity(self, x, t1, t2, mode: Mode, null: bool = False) -> np.ndarray:
        """One unguided pass; ``null`` swaps every condition for the null embedding."""
        xa, xb = self.split(x)
        conds = [Condition(c.c, True) for c in self.conds] if null else self.conds
        q = make_query(xa, xb, self.timestamps, t1, t2, self.contexts, conds)
        va, vb = self.model.predict(q, mode)
        return self.join(va, vb)

    def __call__(self, x: np.ndarray, t1: float, t2: float, mode: Mode) -> np.ndarray:
        v_cond = self.velocity(x, t1, t2, mode)
        if self.cfg_scale == 1.0:
            return v_cond
        v_uncond = self.velocity(x, t1, t2, mode, null=True)
        return v_uncond + self.cfg_scale * (v_cond - v_uncond)


def _passes(field) -> int:
    return getattr(field, "passes", 1)


def _check_state(x, step: int, t: float) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite sampler state after step {step} (t={t:.4f})")


def multi_step_sample(field: Callable, x: np.ndarray, grid: TimeGrid, counter: NfeCounter | None = None):
    """Explicit Euler over ``grid`` using instantaneous velocities (t2 == t1)."""
    x = np.array(x, dtype=float, copy=True)
    for i, (a, b) in enumerate(grid.intervals()):
        v = field(x, a, a, Mode.MULTI)
        if counter is not None:
            counter.add(_passes(field))
            counter.cfg = counter.cfg or _passes(field) == 2
        x = x + (b - a) * v
        _check_state(x, i, b)
    return x


def few_sample(field: Callable, x: np.ndarray, grid: TimeGrid, counter: NfeCounter | None = None):
    """Large jumps x <- x + (t2 - t1) * M(x, t1, t2; FEW); no guidance at inference."""
    if grid.steps > MAX_FEW_STEPS:
        raise ValueError(f"few-step grid has {grid.steps} segments (max {MAX_FEW_STEPS})")
    if _passes(field) != 1:
        raise ValueError("few-step sampling runs without classifier-free guidance")
    x = np.array(x, dtype=float, copy=True)
    for i, (a, b) in enumerate(grid.intervals()):
        v = field(x, a, b, Mode.FEW)
        if counter is not None:
            counter.add(1)
        x = x + (b - a) * v
        _check_state(x, i, b)
    return x


def update_context(context: StreamContext, chunk: Chunk) -> StreamContext:
    return context.appended(chunk)


def chunk_timestamps(k: int, tokens: int, duration: float = 1.0) -> np.ndarray:
    return k * duration + np.arange(tokens) * (duration / tokens)


@dataclass(frozen=True)
class SamplerSpec:
    """Which sampler to run per chunk."""

    mode: Mode
    grid: TimeGrid
    cfg_scale: float = 1.0

    @classmethod
    def few(cls, steps: int = 4) -> "SamplerSpec":
        return cls(Mode.FEW, TimeGrid.uniform(steps))

    @classmethod
    def multi(cls, steps: int = 32, cfg_scale: float = 1.0) -> "SamplerSpec":
        return cls(Mode.MULTI, TimeGrid.uniform(steps), cfg_scale)

    @property
    def nfe_per_chunk(self) -> int:
        per = 2 if (self.mode is Mode.MULTI and self.cfg_scale != 1.0) else 1
        return self.grid.steps * per


def sample_chunks(
    model: DualModeModel,
    contexts: Sequence[StreamContext],
    conds: Sequence[Condition],
    timestamps: np.ndarray,
    noise: np.ndarray,
    spec: SamplerSpec,
    counter: NfeCounter | None = None,
) -> np.ndarray:
    """Denoise one chunk per stream from flattened ``noise`` (B, F*(d_a+d_b))."""
    fld = ModelField(model, contexts, conds, timestamps, spec.cfg_scale)
    if spec.mode is Mode.FEW:
        return few_sample(fld, noise, spec.grid, counter)
    return multi_step_sample(fld, noise, spec.grid, counter)


@dataclass
class StreamBatch:
    streams: list  # list[list[Chunk]]
    nfe: NfeCounter = dc_field(default_factory=NfeCounter)
    generated: int = 0

    @property
    def nfe_per_chunk(self) -> float:
        return self.nfe.count / self.generated if self.generated else 0.0


def generate_streams(
    model: DualModeModel,
    conds: Sequence[Condition],
    num_chunks: int,
    spec: SamplerSpec,
    seeds: Sequence[int],
    first_chunks: Sequence[Chunk] | None = None,
    K: int = 4,
    duration: float = 1.0,
    intervene: Callable[[int, int, Chunk], Chunk] | None = None,
) -> StreamBatch:
    """Generate ``num_chunks`` chunks per stream, each conditioned only on retained history.

    ``first_chunks`` (if given) seed every history as committed chunk 0 and are not
    counted as generated. ``intervene(stream, k, chunk)`` may replace a chunk before
    it is committed (used to probe causality). Noise for stream i comes only from
    ``seeds[i]``.
    """
    if num_chunks < 1:
        raise ValueError("num_chunks must be >= 1")
    B = len(conds)
    if len(seeds) != B:
        raise ValueError("one seed per stream")
    cfg = model.cfg
    F = cfg.tokens_per_chunk
    rngs = [np.random.default_rng(s) for s in seeds]
    contexts = [StreamContext((), K) for _ in range(B)]
    streams: list[list[Chunk]] = [[] for _ in range(B)]
    start = 0
    if first_chunks is not None:
        for i, ch in enumerate(first_chunks):
            contexts[i] = update_context(contexts[i], ch)
            streams[i].append(ch)
        start = 1
    counter = NfeCounter(cfg=spec.nfe_per_chunk > spec.grid.steps)
    dim = F * (cfg.d_a + cfg.d_b)
    for k in range(start, start + num_chunks):
        ts = chunk_timestamps(k, F, duration)
        noise = np.stack([r.standard_normal(dim) for r in rngs])
        x = sample_chunks(model, contexts, conds, ts, noise, spec, counter)
        fld_split = ModelField(model, contexts, conds, ts)
        xa, xb = fld_split.split(x)
        for i in range(B):
            ch = Chunk(xa[i], xb[i], ts)
            if intervene is not None:
                ch = intervene(i, k, ch)
            streams[i].append(ch)
            contexts[i] = update_context(contexts[i], ch)
    return StreamBatch(streams, counter, num_chunks)


def generate_stream(
    model: DualModeModel,
    cond: Condition,
    num_chunks: int,
    spec: SamplerSpec,
    seed: int,
    first_chunk: Chunk | None = None,
    K: int = 4,
    duration: float = 1.0,
) -> StreamBatch:
    return generate_streams(
        model, [cond], num_chunks, spec, [seed],
        None if first_chunk is None else [first_chunk], K, duration,
    )
