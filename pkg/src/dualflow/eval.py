"""Windowed long-horizon metrics, energy distance and attention analyses."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Chunk, Condition, DualModeModel, Mode, StreamContext, Trace, make_query
from .sampler import StreamBatch
from .synthdata import ncc_curve, stream_tokens

METRIC_COLUMNS = ("regime", "window_start", "window_end", "energy_distance", "sync_lag_error",
                  "displacement_mean", "nfe_per_chunk")
DEFAULT_FRACTIONS = (0.2, 0.4, 0.4)


# -- windows -----------------------------------------------------------------

@dataclass(frozen=True)
class WindowSpec:
    """Half-open chunk-index windows [start, end), disjoint and ordered."""

    windows: tuple

    def __post_init__(self):
        w = tuple((int(a), int(b)) for a, b in self.windows)
        if not w:
            raise ValueError("need at least one window")
        for a, b in w:
            if not 0 <= a < b:
                raise ValueError(f"empty or negative window [{a}, {b})")
        for (_, b0), (a1, _) in zip(w, w[1:]):
            if a1 < b0:
                raise ValueError("windows must be disjoint and ordered")
        object.__setattr__(self, "windows", w)

    @classmethod
    def proportional(cls, num_chunks: int, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                     offset: int = 0) -> "WindowSpec":
        """Split ``num_chunks`` chunks (starting at ``offset``) by cumulative fractions."""
        if abs(sum(fractions) - 1.0) > 1e-9 or any(f <= 0 for f in fractions):
            raise ValueError("fractions must be positive and sum to 1")
        edges = np.rint(np.cumsum((0.0,) + tuple(fractions)) * num_chunks).astype(int) + offset
        return cls(tuple(zip(edges[:-1], edges[1:])))

    @property
    def end(self) -> int:
        return self.windows[-1][1]


# -- distances ---------------------------------------------------------------

def _mean_pairwise(X: np.ndarray, Y: np.ndarray, block: int = 512) -> float:
    """Exact mean Euclidean distance over all pairs, accumulated in blocks."""
    total = 0.0
    yy = np.sum(Y * Y, axis=1)
    for i in range(0, len(X), block):
        xb = X[i:i + block]
        d2 = np.sum(xb * xb, axis=1)[:, None] + yy[None, :] - 2.0 * xb @ Y.T
        total += float(np.sqrt(np.maximum(d2, 0.0)).sum())
    return total / (len(X) * len(Y))


def energy_distance(X, Y) -> float:
    """2 E|X-Y| - E|X-X'| - E|Y-Y'| over all pairs (V-statistic; zero on identical sets)."""
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("energy distance needs non-empty sample sets")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("sample dimensions differ")
    return max(2 * _mean_pairwise(X, Y) - _mean_pairwise(X, X) - _mean_pairwise(Y, Y), 0.0)


def folded_normal_mean(mu: float, s: float) -> float:
    """E|Z| for Z ~ N(mu, s^2)."""
    from scipy.stats import norm

    return s * math.sqrt(2 / math.pi) * math.exp(-mu * mu / (2 * s * s)) + mu * (1 - 2 * norm.cdf(-mu / s))


def paired_bootstrap_ed(XA, XB, Y, n_boot: int = 200, seed: int = 0, level: float = 0.95):
    """Bootstrap CI of ED(XA, Y) - ED(XB, Y); rows of XA and XB are paired."""
    XA, XB, Y = (np.asarray(v, float) for v in (XA, XB, Y))
    if len(XA) != len(XB):
        raise ValueError("paired samples must have equal size")
    rng = np.random.default_rng(seed)
    diffs = np.empty(n_boot)
    for b in range(n_boot):
        i = rng.integers(0, len(XA), len(XA))
        j = rng.integers(0, len(Y), len(Y))
        diffs[b] = energy_distance(XA[i], Y[j]) - energy_distance(XB[i], Y[j])
    a = (1 - level) / 2
    point = energy_distance(XA, Y) - energy_distance(XB, Y)
    return point, float(np.quantile(diffs, a)), float(np.quantile(diffs, 1 - a))


# -- windowed metrics ----------------------------------------------------------

@dataclass
class MetricRow:
    regime: str
    window_start: int
    window_end: int
    energy_distance: float
    sync_lag_error: float
    displacement_mean: float
    nfe_per_chunk: float

    def values(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class MetricTable:
    rows: list = field(default_factory=list)

    def extend(self, other: "MetricTable") -> "MetricTable":
        self.rows.extend(other.rows)
        return self

    def regimes(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.regime not in seen:
                seen.append(r.regime)
        return seen

    def for_regime(self, regime: str) -> "MetricTable":
        return MetricTable([r for r in self.rows if r.regime == regime])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([v if isinstance(v, (str, int)) else repr(float(v)) for v in r.values()])

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricTable":
        with open(path, newline="") as f:
            rd = csv.reader(f)
            head = next(rd)
            if tuple(head) != METRIC_COLUMNS:
                raise ValueError(f"unexpected metric columns {head}")
            rows = [MetricRow(r[0], int(r[1]), int(r[2]), *(float(v) for v in r[3:])) for r in rd]
        return cls(rows)


def chunk_vectors(streams: Sequence[Sequence[Chunk]], start: int, end: int) -> np.ndarray:
    return np.stack([s[k].flat() for s in streams for k in range(start, end)])


def window_sync_error(streams: Sequence[Sequence[Chunk]], start: int, end: int, true_lag: float | None,
                      max_lag_chunks: int = 2) -> float:
    """|estimated - true| cross-modal lag in chunks, NCC curves averaged over streams.

    NaN when the regime has no defined lag or the window is too short.
    """
    if true_lag is None:
        return float("nan")
    F = len(streams[0][start].timestamps)
    max_lag = max_lag_chunks * F
    if (end - start) * F <= max_lag:
        return float("nan")
    curves = []
    for s in streams:
        a, b = stream_tokens(s[start:end])
        sa, sb = a.std(axis=0), b.std(axis=0)
        if np.any(sa < 1e-12) or np.any(sb < 1e-12):
            continue
        curves.append(ncc_curve((a - a.mean(0)) / sa, (b - b.mean(0)) / sb, max_lag))
    if not curves:
        return float("nan")
    lag_tokens = int(np.argmax(np.mean(curves, axis=0))) - max_lag
    return abs(lag_tokens / F - true_lag)


def displacement(streams: Sequence[Sequence[Chunk]], start: int, end: int) -> float:
    """Mean norm of consecutive chunk differences inside the window."""
    d = [np.linalg.norm(s[k].flat() - s[k - 1].flat()) for s in streams for k in range(max(start, 1), end)]
    return float(np.mean(d)) if d else float("nan")


def windowed_eval(streams: Sequence[Sequence[Chunk]], reference: Sequence[Sequence[Chunk]], windows: WindowSpec,
                  regime: str = "", true_lag: float | None = None, nfe_per_chunk: float = float("nan"),
                  max_lag_chunks: int = 2) -> MetricTable:
    """Per-window metrics of generated ``streams`` against ground-truth ``reference`` streams.

    Energy distance is computed per stream position (generated chunk k across
    streams vs reference chunk k) and averaged over the window's positions, so
    every term has the same sample sizes and the small-sample bias of the
    statistic is identical across windows of different length.
    """
    n = min(len(s) for s in streams)
    if windows.end > n or windows.end > min(len(s) for s in reference):
        raise ValueError(f"window end {windows.end} beyond stream length {n}")
    table = MetricTable()
    for a, b in windows.windows:
        table.rows.append(MetricRow(
            regime, a, b,
            float(np.mean([energy_distance(chunk_vectors(streams, k, k + 1), chunk_vectors(reference, k, k + 1))
                           for k in range(a, b)])),
            window_sync_error(streams, a, b, true_lag, max_lag_chunks),
            displacement(streams, a, b),
            nfe_per_chunk,
        ))
    return table


def drift_ratio(table: MetricTable, invert: Sequence[str] = ()) -> dict[str, float]:
    """Last-window over first-window value per metric (inverted for quality-style metrics).

    A zero denominator is flagged as NaN.
    """
    if len(table.rows) < 2:
        raise ValueError("drift ratio needs at least two windows")
    first, last = table.rows[0], table.rows[-1]
    out = {}
    for m in ("energy_distance", "sync_lag_error", "displacement_mean"):
        num, den = getattr(last, m), getattr(first, m)
        if m in invert:
            num, den = den, num
        out[m] = float("nan") if den == 0 or not np.isfinite(den) or not np.isfinite(num) else num / den
    return out


# -- attention analyses ----------------------------------------------------------

def _token_rows(trace: Trace, s: int) -> np.ndarray:
    lay = trace.layout
    rows = np.arange(s * lay.T, (s + 1) * lay.T)
    return rows[lay.kind[rows] != 3]


def attention_maps(model: DualModeModel, q, mode: Mode) -> Trace:
    trace = Trace()
    model.predict(q, mode, trace)
    return trace


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def attention_similarity(model: DualModeModel, q, t2: np.ndarray) -> np.ndarray:
    """Per-layer mean cosine similarity of MULTI (t1, t1) vs FEW (t1, t2) attention maps.

    ``q`` fixes x_t1, t1, histories and conditions; only the second time changes.
    Padding rows are excluded; heads are concatenated per layer.
    """
    q_multi = q.with_state(t2=q.t1)
    q_few = q.with_state(t2=np.broadcast_to(np.asarray(t2, float), q.t1.shape).copy())
    tm = attention_maps(model, q_multi, Mode.MULTI)
    tf = attention_maps(model, q_few, Mode.FEW)
    L = model.cfg.layers
    out = np.zeros(L)
    for l in range(L):
        sims = []
        for s in range(q.size):
            r = _token_rows(tm, s)
            a = np.concatenate([w[r].ravel() for w in tm.weights[l]])
            b = np.concatenate([w[r].ravel() for w in tf.weights[l]])
            sims.append(_cos(a, b))
        out[l] = np.mean(sims)
    return out


@dataclass
class Allocation:
    mass: np.ndarray  # per retained history chunk, sums to 1
    entropy: float


def allocation_from_trace(trace: Trace, s: int = 0) -> Allocation:
    """Attention of current-chunk tokens over history chunks, averaged over layers and heads."""
    lay = trace.layout
    rows = np.arange(s * lay.T, (s + 1) * lay.T)
    cur = rows[lay.current[rows]]
    hist_chunks = lay.chunk[rows]
    n_hist = int(hist_chunks[~lay.current[rows] & (lay.kind[rows] != 3) & (hist_chunks >= 0)].max(initial=-1)) + 1
    if n_hist == 0:
        raise ValueError("query has no history to attend to")
    mass = np.zeros(n_hist)
    for layer in trace.weights:
        for w in layer:
            sub = w[cur]
            for k in range(n_hist):
                cols = np.flatnonzero((hist_chunks == k) & ~lay.current[rows])
                mass[k] += sub[:, cols].sum()
    mass = mass / mass.sum()
    return Allocation(mass, entropy_of(mass))


def entropy_of(p: np.ndarray) -> float:
    p = np.asarray(p, float)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum()) + 0.0


def attention_allocation(model: DualModeModel, stream: Sequence[Chunk], query_position: int,
                         cond: Condition | None = None, K: int = 4, t1: float = 0.5, t2: float = 0.75,
                         seed: int = 0) -> Allocation:
    """Attention mass per retained history chunk when generating chunk ``query_position``.

    The query chunk is the stream's own chunk noised to level t1 and evaluated in
    FEW mode over (t1, t2); the history is the retained context before it.
    """
    if not 0 < query_position < len(stream):
        raise ValueError("query position must index a chunk after the first")
    ctx = StreamContext((), K)
    for c in stream[:query_position]:
        ctx = ctx.appended(c)
    ch = stream[query_position]
    rng = np.random.default_rng(seed)
    xa = t1 * ch.a + (1 - t1) * rng.standard_normal(ch.a.shape)
    xb = t1 * ch.b + (1 - t1) * rng.standard_normal(ch.b.shape)
    cond = cond or Condition(np.zeros(model.cfg.d_c), null=True)
    q = make_query(xa, xb, ch.timestamps, t1, t2, [ctx], cond)
    trace = attention_maps(model, q, Mode.FEW if t2 != t1 else Mode.MULTI)
    return allocation_from_trace(trace, 0)


# -- throughput ----------------------------------------------------------------

@dataclass(frozen=True)
class Throughput:
    chunks_per_sec: float
    nfe_per_chunk: float


def throughput_report(run: StreamBatch, seconds: float) -> Throughput:
    n = run.generated * len(run.streams)
    return Throughput(n / seconds if seconds > 0 else float("inf"), run.nfe_per_chunk)


# -- probe construction shared by the CLI and the benchmarks -------------------------

def probe_query(source, n: int, seed: int, K: int = 4, R_max: int = 6):
    """Noisy ground-truth chunks with ground-truth histories of random length.

    Returns the query at the degenerate pair (t1, t1) and t1 per probe.
    """
    from .trainer import gt_context

    rng = np.random.default_rng(seed)
    R = int(rng.integers(0, R_max + 1))
    chunks, conds = source.draw(rng, n, R + 2)
    t1 = rng.uniform(0.05, 0.5, size=n)
    eps_a = rng.standard_normal((n,) + chunks[0][R + 1].a.shape)
    eps_b = rng.standard_normal((n,) + chunks[0][R + 1].b.shape)
    xa = np.stack([s[R + 1].a for s in chunks]) * t1[:, None, None] + (1 - t1[:, None, None]) * eps_a
    xb = np.stack([s[R + 1].b for s in chunks]) * t1[:, None, None] + (1 - t1[:, None, None]) * eps_b
    ctxs = [gt_context(s, R + 1, K) for s in chunks]
    q = make_query(xa, xb, chunks[0][R + 1].timestamps, t1, t1, ctxs, conds)
    return q, t1


def probe_t2(t1: np.ndarray, seed: int, intervals: Sequence[float] = (1 / 8, 1 / 4, 1 / 2)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.minimum(t1 + np.asarray(intervals)[rng.integers(0, len(intervals), len(t1))], 1.0)


def late_allocation(model: DualModeModel, streams: Sequence[Sequence[Chunk]], conds: Sequence[Condition],
                    K: int = 4, position: int | None = None) -> tuple[np.ndarray, float]:
    """Mean history-attention mass and mean entropy at a late query position over several streams."""
    masses, ents = [], []
    for i, (s, c) in enumerate(zip(streams, conds)):
        pos = len(s) - 1 if position is None else position
        a = attention_allocation(model, s, pos, c, K, seed=i)
        masses.append(a.mass)
        ents.append(a.entropy)
    width = max(len(m) for m in masses)
    mass = np.mean([np.pad(m, (0, width - len(m))) for m in masses], axis=0)
    return mass, float(np.mean(ents))
