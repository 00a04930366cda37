"""Dual-mode, weight-shared velocity network over two token streams.

Two modality branches (A and B) own their embeddings, attention input adapters and
feed-forward blocks; every layer shares one causal self-attention over the union of
both streams plus a prepended condition token. The network always consumes a time
pair (t1, t2); the multi-step mode is the degenerate pair t2 == t1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .diffcore import Tape, Tensor

ROPE_BASE = 10000.0


class Mode(enum.Enum):
    MULTI = "multi"
    FEW = "few"


@dataclass(frozen=True)
class Chunk:
    """One streaming unit: F tokens per modality sharing timestamps."""

    a: np.ndarray
    b: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        a, b, ts = (np.asarray(v, dtype=float) for v in (self.a, self.b, self.timestamps))
        if a.ndim != 2 or b.ndim != 2 or ts.ndim != 1:
            raise ValueError("chunk needs a:(F,d_a), b:(F,d_b), timestamps:(F,)")
        if not (len(a) == len(b) == len(ts) >= 1):
            raise ValueError("both modalities must carry the same F >= 1 timestamps")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("chunk timestamps must increase")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "timestamps", ts)

    @property
    def start(self) -> float:
        return float(self.timestamps[0])

    @property
    def end(self) -> float:
        return float(self.timestamps[-1])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(), self.b.ravel()])


@dataclass(frozen=True)
class Condition:
    c: np.ndarray
    null: bool = False

    def as_null(self) -> "Condition":
        return Condition(self.c, True)


@dataclass(frozen=True)
class StreamContext:
    """Committed history: the first chunk plus the most recent K-1 chunks."""

    chunks: tuple = ()
    K: int = 4

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("context size K must be >= 1")
        object.__setattr__(self, "chunks", tuple(self.chunks))
        for prev, nxt in zip(self.chunks, self.chunks[1:]):
            if nxt.start <= prev.end:
                raise ValueError("context timestamps must strictly increase")
        if len(self.chunks) > self.K:
            raise ValueError(f"context holds {len(self.chunks)} chunks, K={self.K}")

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def last_time(self) -> float:
        return self.chunks[-1].end if self.chunks else -np.inf

    def appended(self, chunk: Chunk) -> "StreamContext":
        if chunk.start <= self.last_time:
            raise ValueError(
                f"timestamp regression: chunk starts at {chunk.start}, context ends at {self.last_time}"
            )
        kept = self.chunks + (chunk,)
        if len(kept) > self.K:
            kept = kept[:1] + kept[len(kept) - (self.K - 1):] if self.K > 1 else kept[:1]
        return StreamContext(kept, self.K)


@dataclass
class ModelConfig:
    d_a: int = 2
    d_b: int = 3
    d_c: int = 3
    tokens_per_chunk: int = 4
    hidden: int = 64
    layers: int = 3
    heads: int = 4
    ffn_mult: int = 2
    time_freqs: int = 4
    coupled: bool = True

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.head_dim % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        for k in ("d_a", "d_b", "d_c", "tokens_per_chunk", "hidden", "layers", "heads", "ffn_mult"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")


def branch_of(name: str) -> str | None:
    """'a' / 'b' for branch-owned parameters, None for shared ones."""
    for part in name.split("."):
        if part.endswith("_a"):
            return "a"
        if part.endswith("_b"):
            return "b"
    return None


def init_params(cfg: ModelConfig, seed: int = 0, out_scale: float = 0.1) -> dict[str, np.ndarray]:
    cfg.validate()
    rng = np.random.default_rng(seed)
    H, F = cfg.hidden, cfg.ffn_mult * cfg.hidden
    n_time = 2 * (1 + 2 * cfg.time_freqs)
    p: dict[str, np.ndarray] = {}

    def lin(name, n_in, n_out, scale=1.0, bias=True):
        p[f"{name}.w"] = rng.standard_normal((n_in, n_out)) * (scale / np.sqrt(n_in))
        if bias:
            p[f"{name}.b"] = np.zeros((1, n_out))

    lin("embed_a", cfg.d_a, H)
    lin("embed_b", cfg.d_b, H)
    lin("time1", n_time, H)
    lin("time2", H, H)
    lin("cond", cfg.d_c, H)
    p["cond.null"] = rng.standard_normal((1, H)) * 0.5
    for l in range(cfg.layers):
        for br in ("a", "b"):
            lin(f"l{l}.adapt_{br}", H, H)
            lin(f"l{l}.ffn_{br}.up", H, F)
            lin(f"l{l}.ffn_{br}.down", F, H, scale=0.5)
        for k in ("q", "k", "v"):
            p[f"l{l}.w{k}"] = rng.standard_normal((H, H)) / np.sqrt(H)
        lin(f"l{l}.out", H, H, scale=0.5)
    lin("unembed_a", H, cfg.d_a, scale=out_scale)
    lin("unembed_b", H, cfg.d_b, scale=out_scale)
    return p


def rope_angles(timestamp: float, head_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Rotation angles for one temporal position; pairs (j, j + head_dim/2) share angle j."""
    if head_dim % 2:
        raise ValueError(f"odd head_dim {head_dim}")
    j = np.arange(head_dim // 2)
    return timestamp / base ** (2.0 * j / head_dim)


def _rope_tables(ts: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    dh = cfg.head_dim
    j = np.arange(dh // 2)
    ang = ts[:, None] / ROPE_BASE ** (2.0 * j / dh)
    ang = np.concatenate([ang, ang], axis=1)
    return np.tile(np.cos(ang), cfg.heads), np.tile(np.sin(ang), cfg.heads)


def _rotate_half_matrix(cfg: ModelConfig) -> np.ndarray:
    # x @ P == per head [-x2, x1]
    dh, half = cfg.head_dim, cfg.head_dim // 2
    block = np.zeros((dh, dh))
    block[half:, :half] = -np.eye(half)
    block[:half, half:] = np.eye(half)
    return np.kron(np.eye(cfg.heads), block)


def time_features(t1: np.ndarray, t2: np.ndarray, n_freq: int) -> np.ndarray:
    k = np.arange(1, n_freq + 1)
    out = []
    for t in (np.asarray(t1, float), np.asarray(t2, float)):
        out += [t[:, None], np.sin(np.pi * k * t[:, None]), np.cos(np.pi * k * t[:, None])]
    return np.concatenate(out, axis=1)


@dataclass
class Query:
    """A batch of noisy current chunks with their (t1, t2), history and condition."""

    xa: np.ndarray
    xb: np.ndarray
    timestamps: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    contexts: Sequence[StreamContext]
    cond: np.ndarray
    null: np.ndarray

    @property
    def size(self) -> int:
        return len(self.xa)

    def subset(self, idx) -> "Query":
        idx = np.asarray(idx)
        return Query(
            self.xa[idx], self.xb[idx], self.timestamps[idx], self.t1[idx], self.t2[idx],
            [self.contexts[i] for i in idx], self.cond[idx], self.null[idx],
        )

    def with_state(self, xa=None, xb=None, t1=None, t2=None, null=None) -> "Query":
        return replace(
            self,
            xa=self.xa if xa is None else xa,
            xb=self.xb if xb is None else xb,
            t1=self.t1 if t1 is None else np.broadcast_to(np.asarray(t1, float), (self.size,)).copy(),
            t2=self.t2 if t2 is None else np.broadcast_to(np.asarray(t2, float), (self.size,)).copy(),
            null=self.null if null is None else np.broadcast_to(np.asarray(null, bool), (self.size,)).copy(),
        )


def make_query(
    xa, xb, timestamps, t1, t2, contexts: Sequence[StreamContext], conds: Sequence[Condition] | Condition
) -> Query:
    xa = np.asarray(xa, float)
    xb = np.asarray(xb, float)
    if xa.ndim == 2:
        xa, xb = xa[None], xb[None]
    B = len(xa)
    ts = np.broadcast_to(np.asarray(timestamps, float), (B, xa.shape[1])).copy()
    if isinstance(conds, Condition):
        conds = [conds] * B
    return Query(
        xa, xb, ts,
        np.broadcast_to(np.asarray(t1, float), (B,)).copy(),
        np.broadcast_to(np.asarray(t2, float), (B,)).copy(),
        list(contexts),
        np.stack([np.asarray(c.c, float) for c in conds]),
        np.array([c.null for c in conds], dtype=bool),
    )


@dataclass
class Layout:
    """Row bookkeeping for one batched forward pass.

    Embeddings and feed-forward blocks run on type-major rows
    ``[condition tokens | all A tokens | all B tokens]``; attention runs on
    sample-major rows, each sample padded to ``T`` rows so that one grouped
    matmul covers the batch. ``perm`` maps sample-major rows to type-major rows
    (padding rows point at an extra zero row) and ``inv`` maps back.
    """

    B: int
    T: int
    perm: np.ndarray
    inv: np.ndarray
    kind: np.ndarray  # per sample-major row: 0 condition, 1 A, 2 B, 3 padding
    chunk: np.ndarray  # chunk ordinal within the sample (-1 condition / padding)
    ts: np.ndarray
    current: np.ndarray
    mask: np.ndarray  # (B*T, T)
    xa: np.ndarray
    xb: np.ndarray
    time_feat: np.ndarray  # rows of A tokens then B tokens
    a_cur: np.ndarray  # A-row indices of current-chunk tokens
    b_cur: np.ndarray

    def sample_rows(self, s: int) -> slice:
        return slice(s * self.T, (s + 1) * self.T)


def build_layout(q: Query, cfg: ModelConfig, mode: Mode) -> Layout:
    B, F = q.size, q.xa.shape[1]
    if q.xa.shape[2] != cfg.d_a or q.xb.shape[2] != cfg.d_b or q.xb.shape[1] != F:
        raise ValueError(f"chunk shapes {q.xa.shape}, {q.xb.shape} do not match model")
    if len(q.contexts) != B:
        raise ValueError("one context per batch element required")
    if np.any(q.t1 < 0) or np.any(q.t2 > 1) or np.any(q.t1 > q.t2):
        raise ValueError("time pair must satisfy 0 <= t1 <= t2 <= 1")
    if mode is Mode.MULTI and np.any(q.t1 != q.t2):
        raise ValueError("MULTI mode requires the degenerate pair t2 == t1")

    n_ctx = [len(c.chunks) for c in q.contexts]
    T = 1 + 2 * F * (max(n_ctx) + 1)
    M = F * sum(n + 1 for n in n_ctx)  # A (and B) tokens in the batch
    zero_row = B + 2 * M

    per_a, per_b, tf1, tf2 = [], [], [], []
    perm = np.full(B * T, zero_row)
    kind = np.full(B * T, 3)
    chunk = np.full(B * T, -1)
    ts = np.zeros(B * T)
    current = np.zeros(B * T, bool)
    a_cur = []
    mask = np.zeros((B * T, T), bool)
    a_off = 0
    for s in range(B):
        ctx = q.contexts[s]
        if ctx.chunks and ctx.last_time >= q.timestamps[s, 0]:
            raise ValueError("context timestamps overlap the current chunk")
        chunks = [(c.a, c.b, c.timestamps) for c in ctx.chunks]
        chunks.append((q.xa[s], q.xb[s], q.timestamps[s]))
        n = len(chunks) * F
        for o, (ca, cb, cts) in enumerate(chunks):
            per_a.append(ca)
            per_b.append(cb)
            last = o == len(chunks) - 1
            tf1.append(np.full(F, q.t1[s] if last else 1.0))
            tf2.append(np.full(F, q.t2[s] if last else 1.0))
        base = s * T
        tok_ts = np.concatenate([c[2] for c in chunks])
        tok_ch = np.repeat(np.arange(len(chunks)), F)
        tok_cur = tok_ch == len(chunks) - 1
        perm[base] = s
        kind[base] = 0
        ts[base] = tok_ts[0]
        for m, off in ((1, 1), (2, 1 + n)):
            rows = slice(base + off, base + off + n)
            perm[rows] = (B if m == 1 else B + M) + a_off + np.arange(n)
            kind[rows] = m
            chunk[rows] = tok_ch
            ts[rows] = tok_ts
            current[rows] = tok_cur
        a_cur.append(a_off + np.flatnonzero(tok_cur))
        a_off += n

        lk, lc = kind[base:base + T], chunk[base:base + T]
        ci, cj = (lk == 0)[:, None], (lk == 0)[None, :]
        tok_i, tok_j = ((lk == 1) | (lk == 2))[:, None], ((lk == 1) | (lk == 2))[None, :]
        link = lc[None, :] <= lc[:, None]
        if not cfg.coupled:
            link = link & (lk[:, None] == lk[None, :])
        eye = np.eye(T, dtype=bool)
        mask[base:base + T] = (tok_i & cj) | (tok_i & tok_j & link) | (~tok_i & eye)

    inv = np.empty(zero_row, int)
    real = perm < zero_row
    inv[perm[real]] = np.flatnonzero(real)
    feats = time_features(np.concatenate(tf1), np.concatenate(tf2), cfg.time_freqs)
    cur = np.concatenate(a_cur)
    return Layout(
        B=B, T=T, perm=perm, inv=inv, kind=kind, chunk=chunk, ts=ts, current=current, mask=mask,
        xa=np.concatenate(per_a), xb=np.concatenate(per_b),
        time_feat=np.concatenate([feats, feats]), a_cur=cur, b_cur=cur,
    )


@dataclass
class Trace:
    """Attention weights captured during a forward pass.

    ``weights[layer][head]`` is the (B*T, T) sample-major weight matrix; row
    ``s*T + i`` holds token i's weights over the T rows of sample s.
    """

    layout: Layout | None = None
    weights: list = field(default_factory=list)

    def sample_map(self, layer: int, s: int) -> np.ndarray:
        """Head-stacked (heads, T, T) attention of sample ``s`` at ``layer``."""
        rows = self.layout.sample_rows(s)
        return np.stack([w[rows] for w in self.weights[layer]])


def forward(
    tape: Tape,
    P: dict[str, Tensor],
    q: Query,
    cfg: ModelConfig,
    mode: Mode,
    trace: Trace | None = None,
) -> tuple[Tensor, Tensor]:
    """Velocities for the current chunk of every query: ((B*F, d_a), (B*F, d_b)) tensors."""
    lay = build_layout(q, cfg, mode)
    B, G = q.size, q.size
    H, dh = cfg.hidden, cfg.head_dim
    M = len(lay.xa)
    if trace is not None:
        trace.layout = lay
        trace.weights = []

    # condition token: learned null embedding substituted where flagged
    keep = (~q.null).astype(float)[:, None]
    hc = tape.add(
        tape.mul(tape.affine(q.cond, P["cond.w"], P["cond.b"]), keep),
        tape.mul(q.null.astype(float)[:, None], P["cond.null"]),
    )
    temb = tape.affine(tape.tanh(tape.affine(lay.time_feat, P["time1.w"], P["time1.b"])), P["time2.w"], P["time2.b"])
    ha = tape.add(tape.affine(lay.xa, P["embed_a.w"], P["embed_a.b"]), tape.slice(temb, slice(0, M)))
    hb = tape.add(tape.affine(lay.xb, P["embed_b.w"], P["embed_b.b"]), tape.slice(temb, slice(M, 2 * M)))

    cos, sin = _rope_tables(lay.ts, cfg)
    rot = _rotate_half_matrix(cfg)
    zero = np.zeros((1, H))

    def rope(x: Tensor) -> Tensor:
        return tape.add(tape.mul(x, cos), tape.mul(tape.matmul(x, rot), sin))

    for l in range(cfg.layers):
        ua = tape.affine(ha, P[f"l{l}.adapt_a.w"], P[f"l{l}.adapt_a.b"])
        ub = tape.affine(hb, P[f"l{l}.adapt_b.w"], P[f"l{l}.adapt_b.b"])
        U = tape.slice(tape.concat([hc, ua, ub, zero], axis=0), lay.perm)
        Q = rope(tape.scale(tape.matmul(U, P[f"l{l}.wq"]), 1.0 / np.sqrt(dh)))
        Kt = rope(tape.matmul(U, P[f"l{l}.wk"]))
        V = tape.matmul(U, P[f"l{l}.wv"])
        heads, layer_w = [], []
        for h in range(cfg.heads):
            cols = slice(h * dh, (h + 1) * dh)
            logits = tape.matmul(tape.slice(Q, cols=cols), tape.slice(Kt, cols=cols), trans_b=True, groups=G)
            w = tape.softmax(logits, lay.mask)
            layer_w.append(w.data)
            heads.append(tape.matmul(w, tape.slice(V, cols=cols), groups=G))
        if trace is not None:
            trace.weights.append(layer_w)
        O = tape.slice(tape.affine(tape.concat(heads, axis=1), P[f"l{l}.out.w"], P[f"l{l}.out.b"]), lay.inv)
        hc = tape.add(hc, tape.slice(O, slice(0, B)))
        ha = tape.add(ha, tape.slice(O, slice(B, B + M)))
        hb = tape.add(hb, tape.slice(O, slice(B + M, B + 2 * M)))
        for br in ("a", "b"):
            x = ha if br == "a" else hb
            f = tape.affine(
                tape.gelu(tape.affine(x, P[f"l{l}.ffn_{br}.up.w"], P[f"l{l}.ffn_{br}.up.b"])),
                P[f"l{l}.ffn_{br}.down.w"], P[f"l{l}.ffn_{br}.down.b"],
            )
            if br == "a":
                ha = tape.add(ha, f)
            else:
                hb = tape.add(hb, f)

    va = tape.affine(tape.slice(ha, lay.a_cur), P["unembed_a.w"], P["unembed_a.b"])
    vb = tape.affine(tape.slice(hb, lay.b_cur), P["unembed_b.w"], P["unembed_b.b"])
    return va, vb


class DualModeModel:
    """Parameters plus configuration; one parameter set serves both modes."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        cfg.validate()
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig | None = None, seed: int = 0) -> "DualModeModel":
        cfg = replace(cfg) if cfg else ModelConfig()
        return cls(cfg, init_params(cfg, seed))

    def set_branch_coupling(self, enabled: bool) -> None:
        self.cfg.coupled = bool(enabled)

    def clone(self) -> "DualModeModel":
        return DualModeModel(replace(self.cfg), {k: v.copy() for k, v in self.params.items()})

    def with_params(self, params: dict[str, np.ndarray]) -> "DualModeModel":
        return DualModeModel(self.cfg, params)

    def predict(self, q: Query, mode: Mode, trace: Trace | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Velocity arrays shaped like ``q.xa`` / ``q.xb`` (no gradient recorded)."""
        tape = Tape(grad=False)
        P = {k: tape.constant(v) for k, v in self.params.items()}
        va, vb = forward(tape, P, q, self.cfg, mode, trace)
        return va.data.reshape(q.xa.shape), vb.data.reshape(q.xb.shape)

    def forward(self, tape: Tape, P: dict[str, Tensor], q: Query, mode: Mode, trace: Trace | None = None):
        return forward(tape, P, q, self.cfg, mode, trace)
