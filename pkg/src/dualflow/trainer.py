"""Joint MULTI/FEW training, branch pretraining and the comparison baselines.

Every step draws its randomness from ``default_rng([seed, step, stream])``, so a
run resumed from a checkpoint at step s replays exactly what an uninterrupted
run would have done from step s.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diffcore import NonFiniteError, Tape
from .distill import (
    DistillBatch,
    DistillConfig,
    IntervalSample,
    dmd_terms,
    hybrid_loss,
    pair_mse,
    rows,
    sample_intervals,
    shortcut_target,
    train_fake_step,
    x0_from_velocity,
)
from .flow import interpolate, target_velocity
from .model import Chunk, Condition, DualModeModel, Mode, StreamContext, branch_of, make_query
from .optim import EmaState, OptimState, ema_update, optimizer_step
from .sampler import ModelField, SamplerSpec, generate_streams, update_context
from .synthdata import Regime, StreamSpec, gen_stream

PRETRAIN_EMA = 0.999
MUTUAL_EMA = 0.99


class TrainRegime(enum.Enum):
    MUTUAL = "mutual"
    TF_DMD = "tf_dmd"
    TF_SHORTCUT = "tf_shortcut"
    SELF_FORCING = "self_forcing"


@dataclass
class TrainConfig:
    regime: TrainRegime = TrainRegime.MUTUAL
    batch_size: int = 8
    lr: float = 1e-3
    fake_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.02
    clip_norm: float = 0.5
    ema_decay: float = MUTUAL_EMA
    K: int = 4
    R_max: int = 6
    rollout_steps: int = 4
    cond_dropout: float = 0.1
    distill: DistillConfig = field(default_factory=DistillConfig)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.K < 1 or self.R_max < 0 or self.rollout_steps < 1:
            raise ValueError("batch_size, K, rollout_steps must be >= 1 and R_max >= 0")
        if not 0 <= self.cond_dropout < 1:
            raise ValueError("cond_dropout must lie in [0, 1)")

    def optim(self, lr: float | None = None) -> dict:
        return dict(lr=self.lr if lr is None else lr, beta1=self.beta1, beta2=self.beta2,
                    weight_decay=self.weight_decay, clip_norm=self.clip_norm)


@dataclass
class StreamSource:
    """Ground-truth streams for training, drawn from a synthetic regime."""

    regime: Regime
    tokens_per_chunk: int = 4
    d_a: int = 2
    d_b: int = 3
    duration: float = 1.0

    def spec(self, num_chunks: int) -> StreamSpec:
        return StreamSpec(num_chunks, self.tokens_per_chunk, self.d_a, self.d_b, self.duration)

    def draw(self, rng: np.random.Generator, n: int, num_chunks: int):
        seeds = rng.integers(0, 2 ** 63, size=n)
        out = [gen_stream(self.regime, self.spec(num_chunks), int(s)) for s in seeds]
        return [o[0] for o in out], [o[1] for o in out]


@dataclass
class TrainState:
    model: DualModeModel
    opt: OptimState
    ema: EmaState
    fake: DualModeModel | None = None
    fake_opt: OptimState | None = None
    teacher: DualModeModel | None = None
    step: int = 0
    skipped: int = 0


def init_state(model: DualModeModel, cfg: TrainConfig, with_fake: bool = True,
               teacher: DualModeModel | None = None, ema_decay: float | None = None) -> TrainState:
    """Optimizer/EMA around ``model``; the fake model starts as a clone of it."""
    fake = model.clone() if with_fake else None
    return TrainState(
        model=model,
        opt=OptimState.for_params(model.params, **cfg.optim()),
        ema=EmaState.of(model.params, cfg.ema_decay if ema_decay is None else ema_decay),
        fake=fake,
        fake_opt=OptimState.for_params(fake.params, **cfg.optim(cfg.fake_lr)) if fake else None,
        teacher=teacher,
    )


LOG_COLUMNS = ("step", "regime", "R", "l_multi", "l_sc", "l_dmd", "l_few", "total", "grad_norm",
               "fake_loss", "rollout_nfe", "skipped")


@dataclass
class StepLog:
    step: int
    regime: str
    R: int
    l_multi: float = 0.0
    l_sc: float = 0.0
    l_dmd: float = 0.0
    l_few: float = 0.0
    total: float = 0.0
    grad_norm: float = 0.0
    fake_loss: float = 0.0
    rollout_nfe: int = 0
    skipped: int = 0

    def row(self) -> list:
        return [getattr(self, c) if not isinstance(getattr(self, c), float) else repr(getattr(self, c))
                for c in LOG_COLUMNS]


class CsvLog:
    def __init__(self, path: str | Path | None, append: bool = False):
        self.path = None if path is None else Path(path)
        if self.path is not None and not (append and self.path.exists()):
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    def write(self, rec: StepLog) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(rec.row())


def step_rng(cfg: TrainConfig, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, step, stream])


def gt_context(chunks: Sequence[Chunk], upto: int, K: int) -> StreamContext:
    """Teacher-forced history: ground-truth chunks 0..upto-1 under the retention rule."""
    ctx = StreamContext((), K)
    for c in chunks[:upto]:
        ctx = update_context(ctx, c)
    return ctx


def build_inferred_context(model: DualModeModel, first_chunks: Sequence[Chunk], conds: Sequence[Condition],
                           R: int, spec: SamplerSpec, seeds: Sequence[int], K: int = 4,
                           duration: float = 1.0) -> tuple[list[StreamContext], int]:
    """Roll out R chunks per stream with the FEW sampler after the ground-truth first chunk.

    Returns detached contexts (plain arrays) and the per-stream NFE spent.
    """
    if R < 0:
        raise ValueError("R must be >= 0")
    if R == 0:
        return [StreamContext((c,), K) for c in first_chunks], 0
    res = generate_streams(model, conds, R, spec, seeds, first_chunks, K, duration)
    ctxs = []
    for s in res.streams:
        ctx = StreamContext((), K)
        for c in s:
            ctx = update_context(ctx, c)
        ctxs.append(ctx)
    return ctxs, res.nfe.count


def flat_chunks(chunks: Sequence[Chunk]) -> np.ndarray:
    return np.stack([c.flat() for c in chunks])


def dropped(conds: Sequence[Condition], rng: np.random.Generator, p: float) -> list[Condition]:
    mask = rng.uniform(size=len(conds)) < p
    return [Condition(c.c, bool(m) or c.null) for c, m in zip(conds, mask)]


def multi_loss(tape: Tape, P: dict, model: DualModeModel, batch: DistillBatch, x0: np.ndarray,
               t: np.ndarray, eps: np.ndarray):
    """Flow-matching regression of the MULTI velocity on clean chunks ``x0`` under ``batch``'s histories."""
    x_t = interpolate(x0, eps, np.asarray(t, float)[:, None])
    fld = batch.field(model)
    xa, xb = fld.split(x_t)
    q = make_query(xa, xb, batch.timestamps, t, t, batch.contexts, batch.conds)
    v = model.forward(tape, P, q, Mode.MULTI)
    return pair_mse(tape, v, rows(target_velocity(x0, eps), model))


@dataclass
class _Draw:
    R: int
    chunks: list
    conds: list
    x0: np.ndarray  # flat target chunk R+1
    ts: np.ndarray


def _draw(source: StreamSource, cfg: TrainConfig, rng: np.random.Generator) -> _Draw:
    R = int(rng.integers(0, cfg.R_max + 1))
    chunks, conds = source.draw(rng, cfg.batch_size, R + 2)
    tgt = [s[R + 1] for s in chunks]
    return _Draw(R, chunks, conds, flat_chunks(tgt), tgt[0].timestamps)


def _joint_losses(tape: Tape, P: dict, model: DualModeModel, ctx_batch: DistillBatch, d: _Draw,
                  cfg: TrainConfig, rng: np.random.Generator, with_multi: bool):
    """One batched pass: MULTI rows at (t, t) and FEW rows at (t1, t2).

    MULTI(t, t) is FEW(t, t) bitwise, so both halves share a single forward.
    Returns (l_multi or None, few velocity rows, interval sample, x_t1).
    """
    B = len(d.conds)
    iv = sample_intervals(rng, B, cfg.distill)
    eps_f = rng.standard_normal(d.x0.shape)
    x_t1 = interpolate(d.x0, eps_f, iv.t1[:, None])
    ctxs, conds = list(ctx_batch.contexts), list(ctx_batch.conds)
    xs, t1s, t2s = [x_t1], [iv.t1], [iv.t2]
    if with_multi:
        t = rng.uniform(size=B)
        eps_m = rng.standard_normal(d.x0.shape)
        x_t = interpolate(d.x0, eps_m, t[:, None])
        xs.insert(0, x_t)
        t1s.insert(0, t)
        t2s.insert(0, t)
        ctxs = ctxs + ctxs
        conds = dropped(ctx_batch.conds, rng, cfg.cond_dropout) + conds
    x = np.concatenate(xs)
    fld = ModelField(model, ctxs, conds, ctx_batch.timestamps)
    xa, xb = fld.split(x)
    q = make_query(xa, xb, ctx_batch.timestamps, np.concatenate(t1s), np.concatenate(t2s), ctxs, conds)
    va, vb = model.forward(tape, P, q, Mode.FEW)
    F = model.cfg.tokens_per_chunk
    n = B * F
    l_multi = None
    if with_multi:
        ua, ub = rows(target_velocity(d.x0, eps_m), model)
        l_multi = pair_mse(tape, (tape.slice(va, slice(0, n)), tape.slice(vb, slice(0, n))), (ua, ub))
        va, vb = tape.slice(va, slice(n, 2 * n)), tape.slice(vb, slice(n, 2 * n))
    return l_multi, (va, vb), iv, x_t1


def _few_objective(tape: Tape, state: TrainState, v_few, iv: IntervalSample, x_t1: np.ndarray,
                   batch: DistillBatch, cfg: TrainConfig, rng: np.random.Generator,
                   teacher: DualModeModel | None, teacher_batch: DistillBatch | None):
    """Hybrid FEW loss; returns (l_sc, l_dmd, l_few tensors-or-None, detached x0_few)."""
    model, dc = state.model, cfg.distill
    l_sc = l_dmd = None
    if dc.lam < 1.0:
        target = shortcut_target(model, batch, x_t1, iv, dc, teacher)
        l_sc = pair_mse(tape, v_few, rows(target, model))
    x0_t = x0_from_velocity(tape, x_t1, iv.t1, v_few, model)
    x0_few = ModelField.join(x0_t[0].data.reshape(len(x_t1), -1), x0_t[1].data.reshape(len(x_t1), -1))
    if dc.lam > 0.0:
        eps = rng.standard_normal(x0_few.shape)
        terms = dmd_terms(model, state.fake, batch, x0_few, iv.tau, eps, dc.w, teacher, teacher_batch)
        l_dmd = pair_mse(tape, x0_t, rows(terms.target, model))
    if l_sc is None:
        l_few = tape.scale(l_dmd, 1.0)
    elif l_dmd is None:
        l_few = tape.scale(l_sc, 1.0)
    else:
        l_few = tape.add(tape.scale(l_dmd, dc.lam), tape.scale(l_sc, 1.0 - dc.lam))
    return l_sc, l_dmd, l_few, x0_few


def _regime_contexts(state: TrainState, d: _Draw, cfg: TrainConfig, rng: np.random.Generator,
                     inferred: bool, duration: float) -> tuple[DistillBatch, int]:
    if inferred:
        seeds = [int(s) for s in rng.integers(0, 2 ** 63, size=len(d.conds))]
        ctxs, nfe = build_inferred_context(
            state.model, [s[0] for s in d.chunks], d.conds, d.R,
            SamplerSpec.few(cfg.rollout_steps), seeds, cfg.K, duration,
        )
    else:
        ctxs, nfe = [gt_context(s, d.R + 1, cfg.K) for s in d.chunks], 0
    return DistillBatch(ctxs, d.conds, d.ts), nfe


def _step(state: TrainState, source: StreamSource, cfg: TrainConfig, regime: TrainRegime) -> StepLog:
    rng = step_rng(cfg, state.step)
    d = _draw(source, cfg, rng)
    log = StepLog(state.step, regime.value, d.R)
    inferred = regime in (TrainRegime.MUTUAL, TrainRegime.SELF_FORCING)
    batch, log.rollout_nfe = _regime_contexts(state, d, cfg, rng, inferred, source.duration)
    teacher, teacher_batch = None, None
    if regime is not TrainRegime.MUTUAL:
        if state.teacher is None:
            raise ValueError(f"regime {regime.value} needs a frozen teacher model")
        teacher = state.teacher
        if regime is TrainRegime.SELF_FORCING:
            teacher_batch = DistillBatch([gt_context(s, d.R + 1, cfg.K) for s in d.chunks], d.conds, d.ts)
    dc = cfg.distill
    try:
        tape = Tape()
        P = tape.watch(state.model.params)
        l_multi, v_few, iv, x_t1 = _joint_losses(tape, P, state.model, batch, d, cfg, rng,
                                                 with_multi=regime is TrainRegime.MUTUAL)
        l_sc, l_dmd, l_few, x0_few = _few_objective(tape, state, v_few, iv, x_t1, batch, cfg, rng,
                                                    teacher, teacher_batch)
        total = l_few if l_multi is None else tape.add(l_multi, l_few)
        log.l_multi = 0.0 if l_multi is None else l_multi.item()
        log.l_sc = 0.0 if l_sc is None else l_sc.item()
        log.l_dmd = 0.0 if l_dmd is None else l_dmd.item()
        log.l_few = l_few.item()
        log.total = total.item()
        grads = tape.backward(total)
        new_params, log.grad_norm = optimizer_step(state.model.params, grads, state.opt)
    except NonFiniteError:
        state.skipped += 1
        log.skipped = state.skipped
        log.total = float("nan")
        state.step += 1
        return log
    state.model.params = new_params
    if dc.lam > 0.0 and state.fake is not None and dc.n_fake > 0:
        fl = train_fake_step(state.fake, state.fake_opt, batch, x0_few, iv, rng, dc.n_fake)
        log.fake_loss = fl[-1]
    ema_update(state.ema, state.model.params)
    state.step += 1
    log.skipped = state.skipped
    return log


def train_step(state: TrainState, source: StreamSource, cfg: TrainConfig) -> StepLog:
    """One joint MULTI + FEW step on self-generated context (no external teacher)."""
    if cfg.regime is not TrainRegime.MUTUAL:
        raise ValueError("train_step runs the MUTUAL regime; use baseline_step otherwise")
    return _step(state, source, cfg, TrainRegime.MUTUAL)


def baseline_step(state: TrainState, source: StreamSource, cfg: TrainConfig) -> StepLog:
    """TF_DMD / TF_SHORTCUT (ground-truth context) or SELF_FORCING (rollout context).

    The loss choice follows the regime: TF_SHORTCUT uses only ShortCut, the others
    only DMD; the multi-step teacher is the frozen ``state.teacher``.
    """
    regime = cfg.regime
    if regime is TrainRegime.MUTUAL:
        raise ValueError("baseline_step does not run the MUTUAL regime")
    lam = 0.0 if regime is TrainRegime.TF_SHORTCUT else 1.0
    if cfg.distill.lam != lam:
        cfg = _with_lam(cfg, lam)
    return _step(state, source, cfg, regime)


def _with_lam(cfg: TrainConfig, lam: float) -> TrainConfig:
    kw = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    kw["distill"] = DistillConfig(**{**asdict(cfg.distill), "lam": lam})
    return TrainConfig(**kw)


def branch_trainable(model: DualModeModel, branch: str | None) -> list[str]:
    """Shared parameters plus the named branch (all parameters when branch is None)."""
    if branch is None:
        return list(model.params)
    return [k for k in model.params if branch_of(k) in (None, branch)]


def pretrain_step(state: TrainState, source: StreamSource, cfg: TrainConfig, branch: str | None) -> StepLog:
    """Teacher-forced MULTI flow matching; ``branch`` restricts loss and update to one modality."""
    rng = step_rng(cfg, state.step, 1)
    d = _draw(source, cfg, rng)
    log = StepLog(state.step, f"pretrain_{branch or 'joint'}", d.R)
    batch = DistillBatch([gt_context(s, d.R + 1, cfg.K) for s in d.chunks],
                         dropped(d.conds, rng, cfg.cond_dropout), d.ts)
    t = rng.uniform(size=len(d.conds))
    eps = rng.standard_normal(d.x0.shape)
    model = state.model
    try:
        tape = Tape()
        P = tape.watch(model.params)
        if branch is None:
            loss = multi_loss(tape, P, model, batch, d.x0, t, eps)
        else:
            x_t = interpolate(d.x0, eps, t[:, None])
            xa, xb = batch.field(model).split(x_t)
            q = make_query(xa, xb, batch.timestamps, t, t, batch.contexts, batch.conds)
            va, vb = model.forward(tape, P, q, Mode.MULTI)
            ua, ub = rows(target_velocity(d.x0, eps), model)
            loss = pair_mse(tape, (va, tape.scale(vb, 0.0)), (ua, np.zeros_like(ub))) if branch == "a" else \
                pair_mse(tape, (tape.scale(va, 0.0), vb), (np.zeros_like(ua), ub))
        log.l_multi = log.total = loss.item()
        grads = tape.backward(loss)
        model.params, log.grad_norm = optimizer_step(model.params, grads, state.opt,
                                                     branch_trainable(model, branch))
    except NonFiniteError:
        state.skipped += 1
        log.total = float("nan")
    ema_update(state.ema, model.params)
    state.step += 1
    log.skipped = state.skipped
    return log


def pretrain_branch(state: TrainState, source: StreamSource, cfg: TrainConfig, branch: str, steps: int,
                    log: CsvLog | None = None) -> TrainState:
    """Decoupled single-modality pretraining; coupling stays off only for its duration."""
    if branch not in ("a", "b"):
        raise ValueError("branch must be 'a' or 'b'")
    prev = state.model.cfg.coupled
    state.model.set_branch_coupling(False)
    try:
        for _ in range(steps):
            rec = pretrain_step(state, source, cfg, branch)
            if log:
                log.write(rec)
    finally:
        state.model.set_branch_coupling(prev)
    return state


def run(state: TrainState, source: StreamSource, cfg: TrainConfig, steps: int, log: CsvLog | None = None,
        callback: Callable[[TrainState, StepLog], None] | None = None) -> TrainState:
    """Advance ``state`` by ``steps`` steps of ``cfg.regime``."""
    fn = train_step if cfg.regime is TrainRegime.MUTUAL else baseline_step
    for _ in range(steps):
        rec = fn(state, source, cfg)
        if log:
            log.write(rec)
        if callback:
            callback(state, rec)
    return state
