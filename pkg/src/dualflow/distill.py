"""Few-step self-distillation: ShortCut targets, DMD targets and their hybrid.

States are handled as flat per-sample arrays ``(B, F*d_a + F*d_b)`` (see
``sampler.ModelField``). Every target is computed outside the gradient tape, so
the stop-gradient is structural: only the student's FEW pass is recorded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Tape, Tensor
from .model import Condition, DualModeModel, Mode, StreamContext, make_query
from .optim import OptimState, optimizer_step
from .sampler import ModelField

DYADIC = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2)


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 1 / 3
    w: float = 5.0
    delta: float = 1 / 32
    intervals: tuple = DYADIC
    n_fake: int = 5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.w < 1.0:
            raise ValueError("guidance scale must be >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not self.intervals or any(not 0 < d < 1 for d in self.intervals):
            raise ValueError("interval lengths must lie in (0, 1)")
        if self.n_fake < 0:
            raise ValueError("n_fake must be >= 0")

    @classmethod
    def ablation(cls, name: str, **kw) -> "DistillConfig":
        """'hybrid', 'sc' (ShortCut only) or 'dmd' (DMD only)."""
        lam = {"hybrid": 1 / 3, "sc": 0.0, "dmd": 1.0}[name]
        return cls(lam=lam, **kw)


@dataclass(frozen=True)
class IntervalSample:
    t1: np.ndarray
    t2: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        t1, t2, tau = (np.atleast_1d(np.asarray(v, float)) for v in (self.t1, self.t2, self.tau))
        if not (t1.shape == t2.shape == tau.shape):
            raise ValueError("interval arrays must share a shape")
        if np.any(t1 <= 0) or np.any(t2 >= 1) or np.any(t1 >= t2):
            raise ValueError("intervals need 0 < t1 < t2 < 1")
        if np.any(tau <= t1) or np.any(tau >= t2):
            raise ValueError("auxiliary level must satisfy t1 < tau < t2")
        object.__setattr__(self, "t1", t1)
        object.__setattr__(self, "t2", t2)
        object.__setattr__(self, "tau", tau)

    @property
    def tm(self) -> np.ndarray:
        return 0.5 * (self.t1 + self.t2)

    @property
    def dt(self) -> np.ndarray:
        return self.t2 - self.t1

    def subset(self, idx) -> "IntervalSample":
        return IntervalSample(self.t1[idx], self.t2[idx], self.tau[idx])


def _open_uniform(rng: np.random.Generator, lo, hi) -> np.ndarray:
    u = rng.uniform(size=np.shape(lo))
    u = np.clip(u, 1e-9, 1 - 1e-9)
    return lo + u * (hi - lo)


def sample_intervals(rng: np.random.Generator, n: int, cfg: DistillConfig) -> IntervalSample:
    """Dyadic interval length, t1 uniform on the admissible range, tau ~ U(t1, t2)."""
    dt = np.asarray(cfg.intervals)[rng.integers(0, len(cfg.intervals), size=n)]
    t1 = _open_uniform(rng, np.zeros(n), 1.0 - dt)
    t2 = t1 + dt
    tau = _open_uniform(rng, t1, t2)
    return IntervalSample(t1, t2, tau)


@dataclass
class DistillBatch:
    """The histories a batch of current chunks is generated against."""

    contexts: list
    conds: list
    timestamps: np.ndarray  # (F,) or (B, F)

    def field(self, model: DualModeModel, cfg_scale: float = 1.0) -> ModelField:
        return ModelField(model, self.contexts, self.conds, self.timestamps, cfg_scale)

    @property
    def size(self) -> int:
        return len(self.conds)


def cfg_combine(v_uncond, v_cond, w: float):
    v_uncond, v_cond = np.asarray(v_uncond, float), np.asarray(v_cond, float)
    if v_uncond.shape != v_cond.shape:
        raise ValueError("guidance inputs must share a shape")
    return v_uncond + w * (v_cond - v_uncond)


def _col(t) -> np.ndarray:
    return np.asarray(t, float).reshape(-1, 1)


def shortcut_target(model: DualModeModel, batch: DistillBatch, x_t1: np.ndarray, iv: IntervalSample,
                    cfg: DistillConfig, teacher: DualModeModel | None = None) -> np.ndarray:
    """Flat target velocity per sample.

    Short intervals (dt <= delta) distill the guided MULTI velocity at (x_t1, t1);
    longer ones compose two half-jumps of the FEW mode. ``teacher`` supplies the
    MULTI predictions when it is a separate (frozen) model.
    """
    out = np.empty_like(x_t1, dtype=float)
    short = iv.dt <= cfg.delta * (1 + 1e-9)
    fld = batch.field(model)
    idx = np.flatnonzero(short)
    if len(idx):
        tf = batch.field(teacher or model).subset(idx)
        t1 = iv.t1[idx]
        vc = tf.velocity(x_t1[idx], t1, t1, Mode.MULTI)
        vu = tf.velocity(x_t1[idx], t1, t1, Mode.MULTI, null=True)
        out[idx] = cfg_combine(vu, vc, cfg.w)
    idx = np.flatnonzero(~short)
    if len(idx):
        f = fld.subset(idx)
        t1, tm, t2 = iv.t1[idx], iv.tm[idx], iv.t2[idx]
        x = x_t1[idx]
        v1 = f.velocity(x, t1, tm, Mode.FEW)
        x_m = x + _col(tm - t1) * v1
        v2 = f.velocity(x_m, tm, t2, Mode.FEW)
        # displacement-weighted mean written as v1 + w (v2 - v1): exact when the hops agree
        out[idx] = v1 + _col((t2 - tm) / (t2 - t1)) * (v2 - v1)
    return out


def rows(flat: np.ndarray, model: DualModeModel) -> tuple[np.ndarray, np.ndarray]:
    """Flat (B, D) -> ((B*F, d_a), (B*F, d_b)), the model's output row layout."""
    c = model.cfg
    na = c.tokens_per_chunk * c.d_a
    return flat[:, :na].reshape(-1, c.d_a), flat[:, na:].reshape(-1, c.d_b)


def student_few(tape: Tape, P: dict, model: DualModeModel, batch: DistillBatch, x_t1: np.ndarray,
                iv: IntervalSample) -> tuple[Tensor, Tensor]:
    fld = batch.field(model)
    xa, xb = fld.split(x_t1)
    q = make_query(xa, xb, batch.timestamps, iv.t1, iv.t2, batch.contexts, batch.conds)
    return model.forward(tape, P, q, Mode.FEW)


def pair_mse(tape: Tape, pred: tuple[Tensor, Tensor], target: tuple[np.ndarray, np.ndarray]) -> Tensor:
    """Mean squared error over every element of both modalities."""
    da = tape.add(pred[0], -np.asarray(target[0]))
    db = tape.add(pred[1], -np.asarray(target[1]))
    n = da.data.size + db.data.size
    return tape.scale(tape.add(tape.sum(tape.mul(da, da)), tape.sum(tape.mul(db, db))), 1.0 / n)


def shortcut_loss(tape: Tape, P: dict, model: DualModeModel, batch: DistillBatch, x_t1: np.ndarray,
                  iv: IntervalSample, cfg: DistillConfig, teacher: DualModeModel | None = None) -> Tensor:
    target = shortcut_target(model, batch, x_t1, iv, cfg, teacher)
    v = student_few(tape, P, model, batch, x_t1, iv)
    return pair_mse(tape, v, rows(target, model))


def dmd_renoise(x0_few, tau, eps):
    x0_few, eps = np.asarray(x0_few, float), np.asarray(eps, float)
    if x0_few.shape != eps.shape:
        raise ValueError("noise must be shaped like the sample")
    tau = np.asarray(tau, float)
    if tau.ndim == 1 and x0_few.ndim == 2:
        tau = tau[:, None]
    return (1 - tau) * eps + tau * x0_few


def teacher_x0(model: DualModeModel, batch: DistillBatch, x_tau: np.ndarray, tau, w: float) -> np.ndarray:
    """Guided MULTI prediction at (x_tau, tau), converted to a clean-sample estimate."""
    f = batch.field(model)
    tau = np.broadcast_to(np.asarray(tau, float), (len(x_tau),))
    vc = f.velocity(x_tau, tau, tau, Mode.MULTI)
    vu = vc if w == 1.0 else f.velocity(x_tau, tau, tau, Mode.MULTI, null=True)
    return x_tau + _col(1 - tau) * cfg_combine(vu, vc, w)


def fake_x0(fake: DualModeModel, batch: DistillBatch, x_tau: np.ndarray, tau) -> np.ndarray:
    """The fake model is conditioned on the degenerate pair (tau, tau), conditional only."""
    f = batch.field(fake)
    tau = np.broadcast_to(np.asarray(tau, float), (len(x_tau),))
    return x_tau + _col(1 - tau) * f.velocity(x_tau, tau, tau, Mode.MULTI)


def dmd_target(x0_few, x0_fake, x0_multi):
    """One correction step from the student estimate along teacher-minus-fake."""
    x0_few, x0_fake, x0_multi = (np.asarray(v, float) for v in (x0_few, x0_fake, x0_multi))
    if not (x0_few.shape == x0_fake.shape == x0_multi.shape):
        raise ValueError("DMD inputs must share a shape")
    return x0_few - (x0_fake - x0_multi)


def dmd_loss(x0_few, x0_fake, x0_multi) -> float:
    d = np.asarray(x0_few, float) - dmd_target(x0_few, x0_fake, x0_multi)
    return float(np.mean(d * d))


def dmd_grad(x0_few, x0_fake, x0_multi) -> np.ndarray:
    """d dmd_loss / d x0_few with the target held fixed."""
    x0_few = np.asarray(x0_few, float)
    return 2.0 / x0_few.size * (x0_few - dmd_target(x0_few, x0_fake, x0_multi))


def hybrid_loss(l_dmd, l_sc, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return lam * l_dmd + (1.0 - lam) * l_sc


def x0_from_velocity(tape: Tape, x_t1: np.ndarray, t1: np.ndarray, v: tuple[Tensor, Tensor],
                     model: DualModeModel) -> tuple[Tensor, Tensor]:
    """Tape version of x_t1 + (1 - t1) v in row layout."""
    F = model.cfg.tokens_per_chunk
    xa, xb = rows(x_t1, model)
    s = np.repeat(1.0 - np.asarray(t1, float), F)[:, None]
    return tape.add(tape.mul(v[0], s), xa), tape.add(tape.mul(v[1], s), xb)


@dataclass
class DmdTerms:
    x0_few: np.ndarray
    x0_fake: np.ndarray
    x0_multi: np.ndarray
    x_tau: np.ndarray

    @property
    def target(self) -> np.ndarray:
        return dmd_target(self.x0_few, self.x0_fake, self.x0_multi)


def dmd_terms(model: DualModeModel, fake: DualModeModel, batch: DistillBatch, x0_few: np.ndarray,
              tau: np.ndarray, eps: np.ndarray, w: float, teacher: DualModeModel | None = None,
              teacher_batch: DistillBatch | None = None) -> DmdTerms:
    """Re-noise the (detached) student estimate and query teacher and fake model.

    ``teacher_batch`` lets the teacher see a different history than the fake model
    (self-forcing baseline: ground truth for the teacher).
    """
    x_tau = dmd_renoise(x0_few, tau, eps)
    xm = teacher_x0(teacher or model, teacher_batch or batch, x_tau, tau, w)
    xf = fake_x0(fake, batch, x_tau, tau)
    return DmdTerms(x0_few, xf, xm, x_tau)


def fake_fm_loss(tape: Tape, P: dict, fake: DualModeModel, batch: DistillBatch, x0: np.ndarray,
                 tau: np.ndarray, eps: np.ndarray) -> Tensor:
    x_tau = dmd_renoise(x0, tau, eps)
    xa, xb = batch.field(fake).split(x_tau)
    q = make_query(xa, xb, batch.timestamps, tau, tau, batch.contexts, batch.conds)
    v = fake.forward(tape, P, q, Mode.MULTI)
    return pair_mse(tape, v, rows(x0 - eps, fake))


def train_fake_step(fake: DualModeModel, opt: OptimState, batch: DistillBatch, x0_few: np.ndarray,
                    iv: IntervalSample, rng: np.random.Generator, n_steps: int = 1) -> list[float]:
    """Flow-matching regression of the fake model on detached student samples.

    Each step draws a fresh tau ~ U(t1, t2) and fresh noise. Updates ``fake.params``
    in place (by rebinding); returns the per-step losses.
    """
    x0 = np.array(x0_few, dtype=float, copy=True)
    losses = []
    for _ in range(n_steps):
        tau = _open_uniform(rng, iv.t1, iv.t2)
        eps = rng.standard_normal(x0.shape)
        tape = Tape()
        P = tape.watch(fake.params)
        loss = fake_fm_loss(tape, P, fake, batch, x0, tau, eps)
        grads = tape.backward(loss)
        fake.params, _ = optimizer_step(fake.params, grads, opt)
        losses.append(loss.item())
    return losses
