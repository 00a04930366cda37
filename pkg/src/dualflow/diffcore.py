"""Tape-based reverse-mode differentiation over small dense float64 arrays.

Only a fixed set of primitives is recorded (see ``Tape``); everything else in the
package is composed from them. Arrays are at most 2-D and broadcasting is limited
to row vectors, column vectors and scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise ShapeError(f"tensors are at most 2-D, got shape {a.shape}")
    return a


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b or a == () or b == ():
        return True
    if len(a) != len(b):
        return False
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


class Tensor:
    __slots__ = ("data", "tape", "idx", "name")

    def __init__(self, data: np.ndarray, tape: "Tape", idx: int, name: str | None = None):
        self.data = data
        self.tape = tape
        self.idx = idx  # -1 for constants that never need a gradient
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.add(self, self.tape.scale(self.tape.lift(other), -1.0))

    def __rsub__(self, other):
        return self.tape.add(self.tape.scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, idx={self.idx})"


@dataclass
class _Op:
    kind: str
    out: int
    inputs: tuple
    backward: Callable


class Tape:
    """Records primitive ops so that ``backward`` can replay them in reverse.

    With ``grad=False`` the same ops run eagerly without recording, which is the
    path used for sampling and stop-gradient targets.
    """

    PRIMITIVES = (
        "add", "mul", "matmul", "affine", "tanh", "gelu", "softmax",
        "sum", "mean", "slice", "concat", "scale",
    )

    def __init__(self, grad: bool = True, check_finite: bool = True):
        self.grad = grad
        self.check_finite = check_finite
        self.ops: list[_Op] = []
        self._n = 0
        self._params: dict[str, int] = {}
        self._shapes: dict[int, tuple] = {}

    # -- leaves -------------------------------------------------------------
    def _new(self, data: np.ndarray, needs_grad: bool, name: str | None = None) -> Tensor:
        if not (self.grad and needs_grad):
            return Tensor(data, self, -1, name)
        idx = self._n
        self._n += 1
        self._shapes[idx] = data.shape
        return Tensor(data, self, idx, name)

    def constant(self, x) -> Tensor:
        return self._new(_as_array(x), False)

    def lift(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else self.constant(x)

    def param(self, name: str, x) -> Tensor:
        t = self._new(_as_array(x), True, name)
        if t.idx >= 0:
            self._params[name] = t.idx
        return t

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.param(k, v) for k, v in params.items()}

    def detach(self, t: Tensor) -> Tensor:
        """Stop-gradient: same values, no path back to ``t``."""
        return self._new(t.data, False)

    # -- recording helpers -------------------------------------------------
    def _emit(self, kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        if self.check_finite and not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values produced by {kind}")
        live = tuple(t.idx for t in inputs)
        if not self.grad or all(i < 0 for i in live):
            return Tensor(data, self, -1)
        out = self._new(data, True)
        self.ops.append(_Op(kind, out.idx, live, backward))
        return out

    # -- primitives --------------------------------------------------------
    def add(self, a, b) -> Tensor:
        a, b = self.lift(a), self.lift(b)
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
        sa, sb = a.shape, b.shape
        out = a.data + b.data
        return self._emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def mul(self, a, b) -> Tensor:
        a, b = self.lift(a), self.lift(b)
        if not _broadcast_ok(a.shape, b.shape):
            raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
        ad, bd = a.data, b.data
        out = ad * bd
        return self._emit(
            "mul", out, (a, b),
            lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        )

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit("scale", a.data * c, (a,), lambda g: (g * c,))

    def matmul(self, a, b, trans_b: bool = False, groups: int = 1) -> Tensor:
        """``a @ b`` (or ``a @ b.T``); with ``groups=G`` both operands are split row-wise
        into G equal blocks and block g of the output is ``a[g] @ b[g]`` (block-diagonal product)."""
        a, b = self.lift(a), self.lift(b)
        ad, bd = a.data, b.data
        if ad.ndim != 2 or bd.ndim != 2:
            raise ShapeError("matmul needs 2-D operands")
        if groups > 1:
            return self._grouped_matmul(a, b, trans_b, groups)
        inner = bd.shape[1] if trans_b else bd.shape[0]
        if ad.shape[1] != inner:
            raise ShapeError(f"matmul: {ad.shape} x {bd.shape}{'^T' if trans_b else ''}")
        if trans_b:
            out = ad @ bd.T
            return self._emit("matmul", out, (a, b), lambda g: (g @ bd, g.T @ ad))
        out = ad @ bd
        return self._emit("matmul", out, (a, b), lambda g: (g @ bd.T, ad.T @ g))

    def _grouped_matmul(self, a: Tensor, b: Tensor, trans_b: bool, G: int) -> Tensor:
        ad, bd = a.data, b.data
        if ad.shape[0] % G or bd.shape[0] % G:
            raise ShapeError(f"matmul: rows {ad.shape[0]}, {bd.shape[0]} not divisible by {G} groups")
        A = ad.reshape(G, -1, ad.shape[1])
        Bm = bd.reshape(G, -1, bd.shape[1])
        if trans_b:
            if A.shape[2] != Bm.shape[2]:
                raise ShapeError(f"grouped matmul: {ad.shape} x {bd.shape}^T")
            out = np.matmul(A, Bm.transpose(0, 2, 1))

            def back(g):
                g3 = g.reshape(out.shape)
                return (
                    np.matmul(g3, Bm).reshape(ad.shape),
                    np.matmul(g3.transpose(0, 2, 1), A).reshape(bd.shape),
                )
        else:
            if A.shape[2] != Bm.shape[1]:
                raise ShapeError(f"grouped matmul: {ad.shape} x {bd.shape}")
            out = np.matmul(A, Bm)

            def back(g):
                g3 = g.reshape(out.shape)
                return (
                    np.matmul(g3, Bm.transpose(0, 2, 1)).reshape(ad.shape),
                    np.matmul(A.transpose(0, 2, 1), g3).reshape(bd.shape),
                )

        return self._emit("matmul", out.reshape(-1, out.shape[2]), (a, b), back)

    def affine(self, x, w, b) -> Tensor:
        """``x @ w + b`` with ``b`` a row vector."""
        x, w, b = self.lift(x), self.lift(w), self.lift(b)
        xd, wd = x.data, w.data
        if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
            raise ShapeError(f"affine: {xd.shape} x {wd.shape}")
        if b.shape not in ((1, wd.shape[1]), (wd.shape[1],)):
            raise ShapeError(f"affine: bias shape {b.shape} for width {wd.shape[1]}")
        bshape = b.shape
        out = xd @ wd + b.data
        return self._emit(
            "affine", out, (x, w, b),
            lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0).reshape(bshape)),
        )

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.data)
        return self._emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))

    def gelu(self, a: Tensor) -> Tensor:
        # tanh approximation
        x = a.data
        k = np.sqrt(2.0 / np.pi)
        u = k * (x + 0.044715 * x * x * x)
        th = np.tanh(u)
        y = 0.5 * x * (1.0 + th)

        def back(g):
            du = k * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

        return self._emit("gelu", y, (a,), back)

    def softmax(self, a: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Row-wise softmax; entries where ``mask`` is False get exactly zero weight."""
        x = a.data
        if x.ndim != 2:
            raise ShapeError("softmax needs a 2-D input")
        if mask is not None:
            if mask.shape != x.shape:
                raise ShapeError(f"softmax: mask {mask.shape} vs logits {x.shape}")
            if not mask.any(axis=1).all():
                raise ShapeError("softmax: a row is fully masked")
            m = np.where(mask, x, -np.inf).max(axis=1, keepdims=True)
            e = np.exp(np.minimum(x - m, 0.0)) * mask
        else:
            e = np.exp(x - x.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

        return self._emit("softmax", y, (a,), back)

    def sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        shape = a.shape
        if axis is None:
            out = np.asarray(a.data.sum())
            return self._emit("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
        out = a.data.sum(axis=axis, keepdims=True)
        return self._emit("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, a: Tensor, axis: int | None = None) -> Tensor:
        shape = a.shape
        n = a.data.size if axis is None else shape[axis]
        if n == 0:
            raise ShapeError("mean of an empty tensor")
        if axis is None:
            out = np.asarray(a.data.mean())
        else:
            out = a.data.mean(axis=axis, keepdims=True)
        return self._emit("mean", out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))

    def slice(self, a: Tensor, rows=slice(None), cols=slice(None)) -> Tensor:
        """Row/column selection on a 2-D tensor; ``rows`` may be an index array with repeats."""
        if a.data.ndim != 2:
            raise ShapeError("slice needs a 2-D input")
        shape = a.shape
        out = a.data[rows][:, cols]
        if isinstance(rows, slice):
            scatter_rows = rows
        else:
            rows = np.asarray(rows)
            order = np.argsort(rows, kind="stable")
            uniq, starts = np.unique(rows[order], return_index=True)
            scatter_rows = rows if len(uniq) == len(rows) else None

        def back(g):
            full = np.zeros(shape)
            if scatter_rows is not None:
                full[scatter_rows, cols] = g
            else:
                full[uniq, cols] = np.add.reduceat(g[order], starts, axis=0)
            return (full,)

        return self._emit("slice", np.ascontiguousarray(out), (a,), back)

    def concat(self, parts: Sequence[Tensor], axis: int = 0) -> Tensor:
        parts = [self.lift(p) for p in parts]
        if not parts:
            raise ShapeError("concat of nothing")
        if any(p.data.ndim != 2 for p in parts):
            raise ShapeError("concat needs 2-D inputs")
        other = 1 - axis
        if len({p.shape[other] for p in parts}) != 1:
            raise ShapeError(f"concat: mismatched shapes {[p.shape for p in parts]}")
        sizes = [p.shape[axis] for p in parts]
        out = np.concatenate([p.data for p in parts], axis=axis)
        bounds = np.cumsum([0] + sizes)

        def back(g):
            if axis == 0:
                return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(sizes)))
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

        return self._emit("concat", out, parts, back)

    # -- reverse pass ------------------------------------------------------
    def backward(self, out: Tensor, output_grad=None) -> dict[str, np.ndarray]:
        """Gradients of ``out`` with respect to every parameter registered on this tape.

        Parameters that do not influence ``out`` get exact zeros.
        """
        if not self.grad:
            raise TapeError("tape was created with grad=False")
        if out.tape is not self:
            raise TapeError("output does not belong to this tape")
        if not self.ops and out.idx not in self._params.values():
            raise TapeError("backward called before any recorded forward op")
        grads: dict[int, np.ndarray] = {}
        if out.idx >= 0:
            seed = np.ones(out.shape) if output_grad is None else _as_array(output_grad)
            if seed.shape != out.shape:
                raise ShapeError(f"output_grad {seed.shape} vs output {out.shape}")
            grads[out.idx] = seed
        for op in reversed(self.ops):
            g = grads.pop(op.out, None)
            if g is None:
                continue
            for i, gi in zip(op.inputs, op.backward(g)):
                if i < 0:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        result = {}
        for name, idx in self._params.items():
            g = grads.get(idx)
            result[name] = np.zeros(self._shapes[idx]) if g is None else np.asarray(g).reshape(self._shapes[idx])
        return result


def mse(tape: Tape, pred: Tensor, target) -> Tensor:
    diff = tape.add(pred, tape.scale(tape.lift(target), -1.0))
    return tape.mean(tape.mul(diff, diff))


def accumulate(grad_dicts: Iterable[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Ordered sum of per-tape gradients (deterministic reduction)."""
    total: dict[str, np.ndarray] = {}
    for gd in grad_dicts:
        for k, v in gd.items():
            total[k] = total[k] + v if k in total else v.copy()
    return total


@dataclass
class GradReport:
    step: float
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    probes: list[tuple[str, int, float, float, float]] = field(default_factory=list)
    nonfinite: int = 0

    def passed(self, tol: float) -> bool:
        return self.nonfinite == 0 and self.max_rel_error < tol


def rel_error(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-12)


def grad_check(
    model_fn: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    probe_count: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> GradReport:
    """Compare tape gradients with central differences on randomly probed coordinates.

    ``model_fn`` maps (tape, watched params) to a scalar loss.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"invalid step size h={h}")
    tape = Tape()
    loss = model_fn(tape, tape.watch(params))
    analytic = tape.backward(loss)

    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([np.asarray(params[n]).size for n in names], dtype=float)
    report = GradReport(step=h, max_rel_error=0.0)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def value() -> float:
        t = Tape(grad=False, check_finite=False)
        return float(model_fn(t, {k: t.constant(v) for k, v in work.items()}).data)

    for _ in range(probe_count):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = work[name].reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + h
        fp = value()
        flat[j] = orig - h
        fm = value()
        flat[j] = orig
        fd = (fp - fm) / (2 * h)
        a = float(analytic[name].reshape(-1)[j])
        if not (np.isfinite(fd) and np.isfinite(a)):
            report.nonfinite += 1
            report.probes.append((name, j, a, fd, float("nan")))
            continue
        err = rel_error(a, fd)
        report.probes.append((name, j, a, fd, err))
        report.per_param[name] = max(report.per_param.get(name, 0.0), err)
        report.max_rel_error = max(report.max_rel_error, err)
    return report
