"""Small reverse-mode gradient engine over float64 numpy arrays.

Operations accept plain arrays or :class:`Var` nodes. When any input is a
``Var`` the result is a ``Var`` and the operation is appended to the owning
:class:`GradTape`; otherwise the plain numeric result is returned. The
primitive set is deliberately small: affine maps, concatenation, slicing,
sigmoid, tanh, elementwise product and sum, scaling, and a fused
softmax + cross-entropy loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, NumericDomainError, UsageError

PROB_FLOOR = 1e-12


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value, tape: "GradTape", name: str | None = None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"


@dataclass
class _Op:
    out: Var
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class GradTape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            raise UsageError(f"parameter {name!r} registered twice")
        var = Var(np.asarray(value, dtype=np.float64), self, name)
        self.params[name] = var
        return var

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def record(self, value, inputs, backward) -> Var:
        out = Var(value, self)
        self.ops.append(_Op(out, tuple(inputs), backward))
        return out


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> GradTape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# primitives

def apply_affine(W, b, x):
    """Return ``W @ x + b``. ``b`` may be ``None`` for a bias-free product."""
    Wv, xv = _val(W), _val(x)
    bv = None if b is None else _val(b)
    if Wv.ndim != 2 or xv.ndim != 1 or Wv.shape[1] != xv.shape[0]:
        raise DimensionError(f"apply_affine: W {Wv.shape} does not conform with x {xv.shape}")
    if bv is not None and bv.shape != (Wv.shape[0],):
        raise DimensionError(f"apply_affine: b {bv.shape} does not match W rows {Wv.shape[0]}")
    out = Wv @ xv
    if bv is not None:
        out = out + bv
    tape = _tape_of(W, b, x)
    if tape is None:
        return out

    def backward(g):
        gW = np.outer(g, xv) if isinstance(W, Var) else None
        gx = Wv.T @ g if isinstance(x, Var) else None
        gb = g if isinstance(b, Var) else None
        return gW, gb, gx

    return tape.record(out, (W, b, x), backward)


def concat(*xs):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [len(v) for v in vals])

    def backward(g):
        return tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(vals)))

    return tape.record(out, xs, backward)


def take(x, start: int, stop: int):
    """Contiguous slice ``x[start:stop]``."""
    xv = _val(x)
    out = xv[start:stop]
    tape = _tape_of(x)
    if tape is None:
        return out
    n = len(xv)

    def backward(g):
        full = np.zeros(n)
        full[start:stop] = g
        return (full,)

    return tape.record(out, (x,), backward)


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid(np.asarray(_val(x), dtype=np.float64))
    tape = _tape_of(x)
    if tape is None:
        return s
    return tape.record(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x):
    t = np.tanh(_val(x))
    tape = _tape_of(x)
    if tape is None:
        return t
    return tape.record(t, (x,), lambda g: (g * (1.0 - t * t),))


def mul(a, b):
    av, bv = _val(a), _val(b)
    if np.shape(av) != np.shape(bv):
        raise DimensionError(f"mul: shapes {np.shape(av)} and {np.shape(bv)} differ")
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g * bv, g * av))


def add(a, b):
    av, bv = _val(a), _val(b)
    if np.shape(av) != np.shape(bv):
        raise DimensionError(f"add: shapes {np.shape(av)} and {np.shape(bv)} differ")
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g, g))


def scale(x, s: float):
    out = _val(x) * s
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * s,))


def softmax(z) -> np.ndarray:
    z = np.asarray(_val(z), dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise DimensionError(f"softmax expects a non-empty vector, got shape {z.shape}")
    _check_finite(z, "softmax input")
    e = np.exp(z - z.max())
    return e / e.sum()


def cross_entropy(p, y: int) -> float:
    """``-log p[y]`` with ``p[y]`` clamped below at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < len(p):
        raise IndexError(f"class index {y} out of range for {len(p)} classes")
    return float(-np.log(max(p[y], PROB_FLOOR)))


def softmax_cross_entropy(z, y: int):
    """Fused loss; the gradient with respect to the logits is ``p - onehot(y)``."""
    p = softmax(z)
    loss = cross_entropy(p, y)
    tape = _tape_of(z)
    if tape is None:
        return loss

    def backward(g):
        d = p.copy()
        d[y] -= 1.0
        return (g * d,)

    out = tape.record(np.float64(loss), (z,), backward)
    out.name = "loss"
    return out


# --------------------------------------------------------------------------
# gradient accumulation

def backward(tape: GradTape, loss: Var) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) for every parameter registered on ``tape``.

    Parameters the loss does not depend on get an exact zero gradient.
    """
    if not isinstance(loss, Var) or loss.tape is not tape or not tape.ops:
        raise UsageError("backward called without a recorded forward pass")
    if np.ndim(loss.value) != 0:
        raise UsageError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    for op in tape.ops:
        op.out.grad = None
        for x in op.inputs:
            if isinstance(x, Var):
                x.grad = None
    loss.grad = np.float64(1.0)
    for op in reversed(tape.ops):
        if op.out.grad is None:
            continue
        for x, g in zip(op.inputs, op.backward(op.out.grad)):
            if isinstance(x, Var) and g is not None:
                x.grad = g.copy() if x.grad is None else x.grad + g
    return {
        name: (np.zeros_like(v.value) if v.grad is None else np.asarray(v.grad).reshape(v.value.shape))
        for name, v in tape.params.items()
    }


def finite_difference_gradient(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``params``.

    ``params`` is perturbed in place one coordinate at a time and restored.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params)
            flat[i] = orig - eps
            fm = f(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads


def max_relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], floor: float = 1e-12) -> float:
    """Largest per-tensor relative error ``||a-b|| / max(||a||, ||b||)``.

    Measured normwise: entries far below the finite-difference noise floor
    (about 1e-10 absolute at eps=1e-6) would make an elementwise ratio
    meaningless.
    """
    worst = 0.0
    for name in a:
        x, y = np.asarray(a[name], dtype=np.float64), np.asarray(b[name], dtype=np.float64)
        denom = max(np.linalg.norm(x), np.linalg.norm(y), floor)
        worst = max(worst, float(np.linalg.norm(x - y) / denom))
    return worst


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        return state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values())))


def adam_step(state: AdamState, params, grads, clip_norm: float | None = None):
    """One bias-corrected Adam update, applied in place.

    Returns ``(params, state)`` for convenience.
    """
    from . import kernels

    if clip_norm is not None:
        norm = global_norm(grads)
        if norm > clip_norm:
            grads = {k: g * (clip_norm / norm) for k, g in grads.items()}
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if not p.flags.c_contiguous:
            raise UsageError(f"adam_step: parameter {name} must be a contiguous array")
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"adam_step: {name} param {p.shape} vs grad {g.shape}")
        kernels.adam_update(
            p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
            m.reshape(-1), v.reshape(-1),
            state.lr, state.beta1, state.beta2, state.eps, c1, c2,
        )
    return params, state
