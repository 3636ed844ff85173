"""Dense building blocks with hand-written backward passes.

Every forward function returns its output together with a cache; the
matching ``*_backward`` consumes the upstream gradient and that cache.
Arrays are plain ``numpy.ndarray`` (float64 unless a caller opts into
float32 for speed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Tuple

import numpy as np

NORM_EPS = 1e-12


class DimensionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class Param:
    """A trainable array and its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


# --------------------------------------------------------------------------
# affine


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    x = np.atleast_2d(x)
    b = np.asarray(b)
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: x has shape {x.shape}, w has shape {w.shape}")
    if b.reshape(-1).shape[0] != w.shape[1]:
        raise DimensionError(f"affine: w has shape {w.shape}, b has shape {b.shape}")
    y = x @ w + b.reshape(1, -1)
    return y, (x, w)


def affine_backward(dy: np.ndarray, cache):
    x, w = cache
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0, keepdims=True)
    return dx, dw, db


# --------------------------------------------------------------------------
# l2 normalisation (row-wise)


def l2_normalize(v: np.ndarray):
    """Row-wise unit normalisation.

    Returns ``(out, degenerate, cache)``; ``degenerate`` is a boolean
    array marking rows that were exactly zero (those come back as zeros).
    """
    v = np.atleast_2d(v)
    norms = np.sqrt((v * v).sum(axis=1, keepdims=True))
    degenerate = norms[:, 0] <= NORM_EPS
    safe = np.where(norms > NORM_EPS, norms, 1.0)
    out = np.where(norms > NORM_EPS, v / safe, 0.0)
    return out, degenerate, (out, safe, degenerate)


def l2_normalize_backward(dout: np.ndarray, cache):
    out, norms, degenerate = cache
    # d(v/|v|) = (I - u u^T) / |v|
    proj = (dout * out).sum(axis=1, keepdims=True)
    dv = (dout - out * proj) / norms
    dv[degenerate] = 0.0
    return dv


# --------------------------------------------------------------------------
# softmax (row-wise)


def softmax(v: np.ndarray) -> np.ndarray:
    v = np.atleast_2d(v)
    z = v - v.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dout: np.ndarray, probs: np.ndarray) -> np.ndarray:
    return probs * (dout - (dout * probs).sum(axis=1, keepdims=True))


def log_softmax(v: np.ndarray) -> np.ndarray:
    v = np.atleast_2d(v)
    z = v - v.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "radam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "radam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _radam_step_scale(t: int, beta1: float, beta2: float):
    """Return ``(adaptive, scale)`` for step ``t`` of rectified Adam.

    ``scale`` already includes first-moment bias correction; when the
    variance rectification is undefined (rho_t <= 4) ``adaptive`` is False
    and the caller takes the plain momentum step.
    """
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
    bias1 = 1.0 - beta1 ** t
    if rho_t > 4.0:
        r = math.sqrt(
            (rho_t - 4.0) * (rho_t - 2.0) * rho_inf
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
        return True, r * math.sqrt(1.0 - beta2_t) / bias1
    return False, 1.0 / bias1


def optimizer_step(params: Mapping[str, Param], state: OptimizerState) -> None:
    """Apply one update in place to every parameter in ``params``.

    SGD uses coupled L2 weight decay (added to the gradient); RAdam uses
    decoupled decay scaled by the learning rate.
    """
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
    state.step_count += 1
    lr = state.learning_rate
    wd = state.weight_decay
    if state.kind == "sgd_momentum":
        for name, p in params.items():
            buf = state.buffers.setdefault(name, {"velocity": np.zeros_like(p.value)})
            g = p.grad + wd * p.value if wd else p.grad
            buf["velocity"] = state.momentum * buf["velocity"] + g
            p.value -= lr * buf["velocity"]
        return

    b1, b2 = state.beta1, state.beta2
    adaptive, scale = _radam_step_scale(state.step_count, b1, b2)
    for name, p in params.items():
        buf = state.buffers.setdefault(
            name, {"m": np.zeros_like(p.value), "v": np.zeros_like(p.value)}
        )
        buf["m"] = b1 * buf["m"] + (1.0 - b1) * p.grad
        buf["v"] = b2 * buf["v"] + (1.0 - b2) * p.grad * p.grad
        if wd:
            p.value -= lr * wd * p.value
        if adaptive:
            p.value -= lr * scale * buf["m"] / (np.sqrt(buf["v"]) + state.epsilon)
        else:
            p.value -= lr * scale * buf["m"]


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


# --------------------------------------------------------------------------
# finite differences


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]],
    params: Dict[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(value, grads)`` where ``grads`` has one
    array per key of ``params``. Arrays in ``params`` are perturbed in
    place and restored.
    """
    _, grads = f(params)
    grads = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    worst = 0.0
    for name, arr in params.items():
        if not arr.flags.c_contiguous:
            raise ValueError(f"parameter {name!r} must be C-contiguous to perturb in place")
        flat = arr.reshape(-1)
        numeric = np.zeros(flat.shape[0])
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            fp, _ = f(params)
            flat[i] = orig - eps
            fm, _ = f(params)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
        err = relative_error(grads[name].reshape(-1), numeric)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
