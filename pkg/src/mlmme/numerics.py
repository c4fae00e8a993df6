"""Numerical substrate: seeded RNG streams, parameter initializers, Adam,
inverted dropout, and a central-difference gradient checker.

Everything here is dtype-polymorphic: float32 for training runs, float64
when gradients are being checked (finite differences are unreliable in
single precision).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

ADAM_LEARNING_RATE = 2e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


def rng_stream(seed: int, *key) -> np.random.Generator:
    """Deterministic PCG64 generator for (seed, key...).

    String key parts are folded to integers with crc32 so substreams like
    (seed, "dropout", epoch) are stable across runs and platforms.
    """
    parts = tuple(
        zlib.crc32(p.encode("utf-8")) if isinstance(p, str) else int(p) for p in key
    )
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=parts))


def gaussian_init(rows: int, cols: int, stddev: float, rng: np.random.Generator,
                  dtype=np.float32) -> np.ndarray:
    """rows x cols matrix with i.i.d. N(0, stddev^2) entries.

    stddev == 0 is allowed as the degenerate limit (all zeros).
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be >= 1, got {rows}x{cols}")
    if stddev < 0:
        raise ValueError(f"stddev must be non-negative, got {stddev}")
    if stddev == 0:
        return np.zeros((rows, cols), dtype=dtype)
    return (rng.standard_normal((rows, cols)) * stddev).astype(dtype)


def orthogonal_init(n: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Random n x n orthogonal matrix (QR of a Gaussian sample).

    The R-diagonal sign correction makes the decomposition unique, so the
    result is a pure function of the generator state.
    """
    if n < 1:
        raise ValueError(f"orthogonal matrix size must be >= 1, got {n}")
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q, dtype=dtype)


@dataclass
class AdamState:
    """Adam moments for one parameter array."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    timestep: int = 0
    learning_rate: float = ADAM_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def for_param(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on param and state."""
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"moments {state.first_moment.shape}"
        )
    state.timestep += 1
    t = state.timestep
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * grad
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * np.square(grad)
    m_hat = state.first_moment / (1.0 - b1**t)
    v_hat = state.second_moment / (1.0 - b2**t)
    param -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def dropout_apply(vec: np.ndarray, p: float, training: bool,
                  rng: np.random.Generator | None = None):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Returns (output, mask); the mask is the multiplicative factor actually
    applied (needed for backward). In inference mode, or with p == 0, the
    input is returned unchanged and the mask is None.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return vec, None
    if rng is None:
        raise ValueError("training-mode dropout needs an RNG stream")
    keep = rng.random(vec.shape) >= p
    mask = keep.astype(vec.dtype) / vec.dtype.type(1.0 - p)
    return vec * mask, mask


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_param: str = ""
    per_param: dict = field(default_factory=dict)


def gradcheck(loss_fn, params: dict[str, np.ndarray], h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    loss_fn() -> (loss, grads_by_name) must be a pure function of the
    current contents of `params`; every entry of every array is probed.
    Relative error per entry is |a - n| / max(|a|, |n|, 1e-8).
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"gradcheck requires float64 parameters ({name} is {p.dtype})")

    loss0, analytic = loss_fn()
    if not np.isfinite(loss0):
        raise NumericalError("non-finite loss at the unperturbed point")

    report = GradCheckReport(0.0)
    for name in sorted(params):
        p = params[name]
        a = analytic[name]
        flat = p.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_fn()
            flat[i] = orig - h
            down, _ = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"non-finite loss while probing parameter '{name}'")
            numeric = (up - down) / (2.0 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, err)
        report.per_param[name] = worst
        if worst > report.max_relative_error:
            report.max_relative_error = worst
            report.worst_param = name
    return report


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise NumericalError("cannot normalize a zero vector")
    return vec / norm


def l2_normalize_backward(prenorm: np.ndarray, normed: np.ndarray,
                          grad_out: np.ndarray) -> np.ndarray:
    """Gradient of v = u/||u|| w.r.t. u, given dL/dv."""
    norm = np.linalg.norm(prenorm)
    return (grad_out - normed * np.dot(normed, grad_out)) / norm


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads so the global L2 norm is at most max_norm. Returns the
    pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total
