"""Central-difference gradient checking against the reverse-mode tape."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError, EvaluationError
from .tensor import Tape, Tensor, as_tensor, backward, tsum

STEP = 1e-5


def _scalar(fn, x: Tensor) -> Tensor:
    y = fn(x)
    y = as_tensor(y)
    return y if y.data.size == 1 else tsum(y)


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = STEP) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences.

    ``fn`` must be built from primitives. Non-scalar outputs are reduced by sum.
    The relative error per coordinate is |a - cd| / max(|a|, |cd|, 1e-8).
    """
    point = as_tensor(point)
    if point.precision != "f64":
        raise ContractError("grad_check requires an f64 point")

    with Tape() as tape:
        x = tape.watch(point)
        y = _scalar(fn, x)
    if not np.all(np.isfinite(y.data)):
        raise EvaluationError("callable is non-finite at the check point")
    grads = backward(tape, y)
    analytic = grads[x.node].data if x.node in grads else np.zeros_like(point.data)

    base = point.data.reshape(-1)
    numeric = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += h
        minus[i] -= h
        fp = _scalar(fn, Tensor(plus.reshape(point.dims))).item()
        fm = _scalar(fn, Tensor(minus.reshape(point.dims))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"callable is non-finite near coordinate {i}")
        numeric[i] = (fp - fm) / (2 * h)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
