"""Central-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, force_eval


class GradCheckError(ArithmeticError):
    pass


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - fd| / max(1, |analytic|)``.

    ``f`` receives ``inputs`` positionally and must return a scalar tensor.
    Only inputs with ``requires_grad`` are perturbed.  Dropout is forced to
    eval mode for both the analytic and the finite-difference evaluations.
    """
    for t in inputs:
        if t.requires_grad and t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs, got {t.dtype}")
    with force_eval():
        for t in inputs:
            t.zero_grad()
        with Tape() as tape:
            out = f(*inputs)
        _check_finite(out, "output")
        tape.backward(out, wrt=[t for t in inputs if t.requires_grad])

        worst = 0.0
        for k, t in enumerate(inputs):
            if not t.requires_grad:
                continue
            analytic = t.grad
            flat = t.value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = _scalar(f(*inputs), k, i)
                flat[i] = orig - h
                down = _scalar(f(*inputs), k, i)
                flat[i] = orig
                fd = (up - down) / (2.0 * h)
                a = analytic.reshape(-1)[i]
                if not np.isfinite(a):
                    raise GradCheckError(f"non-finite analytic gradient at input {k}, coordinate {i}")
                worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


def _scalar(out: Tensor, k: int, i: int) -> float:
    _check_finite(out, f"input {k}, coordinate {i}")
    return float(out.value)


def _check_finite(out: Tensor, where: str) -> None:
    if not np.all(np.isfinite(out.value)):
        raise GradCheckError(f"non-finite value at {where}")
