"""Central finite-difference gradient verification (64-bit)."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .engine import NonFiniteError, Tape, Tensor, backward


def grad_check(f: Callable, args: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f takes one Tensor per entry of args and returns a scalar Tensor. Error
    per coordinate is |analytic - fd| / (|fd| + 1e-12); the max over all
    coordinates of all args is returned. Runs in float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in args]

    with Tape() as tape:
        ts = [Tensor(a) for a in arrays]
        for t in ts:
            tape.watch(t)
        out = f(*ts)
        if out.data.size != 1:
            raise ValueError("grad_check requires a scalar-valued f")
        analytic = [g.data.copy() for g in backward(out, ts)]

    def evaluate() -> float:
        val = float(f(*[Tensor(a) for a in arrays]).data)
        if not math.isfinite(val):
            raise NonFiniteError("f is non-finite at a perturbed point")
        return val

    worst = 0.0
    for a, ga in zip(arrays, analytic):
        flat = a.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - fd) / (abs(fd) + 1e-12)
            if err > worst:
                worst = err
    return worst
