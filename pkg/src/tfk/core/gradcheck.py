"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import Tensor, no_grad


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


def _scalar(out) -> float:
    if not isinstance(out, Tensor) or out.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise ContractError(f"grad_check needs a scalar-valued function, got {shape}")
    return float(out.data.reshape(()))


def grad_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``x`` is a tensor (``f`` is called as ``f(x)``) or a sequence of tensors
    that ``f`` closes over (``f`` is called with no arguments). With
    ``max_coords`` set, a uniform random subset of that many coordinates is
    checked instead of all of them.

    Returns ``max |a - n| / max(|a|, |n|, floor)`` over checked coordinates,
    where ``floor = max(1e-8, 1e-4 * max|a|)`` over the whole group. The
    floor keeps coordinates whose true gradient is orders of magnitude below
    the rest from being judged on central-difference roundoff alone.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)

    def call():
        return f(x) if single else f()

    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        out = call()
        _scalar(out)
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]
        scale = max((float(np.abs(g).max()) for g in analytic if g.size), default=0.0)
        floor = max(1e-8, 1e-4 * scale)

        coords = [(i, j) for i, t in enumerate(xs) for j in range(t.size)]
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or Rng(0)
            pick = np.sort(rng.generator.choice(len(coords), size=max_coords, replace=False))
            coords = [coords[k] for k in pick]

        worst = 0.0
        with no_grad():
            for i, j in coords:
                flat = xs[i].data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + eps
                fp = _scalar(call())
                flat[j] = orig - eps
                fm = _scalar(call())
                flat[j] = orig
                n = (fp - fm) / (2.0 * eps)
                a = float(analytic[i].reshape(-1)[j])
                err = abs(a - n) / max(abs(a), abs(n), floor)
                worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(xs, saved):
            t.requires_grad = flag
            t.grad = None
