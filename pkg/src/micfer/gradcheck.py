"""Central-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, recording


class NonDeterministicError(RuntimeError):
    pass


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` rebuilds the scalar objective from the current values of ``params``.
    With ``max_coords`` set, at most that many coordinates per parameter are
    probed (chosen by ``rng``); otherwise every coordinate is.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    with recording():
        loss = f()
        analytic = backward(loss, params)

    def value() -> float:
        with no_grad():
            return f().item()

    first, second = value(), value()
    if first != second or first != loss.item():
        raise NonDeterministicError(f"objective not deterministic: {first!r} vs {second!r}")

    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        g = analytic[p].reshape(-1)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + epsilon
            up = value()
            flat[k] = orig - epsilon
            down = value()
            flat[k] = orig
            numeric = (up - down) / (2.0 * epsilon)
            worst = max(worst, abs(g[k] - numeric) / max(1.0, abs(numeric)))
    return worst
