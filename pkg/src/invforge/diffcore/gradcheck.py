"""Central-difference verification of hand-written adjoints."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from ..errors import NumericalError


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                 coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards)."""
    if h <= 0:
        raise ValueError("step size must be positive")
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    out = np.zeros(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"finite-difference probe at coordinate {i} is not finite")
        out[n] = (fp - fm) / (2.0 * h)
    return out


def grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray, h: float = 1e-5,
               coords: np.ndarray | None = None) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(x)`` returns ``(value, grad)``; only the value is used for the probes.
    """
    x = np.array(x, dtype=np.float64)
    _, g = fn(x.copy())
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    num = numeric_grad(lambda y: fn(y)[0], x, h, coords)
    ana = g if coords is None else g[np.asarray(coords)]
    return float(relative_errors(ana, num).max()) if num.size else 0.0


def module_grad_check(module, forward: Callable[[np.ndarray], tuple[np.ndarray, object]],
                      backward: Callable[[object, np.ndarray], np.ndarray], x: np.ndarray,
                      rng: np.random.Generator, h: float = 1e-5, max_param_coords: int = 200) -> dict[str, float]:
    """Check input and parameter adjoints of a block under a random projection.

    The output is reduced to a scalar ``sum(w * y)`` with fixed random ``w``
    so every output coordinate contributes. Parameters are probed on a random
    subset of at most ``max_param_coords`` coordinates per tensor.
    """
    x = np.array(x, dtype=np.float64)
    y0, _ = forward(x)
    w = rng.normal(size=np.shape(y0))

    def scalar(xx):
        return float(np.sum(w * forward(xx)[0]))

    module.zero_grad()
    y, cache = forward(x)
    dx = backward(cache, w)
    num = numeric_grad(scalar, x, h)
    report = {"input": float(relative_errors(np.asarray(dx).reshape(-1), num).max())}
    for name, p, g in module.named_parameters():
        n = p.size
        coords = np.arange(n) if n <= max_param_coords else rng.choice(n, max_param_coords, replace=False)
        ana = g.reshape(-1)[coords].copy()
        num = numeric_grad(lambda _: scalar(x), p, h, coords)
        report[name] = float(relative_errors(ana, num).max())
    module.zero_grad()
    return report
