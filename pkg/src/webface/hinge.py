"""Deterministic L2-regularized hinge-loss solver (full-batch Pegasos steps).

Minimizes ``lam/2 * (|w|^2 + b^2) + mean(max(0, 1 - y * (X @ w + b)))``; the bias
is handled as an extra constant feature so it shares the regularizer.
"""

from __future__ import annotations

import numpy as np


def hinge_objective(X, y, w, b, lam) -> float:
    margins = 1 - y * (X @ w + b)
    return float(0.5 * lam * (w @ w + b * b) + np.maximum(margins, 0).mean())


def fit_hinge(
    X: np.ndarray, y: np.ndarray, lam: float, epochs: int = 200
) -> tuple[np.ndarray, float, float, float]:
    """Returns ``(w, b, initial_objective, final_objective)``.

    The returned iterate is the one with the lowest objective seen, so the final
    objective never exceeds the objective at the zero start.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if set(np.unique(y)) - {-1.0, 1.0}:
        raise ValueError("labels must be +1/-1")
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    radius = 1.0 / np.sqrt(lam)
    start = hinge_objective(X, y, theta[:d], 0.0, lam)
    best, best_obj = theta.copy(), start
    for t in range(1, epochs + 1):
        viol = y * (Xa @ theta) < 1
        grad = lam * theta - (y[viol, None] * Xa[viol]).sum(axis=0) / n
        theta = theta - grad / (lam * t)
        norm = np.sqrt(theta @ theta)
        if norm > radius:
            theta *= radius / norm
        obj = hinge_objective(X, y, theta[:d], theta[d], lam)
        if obj < best_obj:
            best, best_obj = theta.copy(), obj
    return best[:d], float(best[d]), start, best_obj
