"""One-class nu-SVM with an RBF kernel, solved by SMO on the dual.

The dual solved here is::

    min_a  0.5 * a' K a    s.t.  0 <= a_i <= 1 / (nu * n),  sum(a) = 1

and the decision value is ``sum_i a_i K(x_i, x) - rho``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["OcsvmModel", "ConvergenceError", "rbf_kernel", "ocsvm_fit", "median_gamma"]


class ConvergenceError(RuntimeError):
    pass


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(d2, 0.0))


def median_gamma(points: np.ndarray) -> float:
    """``1 / (d * median per-feature variance)``; falls back to ``1 / d``."""
    points = np.atleast_2d(points)
    d = points.shape[1]
    med = float(np.median(points.var(axis=0)))
    if not np.isfinite(med) or med <= 0.0:
        return 1.0 / d
    return 1.0 / (d * med)


@dataclass
class OcsvmModel:
    support_vectors: np.ndarray
    alpha: np.ndarray
    rho: float
    gamma: float
    nu: float
    support_positions: np.ndarray
    tol: float = 1e-4
    n_iter: int = 0
    objective_trace: list[float] = field(default_factory=list, repr=False)

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return rbf_kernel(x, self.support_vectors, self.gamma) @ self.alpha - self.rho

    def is_outlier(self, x: np.ndarray) -> np.ndarray:
        # margin points sit at |dec| <= tol after termination
        return self.decision_function(x) < -self.tol


def _initial_alpha(n: int, upper: float) -> np.ndarray:
    alpha = np.zeros(n)
    full = min(n, int(np.floor(1.0 / upper + 1e-12)))
    alpha[:full] = upper
    if full < n:
        alpha[full] = 1.0 - full * upper
    return alpha


def ocsvm_fit(
    points,
    nu: float = 0.01,
    gamma: float | None = None,
    tol: float = 1e-4,
    max_iter: int = 100_000,
    track_objective: bool = False,
) -> OcsvmModel:
    """Fit a one-class SVM with maximal-violating-pair SMO.

    Terminates when the KKT gap ``max_{a_j>0} g_j - min_{a_i<C} g_i`` drops
    to ``tol``; raises :class:`ConvergenceError` after ``max_iter`` pair
    updates.
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("one-class SVM needs at least 2 points")
    if not 0.0 < nu <= 1.0:
        raise ValueError(f"nu must lie in (0, 1], got {nu}")
    if gamma is None:
        gamma = median_gamma(X)
    upper = 1.0 / (nu * n)
    K = rbf_kernel(X, X, gamma)
    diag = np.diag(K).copy()
    alpha = _initial_alpha(n, upper)
    grad = K @ alpha
    objective = 0.5 * float(alpha @ grad)
    trace = [objective] if track_objective else []
    eps = 1e-12

    for it in range(max_iter):
        up = alpha < upper - eps
        down = alpha > eps
        gi = np.where(up, grad, np.inf)
        gj = np.where(down, grad, -np.inf)
        i = int(np.argmin(gi))
        j = int(np.argmax(gj))
        gap = gj[j] - gi[i]
        if gap <= tol:
            break
        eta = max(diag[i] + diag[j] - 2.0 * K[i, j], 1e-12)
        t = min(gap / eta, upper - alpha[i], alpha[j])
        alpha[i] += t
        alpha[j] -= t
        grad += t * (K[:, i] - K[:, j])
        if track_objective:
            objective += t * (gi[i] - gj[j]) + 0.5 * t * t * eta
            trace.append(objective)
    else:
        raise ConvergenceError(f"SMO did not reach KKT gap {tol} in {max_iter} iterations")

    np.clip(alpha, 0.0, upper, out=alpha)
    free = (alpha > eps) & (alpha < upper - eps)
    if free.any():
        rho = float(grad[free].mean())
    else:
        lo = grad[alpha >= upper - eps].max(initial=-np.inf)
        hi = grad[alpha <= eps].min(initial=np.inf)
        rho = float(0.5 * (lo + hi)) if np.isfinite(lo) and np.isfinite(hi) else float(lo if np.isfinite(lo) else hi)
    sv = np.flatnonzero(alpha > eps)
    return OcsvmModel(X[sv], alpha[sv], rho, float(gamma), float(nu), sv, tol, it, trace)
