"""Minimum-norm linearized misclassification as a small dense QP.

    minimize ||d + delta||_2^2   subject to   G delta <= h

Substituting ``y = d + delta`` turns this into projecting the origin onto the
polyhedron ``{y : G y <= h + G d}``.  The projection is computed with an
OSQP-style ADMM iteration (over-relaxed, adaptive step size).  Only the
``m x m`` Gram matrix of the constraints is ever factorized, so the pixel
dimension ``n`` can be large while ``m`` stays small.  A converged iterate is
polished by solving the equality-constrained projection on its active set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"
KKT_TOL = 1e-6


@dataclass
class QpProblem:
    d: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64).ravel()
        n = self.d.size
        self.G = np.asarray(self.G, dtype=np.float64).reshape(-1, n)
        self.h = np.asarray(self.h, dtype=np.float64).ravel()
        if self.G.shape[0] != self.h.size:
            raise ValueError(f"G has {self.G.shape[0]} rows but h has {self.h.size} entries")
        if not (np.isfinite(self.d).all() and np.isfinite(self.G).all() and np.isfinite(self.h).all()):
            raise ValueError("QP data must be finite")


@dataclass
class QpSolution:
    delta: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    complementarity: float
    multipliers: np.ndarray
    iterations: int
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(problem: QpProblem, delta, lam):
    """(primal, dual, complementarity) on row-normalized constraints.

    ``lam`` are multipliers in the original units.  The stationarity
    residual is relative to ``max(1, ||2 (d + delta)||_inf)``.
    """
    y = problem.d + delta
    norms = np.linalg.norm(problem.G, axis=1)
    keep = norms > 0
    A = problem.G[keep] / norms[keep, None]
    slack = (problem.G[keep] @ delta - problem.h[keep]) / norms[keep]
    lam_s = lam[keep] * norms[keep]
    primal = float(max(0.0, slack.max())) if slack.size else 0.0
    grad = 2 * y + A.T @ lam_s
    dual = float(np.abs(grad).max() / max(1.0, np.abs(2 * y).max())) if y.size else 0.0
    compl = float(np.abs(lam_s * slack).max()) if slack.size else 0.0
    dual = max(dual, float(max(0.0, -lam.min())) if lam.size else 0.0)
    return primal, dual, compl


def _polish(A, b, lam, y, tol=1e-9):
    """Exact projection onto the active set suggested by ADMM, if consistent."""
    active = (lam > tol) | (A @ y >= b - 1e-7 * np.maximum(1.0, np.abs(b)))
    for _ in range(len(b) + 1):
        if not active.any():
            y_p = np.zeros_like(y)
            mu = np.zeros(0)
        else:
            As = A[active]
            K = As @ As.T
            try:
                mu = -2 * np.linalg.solve(K, b[active])
            except np.linalg.LinAlgError:
                mu, *_ = np.linalg.lstsq(K, -2 * b[active], rcond=None)
            y_p = -As.T @ mu / 2
        if mu.size and mu.min() < -tol:
            idx = np.flatnonzero(active)
            active[idx[np.argmin(mu)]] = False
            continue
        viol = A @ y_p - b
        if viol.size and viol.max() > 1e-10 * max(1.0, np.abs(b).max()):
            active[np.argmax(viol)] = True
            continue
        full = np.zeros(len(b))
        full[active] = np.maximum(mu, 0.0)
        return y_p, full
    return None


def solve(problem: QpProblem, tol: float = 1e-8, max_iters: int = 10000,
          rho: float = 0.1, sigma: float = 1e-6, alpha: float = 1.6,
          polish: bool = True) -> QpSolution:
    d, G, h = problem.d, problem.G, problem.h
    n = d.size
    m = G.shape[0]
    if m == 0:
        return QpSolution(-d.copy(), OPTIMAL, 0.0, 0.0, 0.0, np.zeros(0), 0)

    norms = np.linalg.norm(G, axis=1)
    b_full = h + G @ d
    zero = norms == 0
    if np.any(b_full[zero] < 0):
        # 0 <= negative: no delta can satisfy this row
        return QpSolution(-d.copy(), INFEASIBLE, float(-b_full[zero].min()), np.inf, np.inf,
                          np.zeros(m), 0)
    keep = ~zero
    A = G[keep] / norms[keep, None]
    b = b_full[keep] / norms[keep]
    mk = A.shape[0]

    def finish(y, lam_s, status, it, polished=False):
        lam = _expand(lam_s, keep, norms, m)
        delta = y - d
        pr, du, co = kkt_residuals(problem, delta, lam)
        if status == OPTIMAL and max(pr, du, co) > KKT_TOL:
            status = MAX_ITER
        return QpSolution(delta, status, pr, du, co, lam, it, polished)

    if mk == 0:
        return finish(np.zeros(n), np.zeros(0), OPTIMAL, 0)

    gram = A @ A.T
    c = 2.0 + sigma

    def factor(r):
        return cho_factor(gram + (c / r) * np.eye(mk))

    fac = factor(rho)
    y = np.zeros(n)
    z = np.zeros(mk)
    lam = np.zeros(mk)
    status = MAX_ITER
    it = 0
    for it in range(1, max_iters + 1):
        # (c I + rho A^T A) y_t = sigma y + A^T (rho z - lam), via Woodbury
        v = sigma * y + A.T @ (rho * z - lam)
        y_t = (v - A.T @ cho_solve(fac, A @ v)) / c
        z_t = A @ y_t
        y = alpha * y_t + (1 - alpha) * y
        z_relax = alpha * z_t + (1 - alpha) * z
        z_new = np.minimum(z_relax + lam / rho, b)
        lam_prev = lam
        lam = lam + rho * (z_relax - z_new)
        z = z_new

        Ay = A @ y
        Atl = A.T @ lam
        r_prim = np.abs(Ay - z).max()
        r_dual = np.abs(2 * y + Atl).max()
        eps_prim = tol + tol * max(np.abs(Ay).max(), np.abs(z).max())
        eps_dual = tol + tol * max(np.abs(2 * y).max(), np.abs(Atl).max())
        if r_prim <= eps_prim and r_dual <= eps_dual:
            status = OPTIMAL
            break

        dl = lam - lam_prev
        dl_norm = np.abs(dl).max()
        if dl_norm > 0 and dl.min() >= -tol * dl_norm:
            if (np.abs(A.T @ dl).max() <= 1e-7 * dl_norm
                    and b @ np.maximum(dl, 0) < -1e-7 * dl_norm):
                return finish(y, lam, INFEASIBLE, it)

        if it % 25 == 0:
            num = r_prim / max(np.abs(Ay).max(), np.abs(z).max(), 1e-30)
            den = r_dual / max(np.abs(2 * y).max(), np.abs(Atl).max(), 1e-30)
            if den > 0 and num > 0:
                new_rho = float(np.clip(rho * np.sqrt(num / den), 1e-6, 1e6))
                if new_rho > 5 * rho or new_rho < rho / 5:
                    rho = new_rho
                    fac = factor(rho)

    lam = np.maximum(lam, 0.0)
    if polish and status in (OPTIMAL, MAX_ITER):
        res = _polish(A, b, lam, y)
        if res is not None:
            y_p, lam_p = res
            pr, du, co = kkt_residuals(problem, y_p - d, _expand(lam_p, keep, norms, m))
            if max(pr, du, co) <= KKT_TOL:
                return finish(y_p, lam_p, OPTIMAL, it, polished=True)
    return finish(y, lam, status, it)


def _expand(lam_s, keep, norms, m):
    lam = np.zeros(m)
    lam[keep] = lam_s / norms[keep]
    return lam
