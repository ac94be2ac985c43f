"""Fixed-point machinery: naive iteration, Anderson acceleration, Perron-Frobenius
eigenvalue estimation, and the infinity-norm weight projection.

Anderson acceleration follows Walker & Ni (2011): the next iterate is the
affine combination of the last k map evaluations whose coefficients minimize
the combined residual norm subject to summing to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """Residual exceeded the divergence guard during a fixed-point solve."""


@dataclass
class SolverConfig:
    """Fixed-point solver settings.

    m is the residual history size (number of stored columns); m = 1 degrades
    to plain fixed-point iteration. tol is a relative residual threshold; when
    None it is resolved per dtype (1e-5 for f32, 1e-8 for f64). kappa is the
    contraction constant used by the well-posedness projection.
    """

    m: int = 5
    max_iter: int = 50
    tol: float | None = None
    ridge: float = 1e-8
    kappa: float = 0.9

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not (0.0 <= self.kappa < 1.0):
            raise ValueError(f"kappa must be in [0, 1), got {self.kappa}")

    def resolve_tol(self, dtype: np.dtype) -> float:
        if self.tol is not None:
            return self.tol
        return 1e-8 if np.dtype(dtype) == np.float64 else 1e-5


@dataclass
class SolverResult:
    x_star: np.ndarray
    residuals: list[float]
    iterations: int
    converged: bool
    fallback_steps: list[int] = field(default_factory=list)
    stop_reason: str | None = None


def _rel_residual(fx: np.ndarray, x: np.ndarray) -> float:
    return float(np.linalg.norm(fx - x) / (np.linalg.norm(x) + 1e-12))


def naive_iterate(
    f: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    max_iter: int = 50,
    tol: float = 1e-6,
    on_iterate: Callable[[np.ndarray, int], str | None] | None = None,
) -> SolverResult:
    """Iterate x <- f(x) until the relative residual drops below tol.

    Convergence tests the relative residual ||f(x)-x|| / (||x|| + 1e-12); the
    divergence guard trips on the absolute residual so that starting at zero
    does not spuriously abort.
    """
    x = np.asarray(x0)
    residuals: list[float] = []
    for it in range(1, max_iter + 1):
        fx = f(x)
        gap = float(np.linalg.norm(fx - x))
        res = float(gap / (np.linalg.norm(x) + 1e-12))
        residuals.append(res)
        if gap > DIVERGENCE_LIMIT or not np.isfinite(gap):
            raise DivergenceError(f"divergence: residual {gap:.3e} at iteration {it}")
        if res < tol:
            return SolverResult(fx, residuals, it, True)
        if on_iterate is not None:
            reason = on_iterate(fx, it)
            if reason is not None:
                return SolverResult(fx, residuals, it, False, stop_reason=reason)
        x = fx
    return SolverResult(x, residuals, len(residuals), False)


def anderson(
    f: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    cfg: SolverConfig,
    tol: float | None = None,
    on_iterate: Callable[[np.ndarray, int], str | None] | None = None,
) -> SolverResult:
    """Anderson-accelerated fixed-point solve of x = f(x).

    Keeps the last min(m, t+1) iterates and residuals g_i = f(x_i) - x_i,
    solves min_alpha ||G alpha||_2 with sum(alpha) = 1 by eliminating the
    constraint and solving the ridge-regularized normal equations, and forms
    the next iterate as sum_i alpha_i f(x_i). A singular least-squares step
    falls back to the plain update for that iteration (recorded in
    `fallback_steps`).
    """
    shape = np.asarray(x0).shape
    x = np.asarray(x0).ravel().copy()
    tol = cfg.resolve_tol(x.dtype) if tol is None else tol
    fxs: list[np.ndarray] = []  # window of f(x_i), aligned with gs
    gs: list[np.ndarray] = []  # window of residuals f(x_i) - x_i
    residuals: list[float] = []
    fallback_steps: list[int] = []
    for it in range(1, cfg.max_iter + 1):
        fx = f(x.reshape(shape)).ravel()
        fxs.append(fx)
        gs.append(fx - x)
        if len(fxs) > cfg.m:
            fxs.pop(0)
            gs.pop(0)
        gap = float(np.linalg.norm(gs[-1]))
        res = float(gap / (np.linalg.norm(x) + 1e-12))
        residuals.append(res)
        if gap > DIVERGENCE_LIMIT or not np.isfinite(gap):
            raise DivergenceError(f"divergence: residual {gap:.3e} at iteration {it}")
        if res < tol:
            return SolverResult(fx.reshape(shape), residuals, it, True, fallback_steps)
        if on_iterate is not None:
            reason = on_iterate(fx.reshape(shape), it)
            if reason is not None:
                return SolverResult(fx.reshape(shape), residuals, it, False,
                                    fallback_steps, stop_reason=reason)
        k = len(gs)
        if k == 1:
            x = fx.copy()
            continue
        G = np.stack(gs, axis=1).astype(np.float64)  # (N, k); solve in f64 for stability
        g_last = G[:, -1]
        D = G[:, :-1] - g_last[:, None]
        lhs = D.T @ D + cfg.ridge * np.eye(k - 1)
        rhs = -(D.T @ g_last)
        try:
            beta = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            beta = None
        if beta is None or not np.isfinite(beta).all():
            fallback_steps.append(it)
            x = fx.copy()
        else:
            alpha = np.concatenate([beta, [1.0 - beta.sum()]]).astype(fx.dtype)
            x = np.stack(fxs, axis=1) @ alpha
    return SolverResult(x.reshape(shape), residuals, len(residuals), False, fallback_steps)


def pf_eigenvalue(matrix: np.ndarray, max_iter: int = 1000, tol: float = 1e-12) -> float:
    """Spectral radius of a nonnegative matrix by power iteration.

    Negative entries are folded with abs() first. Iterates on M + I so that
    periodic nonnegative matrices (e.g. permutations) converge; the unit
    shift is subtracted from the Rayleigh estimate, which is exact because
    adding I shifts every eigenvalue of a nonnegative matrix by one.
    """
    m = np.abs(np.asarray(matrix, dtype=np.float64))
    n = m.shape[0]
    if n == 0 or not m.any():
        return 0.0
    ms = m + np.eye(n)
    x = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(max_iter):
        y = ms @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        lam_new = float(x @ (ms @ x))
        if abs(lam_new - lam) < tol * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return max(lam - 1.0, 0.0)


def project_l1_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of a vector onto the L1 ball of the given radius.

    Sorted-threshold algorithm of Duchi et al. (2008): soft-threshold at the
    level that makes the result's L1 norm hit the radius.
    """
    v = np.asarray(v, dtype=np.float64)
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    if radius == 0.0:
        return np.zeros_like(v)
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, len(v) + 1)
    rho = int(np.max(np.nonzero(u - (css - radius) / idx > 0)[0])) + 1
    theta = (css[rho - 1] - radius) / rho
    return np.sign(v) * np.maximum(a - theta, 0.0)


def project_wellposed(w: np.ndarray, lambda_pf: float, kappa: float) -> np.ndarray:
    """Project W in Frobenius distance onto {M : ||M||_inf <= kappa / lambda_pf}.

    The infinity norm is the max row L1 norm, so the projection decomposes
    into independent L1-ball projections per row. lambda_pf <= 0 means no
    constraint is needed and W is returned unchanged.
    """
    if lambda_pf <= 0.0:
        return np.array(w, copy=True)
    radius = kappa / lambda_pf
    out = np.array(w, dtype=np.float64, copy=True)
    norms = np.abs(out).sum(axis=1)
    for i in np.nonzero(norms > radius)[0]:
        out[i] = project_l1_ball(out[i], radius)
    return out.astype(w.dtype, copy=False)
