"""Fixed-point solvers over array-valued maps.

Both solvers treat the map as a black box g = step_map(x) over an ndarray
of any shape and record the residual ||g - x|| (flattened l2) once per
iteration, 0-indexed.  ``picard_solve`` is plain repeated substitution; on
the sampling chain its strictly triangular structure makes the S-th
iterate exact.  ``anderson_solve`` extrapolates over a sliding window of
m previous (iterate, output) pairs and typically needs far fewer
evaluations than the spectral radius of the map would suggest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DivergenceError


@dataclass
class SolverConfig:
    method: str = "anderson"
    max_iters: int = 15
    tol: float = 1e-3
    history_m: int = 5
    mixing_beta: float = 1.0
    ridge_lambda: float = 1e-4

    def __post_init__(self) -> None:
        if self.method not in ("anderson", "picard"):
            raise ConfigError(f"unknown solver method '{self.method}'")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0.0:
            raise ConfigError(f"tol must be >= 0, got {self.tol}")
        if self.history_m < 1:
            raise ConfigError(f"history_m must be >= 1, got {self.history_m}")
        if self.ridge_lambda < 0.0:
            raise ConfigError(f"ridge_lambda must be >= 0, got {self.ridge_lambda}")


def default_solver_config(eta: float, method: str = "anderson") -> SolverConfig:
    """Stock settings: 15 iterations suffice for deterministic chains,
    stochastic ones get 50."""
    return SolverConfig(method=method, max_iters=15 if eta == 0.0 else 50)


@dataclass
class FixedPointResult:
    states: np.ndarray
    residuals: list[float] = field(default_factory=list)
    iters: int = 0
    converged: bool = False
    picard_fallbacks: int = 0


StepMap = Callable[[np.ndarray], np.ndarray]


def _checked_step(step_map: StepMap, x: np.ndarray, iteration: int) -> np.ndarray:
    g = step_map(x)
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite iterate at solver iteration {iteration}")
    return g


def picard_solve(step_map: StepMap, init: np.ndarray, cfg: SolverConfig) -> FixedPointResult:
    """Iterate x <- step_map(x) until the residual drops below cfg.tol."""
    x = np.array(init, dtype=np.float64, copy=True)
    residuals: list[float] = []
    converged = False
    for it in range(cfg.max_iters):
        g = _checked_step(step_map, x, it)
        r = float(np.linalg.norm(g - x))
        residuals.append(r)
        x = g
        if r <= cfg.tol:
            converged = True
            break
    return FixedPointResult(
        states=x, residuals=residuals, iters=len(residuals), converged=converged
    )


def _anderson_gamma(F: np.ndarray, lam: float) -> np.ndarray | None:
    """Combination weights minimizing ||gamma @ F||^2 + lam ||gamma||^2
    subject to sum(gamma) = 1.

    The constraint is eliminated by writing the last weight as one minus
    the rest, which turns the problem into an unconstrained ridge system in
    delta = gamma[:-1]:

        (D D^T + lam (I + 1 1^T)) delta = -D f_last + lam 1,
        D_j = F_j - F_last.

    Returns None when the normal system cannot be solved, signalling the
    caller to fall back to a plain step.
    """
    k = F.shape[0]
    if k == 1:
        return np.ones(1)
    D = F[:-1] - F[-1]
    A = D @ D.T + lam * (np.eye(k - 1) + np.ones((k - 1, k - 1)))
    b = -D @ F[-1] + lam * np.ones(k - 1)
    try:
        delta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(delta)):
        return None
    return np.concatenate([delta, [1.0 - delta.sum()]])


def anderson_solve(step_map: StepMap, init: np.ndarray, cfg: SolverConfig) -> FixedPointResult:
    """Anderson-accelerated fixed-point iteration with ridge regularization.

    Keeps the last min(m, n) iterate/output pairs, solves the small ridge
    system for mixing weights, and proposes

        x+ = (1 - beta) sum_j gamma_j X_j + beta sum_j gamma_j G_j.

    A failed weight solve falls back to the newest pair (a damped Picard
    step) and is counted in ``picard_fallbacks``.
    """
    x = np.array(init, dtype=np.float64, copy=True)
    shape = x.shape
    X: list[np.ndarray] = []
    G: list[np.ndarray] = []
    F: list[np.ndarray] = []
    residuals: list[float] = []
    fallbacks = 0
    converged = False
    beta = cfg.mixing_beta
    for it in range(cfg.max_iters):
        g = _checked_step(step_map, x, it)
        f = (g - x).ravel()
        r = float(np.linalg.norm(f))
        residuals.append(r)
        if r <= cfg.tol:
            x = g
            converged = True
            break
        X.append(x.ravel().copy())
        G.append(g.ravel().copy())
        F.append(f.copy())
        if len(X) > cfg.history_m:
            X.pop(0)
            G.pop(0)
            F.pop(0)
        gamma = _anderson_gamma(np.stack(F), cfg.ridge_lambda)
        if gamma is None:
            fallbacks += 1
            nxt = (1.0 - beta) * X[-1] + beta * G[-1]
        else:
            nxt = (1.0 - beta) * (gamma @ np.stack(X)) + beta * (gamma @ np.stack(G))
        x = nxt.reshape(shape)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite extrapolation at solver iteration {it}")
    else:
        # Budget exhausted: hand back the last map output rather than the
        # unmeasured extrapolation.
        x = G[-1].reshape(shape) if G else x
    return FixedPointResult(
        states=x,
        residuals=residuals,
        iters=len(residuals),
        converged=converged,
        picard_fallbacks=fallbacks,
    )


def solve(step_map: StepMap, init: np.ndarray, cfg: SolverConfig) -> FixedPointResult:
    """Dispatch on cfg.method."""
    if cfg.method == "picard":
        return picard_solve(step_map, init, cfg)
    return anderson_solve(step_map, init, cfg)
