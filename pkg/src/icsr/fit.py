"""Multi-start nonlinear least squares for skeleton coefficients.

The optimizer is a plain Levenberg-Marquardt loop over finite-difference
Jacobians.  Undefined predictions contribute a large constant penalty
residual instead of poisoning the solve, which lets restarts wander
through invalid coefficient regions and still rank restarts by SSE.

Coefficients that sit on a definedness cliff get special treatment: if
nudging a coefficient by the finite-difference step turns predictions
that are defined at the current point into undefined ones (an integer
exponent over negative inputs is the canonical case), the central
difference is meaningless and any step along that coordinate would be
rejected outright.  Such coordinates are frozen for the iteration by
zeroing their Jacobian column, which pins them in the LM step while the
remaining coefficients keep optimizing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .expr import Skeleton, evaluate_batch

PENALTY = 1.0e6
# Residuals are clipped to a huge finite band so overflow in y - yhat can
# never feed inf into the normal equations; anything near the band is
# garbage by many orders of magnitude anyway.
_RESIDUAL_CAP = 1.0e100


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 5
    max_iterations: int = 200
    warm_start: bool = True
    gtol: float = 1e-8
    xtol: float = 1e-10
    ftol: float = 1e-12

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class FitResult:
    """Outcome of fitting one skeleton on one dataset.

    coefficients/sse describe the best restart (minimum final SSE).
    valid means the fitted expression is defined and finite on every
    training point, which is the gate scoring relies on.  restart_sses
    keeps the per-restart final SSEs for budget accounting and tests.
    """

    coefficients: np.ndarray
    sse: float
    converged: bool
    valid: bool
    best_restart: int
    restart_sses: tuple


def _residuals_defined(skeleton: Skeleton, coeffs: np.ndarray, X: np.ndarray,
                       y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = evaluate_batch(skeleton.expr, coeffs, X)
    defined = np.isfinite(pred)
    res = y - pred
    res[~defined] = PENALTY
    res[~np.isfinite(res)] = PENALTY
    return np.clip(res, -_RESIDUAL_CAP, _RESIDUAL_CAP), defined


def _residuals(skeleton: Skeleton, coeffs: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return _residuals_defined(skeleton, coeffs, X, y)[0]


def _jacobian(skeleton: Skeleton, coeffs: np.ndarray, X: np.ndarray, y: np.ndarray,
              base_defined: np.ndarray) -> np.ndarray:
    m = coeffs.size
    J = np.empty((X.shape[0], m))
    for j in range(m):
        h = max(1e-6, 1e-6 * abs(coeffs[j]))
        up = coeffs.copy()
        up[j] += h
        down = coeffs.copy()
        down[j] -= h
        res_up, def_up = _residuals_defined(skeleton, up, X, y)
        res_down, def_down = _residuals_defined(skeleton, down, X, y)
        if np.any(base_defined & ~(def_up & def_down)):
            J[:, j] = 0.0
        else:
            J[:, j] = (res_up - res_down) / (2 * h)
    return J


def _levenberg_marquardt(skeleton, x0, X, y, config):
    """Minimize 0.5 * ||res||^2 from x0.  Returns (coeffs, sse, converged)."""
    c = x0.astype(float).copy()
    res, defined = _residuals_defined(skeleton, c, X, y)
    sse = float(res @ res)
    J = _jacobian(skeleton, c, X, y, defined)
    JTJ = J.T @ J
    g = J.T @ res
    converged = bool(np.max(np.abs(g)) <= config.gtol)
    mu = 1e-3 * max(float(np.max(np.diag(JTJ))), 1e-12)
    nu = 2.0

    iterations = 0
    while not converged and iterations < config.max_iterations:
        iterations += 1
        try:
            delta = np.linalg.solve(JTJ + mu * np.eye(c.size), -g)
        except np.linalg.LinAlgError:
            delta = None
        if delta is None or not np.all(np.isfinite(delta)):
            mu *= nu
            nu *= 2.0
            continue
        if np.linalg.norm(delta) <= config.xtol * (np.linalg.norm(c) + config.xtol):
            converged = True
            break
        trial = c + delta
        trial_res, trial_defined = _residuals_defined(skeleton, trial, X, y)
        trial_sse = float(trial_res @ trial_res)
        predicted = float(delta @ (mu * delta - g))
        actual = sse - trial_sse
        if predicted > 0 and actual > 0:
            rho = actual / predicted
            c = trial
            res = trial_res
            if abs(actual) <= config.ftol * max(sse, 1e-300):
                sse = trial_sse
                converged = True
                break
            sse = trial_sse
            J = _jacobian(skeleton, c, X, y, trial_defined)
            JTJ = J.T @ J
            g = J.T @ res
            if np.max(np.abs(g)) <= config.gtol:
                converged = True
                break
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
        else:
            mu *= nu
            nu *= 2.0
            if not np.isfinite(mu):
                break
    return c, sse, converged


def fit(skeleton: Skeleton, dataset: Dataset, config: FitConfig = FitConfig(),
        rng: np.random.Generator | None = None) -> FitResult:
    """Fit skeleton coefficients to the dataset's training points.

    Restart 0 starts from the skeleton's literal-derived hints where
    available (standard normal draws fill the gaps); the remaining
    restarts start from standard normal vectors.  The restart with the
    smallest final SSE wins.  A result is only valid if the winning
    coefficients are finite and the fitted expression is defined on every
    training point.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    m = skeleton.num_slots
    X, y = dataset.X, dataset.y

    if m == 0:
        pred = evaluate_batch(skeleton.expr, np.empty(0), X)
        valid = bool(np.all(np.isfinite(pred)))
        sse = float(np.sum((y - pred) ** 2)) if valid else float("inf")
        return FitResult(
            coefficients=np.empty(0),
            sse=sse,
            converged=True,
            valid=valid,
            best_restart=0,
            restart_sses=(),
        )

    best_c = None
    best_sse = float("inf")
    best_restart = -1
    any_converged = False
    sses = []
    for restart in range(config.restarts):
        if restart == 0 and config.warm_start:
            x0 = np.array([
                hint if hint is not None else float(rng.standard_normal())
                for hint in skeleton.hints
            ])
        else:
            x0 = rng.standard_normal(m)
        c, sse, converged = _levenberg_marquardt(skeleton, x0, X, y, config)
        sses.append(sse)
        any_converged = any_converged or converged
        if np.all(np.isfinite(c)) and sse < best_sse:
            best_c = c
            best_sse = sse
            best_restart = restart

    if best_c is None:
        return FitResult(
            coefficients=np.full(m, np.nan),
            sse=float("inf"),
            converged=False,
            valid=False,
            best_restart=-1,
            restart_sses=tuple(sses),
        )

    final_pred = evaluate_batch(skeleton.expr, best_c, X)
    valid = bool(np.all(np.isfinite(final_pred)))
    return FitResult(
        coefficients=best_c,
        sse=best_sse,
        converged=any_converged,
        valid=valid,
        best_restart=best_restart,
        restart_sses=tuple(sses),
    )
