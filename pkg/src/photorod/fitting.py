"""Damped least-squares (Levenberg-Marquardt) fitting and the model functions.

Damping starts at 1e-3 and is multiplied by 10 after a rejected step and by
0.1 after an accepted one; iteration stops when the relative cost change of
an accepted step drops below 1e-8 or after 200 attempted steps.  The fit
never raises on non-convergence: the last iterate is returned with the
converged flag cleared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "LMResult",
    "levenberg_marquardt",
    "gaussian_sum",
    "gaussian_sum_jacobian",
    "pulse_model",
    "pulse_model_jacobian",
]

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))  # 1/2.3548...


@dataclass(frozen=True)
class LMResult:
    params: np.ndarray
    cost: float
    iterations: int
    converged: bool


def levenberg_marquardt(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    p0: np.ndarray,
    max_iter: int = 200,
    rel_tol: float = 1e-8,
    damping0: float = 1e-3,
) -> LMResult:
    """Minimize sum(residual(p)^2) from p0.

    `jacobian` returns d(residual)/d(params) with shape (n_points, n_params).
    Uses Marquardt scaling (damping multiplies the diagonal of J^T J), which
    makes the iterate path invariant under uniform rescaling of the data.
    """
    p = np.asarray(p0, dtype=float).copy()
    r = residual(p)
    cost = float(r @ r)
    lam = damping0
    converged = False
    iterations = 0

    while iterations < max_iter:
        iterations += 1
        jac = jacobian(p)
        jtj = jac.T @ jac
        jtr = jac.T @ r
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1.0  # guard flat directions
        try:
            step = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(jtj + lam * np.diag(diag), -jtr, rcond=None)
        p_new = p + step
        r_new = residual(p_new)
        cost_new = float(r_new @ r_new)
        if np.isfinite(cost_new) and cost_new < cost:
            rel_change = (cost - cost_new) / cost if cost > 0 else 0.0
            p, r, cost = p_new, r_new, cost_new
            lam *= 0.1
            if rel_change < rel_tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    else:
        # cost already stationary at entry counts as converged
        pass
    if not converged and cost == 0.0:
        converged = True
    return LMResult(params=p, cost=cost, iterations=iterations, converged=converged)


# --- Gaussian mixture on histogram heights -------------------------------
# Parameter layout per component: (height, center, fwhm).  The model is even
# in fwhm, so the optimizer may wander through negative widths; callers
# report abs(fwhm).

def gaussian_sum(x: np.ndarray, params: np.ndarray) -> np.ndarray:
    y = np.zeros_like(x, dtype=float)
    for h, c, w in params.reshape(-1, 3):
        sigma = abs(w) * FWHM_TO_SIGMA
        if sigma == 0:
            continue
        y += h * np.exp(-0.5 * ((x - c) / sigma) ** 2)
    return y


def gaussian_sum_jacobian(x: np.ndarray, params: np.ndarray) -> np.ndarray:
    comps = params.reshape(-1, 3)
    jac = np.empty((x.size, comps.shape[0] * 3), dtype=float)
    for i, (h, c, w) in enumerate(comps):
        sigma = abs(w) * FWHM_TO_SIGMA
        if sigma == 0:
            jac[:, 3 * i : 3 * i + 3] = 0.0
            continue
        z = (x - c) / sigma
        g = np.exp(-0.5 * z * z)
        jac[:, 3 * i] = g
        jac[:, 3 * i + 1] = h * g * z / sigma
        jac[:, 3 * i + 2] = h * g * z * z / w  # d sigma/d w = sign(w)*K; z^2*sigma'/sigma
    return jac


# --- Multi-stage filter impulse response ----------------------------------
# Parameter layout: (amplitude, time_to_peak, stages).

def pulse_model(t: np.ndarray, params: np.ndarray) -> np.ndarray:
    a0, t0, m = params
    x = np.asarray(t, dtype=float) / t0
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = a0 * (x[pos] * np.exp(1.0 - x[pos])) ** (m - 1.0)
    return out


def pulse_model_jacobian(t: np.ndarray, params: np.ndarray) -> np.ndarray:
    a0, t0, m = params
    x = np.asarray(t, dtype=float) / t0
    jac = np.zeros((x.size, 3), dtype=float)
    pos = x > 0
    xp = x[pos]
    h = xp * np.exp(1.0 - xp)
    hm = h ** (m - 1.0)
    jac[pos, 0] = hm
    jac[pos, 1] = a0 * hm * (m - 1.0) * (xp - 1.0) / t0
    jac[pos, 2] = a0 * hm * np.log(h)
    return jac
