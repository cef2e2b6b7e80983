"""Parametric sensitivities of converged NLP solutions.

Differentiates the active part of the KKT system,
``C(z, p) = [grad_xi L; h; g_active] = 0`` with ``z = [xi; nu; lam_active]``,
and solves ``dC/dz dz/dp = -dC/dp``.  Equality constraints are folded into
the active block with free-signed multipliers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .ocp import NlpInstance, OcpNlp, OcpSolution

TOL_G = 1e-6
TOL_LAMBDA = 1e-6
COND_LIMIT = 1e12


@dataclass(frozen=True)
class ActiveSet:
    active: tuple[int, ...]
    weakly_active: tuple[int, ...]

    @property
    def degenerate(self) -> bool:
        return bool(self.weakly_active)


@dataclass
class SensitivityResult:
    dz_dp: np.ndarray | None
    du0_dx: np.ndarray | None
    condition_estimate: float
    degenerate: bool
    reason: str = ""


def extract_active_set(nlp: NlpInstance, sol: OcpSolution, tol_g: float = TOL_G,
                       tol_lambda: float = TOL_LAMBDA) -> ActiveSet:
    """Split inequality rows into active / weakly-active / inactive."""
    g = nlp.ineq(sol.xi_star)
    lam = np.asarray(sol.lambda_star)
    on_bound = np.abs(g) <= tol_g * nlp.ineq_scale()
    active = np.flatnonzero(on_bound & (lam >= tol_lambda))
    weak = np.flatnonzero(on_bound & (lam < tol_lambda))
    return ActiveSet(tuple(int(i) for i in active), tuple(int(i) for i in weak))


def _active_constraint_jac(nlp, xi, active):
    idx = list(active.active)
    return np.vstack([nlp.eq_jac(xi), nlp.ineq_jac(xi)[idx]])


def kkt_matrix(nlp: NlpInstance, sol: OcpSolution, active: ActiveSet) -> np.ndarray:
    """``[[hess_xi L, A'], [A, 0]]`` with ``A`` the equality and active rows."""
    xi = sol.xi_star
    H = nlp.lagrangian_hess(xi, sol.lambda_star, sol.nu_star)
    A = _active_constraint_jac(nlp, xi, active)
    m = A.shape[0]
    return np.block([[H, A.T], [A, np.zeros((m, m))]])


def kkt_param_jacobian(nlp: NlpInstance, sol: OcpSolution, active: ActiveSet) -> np.ndarray:
    xi = sol.xi_star
    idx = list(active.active)
    return np.vstack([nlp.dstat_dp(xi, sol.lambda_star, sol.nu_star),
                      nlp.deq_dp(xi),
                      nlp.dineq_dp(xi)[idx]])


def solve_sensitivity(nlp: NlpInstance, sol: OcpSolution,
                      active: ActiveSet | None = None) -> SensitivityResult:
    if active is None:
        active = extract_active_set(nlp, sol)
    if active.degenerate:
        return SensitivityResult(None, None, float("nan"), True,
                                 f"weakly active constraints {list(active.weakly_active)}")
    K = kkt_matrix(nlp, sol, active)
    cond = float(np.linalg.cond(K))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        return SensitivityResult(None, None, cond, True, f"KKT matrix condition {cond:.3e}")
    rhs = -kkt_param_jacobian(nlp, sol, active)
    lu = scipy.linalg.lu_factor(K, check_finite=False)
    dz = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    du0 = dz[nlp.u0_index()] if isinstance(nlp, OcpNlp) else None
    return SensitivityResult(dz, du0, cond, False)


def control_jacobian(nlp: OcpNlp, sol: OcpSolution) -> SensitivityResult:
    """``d kappa / d x`` at the initial state of ``nlp``."""
    return solve_sensitivity(nlp, sol, extract_active_set(nlp, sol))
