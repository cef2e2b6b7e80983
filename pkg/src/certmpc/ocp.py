"""Finite-horizon OCP as a dense parametric NLP, solved by SQP.

The decision vector stacks all predicted states and then all inputs,
``xi = [x_0, ..., x_N, u_0, ..., u_{N-1}]``, and the parameter is the measured
state ``x_s``.  Equalities are ``x_0 - x_s = 0`` followed by the multiple
shooting defects ``x_{k+1} - f(x_k, u_k) = 0``; bounds enter as one-sided
inequalities ``g(xi) <= 0``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ControllerError, DimensionError
from .model import DiscreteModel, PendulumParams, pendulum_model
from .qp import solve_qp

log = logging.getLogger(__name__)


class NlpInstance:
    """Parametric NLP ``min c(xi, p) s.t. h(xi, p) = 0, g(xi, p) <= 0``.

    Subclasses provide the callables; derivatives w.r.t. ``p`` are only
    needed for sensitivity analysis.
    """

    n: int
    p: np.ndarray

    def cost(self, xi) -> float:
        raise NotImplementedError

    def cost_grad(self, xi) -> np.ndarray:
        raise NotImplementedError

    def cost_hess(self, xi) -> np.ndarray:
        raise NotImplementedError

    def eq(self, xi) -> np.ndarray:
        return np.zeros(0)

    def eq_jac(self, xi) -> np.ndarray:
        return np.zeros((0, self.n))

    def ineq(self, xi) -> np.ndarray:
        return np.zeros(0)

    def ineq_jac(self, xi) -> np.ndarray:
        return np.zeros((0, self.n))

    def ineq_scale(self) -> np.ndarray:
        return np.ones(self.ineq(np.zeros(self.n)).size)

    def constraint_curvature(self, xi, lam, nu) -> np.ndarray:
        """``sum lam_i hess g_i + sum nu_j hess h_j``."""
        return np.zeros((self.n, self.n))

    def lagrangian_hess(self, xi, lam, nu) -> np.ndarray:
        return self.cost_hess(xi) + self.constraint_curvature(xi, lam, nu)

    def dstat_dp(self, xi, lam, nu) -> np.ndarray:
        return np.zeros((self.n, self.p.size))

    def deq_dp(self, xi) -> np.ndarray:
        return np.zeros((self.eq(xi).size, self.p.size))

    def dineq_dp(self, xi) -> np.ndarray:
        return np.zeros((self.ineq(xi).size, self.p.size))

    def initial_guess(self) -> np.ndarray:
        return np.zeros(self.n)


@dataclass(frozen=True, eq=False)
class OcpSpec:
    model: DiscreteModel
    N: int = 20
    Q: np.ndarray = field(default_factory=lambda: np.diag([10.0, 1.0]))
    R: np.ndarray = field(default_factory=lambda: np.array([[0.1]]))
    P: np.ndarray = field(default_factory=lambda: np.diag([10.0, 1.0]))
    state_lower: np.ndarray = field(default_factory=lambda: np.array([-2 * np.pi, -1.0]))
    state_upper: np.ndarray = field(default_factory=lambda: np.array([2 * np.pi, 1.0]))
    input_lower: np.ndarray = field(default_factory=lambda: np.array([-15.0]))
    input_upper: np.ndarray = field(default_factory=lambda: np.array([15.0]))
    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        nx, nu = self.model.n_x, self.model.n_u
        for name, shape in (("Q", (nx, nx)), ("P", (nx, nx)), ("R", (nu, nu)),
                            ("state_lower", (nx,)), ("state_upper", (nx,)),
                            ("input_lower", (nu,)), ("input_upper", (nu,))):
            val = np.array(getattr(self, name), dtype=float).reshape(shape)
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        if np.any(self.state_lower > self.state_upper) or np.any(self.input_lower > self.input_upper):
            raise ValueError("bounds must satisfy lower <= upper")
        for name in ("Q", "P"):
            M = getattr(self, name)
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semidefinite")
        if not np.allclose(self.R, self.R.T) or np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")

    @property
    def n_x(self):
        return self.model.n_x

    @property
    def n_u(self):
        return self.model.n_u

    def fingerprint(self) -> str:
        ode = self.model.ode
        desc = {
            "ode": type(ode).__name__,
            "ode_params": _ode_description(ode),
            "h": self.model.h, "N": self.N,
            "Q": self.Q.tolist(), "R": self.R.tolist(), "P": self.P.tolist(),
            "state_bounds": [self.state_lower.tolist(), self.state_upper.tolist()],
            "input_bounds": [self.input_lower.tolist(), self.input_upper.tolist()],
            "tol": self.tol, "max_iter": self.max_iter,
        }
        blob = json.dumps(desc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _ode_description(ode):
    if hasattr(ode, "params"):
        p = ode.params
        return {"m": p.m, "g": p.g, "l": p.l}
    if hasattr(ode, "A"):
        return {"A": ode.A.tolist(), "B": ode.B.tolist()}
    return repr(ode)


def pendulum_spec(params: PendulumParams | None = None, h: float = 0.1, **kw) -> OcpSpec:
    return OcpSpec(model=pendulum_model(params, h), **kw)


class OcpNlp(NlpInstance):
    """Multiple-shooting NLP for ``OcpSpec`` at initial state ``x_s``."""

    def __init__(self, spec: OcpSpec, x_s):
        x_s = np.asarray(x_s, dtype=float)
        if x_s.shape != (spec.n_x,):
            raise DimensionError(f"initial state must have length {spec.n_x}, got {x_s.shape}")
        self.spec = spec
        self.p = x_s
        N, nx, nu = spec.N, spec.n_x, spec.n_u
        self.nxs = (N + 1) * nx
        self.n = self.nxs + N * nu
        self.n_eq = (N + 1) * nx

        H = np.zeros((self.n, self.n))
        for k in range(N):
            H[k * nx:(k + 1) * nx, k * nx:(k + 1) * nx] = 2.0 * spec.Q
            s = self.nxs + k * nu
            H[s:s + nu, s:s + nu] = 2.0 * spec.R
        H[N * nx:(N + 1) * nx, N * nx:(N + 1) * nx] = 2.0 * spec.P
        self._H = H

        # one-sided bound rows: upper then lower per bounded variable;
        # x_0 is fixed by the initial condition and carries no bounds
        rows, rhs, sign = [], [], []
        for k in range(1, N + 1):
            for i in range(nx):
                j = k * nx + i
                _bound_rows(rows, rhs, sign, j, spec.state_lower[i], spec.state_upper[i])
        for k in range(N):
            for i in range(nu):
                j = self.nxs + k * nu + i
                _bound_rows(rows, rhs, sign, j, spec.input_lower[i], spec.input_upper[i])
        G = np.zeros((len(rows), self.n))
        G[np.arange(len(rows)), rows] = sign
        self._G = G
        self._g_rhs = np.array(rhs, dtype=float)
        self.bound_var = np.array(rows, dtype=int)
        self.bound_sign = np.array(sign, dtype=float)

    # layout helpers
    def states(self, xi):
        return xi[:self.nxs].reshape(self.spec.N + 1, self.spec.n_x)

    def inputs(self, xi):
        return xi[self.nxs:].reshape(self.spec.N, self.spec.n_u)

    def u0_index(self):
        return np.arange(self.nxs, self.nxs + self.spec.n_u)

    def pack(self, X, U):
        return np.concatenate([np.ravel(X), np.ravel(U)])

    def cost(self, xi):
        return 0.5 * float(xi @ self._H @ xi)

    def cost_grad(self, xi):
        return self._H @ xi

    def cost_hess(self, xi):
        return self._H

    def eq(self, xi):
        X, U = self.states(xi), self.inputs(xi)
        defects = X[1:] - self.spec.model.step(X[:-1], U)
        return np.concatenate([X[0] - self.p, defects.ravel()])

    def eq_jac(self, xi):
        spec = self.spec
        N, nx, nu = spec.N, spec.n_x, spec.n_u
        X, U = self.states(xi), self.inputs(xi)
        A, B = spec.model.jacobians(X[:-1], U)
        J = np.zeros((self.n_eq, self.n))
        J[:nx, :nx] = np.eye(nx)
        for k in range(N):
            r = (k + 1) * nx
            J[r:r + nx, k * nx:(k + 1) * nx] = -A[k]
            J[r:r + nx, (k + 1) * nx:(k + 2) * nx] = np.eye(nx)
            s = self.nxs + k * nu
            J[r:r + nx, s:s + nu] = -B[k]
        return J

    def ineq(self, xi):
        return self._G @ xi - self._g_rhs

    def ineq_jac(self, xi):
        return self._G

    def ineq_scale(self):
        return np.maximum(1.0, np.abs(self._g_rhs))

    def constraint_curvature(self, xi, lam, nu):
        # bounds are affine; only the shooting defects carry curvature
        spec = self.spec
        N, nx, nuu = spec.N, spec.n_x, spec.n_u
        X, U = self.states(xi), self.inputs(xi)
        w = np.asarray(nu, dtype=float)[nx:].reshape(N, nx)
        Hk = spec.model.weighted_hessian(X[:-1], U, w)
        out = np.zeros((self.n, self.n))
        for k in range(N):
            idx = np.concatenate([np.arange(k * nx, (k + 1) * nx),
                                  np.arange(self.nxs + k * nuu, self.nxs + (k + 1) * nuu)])
            out[np.ix_(idx, idx)] -= Hk[k]
        return out

    def deq_dp(self, xi):
        D = np.zeros((self.n_eq, self.spec.n_x))
        D[:self.spec.n_x] = -np.eye(self.spec.n_x)
        return D

    def initial_guess(self):
        spec = self.spec
        xc = np.clip(self.p, spec.state_lower, spec.state_upper)
        X = np.vstack([self.p] + [xc] * spec.N)
        U = np.zeros((spec.N, spec.n_u))
        return self.pack(X, U)

    def shifted(self, xi):
        """Shift a solution one stage forward for warm starting."""
        X, U = self.states(xi), self.inputs(xi)
        X = np.vstack([self.p, X[2:], X[-1:]])
        U = np.vstack([U[1:], U[-1:]])
        return self.pack(X, U)


def _bound_rows(rows, rhs, sign, j, lo, hi):
    if np.isfinite(hi):
        rows.append(j)
        rhs.append(hi)
        sign.append(1.0)
    if np.isfinite(lo):
        rows.append(j)
        rhs.append(-lo)
        sign.append(-1.0)


def build_nlp(spec: OcpSpec, x_s) -> OcpNlp:
    return OcpNlp(spec, x_s)


@dataclass
class OcpSolution:
    xi_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    u_opt: np.ndarray | None
    status: str              # "converged" | "max_iter" | "infeasible"
    kkt_residual: float
    iterations: int
    cost: float = float("nan")
    merit_history: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == "converged"


def kkt_residual(nlp: NlpInstance, xi, lam, nu) -> float:
    """Max-norm of stationarity, primal and dual infeasibility, complementarity."""
    xi = np.asarray(xi, dtype=float)
    lam = np.asarray(lam, dtype=float)
    nu = np.asarray(nu, dtype=float)
    g = nlp.ineq(xi)
    h = nlp.eq(xi)
    stat = nlp.cost_grad(xi) + nlp.eq_jac(xi).T @ nu + nlp.ineq_jac(xi).T @ lam
    parts = [np.abs(stat).max(initial=0.0),
             np.abs(h).max(initial=0.0),
             np.maximum(g, 0.0).max(initial=0.0),
             np.maximum(-lam, 0.0).max(initial=0.0),
             np.abs(lam * g).max(initial=0.0)]
    return float(max(parts))


def _qp_hessian(nlp, xi, lam, nu):
    Hc = nlp.cost_hess(xi)
    H = Hc + nlp.constraint_curvature(xi, lam, nu)
    for cand in (H, Hc):
        try:
            np.linalg.cholesky(cand)
            return cand
        except np.linalg.LinAlgError:
            pass
    tau = 1e-8 * (1.0 + np.abs(H).max())
    eye = np.eye(H.shape[0])
    while True:
        try:
            np.linalg.cholesky(H + tau * eye)
            return H + tau * eye
        except np.linalg.LinAlgError:
            tau *= 10.0


def _merit(nlp, xi, rho):
    h = nlp.eq(xi)
    g = nlp.ineq(xi)
    viol = np.abs(h).sum() + np.maximum(g, 0.0).sum()
    return nlp.cost(xi) + rho * viol, viol


def solve_sqp(nlp: NlpInstance, warm_start=None, tol: float | None = None,
              max_iter: int | None = None) -> OcpSolution:
    """SQP with exact Lagrangian Hessian (cost Hessian fallback) and l1 merit."""
    spec = getattr(nlp, "spec", None)
    tol = tol if tol is not None else (spec.tol if spec else 1e-8)
    max_iter = max_iter if max_iter is not None else (spec.max_iter if spec else 100)

    xi = np.array(warm_start if warm_start is not None else nlp.initial_guess(), dtype=float)
    me = nlp.eq(xi).size
    mi = nlp.ineq(xi).size
    lam = np.zeros(mi)
    nu = np.zeros(me)
    rho = 1.0
    merit_hist = []
    restorations = 0
    hint = None
    status = "max_iter"
    res = np.inf
    it = 0
    for it in range(max_iter + 1):
        res = kkt_residual(nlp, xi, lam, nu)
        if res <= tol:
            status = "converged"
            break
        if it == max_iter:
            break
        H = _qp_hessian(nlp, xi, lam, nu)
        grad = nlp.cost_grad(xi)
        h = nlp.eq(xi)
        g = nlp.ineq(xi)
        qp = solve_qp(H, grad, nlp.eq_jac(xi), -h, nlp.ineq_jac(xi), -g,
                      working_hint=hint)
        if qp.status == "infeasible":
            # take the least-infeasible linearized step and retry
            restorations += 1
            if restorations > 5 or np.abs(qp.d).max(initial=0.0) < 1e-10:
                status = "infeasible"
                break
            xi = xi + qp.d
            continue
        if qp.status != "optimal":
            status = "max_iter"
            break
        restorations = 0
        hint = qp.working
        d = qp.d
        mult_norm = max(np.abs(qp.lam).max(initial=0.0), np.abs(qp.y).max(initial=0.0))
        if rho < 1.1 * mult_norm:
            rho = 1.5 * mult_norm
        phi0, viol0 = _merit(nlp, xi, rho)
        slope = float(grad @ d) - rho * viol0
        noise = 1e-13 * (1.0 + abs(phi0))
        alpha = 1.0
        accepted = False
        for _ in range(40):
            phi1, _ = _merit(nlp, xi + alpha * d, rho)
            if phi1 <= phi0 + 1e-4 * alpha * min(slope, 0.0) + noise:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            log.debug("line search failed at iteration %d (residual %.3e)", it, res)
            break
        merit_hist.append((rho, phi0, phi1))
        xi = xi + alpha * d
        lam = lam + alpha * (qp.lam - lam)
        nu = nu + alpha * (qp.y - nu)

    u_opt = None
    if status == "converged" and isinstance(nlp, OcpNlp):
        u_opt = xi[nlp.u0_index()].copy()
    return OcpSolution(xi, lam, nu, u_opt, status, float(res), it,
                       nlp.cost(xi), merit_hist)


@dataclass
class WarmStartCache:
    xi: np.ndarray | None = None


def solve_ocp(spec: OcpSpec, x_s, warm_start=None) -> tuple[OcpNlp, OcpSolution]:
    nlp = OcpNlp(spec, x_s)
    return nlp, solve_sqp(nlp, warm_start)


def mpc_solve(spec: OcpSpec, x, cache: WarmStartCache | None = None) -> OcpSolution:
    """Converged OCP(x) solution, warm-started from ``cache`` with a cold retry."""
    nlp = OcpNlp(spec, x)
    warm = None
    if cache is not None and cache.xi is not None:
        warm = cache.xi.copy()
        warm[:spec.n_x] = nlp.p
    sol = solve_sqp(nlp, warm)
    if not sol.converged and warm is not None:
        sol = solve_sqp(nlp)
    if not sol.converged:
        raise ControllerError(f"OCP did not converge at x={np.asarray(x).tolist()}: "
                              f"status={sol.status}, residual={sol.kkt_residual:.3e}",
                              residual=sol.kkt_residual, status=sol.status)
    if cache is not None:
        cache.xi = nlp.shifted(sol.xi_star)
    return sol


def mpc_law(spec: OcpSpec, x, cache: WarmStartCache | None = None) -> np.ndarray:
    """First optimal input ``u_0*`` of OCP(x); warm-starts from ``cache`` if given."""
    return mpc_solve(spec, x, cache).u_opt
