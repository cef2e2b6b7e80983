"""Dense primal active-set solver for convex QP subproblems.

Solves::

    min  0.5 d'H d + q'd   s.t.  E d = e,  A d <= b

with ``H`` positive definite.  A feasible start is found with an elastic
phase-1 problem solved by the same active-set core.  Multipliers follow the
Lagrangian ``0.5 d'Hd + q'd + y'(Ed - e) + lam'(Ad - b)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

_PHASE1_WEIGHT = 1e4


@dataclass
class QpResult:
    d: np.ndarray
    y: np.ndarray        # equality multipliers
    lam: np.ndarray      # inequality multipliers, >= 0
    status: str          # "optimal" | "infeasible" | "max_iter"
    iterations: int
    infeasibility: float = 0.0
    working: list = field(default_factory=list)


class _EqpSolver:
    """Null-space solver for the equality-constrained step of a fixed H.

    ``factor`` takes a QR decomposition of the working constraints and a
    Cholesky factor of the reduced Hessian; it is redone on every working-set
    change.
    """

    def __init__(self, H):
        self.H = H
        self.n = H.shape[0]

    def factor(self, C):
        n, m = self.n, C.shape[0]
        if m == 0:
            self.Y = np.zeros((n, 0))
            self.Z = np.eye(n)
            self.R = np.zeros((0, 0))
        else:
            Qf, Rf = np.linalg.qr(C.T, mode="complete")
            diag = np.abs(np.diag(Rf[:m]))
            if m > n or diag.min() <= 1e-12 * max(diag.max(), 1.0):
                raise np.linalg.LinAlgError("working constraints are linearly dependent")
            self.Y, self.Z, self.R = Qf[:, :m], Qf[:, m:], Rf[:m]
        self.red = cho_factor(self.Z.T @ self.H @ self.Z, lower=True, check_finite=False) \
            if self.Z.shape[1] else None

    def solve(self, C, grad):
        """Return (p, y) minimizing 0.5 p'Hp + grad'p subject to C p = 0."""
        if self.red is not None:
            pz = cho_solve(self.red, -(self.Z.T @ grad), check_finite=False)
            p = self.Z @ pz
        else:
            p = np.zeros(self.n)
        if C.shape[0] == 0:
            return p, np.zeros(0)
        y = solve_triangular(self.R, -(self.Y.T @ (grad + self.H @ p)),
                             lower=False, check_finite=False)
        return p, y


def _active_set_core(H, q, E, A, b, d, working, max_iter, eqp=None):
    """Primal active-set iterations from a feasible point ``d``."""
    n = H.shape[0]
    me = E.shape[0]
    mi = A.shape[0]
    eqp = eqp or _EqpSolver(H)
    working = list(working)
    in_w = np.zeros(mi, dtype=bool)
    in_w[working] = True
    scale = 1.0 + np.abs(q).max(initial=0.0) + np.abs(H).max(initial=0.0)

    def rebuild():
        C = np.vstack([E, A[working]]) if working else E
        eqp.factor(C)
        return C

    C = rebuild()
    at_min = False
    for it in range(1, max_iter + 1):
        grad = H @ d + q
        p, y = eqp.solve(C, grad)
        # after an unblocked step d is the working-set minimizer; p is roundoff
        if at_min or np.abs(p).max(initial=0.0) <= 1e-12 * (1.0 + np.abs(d).max(initial=0.0)):
            at_min = False
            lam_w = y[me:]
            if lam_w.size == 0 or lam_w.min() >= -1e-12 * scale:
                lam = np.zeros(mi)
                lam[working] = np.maximum(lam_w, 0.0)
                return QpResult(d, y[:me], lam, "optimal", it, working=sorted(working))
            drop = int(np.argmin(lam_w))
            in_w[working[drop]] = False
            del working[drop]
            C = rebuild()
            continue
        Ap = A @ p
        cand = (~in_w) & (Ap > 1e-14 * (1.0 + np.abs(A).max(initial=0.0)) * np.abs(p).max())
        alpha = 1.0
        block = -1
        if np.any(cand):
            idx = np.flatnonzero(cand)
            slack = np.maximum(b[idx] - A[idx] @ d, 0.0)
            ratios = slack / Ap[idx]
            k = int(np.argmin(ratios))      # first minimum: lowest index on ties
            if ratios[k] < 1.0:
                alpha = float(ratios[k])
                block = int(idx[k])
        d = d + alpha * p
        at_min = block < 0
        if block >= 0:
            working.append(block)
            in_w[block] = True
            C = rebuild()
    lam = np.zeros(mi)
    return QpResult(d, np.zeros(me), lam, "max_iter", max_iter)


def solve_qp(H, q, E=None, e=None, A=None, b=None, max_iter: int | None = None,
             feas_tol: float = 1e-9, working_hint=None) -> QpResult:
    """Solve the QP; ``working_hint`` is a guess of the active inequality rows."""
    H = np.asarray(H, dtype=float)
    q = np.asarray(q, dtype=float)
    n = H.shape[0]
    E = np.zeros((0, n)) if E is None else np.asarray(E, dtype=float).reshape(-1, n)
    e = np.zeros(0) if e is None else np.asarray(e, dtype=float).ravel()
    A = np.zeros((0, n)) if A is None else np.asarray(A, dtype=float).reshape(-1, n)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    mi = A.shape[0]
    max_iter = max_iter or 10 * (n + mi) + 50
    tol = feas_tol * (1.0 + np.abs(b))

    eqp = _EqpSolver(H)
    d_base = np.zeros(n)
    if E.shape[0]:
        d_base = np.linalg.lstsq(E, e, rcond=None)[0]

    if working_hint:
        W = sorted(int(i) for i in working_hint)
        d_w = _eqp_point(eqp, H, q, E, e, A, b, W)
        if d_w is not None and np.all(A @ d_w - b <= tol):
            res = _active_set_core(H, q, E, A, b, d_w, W, max_iter, eqp)
            if res.status == "optimal":
                return res

    # equality-constrained minimizer as the starting guess
    eqp.factor(E)
    p, _ = eqp.solve(E, H @ d_base + q)
    d0 = d_base + p
    bad = np.flatnonzero(A @ d0 - b > tol)
    iters = 0
    W0 = []
    if bad.size:
        d0, W0, iters, infeas = _phase1(E, e, A, b, d0, bad, max_iter)
        if infeas > feas_tol * (1.0 + np.abs(b).max(initial=0.0)):
            return QpResult(d0, np.zeros(E.shape[0]), np.zeros(mi), "infeasible",
                            iters, infeas)
    res = _active_set_core(H, q, E, A, b, d0, W0, max_iter, eqp)
    res.iterations += iters
    return res


def _eqp_point(eqp, H, q, E, e, A, b, W):
    """Minimizer of the QP with rows ``W`` held as equalities, or None."""
    C = np.vstack([E, A[W]])
    c = np.concatenate([e, b[W]])
    try:
        eqp.factor(C)
        d = np.linalg.lstsq(C, c, rcond=None)[0]
        p, _ = eqp.solve(C, H @ d + q)
    except np.linalg.LinAlgError:
        return None
    d = d + p
    if not np.all(np.isfinite(d)) or np.abs(C @ d - c).max(initial=0.0) > 1e-9 * (1 + np.abs(c).max(initial=0.0)):
        return None
    return d


def _phase1(E, e, A, b, d_start, bad, max_iter):
    """Elastic problem on the violated rows.

    Returns ``(d, working, iterations, infeasibility)`` where ``working`` holds
    the original rows left active by the phase-1 solution.

    min 0.5|d - d_start|^2 + 0.5|t|^2 + w sum(t)
    s.t. E d = e, A_i d - t_i <= b_i (i violated), A_j d <= b_j (others), t >= 0
    """
    n = E.shape[1]
    mi = A.shape[0]
    nt = bad.size
    H1 = np.eye(n + nt)
    q1 = np.concatenate([-d_start, np.full(nt, _PHASE1_WEIGHT)])
    E1 = np.hstack([E, np.zeros((E.shape[0], nt))])
    T = np.zeros((mi, nt))
    T[bad, np.arange(nt)] = -1.0
    A1 = np.vstack([np.hstack([A, T]), np.hstack([np.zeros((nt, n)), -np.eye(nt)])])
    b1 = np.concatenate([b, np.zeros(nt)])
    t0 = np.maximum(A[bad] @ d_start - b[bad], 0.0)
    z0 = np.concatenate([d_start, t0])
    res = _active_set_core(H1, q1, E1, A1, b1, z0, [], max_iter + 10 * nt)
    d = res.d[:n]
    t = res.d[n:]
    infeas = max(float(t.max(initial=0.0)),
                 float(np.max(A @ d - b, initial=0.0)))
    w1 = set(res.working)
    pos = {int(r): k for k, r in enumerate(bad)}
    working = [i for i in range(mi)
               if i in w1 and (i not in pos or mi + pos[i] in w1)]
    return d, working, res.iterations, infeas
