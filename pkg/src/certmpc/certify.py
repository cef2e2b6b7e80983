"""Lipschitz estimates, the dataset-density condition for a worst-case
imitation error bound, and an empirical probe of that bound.

With ``eps_D = max_i |kappa(x_i) - kappa_NN(x_i)|`` and every domain point
within ``delta`` of a sample, ``|kappa - kappa_NN| <= eps_D + (L_MPC + L_NN) delta``
on the whole domain.  Certification asks for ``delta_actual <= delta_required``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, GridSpec, covering_radius, generate, seed_grid, uniform_points
from .errors import BoundInfeasibleError
from .mlp import MlpParams, epsilon_d as _epsilon_d, forward, input_jacobian
from .ocp import OcpSpec

log = logging.getLogger(__name__)

SAFETY_FACTOR = 1.5
PROBE_FACTOR = 4


def spectral_norm(W, tol: float = 1e-10, max_iter: int = 10000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W'W``.

    Stops when the eigen-residual ``|Mv - mu v|`` drops below ``tol * mu``.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    M = W.T @ W
    if not np.any(M):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    mu = 0.0
    for _ in range(max_iter):
        w = M @ v
        mu = float(v @ w)
        if np.linalg.norm(w - mu * v) <= tol * mu:
            break
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector in the null space; restart from a basis vector
            v = np.zeros_like(v)
            v[int(np.argmax(np.abs(M).sum(axis=0)))] = 1.0
            continue
        v = w / nw
    else:
        log.warning("power iteration hit %d iterations without meeting tol=%g", max_iter, tol)
    return float(np.sqrt(max(mu, 0.0)))


@dataclass
class LipschitzEstimate:
    upper: float
    lower: float
    method: str
    heuristic: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"upper": self.upper, "lower": self.lower, "method": self.method,
                "heuristic": self.heuristic, **self.details}


_ACT_LIPSCHITZ = {"tanh": 1.0, "linear": 1.0}


def lipschitz_nn_upper(params: MlpParams) -> float:
    """Product of layer spectral norms; a global bound for 1-Lipschitz activations."""
    bound = 1.0
    for W in params.weights:
        bound *= spectral_norm(W)
    for act in params.activations:
        bound *= _ACT_LIPSCHITZ[act]
    return float(bound)


def lipschitz_nn_lower_sampled(params: MlpParams, domain: GridSpec, n_samples: int = 2000,
                               seed: int = 0) -> float:
    """Largest input-Jacobian 2-norm over uniform samples and the domain corners."""
    pts = uniform_points(domain.lower, domain.upper, n_samples, seed)
    corners = seed_grid(GridSpec(domain.lower, domain.upper, (2,) * domain.lower.size))
    J = input_jacobian(params, np.vstack([pts, corners]))
    return float(np.linalg.norm(J, ord=2, axis=(1, 2)).max())


def _max_difference_quotient(X, U) -> float:
    best = 0.0
    for i in range(len(X) - 1):
        dx = np.linalg.norm(X[i + 1:] - X[i], axis=1)
        du = np.linalg.norm(U[i + 1:] - U[i], axis=1)
        ok = dx > 0
        if np.any(ok):
            best = max(best, float(np.max(du[ok] / dx[ok])))
    return best


def lipschitz_mpc_estimate(dataset: Dataset, safety_factor: float = SAFETY_FACTOR) -> LipschitzEstimate:
    """Heuristic MPC-law Lipschitz constant from stored sensitivities.

    ``lower`` is the largest stored Jacobian 2-norm and ``upper`` scales it by
    ``safety_factor``.  Pairwise difference quotients are a cross-check, and
    the only source when no Jacobians are stored.
    """
    X, U, J, mask = dataset.arrays()
    if X.shape[0] == 0:
        raise ValueError("dataset has no labelled samples")
    dq = _max_difference_quotient(X, U)
    if mask.any():
        lower = float(np.linalg.norm(J[mask], ord=2, axis=(1, 2)).max())
        method = "jacobian-max"
    else:
        lower = dq
        method = "difference-quotient"
    upper = safety_factor * lower
    if dq > upper:
        log.warning("difference quotient %.4g exceeds the L_MPC estimate %.4g", dq, upper)
    return LipschitzEstimate(upper, lower, method, heuristic=True,
                             details={"safety_factor": safety_factor,
                                      "difference_quotient_max": dq,
                                      "cross_check_ok": bool(dq <= upper)})


def required_delta(epsilon: float, epsilon_d: float, l_mpc: float, l_nn: float) -> float:
    """Sample spacing ``(epsilon - epsilon_d) / (l_mpc + l_nn)`` needed for the bound."""
    if not epsilon_d < epsilon:
        raise BoundInfeasibleError(
            f"epsilon_d = {epsilon_d:.6g} >= epsilon = {epsilon:.6g}: "
            "the dataset error alone exceeds the target")
    total = l_mpc + l_nn
    if not total > 0:
        raise ValueError("l_mpc + l_nn must be positive")
    return (epsilon - epsilon_d) / total


@dataclass
class BoundReport:
    epsilon: float
    epsilon_d: float
    l_mpc: LipschitzEstimate
    l_nn: LipschitzEstimate
    delta_required: float | None
    delta_actual: float
    certified: bool
    reason: str
    empirical_max_error: float | None = None
    probe_counts: tuple | None = None
    probe_failures: int = 0

    @property
    def infeasible(self) -> bool:
        return self.delta_required is None

    @property
    def sound(self) -> bool | None:
        """False when a certified bound is contradicted by the probe."""
        if self.empirical_max_error is None or not self.certified:
            return None
        return self.empirical_max_error <= self.epsilon

    def to_dict(self):
        return {"epsilon": self.epsilon, "epsilon_d": self.epsilon_d,
                "l_mpc": self.l_mpc.to_dict(), "l_nn": self.l_nn.to_dict(),
                "delta_required": self.delta_required, "delta_actual": self.delta_actual,
                "certified": self.certified, "reason": self.reason,
                "empirical_max_error": self.empirical_max_error,
                "probe_counts": list(self.probe_counts) if self.probe_counts else None,
                "probe_failures": self.probe_failures}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary_table(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.6g}"
        rows = [
            ("epsilon", fmt(self.epsilon)),
            ("epsilon_D", fmt(self.epsilon_d)),
            ("L_NN upper (norm product)", fmt(self.l_nn.upper)),
            ("L_NN lower (sampled)", fmt(self.l_nn.lower)),
            ("L_MPC estimate (heuristic)", fmt(self.l_mpc.upper)),
            ("L_MPC lower (max |dkappa/dx|)", fmt(self.l_mpc.lower)),
            ("delta required", fmt(self.delta_required)),
            ("delta actual", fmt(self.delta_actual)),
            ("certified", "yes" if self.certified else "no"),
            ("reason", self.reason),
        ]
        if self.empirical_max_error is not None:
            rows.append(("probe max error", fmt(self.empirical_max_error)))
            rows.append(("probe grid", "x".join(str(c) for c in self.probe_counts)
                         + f" ({self.probe_failures} failed solves)"))
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows) + "\n"


def denser_counts(grid: GridSpec, factor: int = PROBE_FACTOR) -> tuple[int, ...]:
    """Per-axis counts whose spacing is ``1/factor`` of the grid's spacing."""
    return tuple(factor * (c - 1) + 1 for c in grid.counts)


def probe_max_error(net: MlpParams, spec: OcpSpec, domain: GridSpec, counts,
                    workers: int = 1) -> tuple[float, int]:
    """Max ``|kappa - kappa_NN|`` over a probe grid from fresh OCP solves."""
    pts = seed_grid(GridSpec(domain.lower, domain.upper, counts))
    ds = generate(pts, spec, with_sensitivities=False, workers=workers, max_failed_fraction=1.0)
    X, U, _, _ = ds.arrays()
    failures = len(pts) - X.shape[0]
    if X.shape[0] == 0:
        return float("nan"), failures
    err = np.linalg.norm(U - forward(net, X), axis=1)
    return float(err.max()), failures


def certify(net: MlpParams, dataset: Dataset, domain: GridSpec, epsilon: float,
            probe_density=None, spec: OcpSpec | None = None, workers: int = 1,
            safety_factor: float = SAFETY_FACTOR, nn_samples: int = 2000,
            seed: int = 0) -> BoundReport:
    """Assemble the bound report; ``probe_density`` (int or per-axis counts)
    additionally measures the error on a probe grid, which needs ``spec``."""
    eps_d = _epsilon_d(net, dataset)
    l_nn = LipschitzEstimate(lipschitz_nn_upper(net),
                             lipschitz_nn_lower_sampled(net, domain, nn_samples, seed),
                             "spectral-norm-product")
    l_mpc = lipschitz_mpc_estimate(dataset, safety_factor)
    delta_actual = covering_radius(dataset, domain, conservative=True)
    try:
        delta_req = required_delta(epsilon, eps_d, l_mpc.upper, l_nn.upper)
    except BoundInfeasibleError:
        delta_req = None
    if delta_req is None:
        certified, reason = False, "epsilon_d >= epsilon"
    elif delta_actual <= delta_req:
        certified, reason = True, "delta_actual <= delta_required"
    else:
        certified, reason = False, "delta_actual > delta_required"

    report = BoundReport(float(epsilon), eps_d, l_mpc, l_nn, delta_req, delta_actual,
                         certified, reason)
    if probe_density is not None:
        if spec is None:
            raise ValueError("probing needs the OCP spec")
        counts = (tuple(int(c) for c in probe_density) if np.ndim(probe_density)
                  else (int(probe_density),) * domain.lower.size)
        report.empirical_max_error, report.probe_failures = probe_max_error(
            net, spec, domain, counts, workers)
        report.probe_counts = counts
        if report.sound is False:
            log.error("certified bound violated on the probe grid: %.6g > %.6g",
                      report.empirical_max_error, epsilon)
    return report
