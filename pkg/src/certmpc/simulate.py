"""Closed-loop rollouts under the MPC law, a network imitation, or the MPC law
with a bounded additive input disturbance, plus trajectory statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ControllerError
from .mlp import MlpParams, forward
from .ocp import OcpSpec, WarmStartCache, mpc_solve

KINDS = ("mpc", "nn", "disturbed-mpc")


@dataclass(frozen=True)
class Controller:
    kind: str
    params: MlpParams | None = None
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "nn" and self.params is None:
            raise ValueError("an nn controller needs network parameters")
        if self.epsilon < 0:
            raise ValueError("disturbance bound must be non-negative")


def mpc_controller() -> Controller:
    return Controller("mpc")


def nn_controller(params: MlpParams) -> Controller:
    return Controller("nn", params=params)


def disturbed_mpc_controller(epsilon: float, seed: int = 0) -> Controller:
    return Controller("disturbed-mpc", epsilon=float(epsilon), seed=int(seed))


@dataclass
class Trajectory:
    t: np.ndarray              # (steps+1,)
    x: np.ndarray              # (steps+1, n_x)
    u_applied: np.ndarray      # (steps, n_u)
    u_mpc_ref: np.ndarray      # (steps, n_u); NaN where the reference solve failed
    diagnostics: list[dict] = field(default_factory=list)
    kind: str = "mpc"

    @property
    def steps(self) -> int:
        return self.u_applied.shape[0]


@dataclass
class ClMetrics:
    violation_pct: float
    max_violation: float
    max_input_divergence: float
    divergence: np.ndarray
    terminal_norm: float

    def to_dict(self):
        return {"violation_pct": self.violation_pct, "max_violation": self.max_violation,
                "max_input_divergence": _json_float(self.max_input_divergence),
                "terminal_norm": self.terminal_norm,
                "divergence": [_json_float(v) for v in self.divergence]}


def _json_float(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _unit_direction(rng, n):
    while True:
        v = rng.standard_normal(n)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            return v / norm


def simulate_closed_loop(spec: OcpSpec, controller: Controller, x0, steps: int,
                         reference: bool = True) -> Trajectory:
    """Roll the plant forward ``steps`` times; states are never clamped.

    For network runs ``reference`` re-solves the OCP at each visited state for
    the divergence series.  A failed reference solve is recorded as NaN with a
    diagnostic instead of ending the rollout, since the network may drive the
    plant to states where the OCP has no solution.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    model = spec.model
    x = np.asarray(x0, dtype=float).reshape(spec.n_x)
    xs = [x]
    ua, ur, diags = [], [], []
    cache = WarmStartCache()
    rng = np.random.default_rng(controller.seed)
    for k in range(steps):
        diag = {"step": k}
        if controller.kind == "nn":
            u = forward(controller.params, x)
            u_ref = np.full(spec.n_u, np.nan)
            if reference:
                try:
                    sol = mpc_solve(spec, x, cache)
                    u_ref = sol.u_opt
                    diag.update(status=sol.status, kkt=sol.kkt_residual, iterations=sol.iterations)
                except ControllerError as exc:
                    cache.xi = None
                    diag.update(status=exc.status, kkt=exc.residual, error=str(exc))
        else:
            try:
                sol = mpc_solve(spec, x, cache)
            except ControllerError as exc:
                exc.step = k
                raise ControllerError(f"step {k}: {exc}", exc.residual, exc.status, k) from None
            u_ref = sol.u_opt
            diag.update(status=sol.status, kkt=sol.kkt_residual, iterations=sol.iterations)
            u = u_ref
            if controller.kind == "disturbed-mpc":
                e = controller.epsilon * _unit_direction(rng, spec.n_u)
                diag["disturbance"] = e.tolist()
                u = u_ref + e
        x = model.step(x, u)
        xs.append(x)
        ua.append(np.asarray(u, dtype=float))
        ur.append(np.asarray(u_ref, dtype=float))
        diags.append(diag)
    t = model.h * np.arange(steps + 1)
    return Trajectory(t, np.array(xs), np.array(ua), np.array(ur), diags, controller.kind)


def violation_magnitudes(states, lower, upper) -> np.ndarray:
    X = np.atleast_2d(np.asarray(states, dtype=float))
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    over = np.maximum(np.maximum(X - hi, lo - X), 0.0)
    return over.max(axis=1)


def violation_stats(traj: Trajectory | np.ndarray, bounds) -> tuple[float, float]:
    """``(percent of visited states outside bounds, worst excess)``.

    ``bounds`` is a ``(lower, upper)`` pair; every stored state counts,
    including the initial one.
    """
    states = traj.x if isinstance(traj, Trajectory) else traj
    mag = violation_magnitudes(states, *bounds)
    if mag.size == 0:
        return 0.0, 0.0
    return 100.0 * np.count_nonzero(mag > 0) / mag.size, float(mag.max())


def input_divergence(traj: Trajectory) -> tuple[np.ndarray, float]:
    series = np.linalg.norm(traj.u_applied - traj.u_mpc_ref, axis=1)
    finite = series[np.isfinite(series)]
    return series, float(finite.max()) if finite.size else float("nan")


def metrics(traj: Trajectory, spec: OcpSpec) -> ClMetrics:
    pct, worst = violation_stats(traj, (spec.state_lower, spec.state_upper))
    series, dmax = input_divergence(traj)
    return ClMetrics(pct, worst, dmax, series, float(np.linalg.norm(traj.x[-1])))


def write_trajectory_csv(traj: Trajectory, spec: OcpSpec, path) -> None:
    """One row per visited state; the final row has no input columns."""
    mag = violation_magnitudes(traj.x, spec.state_lower, spec.state_upper)
    series, _ = input_divergence(traj)
    n_x, n_u = traj.x.shape[1], traj.u_applied.shape[1]
    xs = [f"x{i + 1}" for i in range(n_x)]
    us = ["u_applied", "u_mpc_ref"] if n_u == 1 else \
        [f"u{j + 1}_applied" for j in range(n_u)] + [f"u{j + 1}_mpc_ref" for j in range(n_u)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *xs, *us, "divergence", "violation_mag"])
        for k in range(traj.x.shape[0]):
            row = [repr(float(traj.t[k]))] + [repr(float(v)) for v in traj.x[k]]
            if k < traj.steps:
                row += [repr(float(v)) for v in traj.u_applied[k]]
                row += [repr(float(v)) for v in traj.u_mpc_ref[k]]
                row.append(repr(float(series[k])))
            else:
                row += [""] * (2 * n_u + 1)
            row.append(repr(float(mag[k])))
            w.writerow(row)
