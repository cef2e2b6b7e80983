import numpy as np
import pytest
from scipy.optimize import minimize

from certmpc.errors import ControllerError, DimensionError
from certmpc.model import DiscreteModel, LinearOde, pendulum_model
from certmpc.ocp import (NlpInstance, OcpSpec, WarmStartCache, build_nlp, kkt_residual,
                         mpc_law, pendulum_spec, solve_ocp, solve_sqp)


def rk4_scalar(a, b, h):
    """Closed-form RK4 transition of xdot = a x + b u (truncated exponential)."""
    z = a * h
    Ad = 1 + z + z**2 / 2 + z**3 / 6 + z**4 / 24
    Bd = h * b * (1 + z / 2 + z**2 / 6 + z**3 / 24)
    return Ad, Bd


def linear_spec(a=0.5, b=1.0, N=1, q=2.0, r=0.3, p=5.0, h=0.1):
    model = DiscreteModel(LinearOde([[a]], [[b]]), h=h)
    return OcpSpec(model, N=N, Q=[[q]], R=[[r]], P=[[p]],
                   state_lower=[-1e3], state_upper=[1e3], input_lower=[-1e3], input_upper=[1e3])


class ToyNlp(NlpInstance):
    """min xi^2 with no constraints."""

    def __init__(self):
        self.n = 1
        self.p = np.zeros(0)

    def cost(self, xi):
        return float(xi[0] ** 2)

    def cost_grad(self, xi):
        return 2 * xi

    def cost_hess(self, xi):
        return np.array([[2.0]])


def test_build_dimensions():
    nlp = build_nlp(pendulum_spec(N=1), [0.1, 0.2])
    assert nlp.n == 5
    assert nlp.eq(np.zeros(5)).size == 4
    assert nlp.ineq(np.zeros(5)).size == 2 * 2 + 2 * 1   # x_1 and u_0 bounds


def test_build_rejects_bad_state():
    with pytest.raises(DimensionError):
        build_nlp(pendulum_spec(), [0.0, 0.0, 0.0])


def test_builds_outside_bounds():
    nlp = build_nlp(pendulum_spec(), [10.0, 3.0])
    assert nlp.p.tolist() == [10.0, 3.0]


def test_cost_hand_sums():
    spec = pendulum_spec(N=2)
    nlp = build_nlp(spec, [1.0, 0.0])
    assert nlp.cost(np.zeros(nlp.n)) == 0.0
    X = np.tile([1.0, 0.0], (3, 1))
    U = np.zeros((2, 1))
    # Q-terms at k = 0, 1 plus the terminal P-term: 10 + 10 + 10
    assert nlp.cost(nlp.pack(X, U)) == pytest.approx(30.0, abs=1e-12)
    U = np.array([[1.0], [2.0]])
    assert nlp.cost(nlp.pack(X, U)) == pytest.approx(30.0 + 0.1 * 5.0, abs=1e-12)


def test_spec_validation():
    m = pendulum_model()
    with pytest.raises(ValueError):
        OcpSpec(m, R=[[0.0]])
    with pytest.raises(ValueError):
        OcpSpec(m, Q=[[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        OcpSpec(m, state_lower=[1.0, 1.0], state_upper=[0.0, 0.0])
    with pytest.raises(ValueError):
        OcpSpec(m, N=0)


def test_upright_is_trivial():
    nlp, sol = solve_ocp(pendulum_spec(), [0.0, 0.0])
    assert sol.converged
    assert np.abs(sol.xi_star).max() <= 1e-8
    assert abs(sol.u_opt[0]) <= 1e-8
    assert sol.cost <= 1e-14


def test_one_step_lq_closed_form():
    a, b, q, r, p = 0.5, 1.0, 2.0, 0.3, 5.0
    spec = linear_spec(a, b, 1, q, r, p)
    Ad, Bd = rk4_scalar(a, b, 0.1)
    for xs in (-2.0, 0.7, 3.1):
        _, sol = solve_ocp(spec, [xs])
        want = -(Bd * p * Ad) / (Bd * p * Bd + r) * xs
        assert sol.converged
        assert abs(sol.u_opt[0] - want) <= 1e-8


def test_lq_horizon_matches_riccati():
    a, b, q, r, p, N = -0.3, 2.0, 1.0, 0.5, 3.0, 6
    spec = linear_spec(a, b, N, q, r, p)
    Ad, Bd = rk4_scalar(a, b, 0.1)
    P = p
    for _ in range(N):
        K = Bd * P * Ad / (Bd * P * Bd + r)
        P = q + Ad * P * (Ad - Bd * K)
    _, sol = solve_ocp(spec, [1.5])
    assert abs(sol.u_opt[0] + K * 1.5) <= 1e-8


def test_pendulum_against_derivative_free_oracle():
    spec = pendulum_spec(N=3)
    xs = np.array([0.3, 0.0])
    model = spec.model

    def single_shooting(u):
        x, J = xs, 0.0
        for k in range(3):
            J += x @ spec.Q @ x + spec.R[0, 0] * u[k] ** 2
            x = model.step(x, u[k:k + 1])
        return J + x @ spec.P @ x

    _, sol = solve_ocp(spec, xs)
    assert sol.converged
    u0 = sol.xi_star[spec.n_x * 4:]
    ref = minimize(single_shooting, np.zeros(3), method="Nelder-Mead",
                   options={"xatol": 1e-9, "fatol": 1e-14, "maxiter": 20000})
    # states stay far from bounds here, so the problems coincide
    assert np.abs(u0 - ref.x).max() < 1e-5
    assert single_shooting(u0) <= ref.fun + 1e-10


def test_converged_solution_properties():
    spec = pendulum_spec()
    nlp, sol = solve_ocp(spec, [np.pi, 0.0])
    assert sol.converged
    assert sol.kkt_residual <= 1e-8
    assert np.abs(nlp.eq(sol.xi_star)).max() <= 1e-8
    assert nlp.ineq(sol.xi_star).max() <= 1e-8
    assert sol.lambda_star.min() >= -1e-12
    assert np.abs(sol.lambda_star * nlp.ineq(sol.xi_star)).max() <= 1e-8
    assert kkt_residual(nlp, sol.xi_star, sol.lambda_star, sol.nu_star) == sol.kkt_residual


def test_merit_non_increasing():
    nlp, sol = solve_ocp(pendulum_spec(), [np.pi, 0.0])
    assert sol.merit_history
    for rho, phi0, phi1 in sol.merit_history:
        assert phi1 <= phi0 + 1e-13 * (1 + abs(phi0))


def test_kkt_residual_toy_and_perturbation():
    toy = ToyNlp()
    assert kkt_residual(toy, np.zeros(1), np.zeros(0), np.zeros(0)) == 0.0
    sol = solve_sqp(toy, np.array([3.0]))
    assert sol.converged and abs(sol.xi_star[0]) <= 1e-12
    nlp, sol = solve_ocp(pendulum_spec(), [0.5, 0.2])
    xi = sol.xi_star.copy()
    xi[5] += 1e-3
    assert kkt_residual(nlp, xi, sol.lambda_star, sol.nu_star) > 1e-6


def test_warm_start_invariance():
    spec = pendulum_spec()
    rng = np.random.default_rng(3)
    cache = WarmStartCache()
    pts = rng.uniform([-2 * np.pi, -1.0], [2 * np.pi, 1.0], size=(50, 2))
    worst = 0.0
    for x in pts:
        nlp, cold = solve_ocp(spec, x)
        if not cold.converged:
            continue
        _, warm = solve_ocp(spec, x, warm_start=nlp.shifted(cold.xi_star))
        assert warm.converged
        worst = max(worst, abs(warm.u_opt[0] - cold.u_opt[0]))
        mpc_law(spec, x, cache)
    assert worst <= 1e-6


def test_mpc_law_determinism_and_cache():
    spec = pendulum_spec()
    u1 = mpc_law(spec, [2.0, -0.3])
    u2 = mpc_law(spec, [2.0, -0.3])
    assert np.array_equal(u1, u2)
    cache = WarmStartCache()
    mpc_law(spec, [2.0, -0.3], cache)
    assert cache.xi is not None and cache.xi.size == build_nlp(spec, [0, 0]).n
    assert np.array_equal(mpc_law(spec, [0.0, 0.0]), np.zeros(1))


def test_mpc_law_raises_controller_error():
    # velocity far beyond the bound cannot be brought back within one step
    spec = pendulum_spec()
    with pytest.raises(ControllerError) as info:
        mpc_law(spec, [0.0, 40.0])
    assert info.value.status in ("infeasible", "max_iter")
