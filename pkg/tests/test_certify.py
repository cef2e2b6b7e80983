import json

import numpy as np
import pytest

from certmpc.certify import (certify, denser_counts, lipschitz_mpc_estimate,
                             lipschitz_nn_lower_sampled, lipschitz_nn_upper, required_delta,
                             spectral_norm)
from certmpc.dataset import Dataset, GridSpec, Sample, seed_grid
from certmpc.errors import BoundInfeasibleError
from certmpc.mlp import MlpParams, TrainConfig, init_params, train


def test_spectral_norm_simple_cases():
    assert spectral_norm(np.eye(4)) == pytest.approx(1.0, abs=1e-12)
    assert spectral_norm(np.diag([2.0, 5.0])) == pytest.approx(5.0, abs=1e-10)
    assert spectral_norm(np.zeros((3, 2))) == 0.0
    assert spectral_norm(np.array([[3.0, 4.0]])) == pytest.approx(5.0, abs=1e-12)


def test_spectral_norm_rank_deficient_and_repeated():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(6, 1))
    v = rng.normal(size=(1, 4))
    assert spectral_norm(u @ v) == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v), rel=1e-10)
    Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert spectral_norm(3.0 * Q) == pytest.approx(3.0, rel=1e-10)


def test_nn_upper_dominates_lower():
    dom = GridSpec([-2, -1], [2, 1], (3, 3))
    rng = np.random.default_rng(1)
    for k in range(10):
        p = init_params([2, 10, 10, 1], seed=k)
        p = MlpParams([W * rng.uniform(0.5, 3) for W in p.weights], p.biases)
        assert lipschitz_nn_upper(p) >= lipschitz_nn_lower_sampled(p, dom, 500, seed=k) - 1e-12


def test_linear_network_lower_equals_norm():
    W = np.array([[3.0, -4.0]])
    p = MlpParams([W], [np.zeros(1)])
    dom = GridSpec([0, 0], [1, 1], (2, 2))
    assert lipschitz_nn_lower_sampled(p, dom, 10) == pytest.approx(5.0, abs=1e-12)
    assert lipschitz_nn_upper(p) == pytest.approx(5.0, abs=1e-10)


def test_required_delta_arithmetic():
    assert required_delta(1.0, 0.5, 2.0, 3.0) == 0.1
    assert required_delta(2.5, 0.0, 1.0, 1.0) == 1.25
    with pytest.raises(BoundInfeasibleError):
        required_delta(1.0, 1.0, 1.0, 1.0)
    with pytest.raises(BoundInfeasibleError):
        required_delta(1.0, 2.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        required_delta(1.0, 0.5, 0.0, 0.0)


def lq_dataset(K, grid, with_jac=True):
    samples = []
    for x in seed_grid(grid):
        u = -K @ x
        samples.append(Sample(x, u, -K if with_jac else None, "ok", 0.0))
    return Dataset(samples, grid.lower.size, K.shape[0], grid=grid, provenance={"toy": "lq"})


def test_mpc_estimate_on_linear_law():
    K = np.array([[1.2, 0.5]])
    grid = GridSpec([-1, -1], [1, 1], (5, 5))
    est = lipschitz_mpc_estimate(lq_dataset(K, grid))
    assert est.lower == pytest.approx(np.linalg.norm(K), abs=1e-12)
    assert est.upper == pytest.approx(1.5 * np.linalg.norm(K), abs=1e-12)
    assert est.heuristic and est.method == "jacobian-max"
    assert est.details["cross_check_ok"]
    assert est.details["difference_quotient_max"] <= est.lower + 1e-12
    no_jac = lipschitz_mpc_estimate(lq_dataset(K, grid, with_jac=False))
    assert no_jac.method == "difference-quotient"
    assert no_jac.lower <= np.linalg.norm(K) + 1e-12


def test_mpc_estimate_identical_labels_is_zero():
    grid = GridSpec([0, 0], [1, 1], (3, 3))
    ds = Dataset([Sample(x, np.ones(1), None, "ok", 0.0) for x in seed_grid(grid)], 2, 1,
                 provenance={})
    assert lipschitz_mpc_estimate(ds).lower == 0.0


def test_denser_counts():
    assert denser_counts(GridSpec([0, 0], [1, 1], (25, 14))) == (97, 53)
    assert denser_counts(GridSpec([0], [1], (3,)), 2) == (5,)


def test_report_fields_and_reasons():
    K = np.array([[1.0, 0.0]])
    grid = GridSpec([-1, -1], [1, 1], (5, 5))
    ds = lq_dataset(K, grid)
    net = MlpParams([-K.copy()], [np.zeros(1)])
    rep = certify(net, ds, grid, epsilon=2.0, nn_samples=50)
    assert rep.epsilon_d == 0.0 and rep.certified and rep.reason == "delta_actual <= delta_required"
    assert rep.delta_required == pytest.approx(2.0 / (1.5 + 1.0))
    doc = json.loads(rep.to_json())
    for k in ("epsilon", "epsilon_d", "l_mpc", "l_nn", "delta_required", "delta_actual",
              "certified", "reason"):
        assert k in doc
    assert doc["l_mpc"]["heuristic"] is True
    assert "delta required" in rep.summary_table()
    tight = certify(net, ds, grid, epsilon=0.1, nn_samples=50)
    assert not tight.certified and tight.reason == "delta_actual > delta_required"
    off = MlpParams([-K.copy()], [np.array([5.0])])
    bad = certify(off, ds, grid, epsilon=1.0, nn_samples=50)
    assert bad.infeasible and bad.reason == "epsilon_d >= epsilon" and not bad.certified


def test_probe_requires_spec():
    K = np.array([[1.0, 0.0]])
    grid = GridSpec([-1, -1], [1, 1], (3, 3))
    with pytest.raises(ValueError):
        certify(MlpParams([-K], [np.zeros(1)]), lq_dataset(K, grid), grid, 1.0, probe_density=5)


def test_weight_decay_shrinks_norm_product():
    rng = np.random.default_rng(2)
    X = rng.uniform(-1, 1, size=(40, 2))
    U = np.sin(2 * X[:, :1]) + X[:, 1:]
    ds = Dataset([Sample(x, u, None, "ok", 0.0) for x, u in zip(X, U)], 2, 1, provenance={})
    base = dict(hidden=(8,), epochs=200, lr=1e-2, batch_size=None, seed=0)
    a, _ = train(ds, TrainConfig(lambdas=(1, 0, 0), **base))
    b, _ = train(ds, TrainConfig(lambdas=(1, 0, 0.1), **base))
    assert lipschitz_nn_upper(b) < lipschitz_nn_upper(a)
