"""Feed-forward tanh network, its input Jacobian, and sensitivity-regularized
training.

The Jacobian-matching term needs the gradient of a function of the input
Jacobian.  The forward pass carries an input-tangent bundle per layer
(``T_j = dz_j/dx``) and the backward pass propagates adjoints of both the
activations and the tangents.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DimensionError, TrainingError

log = logging.getLogger(__name__)


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        self.weights = [np.asarray(W, dtype=float) for W in self.weights]
        self.biases = [np.asarray(b, dtype=float).ravel() for b in self.biases]
        if not self.activations:
            self.activations = ("tanh",) * (len(self.weights) - 1) + ("linear",)
        self.activations = tuple(self.activations)
        if len(self.weights) != len(self.biases) or len(self.activations) != len(self.weights):
            raise DimensionError("weights, biases and activations must have equal length")
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.size:
                raise DimensionError(f"layer {j}: bias length {b.size} != rows {W.shape[0]}")
            if j and W.shape[1] != self.weights[j - 1].shape[0]:
                raise DimensionError(f"layer {j}: input size does not chain")
        if self.activations[-1] != "linear" or \
                any(a not in ("tanh", "linear") for a in self.activations[:-1]):
            raise ValueError("hidden layers must be tanh or linear and the output layer linear")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.activations)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in zip(self.weights, self.biases) for a in (W, b)])

    def with_flat(self, v) -> "MlpParams":
        v = np.asarray(v, dtype=float)
        Ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(v[k:k + W.size].reshape(W.shape))
            k += W.size
            bs.append(v[k:k + b.size].copy())
            k += b.size
        return MlpParams(Ws, bs, self.activations)


def init_params(sizes, seed: int = 0) -> MlpParams:
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(Ws, bs)


def _as_batch(params, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != params.n_in:
        raise DimensionError(f"network expects {params.n_in} inputs, got {X.shape[1]}")
    return X, single


def forward(params: MlpParams, x) -> np.ndarray:
    X, single = _as_batch(params, x)
    z = X
    last = len(params.weights) - 1
    for j, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = z @ W.T + b
        if j < last and params.activations[j] == "tanh":
            z = np.tanh(z)
    return z[0] if single else z


def input_jacobian(params: MlpParams, x) -> np.ndarray:
    """``d kappa_NN / dx`` with shape ``(n_u, n_x)`` (or batched)."""
    X, single = _as_batch(params, x)
    z = X
    T = np.broadcast_to(np.eye(params.n_in), (X.shape[0], params.n_in, params.n_in))
    last = len(params.weights) - 1
    for j, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = z @ W.T + b
        T = np.einsum("ok,nki->noi", W, T)
        if j < last and params.activations[j] == "tanh":
            z = np.tanh(z)
            T = (1.0 - z**2)[:, :, None] * T
    return T[0] if single else T


@dataclass
class TrainConfig:
    lambdas: tuple[float, float, float] = (1.0, 3.0, 0.05)
    lr: float = 1e-3
    epochs: int = 2000
    batch_size: int | None = 32          # None: full batch
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: tuple[int, ...] = (10, 10)
    target_epsilon_d: float | None = None

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise ValueError("lambdas must be three non-negative weights")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainReport:
    history: dict[str, list[float]]
    epsilon_d: float
    validation_r2: float | None
    wall_time: float
    epochs_run: int = 0

    def to_dict(self):
        return {"epsilon_d": self.epsilon_d, "validation_r2": self.validation_r2,
                "epochs_run": self.epochs_run, "wall_time": self.wall_time,
                "final_loss": {k: v[-1] for k, v in self.history.items()}}


def _loss_and_grad(params, X, U, J, mask, lambdas, need_grad=True):
    """Loss terms ``(total, mse, sens, reg)`` and, optionally, parameter gradients."""
    l1, l2, l3 = lambdas
    Ws, bs = params.weights, params.biases
    m = len(Ws)
    n = X.shape[0]
    ns = int(mask.sum()) if mask is not None else 0
    use_sens = l2 != 0.0 and ns > 0

    zs = [X]
    Ts = [np.broadcast_to(np.eye(X.shape[1]), (n, X.shape[1], X.shape[1]))] if use_sens else None
    Tds = []     # pre-activation tangents
    for j in range(m):
        a = zs[-1] @ Ws[j].T + bs[j]
        if use_sens:
            Tdot = np.einsum("ok,nki->noi", Ws[j], Ts[-1])
            Tds.append(Tdot)
        if j < m - 1:
            tanh = params.activations[j] == "tanh"
            z = np.tanh(a) if tanh else a
            zs.append(z)
            if use_sens:
                Ts.append((1.0 - z**2)[:, :, None] * Tdot if tanh else Tdot)
        else:
            y = a
            if use_sens:
                Jn = Tdot

    err = y - U
    mse = float(np.sum(err**2) / n) if n else 0.0
    sens = 0.0
    if use_sens:
        dJ = (Jn - J) * mask[:, None, None]
        sens = float(np.sum(dJ**2) / ns)
    reg = float(sum(np.sum(W**2) for W in Ws))
    total = l3 * reg + l1 * mse + l2 * sens
    if not need_grad:
        return (total, mse, sens, reg), None

    gW = [2.0 * l3 * W for W in Ws]
    gb = [np.zeros_like(b) for b in bs]
    ybar = (2.0 * l1 / n) * err if n else np.zeros_like(err)
    Jbar = (2.0 * l2 / ns) * dJ if use_sens else None

    # output layer (no activation)
    gW[-1] += ybar.T @ zs[-1]
    gb[-1] += ybar.sum(axis=0)
    zbar = ybar @ Ws[-1]
    if use_sens:
        gW[-1] += np.einsum("noi,nki->ok", Jbar, Ts[-1])
        Tbar = np.einsum("ok,noi->nki", Ws[-1], Jbar)
    for j in range(m - 2, -1, -1):
        z = zs[j + 1]
        tanh = params.activations[j] == "tanh"
        s = 1.0 - z**2 if tanh else np.ones_like(z)
        abar = zbar * s
        if use_sens:
            if tanh:
                sbar = np.einsum("nri,nri->nr", Tbar, Tds[j])
                abar = abar + sbar * (-2.0 * z * s)
            Tdotbar = s[:, :, None] * Tbar
        gW[j] += abar.T @ zs[j]
        gb[j] += abar.sum(axis=0)
        zbar = abar @ Ws[j]
        if use_sens:
            gW[j] += np.einsum("noi,nki->ok", Tdotbar, Ts[j])
            Tbar = np.einsum("ok,noi->nki", Ws[j], Tdotbar)
    return (total, mse, sens, reg), (gW, gb)


def _data(dataset_or_arrays):
    if isinstance(dataset_or_arrays, tuple):
        X, U, J, mask = dataset_or_arrays
        return (np.asarray(X, float), np.asarray(U, float),
                np.asarray(J, float), np.asarray(mask, bool))
    return dataset_or_arrays.arrays()


def loss_terms(params, data, lambdas=(1.0, 0.0, 0.0)):
    X, U, J, mask = _data(data)
    return _loss_and_grad(params, X, U, J, mask, lambdas, need_grad=False)[0]


def loss_mse(params, data) -> float:
    return loss_terms(params, data)[1]


def loss_sens(params, data) -> float:
    X, U, J, mask = _data(data)
    if not mask.any():
        log.warning("no samples carry sensitivities; sensitivity loss defined as 0")
        return 0.0
    Jn = input_jacobian(params, X[mask])
    return float(np.sum((Jn - J[mask]) ** 2) / mask.sum())


def loss_full(params, data, cfg: TrainConfig) -> float:
    return loss_terms(params, data, cfg.lambdas)[0]


def grad_loss(params, data, cfg: TrainConfig) -> MlpParams:
    """Exact gradient of the combined loss, returned as an ``MlpParams``."""
    X, U, J, mask = _data(data)
    _, (gW, gb) = _loss_and_grad(params, X, U, J, mask, cfg.lambdas)
    return MlpParams(gW, gb, params.activations)


def epsilon_d(params, data) -> float:
    """Largest training-set error ``max_i |u_i - kappa_NN(x_i)|``."""
    X, U, _, _ = _data(data)
    if X.shape[0] == 0:
        raise ValueError("epsilon_d of an empty dataset is undefined")
    return float(np.max(np.linalg.norm(U - forward(params, X), axis=1)))


def sample_errors(params, data) -> np.ndarray:
    X, U, _, _ = _data(data)
    return np.linalg.norm(U - forward(params, X), axis=1)


def r2_score(params, data) -> float:
    X, U, _, _ = _data(data)
    pred = forward(params, X)
    ss_res = float(np.sum((U - pred) ** 2))
    ss_tot = float(np.sum((U - U.mean(axis=0)) ** 2))
    return 1.0 - ss_res / ss_tot


def train(dataset, cfg: TrainConfig, init: MlpParams | None = None,
          validation=None) -> tuple[MlpParams, TrainReport]:
    """Adam on the combined loss; deterministic given ``cfg.seed`` and ``init``."""
    t0 = time.perf_counter()
    X, U, J, mask = _data(dataset)
    if X.shape[0] == 0:
        raise ValueError("training needs at least one labelled sample")
    params = (init or init_params([X.shape[1], *cfg.hidden, U.shape[1]], cfg.seed)).copy()
    if cfg.lambdas[1] > 0 and not mask.any():
        log.warning("no samples carry sensitivities; sensitivity loss defined as 0")
    rng = np.random.default_rng(cfg.seed + 1)
    n = X.shape[0]
    bs = n if cfg.batch_size is None else min(int(cfg.batch_size), n)

    theta = params.flat()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    step = 0
    hist = {"total": [], "mse": [], "sens": [], "reg": []}
    epochs_run = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            terms, (gW, gb) = _loss_and_grad(params, X[idx], U[idx], J[idx], mask[idx],
                                             cfg.lambdas)
            if bs == n and start == 0:
                epoch_terms = terms
            if not np.isfinite(terms[0]):
                raise TrainingError(f"non-finite loss at epoch {epoch}: {terms}")
            g = MlpParams(gW, gb, params.activations).flat()
            step += 1
            m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g
            m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * g * g
            mhat = m1 / (1.0 - cfg.beta1**step)
            vhat = m2 / (1.0 - cfg.beta2**step)
            theta = theta - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            params = params.with_flat(theta)
        if bs < n:
            epoch_terms = loss_terms(params, (X, U, J, mask), cfg.lambdas)
        for key, val in zip(("total", "mse", "sens", "reg"), epoch_terms):
            hist[key].append(float(val))
        epochs_run = epoch + 1
        if cfg.target_epsilon_d is not None and \
                epsilon_d(params, (X, U, J, mask)) <= cfg.target_epsilon_d:
            log.info("epsilon_d target reached after %d epochs", epochs_run)
            break

    r2 = r2_score(params, validation) if validation is not None else None
    report = TrainReport(hist, epsilon_d(params, (X, U, J, mask)), r2,
                         time.perf_counter() - t0, epochs_run)
    return params, report


# --- checkpoints -------------------------------------------------------------

def save_params(params: MlpParams, path, provenance: dict | None = None) -> None:
    doc = {"format": "certmpc-mlp", "version": 1,
           "sizes": params.sizes,
           "activations": list(params.activations),
           "weights": [W.tolist() for W in params.weights],
           "biases": [b.tolist() for b in params.biases],
           "provenance": {"toolkit_version": __version__, **(provenance or {})}}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_params(path) -> MlpParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "certmpc-mlp":
        raise ValueError(f"{path} is not a network checkpoint")
    params = MlpParams([np.array(W, dtype=float) for W in doc["weights"]],
                       [np.array(b, dtype=float) for b in doc["biases"]],
                       tuple(doc["activations"]))
    if params.sizes != list(doc["sizes"]):
        raise DimensionError("checkpoint layer sizes do not match weight shapes")
    return params


def save_history(report: TrainReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "total", "mse", "sens", "reg"])
        h = report.history
        for e in range(len(h["total"])):
            w.writerow([e, repr(h["total"][e]), repr(h["mse"][e]), repr(h["sens"][e]),
                        repr(h["reg"][e])])
