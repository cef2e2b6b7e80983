"""Continuous-time dynamics and their fixed-step RK4 discretization.

ODE objects evaluate on batches: ``x`` has shape ``(..., n_x)`` and ``u`` has
shape ``(..., n_u)``.  The discrete model wraps one of them and exposes the
transition ``x+ = f(x, u)`` together with its exact Jacobians.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import DimensionError, IntegrationError


class Ode(Protocol):
    n_x: int
    n_u: int

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    g: float = 9.81
    l: float = 1.0

    def __post_init__(self):
        if not (self.m > 0 and self.g > 0 and self.l > 0):
            raise ValueError(f"pendulum parameters must be positive, got {self}")


@dataclass(frozen=True)
class PendulumOde:
    """Actuated pendulum with the upright position at the origin.

    x1 is the angle offset theta - pi [rad], x2 the angular velocity [rad/s],
    u the torque [N m].
    """

    params: PendulumParams = field(default_factory=PendulumParams)
    n_x: int = 2
    n_u: int = 1

    def __call__(self, x, u):
        x, u = _check(self, x, u)
        p = self.params
        dx1 = x[..., 1]
        dx2 = u[..., 0] / (p.m * p.l**2) - (p.g / p.l) * np.sin(x[..., 0] + np.pi)
        return np.stack([dx1, dx2], axis=-1)

    def jacobians(self, x, u):
        x, u = _check(self, x, u)
        p = self.params
        batch = x.shape[:-1]
        fx = np.zeros(batch + (2, 2))
        fx[..., 0, 1] = 1.0
        fx[..., 1, 0] = -(p.g / p.l) * np.cos(x[..., 0] + np.pi)
        fu = np.zeros(batch + (2, 1))
        fu[..., 1, 0] = 1.0 / (p.m * p.l**2)
        return fx, fu


@dataclass(frozen=True, eq=False)
class LinearOde:
    """xdot = A x + B u, used for closed-form checks."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    def __call__(self, x, u):
        x, u = _check(self, x, u)
        return x @ self.A.T + u @ self.B.T

    def jacobians(self, x, u):
        x, u = _check(self, x, u)
        batch = x.shape[:-1]
        return (np.broadcast_to(self.A, batch + self.A.shape).copy(),
                np.broadcast_to(self.B, batch + self.B.shape).copy())


def _check(ode, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1:] != (ode.n_x,) or u.shape[-1:] != (ode.n_u,):
        raise DimensionError(
            f"expected state length {ode.n_x} and input length {ode.n_u}, "
            f"got shapes {x.shape} and {u.shape}")
    if x.shape[:-1] != u.shape[:-1]:
        raise DimensionError(f"batch shapes differ: {x.shape} vs {u.shape}")
    return x, u


@dataclass(frozen=True)
class DiscreteModel:
    """One classical RK4 step of length ``h`` with zero-order-hold input."""

    ode: Ode
    h: float = 0.1

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"step length must be positive, got {self.h}")

    @property
    def n_x(self) -> int:
        return self.ode.n_x

    @property
    def n_u(self) -> int:
        return self.ode.n_u

    def step(self, x, u) -> np.ndarray:
        f, h = self.ode, self.h
        k1 = f(x, u)
        k2 = f(x + 0.5 * h * k1, u)
        k3 = f(x + 0.5 * h * k2, u)
        k4 = f(x + h * k3, u)
        xn = np.asarray(x, dtype=float) + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(xn)):
            raise IntegrationError("RK4 step produced non-finite state")
        return xn

    def jacobians(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        """Exact ``(df/dx, df/du)`` of :meth:`step`, chained through the stages."""
        f, h = self.ode, self.h
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        eye = np.broadcast_to(np.eye(self.n_x), x.shape[:-1] + (self.n_x, self.n_x))

        k1 = f(x, u)
        a1, b1 = f.jacobians(x, u)
        dx1, du1 = a1, b1

        x2 = x + 0.5 * h * k1
        k2 = f(x2, u)
        a2, b2 = f.jacobians(x2, u)
        dx2 = a2 @ (eye + 0.5 * h * dx1)
        du2 = a2 @ (0.5 * h * du1) + b2

        x3 = x + 0.5 * h * k2
        k3 = f(x3, u)
        a3, b3 = f.jacobians(x3, u)
        dx3 = a3 @ (eye + 0.5 * h * dx2)
        du3 = a3 @ (0.5 * h * du2) + b3

        x4 = x + h * k3
        a4, b4 = f.jacobians(x4, u)
        dx4 = a4 @ (eye + h * dx3)
        du4 = a4 @ (h * du3) + b4

        A = eye + (h / 6.0) * (dx1 + 2.0 * dx2 + 2.0 * dx3 + dx4)
        B = (h / 6.0) * (du1 + 2.0 * du2 + 2.0 * du3 + du4)
        return A, B

    def weighted_hessian(self, x, u, w, step: float = 1e-6) -> np.ndarray:
        """Hessian of ``w . f(x, u)`` w.r.t. ``z = (x, u)``.

        Obtained by central differences of the analytic Jacobians; result has
        shape ``(..., n_x + n_u, n_x + n_u)`` and is symmetrized.
        """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        nx, nu = self.n_x, self.n_u
        nz = nx + nu
        out = np.empty(x.shape[:-1] + (nz, nz))

        def grad(xx, uu):
            A, B = self.jacobians(xx, uu)
            return np.concatenate([np.einsum("...i,...ij->...j", w, A),
                                   np.einsum("...i,...ij->...j", w, B)], axis=-1)

        for j in range(nz):
            dx = np.zeros(nx)
            du = np.zeros(nu)
            if j < nx:
                dx[j] = step
            else:
                du[j - nx] = step
            out[..., :, j] = (grad(x + dx, u + du) - grad(x - dx, u - du)) / (2.0 * step)
        return 0.5 * (out + np.swapaxes(out, -1, -2))


def pendulum_model(params: PendulumParams | None = None, h: float = 0.1) -> DiscreteModel:
    return DiscreteModel(PendulumOde(params or PendulumParams()), h)


def pendulum_ode(x, u, p: PendulumParams | None = None) -> np.ndarray:
    """Time derivative of the pendulum state (convenience wrapper)."""
    return PendulumOde(p or PendulumParams())(x, u)


def rk4_step(model: DiscreteModel, x, u) -> np.ndarray:
    return model.step(x, u)


def step_jacobians(model: DiscreteModel, x, u) -> tuple[np.ndarray, np.ndarray]:
    return model.jacobians(x, u)
