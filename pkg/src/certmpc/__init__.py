"""Neural imitation of nonlinear MPC with Lipschitz-based error certificates."""

__version__ = "0.1.0"
