"""Adaptive noninvasive tracking controller.

The control input splits into a feedback term on an auxiliary integral state
and a robust stabilizing term:

    u'(t) = -k (z(t) - x_r^(n-1)(0)) + eta(t)
    z(t)  = x^(n-1)(t) - I(t),  I(t) = int_0^t F(xi) theta_hat + sigma + eta
    eta   = -lam_{n-1} e^(n-1) - ... - lam_1 edot - phi y - g sat(y/eps)
    y     = e^(n-1) + lam_{n-1} e^(n-2) + ... + lam_1 e

with the adaptive gain and parameter estimate driven by

    phi_dot       = gamma y.y
    theta_hat_dot = S F(xi)^T (z - x_r^(n-1)(0))
    g             = ||(F(xi) - F(xi_r)) theta_hat|| + kappa.

On the surface y = 0 the error dynamics are governed by the Hurwitz
polynomial built from the lam coefficients, so y -> 0 drags the tracking
error and all its derivatives to zero; z converging to x_r^(n-1)(0) then
makes u' itself vanish whenever the reference is a natural response.

No function here reads the plant's true parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .plant import PlantModel

__all__ = [
    "ControllerParams",
    "ControllerState",
    "ControlOutput",
    "StateDerivatives",
    "saturate",
    "surface_y",
    "gain_g",
    "robust_eta",
    "control_input",
    "controller_rhs",
    "error_stack",
    "hurwitz_stable",
]


def saturate(v, eps: float):
    """Boundary-layer saturation: clip(v/eps, -1, 1), elementwise on arrays."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return np.clip(np.asarray(v, dtype=float) / eps, -1.0, 1.0)


def hurwitz_stable(lam) -> bool:
    """True if s^k + lam[k-1] s^(k-1) + ... + lam[0] has all roots in Re < 0.

    An empty coefficient vector (first-order plants) is trivially stable.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.size == 0:
        return True
    poly = np.concatenate([[1.0], lam[::-1]])
    return bool(np.all(np.roots(poly).real < 0.0))


@dataclass(frozen=True)
class ControllerParams:
    """Gains of the adaptive tracking law.

    ``lam`` holds (lam_1, ..., lam_{n-1}); the induced polynomial must be
    Hurwitz stable. ``S`` is the symmetric positive-definite adaptation
    metric, ``gamma`` the surface-gain growth rate, ``eps`` the saturation
    boundary-layer width.
    """

    k: float
    kappa: float
    eps: float
    gamma: float
    S: np.ndarray
    lam: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        for nm, v in (("k", self.k), ("kappa", self.kappa),
                      ("eps", self.eps), ("gamma", self.gamma)):
            if not v > 0:
                raise ValueError(f"{nm} must be positive")
        if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, rtol=1e-12, atol=0):
            raise ValueError("S must be square symmetric")
        if np.linalg.eigvalsh(S).min() <= 0:
            raise ValueError("S must be positive definite")
        if lam.size and np.any(lam <= 0):
            raise ValueError("lam entries must be positive")
        if not hurwitz_stable(lam):
            raise ValueError("lam does not define a Hurwitz-stable polynomial")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def from_s_diag(cls, k, kappa, eps, gamma, s_diag, m, lam):
        """Convenience constructor for the common S = s_diag * I_m case."""
        return cls(k=k, kappa=kappa, eps=eps, gamma=gamma,
                   S=s_diag * np.eye(m), lam=np.asarray(lam, dtype=float))

    def check_dimensions(self, order_n: int, param_count_m: int):
        if self.lam.size != order_n - 1:
            raise ValueError(
                f"lam must have length n-1 = {order_n - 1}, got {self.lam.size}")
        if self.S.shape != (param_count_m, param_count_m):
            raise ValueError(
                f"S must be {param_count_m}x{param_count_m}, got {self.S.shape}")


@dataclass
class ControllerState:
    """Integrator-advanced controller state.

    ``accum`` is the running integral of F(xi) theta_hat + sigma + eta, so
    z = x^(n-1) - accum starts at x^(n-1)(0).
    """

    accum: np.ndarray
    phi: float
    theta_hat: np.ndarray

    @classmethod
    def initial(cls, dof_p: int, param_count_m: int, phi0: float = 0.0,
                theta_hat0=None) -> "ControllerState":
        th0 = (np.zeros(param_count_m) if theta_hat0 is None
               else np.asarray(theta_hat0, dtype=float).copy())
        if th0.shape != (param_count_m,):
            raise ValueError("theta_hat0 must have length m")
        return cls(accum=np.zeros(dof_p), phi=float(phi0), theta_hat=th0)


@dataclass(frozen=True)
class ControlOutput:
    """Control input and its intermediates at one evaluation time."""

    u_prime: np.ndarray
    eta: np.ndarray
    y: np.ndarray
    g: float
    z_tilde: np.ndarray


@dataclass(frozen=True)
class StateDerivatives:
    accum_dot: np.ndarray
    phi_dot: float
    theta_hat_dot: np.ndarray


def error_stack(xi, xi_r, order_n: int, dof_p: int) -> np.ndarray:
    """Tracking-error derivatives as an (n, p) array, row d = e^(d)."""
    xi = np.asarray(xi, dtype=float)
    xi_r = np.asarray(xi_r, dtype=float)
    if xi.shape != (order_n * dof_p,) or xi_r.shape != xi.shape:
        raise ValueError("state vectors must have length n*p")
    err = xi - xi_r
    stack = np.empty((order_n, dof_p))
    for d in range(order_n):
        blk = (order_n - 1 - d) * dof_p
        stack[d] = err[blk:blk + dof_p]
    return stack


def surface_y(e_stack, lam) -> np.ndarray:
    """Sliding surface y = e^(n-1) + lam_{n-1} e^(n-2) + ... + lam_1 e."""
    e_stack = np.atleast_2d(np.asarray(e_stack, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    n = e_stack.shape[0]
    if lam.size != n - 1:
        raise ValueError("lam must have length n-1")
    y = e_stack[n - 1].copy()
    for i in range(1, n):
        y += lam[i - 1] * e_stack[i - 1]
    return y


def gain_g(F_xi, F_xr, theta_hat, kappa: float) -> float:
    """Robustifying gain ||(F(xi) - F(xi_r)) theta_hat|| + kappa."""
    F_xi = np.asarray(F_xi, dtype=float)
    F_xr = np.asarray(F_xr, dtype=float)
    if F_xi.shape != F_xr.shape:
        raise ValueError("regressor shapes must agree")
    return float(np.linalg.norm((F_xi - F_xr) @ np.asarray(theta_hat, dtype=float))
                 + kappa)


def robust_eta(e_stack, y, phi: float, g: float, eps: float, lam) -> np.ndarray:
    """Stabilizing term -sum_i lam_i e^(i) - phi y - g sat(y/eps)."""
    e_stack = np.atleast_2d(np.asarray(e_stack, dtype=float))
    y = np.asarray(y, dtype=float)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    n = e_stack.shape[0]
    eta = -phi * y - g * saturate(y, eps)
    for i in range(1, n):
        eta = eta - lam[i - 1] * e_stack[i]
    return eta


def control_input(params: ControllerParams, state: ControllerState,
                  plant: PlantModel, xi, xi_r, xr_top0) -> ControlOutput:
    """Evaluate u'(t) and all intermediates.

    ``plant`` supplies the controller-side regressor (possibly masked); its
    true parameters are never touched. ``xr_top0`` is the reference top
    derivative at time zero, the anchor value z is steered to.
    """
    n, p = plant.order_n, plant.dof_p
    xi = plant.check_state(xi)
    xi_r = plant.check_state(xi_r)
    e = error_stack(xi, xi_r, n, p)
    y = surface_y(e, params.lam)
    g = gain_g(plant.regressor(xi), plant.regressor(xi_r),
               state.theta_hat, params.kappa)
    eta = robust_eta(e, y, state.phi, g, params.eps, params.lam)
    z_tilde = xi[:p] - state.accum - np.asarray(xr_top0, dtype=float)
    u_prime = -params.k * z_tilde + eta
    return ControlOutput(u_prime=u_prime, eta=eta, y=y, g=g, z_tilde=z_tilde)


def controller_rhs(params: ControllerParams, state: ControllerState,
                   plant: PlantModel, xi, sigma, out: ControlOutput
                   ) -> StateDerivatives:
    """Time derivatives of the controller state.

    ``out`` carries eta, y and z_tilde from :func:`control_input` evaluated
    at the same instant.
    """
    F = plant.regressor(xi)
    accum_dot = F @ state.theta_hat + np.asarray(sigma, dtype=float) + out.eta
    phi_dot = params.gamma * float(out.y @ out.y)
    theta_hat_dot = params.S @ (F.T @ out.z_tilde)
    return StateDerivatives(accum_dot=accum_dot, phi_dot=phi_dot,
                            theta_hat_dot=theta_hat_dot)
