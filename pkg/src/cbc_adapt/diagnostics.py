"""Evaluation quantities computed from recorded traces.

Everything here is pure post-processing: invasiveness of the control input,
tracking error against the analytic reference, the Lyapunov certificate
V = z~.z~/2 + th~ S^-1 th~/2 with its decrease rate, the parameter
estimation error, the persistent-excitation matrix M_e, and the reference
residual that separates natural responses from arbitrary references.

Unlike the controller, diagnostics are allowed to read the plant's true
parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .plant import Excitation, PlantModel
from .reference import ReferenceTrajectory
from .simulator import SimTrace

__all__ = [
    "invasiveness",
    "tracking_error_sup",
    "lyapunov_series",
    "LyapunovSeries",
    "pe_matrix_min_eig",
    "reference_residual",
    "estimation_error",
    "noninvasiveness_tolerance",
    "MetricsReport",
    "metrics_report",
]


def noninvasiveness_tolerance(excitation: Excitation) -> float:
    """Default threshold below which a control input counts as noninvasive.

    One thousandth of the excitation sup-norm, floored at 1e-9 so that
    unforced scenarios still get a usable positive tolerance.
    """
    return 1e-3 * max(float(np.abs(excitation.amplitude).max()), 1e-6)


def _final_window(trace: SimTrace, period: float) -> np.ndarray:
    span = trace.t[-1] - trace.t[0]
    if span < 2.0 * period:
        raise ValueError(
            f"trace spans {span:.3g} s, need at least two periods "
            f"({2 * period:.3g} s)")
    return trace.t >= trace.t[-1] - period - 1e-12 * period


def invasiveness(trace: SimTrace, period: float) -> float:
    """Sup over the final forcing period of the control-input max-norm."""
    w = _final_window(trace, period)
    return float(np.abs(trace.u_prime[w]).max())


def tracking_error_sup(trace: SimTrace, reference: ReferenceTrajectory,
                       period: float, position_only: bool = True) -> float:
    """Sup over the final period of the tracking-error max-norm.

    The tracking error is e = x - x_r on the position channels; set
    ``position_only=False`` to take the sup over the full state stack.
    """
    w = _final_window(trace, period)
    err = trace.xi[w] - reference.evaluate_state(trace.t[w])
    if position_only:
        p = reference.dof_p
        err = err[:, (reference.order_n - 1) * p:]
    return float(np.abs(err).max())


@dataclass
class LyapunovSeries:
    """Sampled certificate V(t) with measured and predicted decrease rates.

    ``dV_dt`` uses a fourth-order central-difference stencil (NaN on the two
    samples at each end); ``predicted`` is the closed-form rate
    ``-k z~.z~`` the adaptive design guarantees.
    """

    t: np.ndarray
    V: np.ndarray
    dV_dt: np.ndarray
    predicted: np.ndarray

    def nonincreasing(self, rel_tol: float = 8.0) -> bool:
        """V never rises beyond float roundoff (rel_tol ulps of max V)."""
        tol = rel_tol * np.finfo(float).eps * float(self.V.max())
        return bool(np.all(np.diff(self.V) <= tol))


def lyapunov_series(trace: SimTrace, theta_true, S, k: float) -> LyapunovSeries:
    """Certificate series from a closed-loop trace.

    Requires the trace to carry the adaptive state (open-loop traces are
    rejected). V uses the plant's true parameters, which diagnostics may
    read.
    """
    if trace.meta.get("mode") == "open_loop":
        raise ValueError("Lyapunov series needs a closed-loop trace")
    theta_true = np.asarray(theta_true, dtype=float)
    S = np.asarray(S, dtype=float)
    th_err = trace.theta_hat - theta_true
    S_inv = np.linalg.inv(S)
    V = 0.5 * np.einsum("ij,ij->i", trace.z_tilde, trace.z_tilde) \
        + 0.5 * np.einsum("ij,jk,ik->i", th_err, S_inv, th_err)
    dt = trace.dt_grid
    dV = np.full_like(V, np.nan)
    if len(V) >= 5:
        dV[2:-2] = (-V[4:] + 8.0 * V[3:-1] - 8.0 * V[1:-3] + V[:-4]) / (12.0 * dt)
    predicted = -k * np.einsum("ij,ij->i", trace.z_tilde, trace.z_tilde)
    return LyapunovSeries(t=trace.t, V=V, dV_dt=dV, predicted=predicted)


def estimation_error(trace: SimTrace, theta_true) -> np.ndarray:
    """Euclidean norm series of theta_hat(t) - theta."""
    theta_true = np.asarray(theta_true, dtype=float)
    return np.linalg.norm(trace.theta_hat - theta_true, axis=1)


def pe_matrix_min_eig(trace: SimTrace, plant: PlantModel,
                      window: float | None = None, stride: int = 1):
    """Smallest eigenvalue of M_e(t) = int_t^{t+s} F^T F dtau over the trace.

    The integral uses trapezoidal quadrature on the recorded grid; the
    window defaults to one forcing period when the trace metadata carries
    none, so pass it explicitly for unforced data. Returns (window start
    times, lambda_min series, trace(M_e)/m series).
    """
    if window is None or window <= 0:
        raise ValueError("window must be a positive duration")
    dt = trace.dt_grid
    W = int(round(window / dt))
    if W < 1 or W >= len(trace):
        raise ValueError("window must fit inside the trace")
    F = plant.regressor_batch(trace.xi)
    G = np.einsum("spm,spq->smq", F, F)
    trap = 0.5 * (G[1:] + G[:-1]) * dt
    csum = np.concatenate([np.zeros((1,) + G.shape[1:]), np.cumsum(trap, axis=0)])
    starts = np.arange(0, len(trace) - W, stride)
    lam = np.empty(starts.shape[0])
    tr_per_m = np.empty(starts.shape[0])
    m = plant.param_count_m
    for j, i in enumerate(starts):
        Me = csum[i + W] - csum[i]
        lam[j] = np.linalg.eigvalsh(Me)[0]
        tr_per_m[j] = np.trace(Me) / m
    return trace.t[starts], lam, tr_per_m


def reference_residual(plant: PlantModel, excitation: Excitation,
                       reference: ReferenceTrajectory, samples: int = 1024):
    """Residual of the reference in the uncontrolled equations of motion.

    Delta(t) = x_r^(n)(t) - F(xi_r(t)) theta - sigma(t) over one period.
    A natural response has Delta identically zero; anything else does not.
    Returns (t, Delta (N, p), sup norm).
    """
    T = reference.period
    ts = np.arange(samples) * (T / samples)
    xi_r = reference.evaluate_state(ts)
    F = plant.regressor_batch(xi_r)
    acc = np.einsum("spm,m->sp", F, plant.true_theta)
    delta = reference.evaluate_top(ts) - acc - excitation.evaluate(ts)
    return ts, delta, float(np.abs(delta).max())


@dataclass
class MetricsReport:
    """Final-period metrics of one closed-loop run plus certificate flags."""

    sup_u: float
    sup_e: float
    sup_e_full: float
    sup_z_tilde: float
    sup_y: float
    theta_err_initial: float
    theta_err_final: float
    phi_final: float
    lyapunov_nonincreasing: bool
    pe_min_eig_max_ratio: float
    delta_sup: float
    tol_noninv: float
    floor_inv: float

    def to_json(self) -> str:
        payload = {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                   for k, v in self.__dict__.items()}
        payload["schema"] = 1
        return json.dumps(payload, indent=2)


def metrics_report(trace: SimTrace, plant: PlantModel,
                   reference: ReferenceTrajectory, excitation: Excitation,
                   S, k: float, tol_noninv: float | None = None,
                   pe_windows: int = 8) -> MetricsReport:
    """Bundle the headline diagnostics for one closed-loop trace."""
    T = excitation.period if excitation.omega > 0 else reference.period
    w = _final_window(trace, T)
    tol = noninvasiveness_tolerance(excitation) if tol_noninv is None \
        else float(tol_noninv)
    lyap = lyapunov_series(trace, plant.true_theta, S, k)
    # PE ratio over a handful of windows in the steady tail
    tail_start = max(0, len(trace) - 1 - pe_windows * int(round(T / trace.dt_grid)))
    tail = SimTrace(t=trace.t[tail_start:], xi=trace.xi[tail_start:],
                    u_prime=trace.u_prime[tail_start:],
                    eta=trace.eta[tail_start:], y=trace.y[tail_start:],
                    z_tilde=trace.z_tilde[tail_start:],
                    theta_hat=trace.theta_hat[tail_start:],
                    phi=trace.phi[tail_start:], sigma=trace.sigma[tail_start:],
                    meta=trace.meta)
    _, lam, tr_m = pe_matrix_min_eig(tail, plant, window=T,
                                     stride=max(1, int(round(T / tail.dt_grid)) // 4))
    th_err = estimation_error(trace, plant.true_theta)
    _, _, delta_sup = reference_residual(plant, excitation, reference)
    return MetricsReport(
        sup_u=invasiveness(trace, T),
        sup_e=tracking_error_sup(trace, reference, T, position_only=True),
        sup_e_full=tracking_error_sup(trace, reference, T, position_only=False),
        sup_z_tilde=float(np.abs(trace.z_tilde[w]).max()),
        sup_y=float(np.abs(trace.y[w]).max()),
        theta_err_initial=float(th_err[0]),
        theta_err_final=float(th_err[-1]),
        phi_final=float(trace.phi[-1]),
        lyapunov_nonincreasing=lyap.nonincreasing(),
        pe_min_eig_max_ratio=float((lam / tr_m).max()),
        delta_sup=delta_sup,
        tol_noninv=tol,
        floor_inv=10.0 * tol,
    )
