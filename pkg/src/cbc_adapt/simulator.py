"""Closed- and open-loop time simulation with trace recording.

The coupled plant + controller system is integrated by fixed-step RK4 with
the control law evaluated at every stage, so the whole loop behaves as one
continuous-time ODE. Traces are recorded on a decimated uniform grid and are
bit-reproducible for identical scenarios.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .controller import ControllerParams, ControllerState
from .plant import SPECIAL_NONE, Excitation, PlantModel
from .reference import ReferenceTrajectory

__all__ = [
    "Scenario",
    "SimTrace",
    "SimulationDiverged",
    "simulate",
    "apply_regressor_mask",
    "trace_to_csv",
]


class SimulationDiverged(RuntimeError):
    """Raised when the integrated state leaves the finite range.

    Carries the failure time and the partial trace recorded up to it.
    """

    def __init__(self, t_fail: float, trace: "SimTrace"):
        super().__init__(f"simulation diverged at t = {t_fail:.6g}")
        self.t_fail = t_fail
        self.trace = trace


def apply_regressor_mask(plant: PlantModel, mask) -> PlantModel:
    """Controller-side view of a plant with regressor columns zeroed.

    The returned model keeps the plant dimensions but drops every monomial
    term (and special column) whose column index is masked out. The true
    plant used by the simulator stays intact; this only models structural
    terms the controller designer is unaware of.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (plant.param_count_m,):
        raise ValueError("mask must have length m")
    keep = mask[plant.term_col]
    special_kind = plant.special_kind
    special_cols = plant.special_cols
    if plant.special_kind != SPECIAL_NONE and plant.special_cols.size:
        # the tip-spring pair is dropped only if both its columns are masked;
        # masking one of the two is not representable and is rejected
        sk = mask[plant.special_cols]
        if sk.all():
            pass
        elif not sk.any():
            special_kind = 0
            special_cols = np.zeros(0, dtype=np.int64)
        else:
            raise ValueError("cannot mask only one column of the spring pair")
    return PlantModel(
        order_n=plant.order_n, dof_p=plant.dof_p,
        param_count_m=plant.param_count_m,
        true_theta=plant.true_theta.copy(),
        term_row=plant.term_row[keep], term_col=plant.term_col[keep],
        term_coef=plant.term_coef[keep], term_exp=plant.term_exp[keep],
        name=plant.name + "+masked",
        special_kind=special_kind, special_cols=special_cols,
        special_w=plant.special_w.copy(), special_a=plant.special_a,
    )


@dataclass
class Scenario:
    """One simulation setup: plant, reference, excitation, controller, grid.

    ``dt`` and ``t_end`` are in seconds. ``regressor_mask`` restricts the
    controller-side regressor only. ``store_every`` decimates the recorded
    grid (every sample is still integrated).
    """

    plant: PlantModel
    excitation: Excitation
    params: ControllerParams | None
    reference: ReferenceTrajectory | None
    xi0: np.ndarray
    t_end: float
    dt: float
    mode: str = "closed_loop"
    regressor_mask: np.ndarray | None = None
    store_every: int = 1
    phi0: float = 0.0
    theta_hat0: np.ndarray | None = None
    label: str = "scenario"

    def __post_init__(self):
        if self.mode not in ("closed_loop", "open_loop"):
            raise ValueError("mode must be closed_loop or open_loop")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_end < self.dt:
            raise ValueError("t_end must be at least dt")
        self.xi0 = np.asarray(self.xi0, dtype=float)
        if self.xi0.shape != (self.plant.state_dim,):
            raise ValueError("xi0 must have length n*p")
        if self.excitation.dof != self.plant.dof_p:
            raise ValueError("excitation channel count must equal p")
        if self.store_every < 1:
            raise ValueError("store_every must be >= 1")
        if self.regressor_mask is not None:
            self.regressor_mask = np.asarray(self.regressor_mask, dtype=bool)
            if self.regressor_mask.shape != (self.plant.param_count_m,):
                raise ValueError("regressor_mask must have length m")
        if self.mode == "closed_loop":
            if self.params is None or self.reference is None:
                raise ValueError("closed_loop mode needs params and reference")
            self.params.check_dimensions(self.plant.order_n,
                                         self.plant.param_count_m)
            if self.reference.dof_p != self.plant.dof_p:
                raise ValueError("reference channel count must equal p")
            if self.reference.order_n != self.plant.order_n:
                raise ValueError("reference order must equal plant order")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def controller_plant(self) -> PlantModel:
        """Plant view the controller sees (mask applied when present)."""
        if self.regressor_mask is None:
            return self.plant
        return apply_regressor_mask(self.plant, self.regressor_mask)

    def fingerprint(self) -> str:
        """Deterministic hash of everything that affects the trace."""
        h = hashlib.sha256()
        parts = [self.mode, self.label, self.plant.name,
                 repr(self.plant.true_theta.tolist()),
                 repr(self.xi0.tolist()), repr(self.t_end), repr(self.dt),
                 repr(self.store_every), repr(self.phi0),
                 repr(self.excitation.amplitude.tolist()),
                 repr(self.excitation.omega),
                 repr(self.excitation.phase.tolist())]
        if self.regressor_mask is not None:
            parts.append(repr(self.regressor_mask.tolist()))
        if self.params is not None:
            parts += [repr(self.params.k), repr(self.params.kappa),
                      repr(self.params.eps), repr(self.params.gamma),
                      repr(self.params.S.tolist()),
                      repr(self.params.lam.tolist())]
        if self.reference is not None:
            sig = self.reference.signal
            parts += [repr(sig.omega), repr(sig.a0.tolist()),
                      repr(sig.cos_c.tolist()), repr(sig.sin_c.tolist())]
        if self.theta_hat0 is not None:
            parts.append(repr(np.asarray(self.theta_hat0).tolist()))
        h.update("|".join(parts).encode())
        return h.hexdigest()[:16]


@dataclass
class SimTrace:
    """Recorded simulation history on a uniform (decimated) time grid."""

    t: np.ndarray
    xi: np.ndarray          # (N, n*p)
    u_prime: np.ndarray     # (N, p)
    eta: np.ndarray
    y: np.ndarray
    z_tilde: np.ndarray
    theta_hat: np.ndarray   # (N, m)
    phi: np.ndarray         # (N,)
    sigma: np.ndarray       # (N, p)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]

    @property
    def dt_grid(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def summary(self) -> dict:
        return {
            "samples": int(len(self)),
            "t_start": float(self.t[0]),
            "t_end": float(self.t[-1]),
            "max_abs_u": float(np.abs(self.u_prime).max()) if len(self) else 0.0,
            "final_phi": float(self.phi[-1]) if len(self) else 0.0,
            "meta": self.meta,
        }


def _kernel_plant_args(plant: PlantModel):
    return (plant.term_row, plant.term_col, plant.term_coef,
            np.ascontiguousarray(plant.term_exp),
            plant.special_kind,
            plant.special_cols if plant.special_cols.size
            else np.zeros(1, dtype=np.int64),
            plant.special_w if plant.special_w.size else np.zeros(1),
            float(plant.special_a))


def simulate(scenario: Scenario) -> SimTrace:
    """Run a scenario and return its trace.

    Closed-loop mode integrates the augmented state (xi, accum, phi,
    theta_hat); open-loop mode integrates the plant alone with u' = 0 and
    leaves the controller channels zero. Divergence raises
    :class:`SimulationDiverged` with the partial trace attached.
    """
    plant = scenario.plant
    n, p, m = plant.order_n, plant.dof_p, plant.param_count_m
    exc = scenario.excitation
    n_steps = scenario.n_steps
    meta = {
        "scenario": scenario.label,
        "hash": scenario.fingerprint(),
        "integrator": "rk4",
        "dt": scenario.dt,
        "store_every": scenario.store_every,
        "mode": scenario.mode,
        "plant": plant.name,
    }

    if scenario.mode == "open_loop":
        t, xi, sig, nlog, status, t_fail = _kernels.integrate_open_loop(
            scenario.xi0.copy(), 0.0, scenario.dt, n_steps,
            scenario.store_every, n, p, m, *_kernel_plant_args(plant),
            plant.true_theta, exc.amplitude, exc.omega, exc.phase)
        zeros_p = np.zeros((nlog, p))
        trace = SimTrace(t=t, xi=xi, u_prime=zeros_p.copy(),
                         eta=zeros_p.copy(), y=zeros_p.copy(),
                         z_tilde=zeros_p.copy(),
                         theta_hat=np.zeros((nlog, m)),
                         phi=np.zeros(nlog), sigma=sig, meta=meta)
        if status != _kernels.STATUS_OK:
            raise SimulationDiverged(t_fail, trace)
        return trace

    params = scenario.params
    ref = scenario.reference
    mask = (np.ones(m) if scenario.regressor_mask is None
            else scenario.regressor_mask.astype(float))
    state0 = ControllerState.initial(p, m, scenario.phi0, scenario.theta_hat0)
    Y0 = np.concatenate([scenario.xi0, state0.accum, [state0.phi],
                         state0.theta_hat])
    sig0 = ref.signal
    (t, Y, u, eta, y, zt, sig, nlog, status, t_fail) = \
        _kernels.integrate_closed_loop(
            Y0, 0.0, scenario.dt, n_steps, scenario.store_every,
            n, p, m, *_kernel_plant_args(plant),
            plant.true_theta, mask,
            exc.amplitude, exc.omega, exc.phase,
            sig0.a0, np.ascontiguousarray(sig0.cos_c),
            np.ascontiguousarray(sig0.sin_c), sig0.omega,
            ref.initial_top_derivative,
            params.k, params.kappa, params.eps, params.gamma,
            np.ascontiguousarray(params.S), params.lam)
    npp = n * p
    trace = SimTrace(t=t, xi=Y[:, :npp], u_prime=u, eta=eta, y=y, z_tilde=zt,
                     theta_hat=Y[:, npp + p + 1:], phi=Y[:, npp + p],
                     sigma=sig, meta=meta)
    if status != _kernels.STATUS_OK:
        raise SimulationDiverged(t_fail, trace)
    return trace


def trace_to_csv(trace: SimTrace, path):
    """Write a trace as CSV with one row per recorded step.

    Columns: t, xi_0.., u_0.., eta_0.., y_0.., z_tilde_0.., theta_hat_0..,
    phi, sigma_0... Values use shortest round-trip decimal formatting.
    """
    cols = ["t"]
    cols += [f"xi_{j}" for j in range(trace.xi.shape[1])]
    cols += [f"u_{j}" for j in range(trace.u_prime.shape[1])]
    cols += [f"eta_{j}" for j in range(trace.eta.shape[1])]
    cols += [f"y_{j}" for j in range(trace.y.shape[1])]
    cols += [f"z_tilde_{j}" for j in range(trace.z_tilde.shape[1])]
    cols += [f"theta_hat_{j}" for j in range(trace.theta_hat.shape[1])]
    cols += ["phi"]
    cols += [f"sigma_{j}" for j in range(trace.sigma.shape[1])]
    data = np.column_stack([trace.t, trace.xi, trace.u_prime, trace.eta,
                            trace.y, trace.z_tilde, trace.theta_hat,
                            trace.phi, trace.sigma])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def trace_summary_json(trace: SimTrace, extra: dict | None = None) -> str:
    payload = {"schema": 1, **trace.summary()}
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=2)
