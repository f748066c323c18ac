"""Periodic orbits of the uncontrolled plants and the CBC zero-problem.

Three solvers live here:

* harmonic balance (Fourier-Galerkin collocation + damped Newton) for
  periodic responses, with Floquet multipliers from the monodromy matrix;
* pseudo-arclength continuation of harmonic-balance branches in forcing
  frequency, with limit-point and Neimark-Sacker event localization;
* the control-based-continuation zero-problem: iterate reference Fourier
  coefficients until the closed-loop control input has no harmonic content,
  i.e. the controller has become noninvasive.

A single-shooting solver (Newton on the period map) is kept alongside as an
independent cross-check for the harmonic-balance results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .plant import Excitation, PlantModel
from .reference import FourierSignal, ReferenceTrajectory
from .simulator import Scenario, simulate

__all__ = [
    "PeriodicOrbit",
    "Branch",
    "ConvergenceError",
    "hb_residual",
    "hb_solve",
    "continue_branch",
    "cbc_solve",
    "CBCResult",
    "shooting_orbit",
    "linear_response_guess",
    "floquet_multipliers",
    "signal_to_coeffs",
    "coeffs_to_signal",
    "project_trajectory",
    "branch_to_csv",
]


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver fails; carries the last residual."""

    def __init__(self, message: str, residual_norm: float = np.nan,
                 iterations: int = 0):
        super().__init__(f"{message} (residual {residual_norm:.3e} "
                         f"after {iterations} iterations)")
        self.residual_norm = residual_norm
        self.iterations = iterations


# -- coefficient vector layout ------------------------------------------------
# Per DOF block of length 2H+1: [a0, a_1..a_H, b_1..b_H], blocks stacked by
# DOF. All solvers share this layout.

def signal_to_coeffs(sig: FourierSignal, H: int | None = None) -> np.ndarray:
    if H is None:
        H = sig.harmonics
    sig = sig.with_harmonics(H)
    L = 2 * H + 1
    c = np.empty(sig.channels * L)
    for i in range(sig.channels):
        c[i * L] = sig.a0[i]
        c[i * L + 1:i * L + 1 + H] = sig.cos_c[i]
        c[i * L + 1 + H:(i + 1) * L] = sig.sin_c[i]
    return c


def coeffs_to_signal(c: np.ndarray, omega: float, p: int, H: int) -> FourierSignal:
    L = 2 * H + 1
    if c.shape != (p * L,):
        raise ValueError("coefficient vector has wrong length")
    a0 = np.empty(p)
    cos_c = np.empty((p, H))
    sin_c = np.empty((p, H))
    for i in range(p):
        a0[i] = c[i * L]
        cos_c[i] = c[i * L + 1:i * L + 1 + H]
        sin_c[i] = c[i * L + 1 + H:(i + 1) * L]
    return FourierSignal(omega, a0, cos_c, sin_c)


@dataclass
class PeriodicOrbit:
    """Converged periodic response with stability information."""

    signal: FourierSignal
    omega: float
    floquet_multipliers: np.ndarray
    stable: bool
    residual_norm: float

    @property
    def harmonics(self) -> int:
        return self.signal.harmonics

    def coefficients(self) -> np.ndarray:
        return signal_to_coeffs(self.signal)

    def to_reference(self, order_n: int) -> ReferenceTrajectory:
        return ReferenceTrajectory(self.signal, order_n)

    def max_displacement(self, samples: int = 512) -> np.ndarray:
        ts = np.linspace(0.0, self.signal.period, samples, endpoint=False)
        return np.abs(self.signal.evaluate(ts)).max(axis=0)


@dataclass
class Branch:
    """Ordered continuation branch with detected events."""

    orbits: list = field(default_factory=list)
    events: list = field(default_factory=list)
    terminated_reason: str = "completed"

    def omegas(self) -> np.ndarray:
        return np.array([o.omega for o in self.orbits])

    def limit_points(self) -> list:
        return [e for e in self.events if e["kind"] == "LP"]

    def neimark_sacker_points(self) -> list:
        return [e for e in self.events if e["kind"] == "NS"]


def _sample_times(omega: float, H: int) -> np.ndarray:
    N_t = 8 * H + 8
    T = 2.0 * np.pi / omega
    return np.arange(N_t) * (T / N_t)


def _derivative_samples(sig: FourierSignal, ts: np.ndarray, order_n: int):
    """Values of the series and its derivatives 0..n on the sample grid."""
    out = []
    cur = sig
    for _ in range(order_n + 1):
        out.append(cur.evaluate(ts))
        cur = cur.differentiate()
    return out


def hb_residual(plant: PlantModel, excitation: Excitation, coeffs: np.ndarray,
                omega: float, H: int) -> np.ndarray:
    """Fourier-Galerkin residual of the uncontrolled equations of motion.

    The trial series is evaluated on ``8H + 8`` uniform samples over one
    period; ``x^(n) - F(xi) theta - sigma`` is projected back onto harmonics
    0..H of every DOF (trapezoidal quadrature, which is exact DFT weighting
    on a periodic uniform grid).
    """
    p, n = plant.dof_p, plant.order_n
    sig = coeffs_to_signal(coeffs, omega, p, H)
    ts = _sample_times(omega, H)
    derivs = _derivative_samples(sig, ts, n)
    xi = np.concatenate([derivs[d] for d in range(n - 1, -1, -1)], axis=1)
    F = plant.regressor_batch(xi)
    acc = np.einsum("spm,m->sp", F, plant.true_theta)
    exc = Excitation(excitation.amplitude, omega, excitation.phase)
    r_t = derivs[n] - acc - exc.evaluate(ts)          # (N_t, p)
    N_t = ts.shape[0]
    k = np.arange(1, H + 1)
    ang = omega * np.outer(ts, k)
    cosb, sinb = np.cos(ang), np.sin(ang)             # (N_t, H)
    L = 2 * H + 1
    res = np.empty(p * L)
    for i in range(p):
        res[i * L] = r_t[:, i].mean()
        res[i * L + 1:i * L + 1 + H] = (2.0 / N_t) * (cosb.T @ r_t[:, i])
        res[i * L + 1 + H:(i + 1) * L] = (2.0 / N_t) * (sinb.T @ r_t[:, i])
    return res


def _fd_jacobian(fun, x0, f0, rel_step=1e-7):
    """Forward-difference Jacobian of a vector map."""
    J = np.empty((f0.shape[0], x0.shape[0]))
    for j in range(x0.shape[0]):
        h = rel_step * (1.0 + abs(x0[j]))
        xp = x0.copy()
        xp[j] += h
        J[:, j] = (fun(xp) - f0) / h
    return J


def _damped_newton_step(fun, x, f, J, max_halvings=8):
    """One Newton update with step halving on residual increase."""
    delta = np.linalg.solve(J, -f)
    norm0 = np.linalg.norm(f)
    alpha = 1.0
    for _ in range(max_halvings + 1):
        x_new = x + alpha * delta
        f_new = fun(x_new)
        if np.linalg.norm(f_new) < norm0:
            return x_new, f_new
        alpha *= 0.5
    return x_new, f_new


def floquet_multipliers(plant: PlantModel, excitation: Excitation,
                        xi0: np.ndarray, omega: float,
                        steps_per_period: int = 2000):
    """Multipliers from RK4 integration of the variational equations.

    Returns (multipliers, xi_at_T, monodromy, trace_integral); the last
    value is the Liouville invariant log det M.
    """
    from .simulator import _kernel_plant_args
    T = 2.0 * np.pi / omega
    exc = Excitation(excitation.amplitude, omega, excitation.phase)
    xi_T, M, tr_int = _kernels.integrate_monodromy(
        np.asarray(xi0, dtype=float).copy(), 0.0, T, steps_per_period,
        plant.order_n, plant.dof_p, plant.param_count_m,
        *_kernel_plant_args(plant), plant.true_theta,
        exc.amplitude, exc.omega, exc.phase)
    mult = np.linalg.eigvals(M)
    return mult, xi_T, M, tr_int


def _initial_state_of(sig: FourierSignal, order_n: int) -> np.ndarray:
    return ReferenceTrajectory(sig, order_n).evaluate_state(0.0)


def hb_solve(plant: PlantModel, excitation: Excitation, initial_guess,
             omega: float, H: int, tol: float = 1e-10, max_iter: int = 50,
             steps_per_period: int = 2000) -> PeriodicOrbit:
    """Damped Newton on the harmonic-balance residual.

    ``initial_guess`` may be a FourierSignal or a coefficient vector in the
    shared layout. The converged orbit is classified by its Floquet
    multipliers (all inside the unit circle = stable; forced systems have no
    trivial multiplier).
    """
    p = plant.dof_p
    if isinstance(initial_guess, FourierSignal):
        c = signal_to_coeffs(initial_guess.with_harmonics(H))
    else:
        c = np.asarray(initial_guess, dtype=float).copy()
    if c.shape != (p * (2 * H + 1),):
        raise ValueError("initial guess does not match the (p, H) layout")

    def fun(cv):
        return hb_residual(plant, excitation, cv, omega, H)

    r = fun(c)
    it = 0
    norm = np.linalg.norm(r)
    while norm > tol:
        if it >= max_iter:
            raise ConvergenceError("harmonic balance did not converge",
                                   norm, it)
        J = _fd_jacobian(fun, c, r)
        c, r = _damped_newton_step(fun, c, r, J)
        new_norm = np.linalg.norm(r)
        if not np.isfinite(new_norm):
            raise ConvergenceError("harmonic balance diverged", new_norm, it)
        norm = new_norm
        it += 1

    sig = coeffs_to_signal(c, omega, p, H)
    mult, _, _, _ = floquet_multipliers(plant, excitation,
                                        _initial_state_of(sig, plant.order_n),
                                        omega, steps_per_period)
    return PeriodicOrbit(signal=sig, omega=omega, floquet_multipliers=mult,
                         stable=bool(np.all(np.abs(mult) < 1.0)),
                         residual_norm=norm)


def linear_response_guess(plant: PlantModel, excitation: Excitation,
                          omega: float, x_eq=None, H: int = 1) -> FourierSignal:
    """Forced response of the plant linearized about an equilibrium.

    Solves ``(i w I - A) v = b`` for the first-order form and returns the
    position channels as a harmonic-1 Fourier signal centered on the
    equilibrium. A useful seed for the nonlinear orbit solvers.
    """
    n, p = plant.order_n, plant.dof_p
    xi_eq = np.zeros(n * p)
    if x_eq is not None:
        xi_eq[(n - 1) * p:] = np.asarray(x_eq, dtype=float)
    A = plant.rhs_jacobian(xi_eq)
    b = np.zeros(n * p, dtype=complex)
    b[:p] = excitation.amplitude * np.exp(1j * excitation.phase)
    V = np.linalg.solve(1j * omega * np.eye(n * p) - A, b)
    Vx = V[(n - 1) * p:]
    a0 = xi_eq[(n - 1) * p:]
    cos_c = np.zeros((p, max(H, 1)))
    sin_c = np.zeros((p, max(H, 1)))
    cos_c[:, 0] = Vx.real
    sin_c[:, 0] = -Vx.imag
    return FourierSignal(omega, a0, cos_c, sin_c)


def project_trajectory(t: np.ndarray, x: np.ndarray, omega: float,
                       H: int) -> FourierSignal:
    """Fourier coefficients 0..H of uniformly sampled periodic data.

    ``t`` must hold N uniform samples covering exactly one period without
    the duplicated endpoint; the actual time values fix the phase.
    """
    t = np.asarray(t, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != t.shape[0]:
        raise ValueError("time and sample counts differ")
    N = t.shape[0]
    k = np.arange(1, H + 1)
    ang = omega * np.outer(t, k)
    cosb, sinb = np.cos(ang), np.sin(ang)
    a0 = x.mean(axis=0)
    cos_c = (2.0 / N) * (x.T @ cosb)
    sin_c = (2.0 / N) * (x.T @ sinb)
    return FourierSignal(omega, a0, cos_c, sin_c)


def shooting_orbit(plant: PlantModel, excitation: Excitation, xi0_guess,
                   omega: float, tol: float = 1e-11, max_iter: int = 25,
                   steps_per_period: int = 4096):
    """Single-shooting periodic-orbit solver (independent of harmonic balance).

    Newton iterates the initial state on the period map computed by RK4; the
    Jacobian is the monodromy matrix. Returns ``(xi0, multipliers, signal)``
    where the signal holds Fourier coefficients projected from one dense
    period of the converged trajectory.
    """
    from .simulator import _kernel_plant_args
    xi0 = np.asarray(xi0_guess, dtype=float).copy()
    exc = Excitation(excitation.amplitude, omega, excitation.phase)
    T = 2.0 * np.pi / omega
    d = plant.state_dim
    mult = None
    for it in range(max_iter + 1):
        mult_, xi_T, M, _ = floquet_multipliers(plant, exc, xi0, omega,
                                                steps_per_period)
        G = xi_T - xi0
        mult = mult_
        if np.linalg.norm(G) <= tol:
            break
        if it == max_iter:
            raise ConvergenceError("shooting did not converge",
                                   np.linalg.norm(G), it)
        xi0 = xi0 + np.linalg.solve(M - np.eye(d), -G)
    t_log, xi_log, _, _, _, _ = _kernels.integrate_open_loop(
        xi0.copy(), 0.0, T / steps_per_period, steps_per_period, 1,
        plant.order_n, plant.dof_p, plant.param_count_m,
        *_kernel_plant_args(plant), plant.true_theta,
        exc.amplitude, exc.omega, exc.phase)
    x = xi_log[:-1, (plant.order_n - 1) * plant.dof_p:]
    sig = project_trajectory(t_log[:-1], x, omega, H=steps_per_period // 16)
    return xi0, mult, sig


# -- pseudo-arclength continuation --------------------------------------------

def _tangent(J_aug: np.ndarray) -> np.ndarray:
    """Unit null vector of the N x (N+1) bordered Jacobian."""
    _, _, Vt = np.linalg.svd(J_aug)
    t = Vt[-1]
    return t / np.linalg.norm(t)


_NS_IMAG_TOL = 1e-8


def _ns_indicator(mult: np.ndarray):
    pairs = mult[np.abs(mult.imag) > _NS_IMAG_TOL]
    if pairs.size == 0:
        return None
    return float(np.abs(pairs).max() - 1.0)


def continue_branch(plant: PlantModel, excitation: Excitation,
                    omega_range, seed_orbit: PeriodicOrbit,
                    ds0: float = 0.05, ds_max: float = 0.2,
                    ds_min: float = 1e-7, max_steps: int = 2000,
                    tol: float = 1e-9, newton_max_iter: int = 12,
                    steps_per_period: int = 2000,
                    coeff_scale: float | None = None,
                    omega_event_resolution: float = 1e-3,
                    event_bisect_max: int = 30,
                    direction: float | None = None) -> Branch:
    """Pseudo-arclength continuation of a harmonic-balance branch in omega.

    The unknowns are the Fourier coefficients and the forcing frequency,
    scaled so that one arclength unit is comparable along both. Limit points
    are flagged where the omega component of the tangent changes sign,
    Neimark-Sacker points where a complex multiplier pair crosses the unit
    circle; both are localized by bisection on the arclength to the given
    omega resolution (or ``event_bisect_max`` bisections).
    """
    p, n = plant.dof_p, plant.order_n
    H = seed_orbit.harmonics
    L = 2 * H + 1
    dim = p * L
    omega_lo, omega_hi = float(min(omega_range)), float(max(omega_range))
    s_c = coeff_scale if coeff_scale is not None else \
        max(1e-9, np.abs(seed_orbit.coefficients()).max())

    def residual(v):
        # v = scaled (coeffs, omega)
        return hb_residual(plant, excitation, v[:dim] * s_c, v[dim], H)

    def classify(v):
        sig = coeffs_to_signal(v[:dim] * s_c, v[dim], p, H)
        mult, _, _, _ = floquet_multipliers(
            plant, excitation, _initial_state_of(sig, n), v[dim],
            steps_per_period)
        return sig, mult

    def make_orbit(v, rnorm):
        sig, mult = classify(v)
        return PeriodicOrbit(signal=sig, omega=float(v[dim]),
                             floquet_multipliers=mult,
                             stable=bool(np.all(np.abs(mult) < 1.0)),
                             residual_norm=rnorm), mult

    def corrector(v_pred, tangent, v_anchor, ds):
        v = v_pred.copy()
        for it in range(newton_max_iter):
            r = residual(v)
            arc = tangent @ (v - v_anchor) - ds
            f = np.concatenate([r, [arc]])
            if np.linalg.norm(r) <= tol and abs(arc) <= 1e-10 * (1 + abs(ds)):
                return v, np.linalg.norm(r), True
            J = _fd_jacobian(residual, v, r)
            J_aug = np.vstack([J, tangent])
            try:
                delta = np.linalg.solve(J_aug, -f)
            except np.linalg.LinAlgError:
                return v, np.linalg.norm(r), False
            v = v + delta
        r = residual(v)
        return v, np.linalg.norm(r), np.linalg.norm(r) <= tol

    def tangent_at(v, orient):
        r = residual(v)
        tv = _tangent(_fd_jacobian(residual, v, r))
        return tv if tv @ orient >= 0 else -tv

    def bisect_event(kind, lo, hi, ds_used):
        """Bisection on arclength between two accepted points."""
        a, b = lo, hi
        s_lo, s_hi = 0.0, ds_used
        orbit_mid = None
        for _ in range(event_bisect_max):
            if abs(a["v"][dim] - b["v"][dim]) <= omega_event_resolution:
                break
            s_mid = 0.5 * (s_lo + s_hi)
            v_pred = lo["v"] + s_mid * lo["t"]
            v_mid, rn, ok = corrector(v_pred, lo["t"], lo["v"], s_mid)
            if not ok:
                break
            orbit_mid, mult_mid = make_orbit(v_mid, rn)
            if kind == "LP":
                t_mid = tangent_at(v_mid, lo["t"])
                same_side = np.sign(t_mid[dim]) == np.sign(lo["t"][dim])
                mid = dict(v=v_mid, t=t_mid, ns=_ns_indicator(mult_mid))
            else:
                ns_mid = _ns_indicator(mult_mid)
                if ns_mid is None:
                    break
                same_side = np.sign(ns_mid) == np.sign(lo["ns"])
                mid = dict(v=v_mid, t=lo["t"], ns=ns_mid)
            if same_side:
                a, s_lo = mid, s_mid
            else:
                b, s_hi = mid, s_mid
        om_a, om_b = float(a["v"][dim]), float(b["v"][dim])
        return {
            "kind": kind,
            "omega": 0.5 * (om_a + om_b),
            "bracket": (min(om_a, om_b), max(om_a, om_b)),
            "orbit": orbit_mid,
        }

    v = np.concatenate([seed_orbit.coefficients() / s_c, [seed_orbit.omega]])
    r0 = residual(v)
    orbit0, mult0 = make_orbit(v, np.linalg.norm(r0))
    branch = Branch(orbits=[orbit0])

    J = _fd_jacobian(residual, v, r0)
    t_vec = _tangent(J)
    # head into the omega interval unless the caller forces a direction
    if direction is None:
        direction = 1.0 if abs(omega_hi - v[dim]) > abs(v[dim] - omega_lo) \
            else -1.0
    if np.sign(t_vec[dim]) != np.sign(direction):
        t_vec = -t_vec

    prev = dict(v=v, t=t_vec, ns=_ns_indicator(mult0))
    ds = ds0
    reason = "completed"
    for _ in range(max_steps):
        accepted = False
        while ds >= ds_min:
            v_pred = prev["v"] + ds * prev["t"]
            v_new, rnorm, ok = corrector(v_pred, prev["t"], prev["v"], ds)
            if ok:
                accepted = True
                break
            ds *= 0.5
        if not accepted:
            reason = "step-size underflow"
            break

        J = _fd_jacobian(residual, v_new, residual(v_new))
        t_new = _tangent(J)
        if t_new @ prev["t"] < 0:
            t_new = -t_new
        orbit, mult = make_orbit(v_new, rnorm)
        branch.orbits.append(orbit)
        ns_new = _ns_indicator(mult)

        new_pt = dict(v=v_new, t=t_new, ns=ns_new)
        # limit point: omega tangent component flips sign
        if np.sign(t_new[dim]) != np.sign(prev["t"][dim]) \
                and prev["t"][dim] != 0.0:
            branch.events.append(bisect_event("LP", prev, new_pt, ds))
        # Neimark-Sacker: complex pair magnitude crosses 1
        if ns_new is not None and prev["ns"] is not None \
                and np.sign(ns_new) != np.sign(prev["ns"]) \
                and prev["ns"] != 0.0:
            branch.events.append(bisect_event("NS", prev, new_pt, ds))

        prev = new_pt
        if not (omega_lo <= v_new[dim] <= omega_hi):
            reason = "omega range exhausted"
            break
        ds = min(ds * 1.3, ds_max)

    branch.terminated_reason = reason
    return branch


# -- control-based continuation zero-problem ----------------------------------

@dataclass
class CBCResult:
    """Outcome of the reference-coefficient zero-problem."""

    reference: ReferenceTrajectory
    iterations: int
    residual_norm: float
    history: list
    converged: bool


def _cbc_fd_step(c: np.ndarray) -> np.ndarray:
    return np.maximum(1e-6, 1e-3 * np.abs(c))


def cbc_solve(plant: PlantModel, excitation: Excitation,
              params, initial_reference: ReferenceTrajectory,
              tol: float = 1e-6, max_iter: int = 15,
              H: int | None = None, periods: int = 40,
              steps_per_period: int = 2000, samples_per_period: int = 250,
              method: str = "newton", relax: float | None = None,
              regressor_mask=None, n_jobs: int = 1,
              enforce_steady: bool = False, steady_rtol: float = 1e-2,
              callback=None) -> CBCResult:
    """Iterate reference coefficients until the control input vanishes.

    Each evaluation simulates the closed loop to periodic steady state
    (starting on the candidate reference, fresh adaptive state) and projects
    the control input over the final forcing period onto harmonics 0..H.
    Driving that projection to zero makes the reference a natural response.

    ``method="newton"`` uses a forward-difference Jacobian whose columns
    each cost one simulation (the dominant cost); ``method="fixed_point"``
    adds the projected input scaled by ``relax`` (default 1/k) to the
    coefficients instead, trading robustness for Jacobian-free updates.
    """
    if method not in ("newton", "fixed_point"):
        raise ValueError("method must be 'newton' or 'fixed_point'")
    if steps_per_period % samples_per_period != 0:
        raise ValueError("samples_per_period must divide steps_per_period")
    p, n = plant.dof_p, plant.order_n
    omega = excitation.omega
    if abs(initial_reference.omega - omega) > 1e-12 * max(1.0, omega):
        raise ValueError("reference and excitation frequencies must agree")
    if H is None:
        H = initial_reference.signal.harmonics
    T = 2.0 * np.pi / omega
    store_every = steps_per_period // samples_per_period

    def eval_map(c):
        sig = coeffs_to_signal(c, omega, p, H)
        ref = ReferenceTrajectory(sig, n)
        sc = Scenario(plant=plant, excitation=excitation, params=params,
                      reference=ref, xi0=ref.evaluate_state(0.0),
                      t_end=periods * T, dt=T / steps_per_period,
                      store_every=store_every, regressor_mask=regressor_mask,
                      label="cbc-eval")
        tr = simulate(sc)
        idx = slice(len(tr) - 1 - samples_per_period, len(tr) - 1)
        usig = project_trajectory(tr.t[idx], tr.u_prime[idx], omega, H)
        if enforce_steady:
            jdx = slice(len(tr) - 1 - 2 * samples_per_period,
                        len(tr) - 1 - samples_per_period)
            uprev = project_trajectory(tr.t[jdx], tr.u_prime[jdx], omega, H)
            drift = np.linalg.norm(signal_to_coeffs(usig)
                                   - signal_to_coeffs(uprev))
            scale = max(np.linalg.norm(signal_to_coeffs(usig)), tol)
            if drift > steady_rtol * scale + tol:
                raise ConvergenceError(
                    "closed loop did not reach periodic steady state",
                    drift, 0)
        return signal_to_coeffs(usig)

    def jacobian(c, r0):
        steps = _cbc_fd_step(c)
        cols = []
        if n_jobs > 1:
            from concurrent.futures import ProcessPoolExecutor
            perturbed = []
            for j in range(c.shape[0]):
                cp = c.copy()
                cp[j] += steps[j]
                perturbed.append(cp)
            with ProcessPoolExecutor(max_workers=n_jobs) as ex:
                results = list(ex.map(eval_map, perturbed))
            for j, rj in enumerate(results):
                cols.append((rj - r0) / steps[j])
        else:
            for j in range(c.shape[0]):
                cp = c.copy()
                cp[j] += steps[j]
                cols.append((eval_map(cp) - r0) / steps[j])
        return np.column_stack(cols)

    c = signal_to_coeffs(initial_reference.signal, H)
    r = eval_map(c)
    norm = float(np.linalg.norm(r))
    history = [norm]
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise ConvergenceError("CBC zero-problem did not converge",
                                   norm, it)
        if method == "newton":
            J = jacobian(c, r)
            try:
                delta = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError as err:
                raise ConvergenceError(f"CBC Jacobian is singular: {err}",
                                       norm, it) from None
            alpha, best = 1.0, None
            for _ in range(9):
                c_try = c + alpha * delta
                r_try = eval_map(c_try)
                n_try = float(np.linalg.norm(r_try))
                if n_try < norm:
                    best = (c_try, r_try, n_try)
                    break
                if best is None or n_try < best[2]:
                    best = (c_try, r_try, n_try)
                alpha *= 0.5
            c, r, new_norm = best
            if new_norm >= norm:
                raise ConvergenceError("CBC Newton stagnated", new_norm, it)
            norm = new_norm
        else:
            step = (1.0 / params.k) if relax is None else relax
            c = c + step * r
            r = eval_map(c)
            norm = float(np.linalg.norm(r))
        it += 1
        history.append(norm)
        if callback is not None:
            callback(it, c, norm)

    sig = coeffs_to_signal(c, omega, p, H)
    return CBCResult(reference=ReferenceTrajectory(sig, n), iterations=it,
                     residual_norm=norm, history=history, converged=True)


def branch_to_csv(branch: Branch, path):
    """One CSV row per orbit: omega, stability, event marker, amplitudes.

    Amplitude columns hold the per-DOF mean and harmonic magnitudes
    sqrt(a_k^2 + b_k^2), followed by per-DOF max displacement over one
    period. Event markers tag the orbit nearest each localized event.
    """
    if not branch.orbits:
        raise ValueError("branch has no orbits")
    p = branch.orbits[0].signal.channels
    H = branch.orbits[0].harmonics
    markers = [""] * len(branch.orbits)
    omegas = branch.omegas()
    for ev in branch.events:
        idx = int(np.argmin(np.abs(omegas - ev["omega"])))
        markers[idx] = (markers[idx] + "+" + ev["kind"]).lstrip("+")
    cols = ["omega", "stable", "event"]
    for i in range(p):
        cols.append(f"mean_{i}")
        cols += [f"amp_{i}_h{k}" for k in range(1, H + 1)]
    cols += [f"max_disp_{i}" for i in range(p)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for orbit, mark in zip(branch.orbits, markers):
            sig = orbit.signal
            row = [repr(float(orbit.omega)), str(int(orbit.stable)), mark]
            for i in range(p):
                row.append(repr(float(sig.a0[i])))
                amp = np.hypot(sig.cos_c[i], sig.sin_c[i])
                row += [repr(float(v)) for v in amp]
            row += [repr(float(v)) for v in orbit.max_displacement()]
            fh.write(",".join(row) + "\n")
