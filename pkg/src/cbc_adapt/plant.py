"""Plant models: order-n systems that are linear in their unknown parameters.

A plant is written in the explicit form

    x^(n)(t) = F(xi(t)) theta + u(t),

where ``x`` has ``p`` degrees of freedom, ``xi = [x^(n-1); ...; xdot; x]``
stacks the state derivatives from highest to lowest, ``F`` is a known p-by-m
regressor matrix and ``theta`` is the length-m parameter vector. ``theta`` is
carried by the model for simulation and diagnostics; the controller never
reads it.

Regressors are stored as a list of monomial terms (row, column, coefficient,
exponents over the entries of ``xi``), optionally extended by a geometric
tip-spring column pair for the cantilever benchmark. The same term tables
drive the scalar evaluators, the vectorized batch evaluators and the compiled
simulation kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PlantModel",
    "Excitation",
    "make_duffing",
    "make_cross_beam",
    "make_cantilever",
    "make_polynomial_plant",
    "cantilever_modal_excitation",
    "CANTILEVER_PHI",
    "BUILTIN_PLANTS",
]

SPECIAL_NONE = 0
SPECIAL_TIP_SPRING = 1


@dataclass(frozen=True)
class Excitation:
    """Per-channel harmonic forcing ``sigma_i(t) = A_i cos(omega t + psi_i)``.

    Parameters
    ----------
    amplitude : (p,) array_like
        Forcing amplitude per input channel. All zeros is allowed.
    omega : float
        Shared forcing frequency in rad/s. Must be positive whenever any
        amplitude is nonzero.
    phase : (p,) array_like, optional
        Phase per channel in rad, default zero.
    """

    amplitude: np.ndarray
    omega: float
    phase: np.ndarray | None = None

    def __post_init__(self):
        amp = np.atleast_1d(np.asarray(self.amplitude, dtype=float))
        ph = (np.zeros_like(amp) if self.phase is None
              else np.atleast_1d(np.asarray(self.phase, dtype=float)))
        if ph.shape != amp.shape:
            raise ValueError("phase and amplitude must have equal length")
        if np.any(amp != 0.0) and not self.omega > 0.0:
            raise ValueError("omega must be positive for nonzero excitation")
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "phase", ph)
        object.__setattr__(self, "omega", float(self.omega))

    @property
    def dof(self) -> int:
        return self.amplitude.shape[0]

    @property
    def period(self) -> float:
        if self.omega <= 0.0:
            raise ValueError("zero-frequency excitation has no period")
        return 2.0 * np.pi / self.omega

    def evaluate(self, t):
        """Evaluate sigma(t); returns (p,) for scalar t, (N, p) for arrays."""
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            return self.amplitude * np.cos(self.omega * float(t) + self.phase)
        return self.amplitude[None, :] * np.cos(
            self.omega * t[:, None] + self.phase[None, :])


@dataclass(frozen=True)
class PlantModel:
    """Order-n, p-DOF system ``x^(n) = F(xi) theta + u`` with monomial regressor.

    ``true_theta`` is only for the simulator and diagnostics; control code
    must use its own estimate.
    """

    order_n: int
    dof_p: int
    param_count_m: int
    true_theta: np.ndarray
    term_row: np.ndarray    # (nt,) row index of each monomial term
    term_col: np.ndarray    # (nt,) column index
    term_coef: np.ndarray   # (nt,) scalar coefficient
    term_exp: np.ndarray    # (nt, n*p) exponents over the entries of xi
    name: str = "custom"
    special_kind: int = SPECIAL_NONE
    special_cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    special_w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    special_a: float = 0.0

    def __post_init__(self):
        if self.order_n < 1 or self.dof_p < 1 or self.param_count_m < 1:
            raise ValueError("order_n, dof_p and param_count_m must be positive")
        theta = np.asarray(self.true_theta, dtype=float)
        if theta.shape != (self.param_count_m,):
            raise ValueError("true_theta must have length m")
        object.__setattr__(self, "true_theta", theta)
        for attr, dtype in (("term_row", np.int64), ("term_col", np.int64),
                            ("term_coef", float), ("term_exp", np.int64),
                            ("special_cols", np.int64), ("special_w", float)):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=dtype))
        if self.term_exp.ndim != 2 or self.term_exp.shape[1] != self.state_dim:
            raise ValueError("term_exp must be (nt, n*p)")
        if np.any(self.term_row < 0) or np.any(self.term_row >= self.dof_p):
            raise ValueError("term row index out of range")
        if np.any(self.term_col < 0) or np.any(self.term_col >= self.param_count_m):
            raise ValueError("term column index out of range")

    @property
    def state_dim(self) -> int:
        return self.order_n * self.dof_p

    def check_state(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.state_dim,):
            raise ValueError(
                f"state must have length n*p = {self.state_dim}, got shape {xi.shape}")
        return xi

    def position(self, xi) -> np.ndarray:
        """Return the x block (lowest derivative) of a state vector."""
        xi = self.check_state(xi)
        return xi[(self.order_n - 1) * self.dof_p:]

    def top_derivative(self, xi) -> np.ndarray:
        """Return the x^(n-1) block of a state vector."""
        xi = self.check_state(xi)
        return xi[:self.dof_p]

    def regressor(self, xi) -> np.ndarray:
        """Evaluate F(xi) as a (p, m) matrix."""
        xi = self.check_state(xi)
        return self.regressor_batch(xi[None, :])[0]

    def regressor_batch(self, Xi) -> np.ndarray:
        """Evaluate F on a batch of states, shape (N, n*p) -> (N, p, m)."""
        Xi = np.asarray(Xi, dtype=float)
        if Xi.ndim != 2 or Xi.shape[1] != self.state_dim:
            raise ValueError("batch must have shape (N, n*p)")
        N = Xi.shape[0]
        F = np.zeros((N, self.dof_p, self.param_count_m))
        for r, c, coef, exps in zip(self.term_row, self.term_col,
                                    self.term_coef, self.term_exp):
            v = np.full(N, coef)
            for j, e in enumerate(exps):
                if e == 1:
                    v = v * Xi[:, j]
                elif e > 1:
                    v = v * Xi[:, j] ** e
            F[:, r, c] += v
        if self.special_kind == SPECIAL_TIP_SPRING:
            off = (self.order_n - 1) * self.dof_p
            # elementwise accumulation keeps results bit-identical across
            # batch shapes (BLAS matvec kernels may round differently)
            s = np.zeros(N)
            for i, w in enumerate(self.special_w):
                s += w * Xi[:, off + i]
            q = s / np.sqrt(self.special_a ** 2 + s ** 2)
            F[:, :, self.special_cols[0]] += self.special_w[None, :] * s[:, None]
            F[:, :, self.special_cols[1]] += self.special_w[None, :] * q[:, None]
        return F

    def rhs(self, xi, u) -> np.ndarray:
        """First-order form derivative of xi under input u.

        Top block is ``F(xi) theta + u``; the remaining blocks shift the
        derivative stack down by one.
        """
        xi = self.check_state(xi)
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dof_p,):
            raise ValueError(f"input must have length p = {self.dof_p}")
        top = self.regressor(xi) @ self.true_theta + u
        return np.concatenate([top, xi[:self.state_dim - self.dof_p]])

    def rhs_jacobian(self, xi) -> np.ndarray:
        """State Jacobian of ``rhs`` (the input enters additively)."""
        xi = self.check_state(xi)
        d = self.state_dim
        J = np.zeros((d, d))
        if self.order_n > 1:
            J[self.dof_p:, :d - self.dof_p] = np.eye(d - self.dof_p)
        for r, c, coef, exps in zip(self.term_row, self.term_col,
                                    self.term_coef, self.term_exp):
            for j, e in enumerate(exps):
                if e == 0:
                    continue
                v = self.true_theta[c] * coef * e * xi[j] ** (e - 1)
                for l, el in enumerate(exps):
                    if l != j and el > 0:
                        v *= xi[l] ** el
                J[r, j] += v
        if self.special_kind == SPECIAL_TIP_SPRING:
            off = (self.order_n - 1) * self.dof_p
            s = xi[off:] @ self.special_w
            qp = self.special_a ** 2 / (self.special_a ** 2 + s ** 2) ** 1.5
            th_lin = self.true_theta[self.special_cols[0]]
            th_nl = self.true_theta[self.special_cols[1]]
            for r in range(self.dof_p):
                for i in range(self.dof_p):
                    J[r, off + i] += (th_lin + th_nl * qp) * \
                        self.special_w[r] * self.special_w[i]
        return J


def make_duffing() -> PlantModel:
    """Bistable Duffing oscillator, ``xdd = th1*xd + th2*x + th3*x^3 + u``."""
    return PlantModel(
        order_n=2, dof_p=1, param_count_m=3,
        true_theta=np.array([-0.1, 4.0, -2.0]),
        term_row=np.zeros(3, dtype=np.int64),
        term_col=np.arange(3, dtype=np.int64),
        term_coef=np.ones(3),
        term_exp=np.array([[1, 0], [0, 1], [0, 3]], dtype=np.int64),
        name="duffing",
    )


# Cross-beam modal model: two modes ~0.5 Hz apart with quadratic and cubic
# coupling. Grouped coefficients of the nonlinear terms, first mode then
# second mode.
_CB_ZETA = (0.0076, 0.0026)
_CB_OMEGA = (101.6, 104.6)
_CB_GAMMA_1 = dict(g1=113.321, g2=-104.755, g3=-104.755, g4=-29.740,
                   g5=3.836e8, g6=2.451e7, g7=4.902e7, g8=1.929e8,
                   g9=9.644e7, g10=6.104e6)
_CB_GAMMA_2 = dict(g1=-104.755, g2=-29.740, g3=-29.740, g4=85.367,
                   g5=9.644e7, g6=6.104e6, g7=1.221e7, g8=4.902e7,
                   g9=2.451e7, g10=2.351e6)

# Monomial layout shared by both cross-beam rows, over xi = (xd1, xd2, x1, x2):
# velocity, displacement, then the seven distinct quadratic/cubic monomials.
_CB_EXPS_MODE1 = [(1, 0, 0, 0), (0, 0, 1, 0)]
_CB_EXPS_MODE2 = [(0, 1, 0, 0), (0, 0, 0, 1)]
_CB_EXPS_NL = [(0, 0, 2, 0), (0, 0, 1, 1), (0, 0, 0, 2),
               (0, 0, 3, 0), (0, 0, 1, 2), (0, 0, 2, 1), (0, 0, 0, 3)]


def _cross_beam_theta_block(zeta, omega, g):
    return [-2.0 * zeta * omega, -omega ** 2,
            -g["g1"] / 2.0, -(g["g2"] + g["g3"]) / 2.0, -g["g4"] / 2.0,
            -g["g5"] / 3.0, -(g["g6"] + g["g7"]) / 3.0,
            -(g["g8"] + g["g9"]) / 3.0, -g["g10"] / 3.0]


def make_cross_beam() -> PlantModel:
    """Two-mode cross-beam structure with 1:1 modal interaction.

    The regressor has 18 columns in two blocks of 9: per mode, velocity and
    displacement columns followed by the seven grouped quadratic/cubic
    monomials. Mode 1 occupies columns 0-8, mode 2 columns 9-17.
    """
    theta = np.array(
        _cross_beam_theta_block(_CB_ZETA[0], _CB_OMEGA[0], _CB_GAMMA_1)
        + _cross_beam_theta_block(_CB_ZETA[1], _CB_OMEGA[1], _CB_GAMMA_2))
    rows, cols, exps = [], [], []
    for mode, mode_exps in enumerate((_CB_EXPS_MODE1, _CB_EXPS_MODE2)):
        for k, e in enumerate(mode_exps + _CB_EXPS_NL):
            rows.append(mode)
            cols.append(9 * mode + k)
            exps.append(e)
    return PlantModel(
        order_n=2, dof_p=2, param_count_m=18,
        true_theta=theta,
        term_row=np.array(rows, dtype=np.int64),
        term_col=np.array(cols, dtype=np.int64),
        term_coef=np.ones(len(rows)),
        term_exp=np.array(exps, dtype=np.int64),
        name="cross_beam",
    )


# Cantilever beam with a nonlinear spring mechanism at the tip. Phi maps the
# two modal coordinates to physical deflections at four points; the spring
# acts on the fourth point only.
CANTILEVER_PHI = np.array([
    [-0.1603, -0.6821],
    [-1.7748, -4.4598],
    [-5.9745, 6.1940],
    [-6.1389, 7.0245],
])
_CANT_ZETA = (0.01, 0.01)
_CANT_OMEGA = (67.395, 235.783)
_CANT_K0 = 910.0
_CANT_L0 = 0.018
_CANT_A = 0.019


def make_cantilever() -> PlantModel:
    """Two-mode cantilever with a geometric tip spring (1:3 interaction).

    Modal damping/stiffness give four monomial columns; the tip-spring force
    ``2 k0 l0 s (1/a - 1/sqrt(a^2 + s^2))`` with ``s`` the tip deflection is
    split into the column pair (s, s/sqrt(a^2 + s^2)) so the model stays
    linear in its six unknown parameters. The half-span ``a`` and mode-shape
    matrix are treated as identified and live inside the regressor.
    """
    w1, w2 = _CANT_OMEGA
    z1, z2 = _CANT_ZETA
    theta = np.array([
        -2.0 * z1 * w1, -2.0 * z2 * w2, -w1 ** 2, -w2 ** 2,
        -2.0 * _CANT_K0 * _CANT_L0 / _CANT_A, 2.0 * _CANT_K0 * _CANT_L0,
    ])
    return PlantModel(
        order_n=2, dof_p=2, param_count_m=6,
        true_theta=theta,
        term_row=np.array([0, 1, 0, 1], dtype=np.int64),
        term_col=np.array([0, 1, 2, 3], dtype=np.int64),
        term_coef=np.ones(4),
        term_exp=np.array([[1, 0, 0, 0], [0, 1, 0, 0],
                           [0, 0, 1, 0], [0, 0, 0, 1]], dtype=np.int64),
        name="cantilever",
        special_kind=SPECIAL_TIP_SPRING,
        special_cols=np.array([4, 5], dtype=np.int64),
        special_w=CANTILEVER_PHI[3].copy(),
        special_a=_CANT_A,
    )


def cantilever_modal_excitation(amplitude: float, omega: float,
                                phase: float = 0.0) -> Excitation:
    """Modal forcing equivalent to a physical force at the first beam point.

    A harmonic force of the given amplitude applied at the first measurement
    point enters the two modal equations weighted by the first row of the
    mode-shape matrix.
    """
    return Excitation(amplitude=amplitude * CANTILEVER_PHI[0],
                      omega=omega,
                      phase=np.array([phase, phase]))


def make_polynomial_plant(order_n: int, dof_p: int, columns, theta,
                          name: str = "custom") -> PlantModel:
    """Build a plant from a monomial basis list.

    ``columns`` is a sequence with one entry per regressor column:
    ``{"row": int, "exponents": [int]*n*p, "coef": float (optional)}``.
    """
    theta = np.asarray(theta, dtype=float)
    m = len(columns)
    if theta.shape != (m,):
        raise ValueError("theta length must match the number of columns")
    rows = np.array([c["row"] for c in columns], dtype=np.int64)
    coefs = np.array([float(c.get("coef", 1.0)) for c in columns])
    exps = np.array([c["exponents"] for c in columns], dtype=np.int64)
    return PlantModel(
        order_n=order_n, dof_p=dof_p, param_count_m=m,
        true_theta=theta,
        term_row=rows,
        term_col=np.arange(m, dtype=np.int64),
        term_coef=coefs,
        term_exp=exps,
        name=name,
    )


BUILTIN_PLANTS = {
    "duffing": make_duffing,
    "cross_beam": make_cross_beam,
    "cantilever": make_cantilever,
}
