"""Reference trajectories as truncated Fourier series with exact derivatives.

A reference fixes the trajectory the controller steers toward. Tracking an
unstable periodic response only works if every state derivative of the
reference is available analytically, so differentiation happens on the
coefficients, never numerically: d/dt maps (a_k, b_k) -> (k w b_k, -k w a_k).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FourierSignal",
    "ReferenceTrajectory",
    "builtin_reference",
    "perturb_coefficients",
    "reference_from_json",
    "reference_to_json",
    "BUILTIN_REFERENCES",
]


@dataclass(frozen=True)
class FourierSignal:
    """Vector-valued truncated Fourier series at base frequency ``omega``.

    Channel i evaluates to
    ``a0[i] + sum_k cos_c[i,k-1] cos(k w t) + sin_c[i,k-1] sin(k w t)``.
    """

    omega: float
    a0: np.ndarray       # (p,)
    cos_c: np.ndarray    # (p, H)
    sin_c: np.ndarray    # (p, H)

    def __post_init__(self):
        a0 = np.atleast_1d(np.asarray(self.a0, dtype=float))
        cos_c = np.atleast_2d(np.asarray(self.cos_c, dtype=float))
        sin_c = np.atleast_2d(np.asarray(self.sin_c, dtype=float))
        if cos_c.shape != sin_c.shape or cos_c.shape[0] != a0.shape[0]:
            raise ValueError("coefficient arrays must share shape (p, H)")
        if not self.omega > 0.0:
            raise ValueError("omega must be positive")
        object.__setattr__(self, "a0", a0)
        object.__setattr__(self, "cos_c", cos_c)
        object.__setattr__(self, "sin_c", sin_c)
        object.__setattr__(self, "omega", float(self.omega))

    @property
    def channels(self) -> int:
        return self.a0.shape[0]

    @property
    def harmonics(self) -> int:
        return self.cos_c.shape[1]

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.omega

    def differentiate(self) -> "FourierSignal":
        """Exact time derivative as a new signal (mean drops to zero)."""
        H = self.harmonics
        k = np.arange(1, H + 1, dtype=float)
        return FourierSignal(
            omega=self.omega,
            a0=np.zeros_like(self.a0),
            cos_c=k * self.omega * self.sin_c,
            sin_c=-k * self.omega * self.cos_c,
        )

    def evaluate(self, t):
        """Evaluate the signal; (p,) for scalar t, (N, p) for array t."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        ts = np.atleast_1d(t)
        k = np.arange(1, self.harmonics + 1, dtype=float)
        ang = self.omega * np.outer(ts, k)          # (N, H)
        out = (self.a0[None, :]
               + np.cos(ang) @ self.cos_c.T
               + np.sin(ang) @ self.sin_c.T)        # (N, p)
        return out[0] if scalar else out

    def with_harmonics(self, H: int) -> "FourierSignal":
        """Zero-pad or truncate to H harmonics."""
        if H < 0:
            raise ValueError("H must be nonnegative")
        p, H0 = self.cos_c.shape
        cos_c = np.zeros((p, H))
        sin_c = np.zeros((p, H))
        h = min(H, H0)
        cos_c[:, :h] = self.cos_c[:, :h]
        sin_c[:, :h] = self.sin_c[:, :h]
        return FourierSignal(self.omega, self.a0.copy(), cos_c, sin_c)


class ReferenceTrajectory:
    """Reference state stack built from one Fourier signal per DOF.

    Evaluation returns the full state vector in the plant ordering
    ``[x^(n-1); ...; xdot; x]`` with all derivatives taken analytically.

    Parameters
    ----------
    signal : FourierSignal
        Position channels of the reference.
    order_n : int
        Derivative order of the plant the reference is meant for.
    """

    def __init__(self, signal: FourierSignal, order_n: int):
        if order_n < 1:
            raise ValueError("order_n must be >= 1")
        self.signal = signal
        self.order_n = order_n
        derivs = [signal]
        for _ in range(order_n):
            derivs.append(derivs[-1].differentiate())
        # index d holds the d-th time derivative; order_n included for
        # residual diagnostics
        self._derivs = derivs
        self.initial_top_derivative = derivs[order_n - 1].evaluate(0.0)

    @property
    def dof_p(self) -> int:
        return self.signal.channels

    @property
    def omega(self) -> float:
        return self.signal.omega

    @property
    def period(self) -> float:
        return self.signal.period

    def derivative_signal(self, d: int) -> FourierSignal:
        if not 0 <= d <= self.order_n:
            raise ValueError("derivative order out of range")
        return self._derivs[d]

    def evaluate_state(self, t):
        """xi_r(t); shape (n*p,) for scalar t, (N, n*p) for array t."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        ts = np.atleast_1d(t)
        blocks = [self._derivs[d].evaluate(ts)
                  for d in range(self.order_n - 1, -1, -1)]
        out = np.concatenate(blocks, axis=1)
        return out[0] if scalar else out

    def evaluate_top(self, t):
        """x_r^(n)(t), the order-n derivative (used by residual checks)."""
        return self._derivs[self.order_n].evaluate(t)


def perturb_coefficients(ref: ReferenceTrajectory, max_rel_dev: float,
                         seed: int) -> ReferenceTrajectory:
    """Multiply every nonzero Fourier coefficient by ``1 + delta``.

    ``delta`` is drawn uniformly from [-max_rel_dev, +max_rel_dev],
    independently per coefficient, deterministically for a given seed. Zero
    coefficients stay exactly zero so the harmonic support is preserved.
    """
    if max_rel_dev < 0:
        raise ValueError("max_rel_dev must be nonnegative")
    rng = np.random.default_rng(seed)
    sig = ref.signal
    out = []
    for arr in (sig.a0, sig.cos_c, sig.sin_c):
        delta = rng.uniform(-max_rel_dev, max_rel_dev, size=arr.shape)
        out.append(np.where(arr != 0.0, arr * (1.0 + delta), 0.0))
    perturbed = FourierSignal(sig.omega, out[0], out[1], out[2])
    return ReferenceTrajectory(perturbed, ref.order_n)


def _harmonic_dict_to_signal(omega, channels, min_harmonics=0):
    H = max([min_harmonics] + [max(d) for ch in channels
                               for d in (ch.get("cos", {}), ch.get("sin", {}))
                               if d])
    p = len(channels)
    a0 = np.zeros(p)
    cos_c = np.zeros((p, H))
    sin_c = np.zeros((p, H))
    for i, ch in enumerate(channels):
        a0[i] = ch.get("a0", 0.0)
        for k, v in ch.get("cos", {}).items():
            cos_c[i, k - 1] = v
        for k, v in ch.get("sin", {}).items():
            sin_c[i, k - 1] = v
    return FourierSignal(omega, a0, cos_c, sin_c)


# Printed coefficient sets for the three benchmark responses. These are
# rounded starting values: good Newton seeds for the orbit solvers, not exact
# solutions of the equations of motion.
_DUFFING_REF = dict(
    omega=2.515, order_n=2,
    channels=[dict(a0=1.271,
                   cos={1: 0.244, 2: -0.026, 3: -0.005},
                   sin={1: 0.436, 2: 0.045})],
)

_CROSS_BEAM_REF = dict(
    omega=118.814, order_n=2,
    channels=[
        dict(cos={1: -35.344e-4, 3: 0.521e-4, 5: 0.002e-4},
             sin={1: 42.08e-4, 3: 0.303e-4, 5: -0.006e-4}),
        dict(cos={1: -10.974e-4, 3: 0.132e-4, 5: 0.001e-4},
             sin={1: 12.358e-4, 3: 0.077e-4, 5: -0.002e-4}),
    ],
)

_CANTILEVER_REF = dict(
    omega=83.085, order_n=2,
    channels=[
        dict(cos={1: -2.834e-4, 3: 0.254e-4, 5: -0.0341e-4, 7: -0.001e-4},
             sin={1: -8.241e-4, 3: 0.066e-4, 5: 0.026e-4, 7: -0.007e-4}),
        dict(cos={1: -0.487e-4, 3: -2.6e-4, 5: 0.055e-4, 7: 0.001e-4},
             sin={1: -0.469e-4, 3: -0.219e-4, 5: -0.044e-4, 7: 0.009e-4}),
    ],
)

BUILTIN_REFERENCES = {
    "duffing": _DUFFING_REF,
    "cross_beam": _CROSS_BEAM_REF,
    "cantilever": _CANTILEVER_REF,
}


def builtin_reference(name: str) -> ReferenceTrajectory:
    """Return one of the named benchmark references.

    Known names: "duffing" (w = 2.515), "cross_beam" (w = 118.814),
    "cantilever" (w = 83.085).
    """
    try:
        spec = BUILTIN_REFERENCES[name]
    except KeyError:
        raise KeyError(
            f"unknown reference {name!r}; choose from "
            f"{sorted(BUILTIN_REFERENCES)}") from None
    signal = _harmonic_dict_to_signal(spec["omega"], spec["channels"])
    return ReferenceTrajectory(signal, spec["order_n"])


def reference_to_json(ref: ReferenceTrajectory) -> str:
    """Serialize to the interchange format.

    Layout: ``{"omega": f, "channels": [{"a0": f, "cos": [...],
    "sin": [...]}], "order_n": int}``.
    """
    sig = ref.signal
    payload = {
        "omega": sig.omega,
        "order_n": ref.order_n,
        "channels": [
            {"a0": float(sig.a0[i]),
             "cos": [float(v) for v in sig.cos_c[i]],
             "sin": [float(v) for v in sig.sin_c[i]]}
            for i in range(sig.channels)
        ],
    }
    return json.dumps(payload, indent=2)


def reference_from_json(text: str, order_n: int | None = None) -> ReferenceTrajectory:
    """Parse the interchange format produced by :func:`reference_to_json`."""
    payload = json.loads(text)
    chans = payload["channels"]
    H = max(len(ch.get("cos", [])) for ch in chans)
    p = len(chans)
    a0 = np.zeros(p)
    cos_c = np.zeros((p, H))
    sin_c = np.zeros((p, H))
    for i, ch in enumerate(chans):
        a0[i] = ch.get("a0", 0.0)
        cos = ch.get("cos", [])
        sin = ch.get("sin", [])
        cos_c[i, :len(cos)] = cos
        sin_c[i, :len(sin)] = sin
    sig = FourierSignal(payload["omega"], a0, cos_c, sin_c)
    n = order_n if order_n is not None else int(payload.get("order_n", 2))
    return ReferenceTrajectory(sig, n)
