"""Adaptive noninvasive tracking control and control-based continuation.

The package bundles a family of parameter-linear nonlinear plants, an
adaptive controller that tracks Fourier-series references noninvasively, a
fixed-step simulator, harmonic-balance/pseudo-arclength continuation with
Floquet stability, and the diagnostics used to judge controller
invasiveness.
"""

from .controller import (ControllerParams, ControllerState, control_input,
                         controller_rhs, gain_g, robust_eta, saturate,
                         surface_y)
from .plant import (Excitation, PlantModel, cantilever_modal_excitation,
                    make_cantilever, make_cross_beam, make_duffing,
                    make_polynomial_plant)
from .reference import (FourierSignal, ReferenceTrajectory, builtin_reference,
                        perturb_coefficients, reference_from_json,
                        reference_to_json)
from .simulator import (Scenario, SimTrace, SimulationDiverged,
                        apply_regressor_mask, simulate)

__version__ = "0.1.0"
