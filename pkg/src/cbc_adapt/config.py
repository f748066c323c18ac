"""Scenario, branch and CBC configuration files.

Configs are TOML (or JSON) with nested tables; every study shipped with the
package lives in ``cbc_adapt/configs`` and documents the schema by example.
The loader resolves plants and references by name, optionally refines a
reference to a true periodic orbit before use, and applies deterministic
coefficient perturbations.
"""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .controller import ControllerParams
from .plant import (BUILTIN_PLANTS, Excitation, PlantModel,
                    cantilever_modal_excitation, make_polynomial_plant)
from .reference import (ReferenceTrajectory, builtin_reference,
                        perturb_coefficients, reference_from_json)
from .simulator import Scenario

__all__ = [
    "ConfigError",
    "load_config",
    "build_plant",
    "build_excitation",
    "build_reference",
    "build_controller",
    "build_scenario",
    "refined_builtin_reference",
    "CONFIG_DIR",
]

CONFIG_DIR = Path(__file__).parent / "configs"

# Refinement defaults per builtin benchmark: harmonic count and solver
# tolerance matched to the response scale of each system.
_REFINE_DEFAULTS = {
    "duffing": (7, 1e-12),
    "cross_beam": (9, 1e-9),
    "cantilever": (9, 1e-10),
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration content."""


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            return json.loads(path.read_text())
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from None


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"missing key {key!r} in [{where}]")
    return table[key]


def build_plant(cfg: dict) -> PlantModel:
    table = cfg.get("plant")
    if not table:
        raise ConfigError("missing [plant] table")
    if table.get("custom"):
        columns = _require(table, "columns", "plant")
        return make_polynomial_plant(
            order_n=int(_require(table, "order_n", "plant")),
            dof_p=int(_require(table, "dof_p", "plant")),
            columns=columns,
            theta=_require(table, "theta", "plant"),
            name=table.get("name", "custom"),
        )
    name = _require(table, "name", "plant")
    if name not in BUILTIN_PLANTS:
        raise ConfigError(
            f"unknown plant {name!r}; builtins: {sorted(BUILTIN_PLANTS)}")
    return BUILTIN_PLANTS[name]()


def build_excitation(cfg: dict, plant: PlantModel) -> Excitation:
    table = cfg.get("excitation")
    if not table:
        raise ConfigError("missing [excitation] table")
    omega = float(_require(table, "omega", "excitation"))
    if "tip_amplitude" in table:
        if plant.name != "cantilever":
            raise ConfigError("tip_amplitude only applies to the cantilever")
        return cantilever_modal_excitation(float(table["tip_amplitude"]), omega)
    amp = np.asarray(_require(table, "amplitude", "excitation"), dtype=float)
    phase = np.asarray(table.get("phase", np.zeros_like(amp)), dtype=float)
    if amp.shape != (plant.dof_p,):
        raise ConfigError(
            f"amplitude must have {plant.dof_p} channels, got {amp.shape}")
    return Excitation(amplitude=amp, omega=omega, phase=phase)


@lru_cache(maxsize=16)
def refined_builtin_reference(name: str, omega: float, amp: tuple,
                              phase: tuple, H: int,
                              tol: float) -> ReferenceTrajectory:
    """Builtin reference refined to a converged orbit (cached per setup)."""
    from .continuation import hb_solve
    plant = BUILTIN_PLANTS[name]()
    exc = Excitation(amplitude=np.array(amp), omega=omega,
                     phase=np.array(phase))
    ref = builtin_reference(name)
    orbit = hb_solve(plant, exc, ref.signal, omega, H=H, tol=tol)
    return orbit.to_reference(plant.order_n)


def build_reference(cfg: dict, plant: PlantModel, excitation: Excitation,
                    seed_override: int | None = None) -> ReferenceTrajectory | None:
    table = cfg.get("reference")
    if not table:
        return None
    if "file" in table:
        ref = reference_from_json(Path(table["file"]).read_text(),
                                  order_n=plant.order_n)
    elif "builtin" in table:
        name = table["builtin"]
        if table.get("refine", False):
            if name not in _REFINE_DEFAULTS:
                raise ConfigError(f"no refinement defaults for {name!r}")
            H_def, tol_def = _REFINE_DEFAULTS[name]
            ref = refined_builtin_reference(
                name, excitation.omega,
                tuple(excitation.amplitude), tuple(excitation.phase),
                int(table.get("harmonics", H_def)),
                float(table.get("tolerance", tol_def)))
        else:
            ref = builtin_reference(name)
    else:
        raise ConfigError("[reference] needs 'builtin' or 'file'")
    pert = table.get("perturb")
    if pert:
        seed = int(pert["seed"] if seed_override is None else seed_override)
        ref = perturb_coefficients(ref, float(pert["dev"]), seed)
    return ref


def build_controller(cfg: dict, plant: PlantModel):
    table = cfg.get("controller")
    if not table:
        return None, 0.0, None, None
    if "S" in table:
        S = np.asarray(table["S"], dtype=float)
    elif "s_diag" in table:
        S = float(table["s_diag"]) * np.eye(plant.param_count_m)
    else:
        raise ConfigError("[controller] needs 's_diag' or 'S'")
    params = ControllerParams(
        k=float(_require(table, "k", "controller")),
        kappa=float(_require(table, "kappa", "controller")),
        eps=float(_require(table, "epsilon", "controller")),
        gamma=float(_require(table, "gamma", "controller")),
        S=S,
        lam=np.asarray(_require(table, "lambda", "controller"), dtype=float),
    )
    phi0 = float(table.get("phi0", 0.0))
    theta_hat0 = table.get("theta_hat0")
    mask = table.get("mask")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    return params, phi0, theta_hat0, mask


def _grid_from_config(table: dict, excitation: Excitation):
    if "t_end" in table:
        t_end = float(table["t_end"])
    elif "periods" in table:
        t_end = float(table["periods"]) * excitation.period
    else:
        raise ConfigError("[simulation] needs 't_end' or 'periods'")
    if "dt" in table:
        dt = float(table["dt"])
    elif "steps_per_period" in table:
        dt = excitation.period / float(table["steps_per_period"])
    else:
        raise ConfigError("[simulation] needs 'dt' or 'steps_per_period'")
    return t_end, dt


def build_scenario(cfg: dict, seed_override: int | None = None):
    """Assemble a Scenario plus its threshold table from a parsed config."""
    plant = build_plant(cfg)
    excitation = build_excitation(cfg, plant)
    reference = build_reference(cfg, plant, excitation, seed_override)
    params, phi0, theta_hat0, mask = build_controller(cfg, plant)
    sim = cfg.get("simulation")
    if not sim:
        raise ConfigError("missing [simulation] table")
    t_end, dt = _grid_from_config(sim, excitation)
    xi0 = np.asarray(_require(sim, "initial_state", "simulation"), dtype=float)
    mode = cfg.get("mode", "closed_loop")
    try:
        scenario = Scenario(
            plant=plant, excitation=excitation, params=params,
            reference=reference, xi0=xi0, t_end=t_end, dt=dt, mode=mode,
            regressor_mask=mask,
            store_every=int(sim.get("store_every", 1)),
            phi0=phi0, theta_hat0=theta_hat0,
            label=cfg.get("label", "scenario"),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None
    thresholds = dict(cfg.get("thresholds", {}))
    return scenario, thresholds


def packaged_config(name: str) -> Path:
    """Path of a config shipped with the package (name without suffix)."""
    path = CONFIG_DIR / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"no packaged config named {name!r}")
    return path
