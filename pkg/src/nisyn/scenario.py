"""Scenario files: the declarative interface to the toolkit.

A scenario is a JSON document with named blocks; expressions are strings in
the repository grammar.  Schema (fields marked * are optional):

    plant:        m, p1, p2, A11 (nested row-major array), p (expressions)
    spec:         P ("auto" or array), V2 ("default" or expression),
                  lambda*, target* ("NI" | "OSNI")
    general_form*: j1, j2, l1, l2 (expression vectors / matrices)
    uncertainty*: n_sigma, f_sigma, h_sigma, V_sigma, epsilon_sigma, x_sigma0
    simulation:   x0, dt*, t_end*, input*, seed*
    verification*: dissipation_tol*, w_decrease_tol*, sampling_box*,
                  samples*, pd_seed*, convergence_threshold*,
                  nominal_convergence_threshold*, settle_window*,
                  input_signals*
    regression*:  u1, u2 (expected law expressions, checked by evaluation)

Loading then saving then loading yields an identical in-memory scenario.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .expr import ExprError, parse_expr
from .lyapunov import classify_stability, lyapunov_certificate
from .synthesis import (
    GeneralForm, NormalFormPlant, SynthesisSpec, block_names, default_v2,
)
from .uncertainty import OsniUncertainty

__all__ = [
    "ScenarioError", "Scenario", "PlantBlock", "SpecBlock",
    "GeneralFormBlock", "UncertaintyBlock", "SimulationBlock",
    "VerificationBlock",
    "load_scenario", "save_scenario", "scenario_from_dict", "scenario_to_dict",
    "build_plant", "resolve_synthesis_spec", "build_uncertainty",
    "build_general_form", "sampling_box", "default_input_catalog",
]


class ScenarioError(Exception):
    pass


@dataclass
class PlantBlock:
    m: int
    p1: int
    p2: int
    a11: list
    p: list


@dataclass
class SpecBlock:
    p_matrix: object = "auto"
    v2: str = "default"
    lam: Optional[float] = None
    target: str = "OSNI"


@dataclass
class GeneralFormBlock:
    j1: list
    j2: list
    l1: list
    l2: list


@dataclass
class UncertaintyBlock:
    n_sigma: int
    f_sigma: list
    h_sigma: list
    v_sigma: str
    epsilon_sigma: float
    x_sigma0: list


@dataclass
class SimulationBlock:
    x0: list
    dt: float = 1e-3
    t_end: float = 10.0
    input: dict = field(default_factory=lambda: {"kind": "zero"})
    seed: int = 0


@dataclass
class VerificationBlock:
    dissipation_tol: float = 1e-3
    w_decrease_tol: Optional[float] = None  # defaults to 10*dt at use site
    sampling_box: Optional[list] = None
    samples: int = 20000
    pd_seed: int = 0
    convergence_threshold: float = 0.08
    nominal_convergence_threshold: Optional[float] = 0.05
    settle_window: float = 1.0
    input_signals: Optional[list] = None


@dataclass
class Scenario:
    plant: PlantBlock
    spec: SpecBlock
    simulation: SimulationBlock
    verification: VerificationBlock = field(default_factory=VerificationBlock)
    general_form: Optional[GeneralFormBlock] = None
    uncertainty: Optional[UncertaintyBlock] = None
    regression: Optional[dict] = None
    name: str = ""


def _require(mapping: dict, key: str, block: str):
    if key not in mapping:
        raise ScenarioError(f"{block} block is missing required field {key!r}")
    return mapping[key]


def scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a JSON object")
    try:
        plant_raw = _require(data, "plant", "scenario")
        plant = PlantBlock(
            m=int(_require(plant_raw, "m", "plant")),
            p1=int(_require(plant_raw, "p1", "plant")),
            p2=int(_require(plant_raw, "p2", "plant")),
            a11=_require(plant_raw, "A11", "plant"),
            p=list(_require(plant_raw, "p", "plant")),
        )
        spec_raw = data.get("spec", {})
        spec = SpecBlock(
            p_matrix=spec_raw.get("P", "auto"),
            v2=spec_raw.get("V2", "default"),
            lam=spec_raw.get("lambda"),
            target=spec_raw.get("target", "OSNI"),
        )
        sim_raw = _require(data, "simulation", "scenario")
        simulation = SimulationBlock(
            x0=list(_require(sim_raw, "x0", "simulation")),
            dt=float(sim_raw.get("dt", 1e-3)),
            t_end=float(sim_raw.get("t_end", 10.0)),
            input=dict(sim_raw.get("input", {"kind": "zero"})),
            seed=int(sim_raw.get("seed", 0)),
        )
        ver_raw = data.get("verification", {})
        verification = VerificationBlock(
            dissipation_tol=float(ver_raw.get("dissipation_tol", 1e-3)),
            w_decrease_tol=(None if ver_raw.get("w_decrease_tol") is None
                            else float(ver_raw["w_decrease_tol"])),
            sampling_box=ver_raw.get("sampling_box"),
            samples=int(ver_raw.get("samples", 20000)),
            pd_seed=int(ver_raw.get("pd_seed", 0)),
            convergence_threshold=float(ver_raw.get("convergence_threshold", 0.08)),
            nominal_convergence_threshold=(
                None if ver_raw.get("nominal_convergence_threshold") is None
                else float(ver_raw["nominal_convergence_threshold"])),
            settle_window=float(ver_raw.get("settle_window", 1.0)),
            input_signals=ver_raw.get("input_signals"),
        )
        gform = None
        if "general_form" in data and data["general_form"] is not None:
            g = data["general_form"]
            gform = GeneralFormBlock(
                j1=list(_require(g, "j1", "general_form")),
                j2=list(_require(g, "j2", "general_form")),
                l1=list(_require(g, "l1", "general_form")),
                l2=list(_require(g, "l2", "general_form")),
            )
        unc = None
        if "uncertainty" in data and data["uncertainty"] is not None:
            u = data["uncertainty"]
            unc = UncertaintyBlock(
                n_sigma=int(_require(u, "n_sigma", "uncertainty")),
                f_sigma=list(_require(u, "f_sigma", "uncertainty")),
                h_sigma=list(_require(u, "h_sigma", "uncertainty")),
                v_sigma=_require(u, "V_sigma", "uncertainty"),
                epsilon_sigma=float(_require(u, "epsilon_sigma", "uncertainty")),
                x_sigma0=list(u.get("x_sigma0", [0.0] * int(u["n_sigma"]))),
            )
        regression = data.get("regression")
        return Scenario(
            plant=plant,
            spec=spec,
            simulation=simulation,
            verification=verification,
            general_form=gform,
            uncertainty=unc,
            regression=regression,
            name=str(data.get("name", "")),
        )
    except (TypeError, ValueError) as err:
        raise ScenarioError(f"malformed scenario: {err}") from err


def scenario_to_dict(scn: Scenario) -> dict:
    data = {
        "name": scn.name,
        "plant": {
            "m": scn.plant.m, "p1": scn.plant.p1, "p2": scn.plant.p2,
            "A11": scn.plant.a11, "p": scn.plant.p,
        },
        "spec": {
            "P": scn.spec.p_matrix, "V2": scn.spec.v2,
            "target": scn.spec.target,
        },
        "simulation": {
            "x0": scn.simulation.x0, "dt": scn.simulation.dt,
            "t_end": scn.simulation.t_end, "input": scn.simulation.input,
            "seed": scn.simulation.seed,
        },
        "verification": {
            "dissipation_tol": scn.verification.dissipation_tol,
            "samples": scn.verification.samples,
            "pd_seed": scn.verification.pd_seed,
            "convergence_threshold": scn.verification.convergence_threshold,
            "settle_window": scn.verification.settle_window,
        },
    }
    if scn.spec.lam is not None:
        data["spec"]["lambda"] = scn.spec.lam
    ver = data["verification"]
    if scn.verification.w_decrease_tol is not None:
        ver["w_decrease_tol"] = scn.verification.w_decrease_tol
    if scn.verification.sampling_box is not None:
        ver["sampling_box"] = scn.verification.sampling_box
    if scn.verification.nominal_convergence_threshold is not None:
        ver["nominal_convergence_threshold"] = \
            scn.verification.nominal_convergence_threshold
    if scn.verification.input_signals is not None:
        ver["input_signals"] = scn.verification.input_signals
    if scn.general_form is not None:
        data["general_form"] = {
            "j1": scn.general_form.j1, "j2": scn.general_form.j2,
            "l1": scn.general_form.l1, "l2": scn.general_form.l2,
        }
    if scn.uncertainty is not None:
        data["uncertainty"] = {
            "n_sigma": scn.uncertainty.n_sigma,
            "f_sigma": scn.uncertainty.f_sigma,
            "h_sigma": scn.uncertainty.h_sigma,
            "V_sigma": scn.uncertainty.v_sigma,
            "epsilon_sigma": scn.uncertainty.epsilon_sigma,
            "x_sigma0": scn.uncertainty.x_sigma0,
        }
    if scn.regression is not None:
        data["regression"] = scn.regression
    return data


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as err:
        raise ScenarioError(f"invalid JSON in {path}: {err}") from err
    return scenario_from_dict(data)


def save_scenario(scn: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scn), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- builders ----------------------------------------------------------------

def build_plant(scn: Scenario) -> NormalFormPlant:
    block = scn.plant
    a11 = np.asarray(block.a11, dtype=float)
    if a11.shape != (block.m, block.m):
        raise ScenarioError(
            f"A11 has shape {a11.shape}, expected ({block.m}, {block.m})")
    if len(block.p) != block.m:
        raise ScenarioError(f"p must list {block.m} expressions")
    names = _plant_y_names(block.p1, block.p2)
    try:
        p_exprs = tuple(parse_expr(text, names) for text in block.p)
        return NormalFormPlant(a11=a11, p=p_exprs, p1=block.p1, p2=block.p2)
    except ExprError as err:
        raise ScenarioError(f"invalid plant expression: {err}") from err
    except Exception as err:
        raise ScenarioError(f"invalid plant block: {err}") from err


def _plant_y_names(p1: int, p2: int):
    return block_names("xi1", p1) + block_names("xi2", p2)


def resolve_synthesis_spec(scn: Scenario, plant: NormalFormPlant) -> SynthesisSpec:
    """Resolve "auto"/"default" placeholders into a concrete SynthesisSpec."""
    block = scn.spec
    if block.target not in ("NI", "OSNI"):
        raise ScenarioError(f"unknown target {block.target!r}; expected NI or OSNI")
    lam = block.lam
    if lam is None:
        lam = 1.0 if block.target == "OSNI" else 0.0
    lam = float(lam)
    if lam < 0:
        raise ScenarioError("lambda must be nonnegative")
    if block.target == "OSNI" and lam <= 0:
        raise ScenarioError("the OSNI target requires lambda > 0")
    if isinstance(block.p_matrix, str):
        if block.p_matrix != "auto":
            raise ScenarioError(f"P must be a matrix or \"auto\", got {block.p_matrix!r}")
        verdict = classify_stability(plant.a11)
        p_matrix = lyapunov_certificate(plant.a11, verdict)
    else:
        p_matrix = np.asarray(block.p_matrix, dtype=float)
    if isinstance(block.v2, str) and block.v2 == "default":
        v2 = default_v2(plant)
    else:
        try:
            v2 = parse_expr(block.v2, plant.y_names)
        except ExprError as err:
            raise ScenarioError(f"invalid V2 expression: {err}") from err
    try:
        return SynthesisSpec(p_matrix=p_matrix, v2=v2, lam=lam)
    except Exception as err:
        raise ScenarioError(f"invalid synthesis spec: {err}") from err


def build_uncertainty(scn: Scenario) -> Optional[OsniUncertainty]:
    block = scn.uncertainty
    if block is None:
        return None
    xs_names = tuple(f"xs{i + 1}" for i in range(block.n_sigma))
    us_names = tuple(f"us{i + 1}" for i in range(len(block.h_sigma)))
    try:
        unc = OsniUncertainty(
            n_sigma=block.n_sigma,
            f_sigma=tuple(parse_expr(t, xs_names + us_names) for t in block.f_sigma),
            h_sigma=tuple(parse_expr(t, xs_names) for t in block.h_sigma),
            v_sigma=parse_expr(block.v_sigma, xs_names),
            epsilon_sigma=block.epsilon_sigma,
        )
    except ExprError as err:
        raise ScenarioError(f"invalid uncertainty expression: {err}") from err
    except Exception as err:
        raise ScenarioError(f"invalid uncertainty block: {err}") from err
    if len(block.x_sigma0) != block.n_sigma:
        raise ScenarioError(
            f"x_sigma0 must have {block.n_sigma} entries, got {len(block.x_sigma0)}")
    return unc


def build_general_form(scn: Scenario, plant: NormalFormPlant) -> Optional[GeneralForm]:
    block = scn.general_form
    if block is None:
        return None
    names = plant.state_names
    try:
        return GeneralForm(
            j1=tuple(parse_expr(t, names) for t in block.j1),
            j2=tuple(parse_expr(t, names) for t in block.j2),
            l1=tuple(tuple(parse_expr(t, names) for t in row) for row in block.l1),
            l2=tuple(tuple(parse_expr(t, names) for t in row) for row in block.l2),
        )
    except ExprError as err:
        raise ScenarioError(f"invalid general form expression: {err}") from err


def sampling_box(scn: Scenario, dim: int) -> np.ndarray:
    """Per-coordinate bounds for positivity sampling: the leading ``dim``
    coordinates of the configured box (default [-2, 2] everywhere)."""
    raw = scn.verification.sampling_box
    if raw is None:
        return np.tile([-2.0, 2.0], (dim, 1))
    box = np.asarray(raw, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise ScenarioError("sampling_box must be a list of [lo, hi] pairs")
    if box.shape[0] < dim:
        raise ScenarioError(
            f"sampling_box covers {box.shape[0]} coordinates, needs {dim}")
    return box[:dim]


def default_input_catalog(p: int, seed: int) -> list:
    """Canonical verification signals: rest, a moderate step, and a seeded
    two-tone multisine per channel."""
    return [
        {"kind": "zero"},
        {"kind": "step", "amplitude": [0.2] * p, "start_time": 0.0},
        {"kind": "multisine",
         "amplitudes": [[0.2, 0.1]] * p,
         "frequencies": [[0.4, 0.9]] * p,
         "seed": seed},
    ]


def input_catalog(scn: Scenario, p: int) -> list:
    signals = scn.verification.input_signals
    if signals is None:
        signals = default_input_catalog(p, scn.simulation.seed)
    return signals
