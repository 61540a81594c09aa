"""Derive labeled equilibrium equations and structural causal models from ODEs."""

from .dynamics import (
    EquilibriumReport, InterventionError, InterventionSpec, Trajectory, Verdict,
    apply_hard_intervention, apply_soft_intervention, detect_equilibrium, integrate, intervene,
    jacobian, probe_stability, probe_stability_wrt,
)
from .expr import parse_expr, to_string
from .lee import LEE, SolveReport, check_theorem1, derive_lee, intervene_lee, solve_lee
from .model import CausalGraph, Model, format_model, graph_of, parse_model
from .pipeline import (
    DiagramReport, Settings, bundled_models, load_model, lotka_volterra_model,
    mass_spring_model, mass_spring_position_check, verify_diagram,
)
from .scm import (
    SCM, StructuralSolvabilityError, check_lemma1, check_structural_solvability, induce_scm,
    intervene_scm, scm_to_lee, solve_scm,
)

__version__ = "0.1.0"

__all__ = [
    "apply_hard_intervention",
    "apply_soft_intervention",
    "bundled_models",
    "CausalGraph",
    "check_lemma1",
    "check_structural_solvability",
    "check_theorem1",
    "derive_lee",
    "detect_equilibrium",
    "DiagramReport",
    "EquilibriumReport",
    "format_model",
    "graph_of",
    "induce_scm",
    "integrate",
    "intervene",
    "intervene_lee",
    "intervene_scm",
    "InterventionError",
    "InterventionSpec",
    "jacobian",
    "LEE",
    "load_model",
    "lotka_volterra_model",
    "mass_spring_model",
    "mass_spring_position_check",
    "Model",
    "parse_expr",
    "parse_model",
    "probe_stability",
    "probe_stability_wrt",
    "SCM",
    "scm_to_lee",
    "Settings",
    "solve_lee",
    "solve_scm",
    "SolveReport",
    "StructuralSolvabilityError",
    "to_string",
    "Trajectory",
    "Verdict",
    "verify_diagram",
]
