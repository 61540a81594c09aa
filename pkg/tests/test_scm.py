import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqcausal.dynamics import InterventionError, InterventionSpec
from eqcausal.expr import eval_expr
from eqcausal.lee import derive_lee, intervene_lee, solve_lee
from eqcausal.model import graph_of, parse_model
from eqcausal.pipeline import bundled_models, lotka_volterra_model, mass_spring_model
from eqcausal.scm import (
    StructuralFn, StructuralSolvabilityError, check_lemma1, check_structural_solvability,
    compare_scms, equation_equivalence, induce_scm, intervene_scm, missing_self_dependence,
    scm_to_lee, solve_scm, topological_order,
)

from modelgen import random_polynomial_model


def brute_force_h1(k, l, q2):
    """Root of the intervened force balance for Q1 with Q2 clamped, by bisection."""
    f = lambda q: k[1] * (q2 - q - l[1]) - k[0] * (q - 0.0 - l[0])  # noqa: E731
    lo, hi = -100.0, 100.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# structural solvability


def test_mass_spring_is_structurally_solvable(ms4):
    rep = check_structural_solvability(derive_lee(ms4))
    assert rep.solvable
    assert all(a.method == "affine-constant" for a in rep.atoms.values())


def test_lv_fails_with_witness(lv):
    rep = check_structural_solvability(derive_lee(lv))
    assert not rep.solvable
    fail = rep.atoms["X1"]
    assert not fail.solvable
    # E_X1 vanishes identically when X2 = t11 / t12
    assert fail.witness["X2"] == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(StructuralSolvabilityError) as info:
        induce_scm(derive_lee(lv))
    assert info.value.atom in ("X1", "X2")


def test_lv_witness_tracks_parameters():
    m = lotka_volterra_model(2.0, 1.0, 1.0, 3.0)
    rep = check_structural_solvability(derive_lee(m))
    assert rep.atoms["X1"].witness["X2"] == pytest.approx(2.0, abs=1e-8)
    assert rep.atoms["X2"].witness["X1"] == pytest.approx(3.0, abs=1e-8)


def test_degenerate_lee_fails():
    m = parse_model("model z\nvar X in [-inf, inf] init 0\nddt X = 0\n")
    assert not check_structural_solvability(derive_lee(m)).solvable


def test_sampled_path_for_nonaffine_atoms():
    m = parse_model("model n\nvar X in [-inf, inf] init 1\nvar Y in [-inf, inf] init 0\n"
                    "ddt X = -X^3 - X + Y\nddt Y = -Y\n")
    rep = check_structural_solvability(derive_lee(m))
    assert rep.solvable
    assert rep.atoms["X"].method == "sampled"


# ---------------------------------------------------------------------------
# induced SCM


def test_mass_spring_h1_brute_force(ms2):
    M = induce_scm(derive_lee(ms2))
    q1, p1 = M.evaluate("X1", {"Q2": 2.5, "P2": 0.0})
    assert q1 == pytest.approx(1.25, abs=1e-12)
    assert q1 == pytest.approx(brute_force_h1([1, 1, 1], [1, 1, 1], 2.5), abs=1e-10)
    assert p1 == 0.0
    assert M.functions["X1"].kind == "closed"


def test_mass_spring_scm_graph(ms4):
    M = induce_scm(derive_lee(ms4))
    g = M.graph
    assert not g.self_loops
    assert g.edges == {("X1", "X2"), ("X2", "X1"), ("X2", "X3"), ("X3", "X2"),
                       ("X3", "X4"), ("X4", "X3")}
    assert M.projection()["X2"] == ("Q2",)


def test_single_atom_constant_function():
    m = parse_model("model c\nparam c = 3.5\nvar X in [-inf, inf] init 0\nddt X = c - X\n")
    M = induce_scm(derive_lee(m))
    assert M.functions["X"].parents == frozenset()
    assert M.evaluate("X", {}) == (3.5,)


def test_implicit_matches_closed_form(ms4):
    e = derive_lee(ms4)
    M = induce_scm(e)
    rng = np.random.default_rng(0)
    for atom in M.atoms:
        fn = M.functions[atom]
        implicit = StructuralFn(atom, fn.members, fn.parents, "implicit", lee=e)
        for _ in range(20):
            point = {v: float(rng.uniform(-5, 10)) for v in M.var_names}
            assert np.allclose(fn(point), implicit(point), atol=1e-8)


def test_implicit_reproduces_intervened_lee_solution(ms4):
    e = derive_lee(ms4)
    M = induce_scm(e)
    xi = {"X1": (0.7, 0.1), "X3": (2.9, -0.3), "X4": (4.2, 0.0)}
    s = InterventionSpec.hard(xi, ms4)
    sol = solve_lee(intervene_lee(e, s)).solution_dict()
    h = M.evaluate("X2", s.values)
    assert h == pytest.approx((sol["Q2"], sol["P2"]), abs=1e-9)


def test_self_dependence_lint():
    models = bundled_models()
    assert missing_self_dependence(derive_lee(models["labeling_b"])) == ["Y"]
    assert missing_self_dependence(derive_lee(models["mass_spring_d4"])) == []


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_no_self_loops_on_random_models(seed):
    e = derive_lee(random_polynomial_model(seed))
    M = induce_scm(e, check=False)
    assert not M.graph.self_loops
    for a in M.atoms:
        assert M.parents[a] == e.parents[a] - {a}


# ---------------------------------------------------------------------------
# interventions and solving


def test_intervene_scm_clamps_and_cuts(ms4):
    M = induce_scm(derive_lee(ms4))
    s = InterventionSpec.hard({"X2": (1.7, 0.0)}, ms4)
    Md = intervene_scm(M, s)
    assert Md.evaluate("X2", {}) == (1.7, 0.0)
    assert Md.graph == M.graph.without_incoming(["X2"])
    assert intervene_scm(M, InterventionSpec((), {})) == M
    with pytest.raises(InterventionError):
        intervene_scm(M, InterventionSpec.soft({"X2": (1.7, 0.0)}, ms4, 5.0))


def test_fully_intervened_scm(ms2):
    M = induce_scm(derive_lee(ms2))
    s = InterventionSpec.hard({"X1": (0.5, 0.0), "X2": (2.0, 1.0)}, ms2)
    rep = solve_scm(intervene_scm(M, s))
    assert rep.verdict == "unique"
    assert list(rep.solution) == [0.5, 0.0, 2.0, 1.0]


def test_cyclic_mass_spring_solution(ms4):
    M = induce_scm(derive_lee(ms4))
    assert topological_order(M) is None
    rep = solve_scm(M)
    assert rep.verdict == "unique"
    assert np.allclose(rep.solution[0::2], [1, 2, 3, 4], atol=1e-9)


def test_intervened_d2_scm(ms2):
    M = intervene_scm(induce_scm(derive_lee(ms2)), InterventionSpec.hard({"X2": (2.5, 0)}, ms2))
    rep = solve_scm(M)
    assert rep.solution_dict()["Q1"] == pytest.approx(1.25, abs=1e-9)
    assert rep.solution_dict()["Q2"] == 2.5


def test_acyclic_substitution_is_exact(cascade):
    e = derive_lee(cascade)
    M = induce_scm(e)
    assert topological_order(M) is not None
    rep = solve_scm(M)
    assert rep.residuals[0] == 0.0
    state = rep.solution_dict()
    for g in e.residual_exprs():
        assert abs(eval_expr(g, e.params, state)) <= 1e-15


# ---------------------------------------------------------------------------
# intervention on the SCM matches intervention on the LEE


def test_lemma1_mass_spring_d4(ms4):
    rep = check_lemma1(derive_lee(ms4), InterventionSpec.hard({"X2": (1.7, 0.0)}, ms4))
    assert rep.passed, rep.differences
    assert rep.solution_deviation <= 1e-8


def test_lemma1_empty_intervention(ms4):
    assert check_lemma1(derive_lee(ms4), InterventionSpec((), {})).passed


def test_lemma1_d2_first_atom(ms2):
    rep = check_lemma1(derive_lee(ms2), InterventionSpec.hard({"X1": (0.4, 0.0)}, ms2),
                       n_points=20)
    assert rep.passed
    assert rep.function_deviation <= 1e-8


def test_compare_scms_detects_difference(ms2):
    a = induce_scm(derive_lee(ms2))
    b = induce_scm(derive_lee(mass_spring_model(2, k=[1.0, 2.0, 1.0], L=3)))
    diffs, worst = compare_scms(a, b)
    assert diffs and worst > 1e-3


def test_equation_equivalence_mass_spring(ms4):
    e = derive_lee(ms4)
    out = equation_equivalence(e, induce_scm(e))
    assert all(v["holds"] for v in out.values())
    assert all(v["max_residual_on_h"] <= 1e-8 for v in out.values())


def test_intervened_graph_law_for_scm():
    m = random_polynomial_model(11)
    M = induce_scm(derive_lee(m), check=False)
    target = m.atoms[0]
    s = InterventionSpec.hard({target: [0.5] * len(m.atom_members[target])}, m)
    assert intervene_scm(M, s).graph == M.graph.without_incoming([target])
    # induced parents are the dynamical parents minus the atom itself
    assert intervene_scm(M, s).graph.edges <= graph_of(m).without_incoming([target]).edges


def test_scm_to_lee_round_trip(ms2, cascade):
    for m in (ms2, cascade):
        M = induce_scm(derive_lee(m))
        back = induce_scm(scm_to_lee(M))
        diffs, worst = compare_scms(M, back)
        assert not diffs and worst <= 1e-12
        assert np.allclose(solve_lee(scm_to_lee(M)).solution, solve_scm(M).solution, atol=1e-9)


def test_scm_to_lee_rejects_implicit():
    m = parse_model("model n\nvar X in [-inf, inf] init 1\nddt X = -X^3 - X\n")
    with pytest.raises(ValueError):
        scm_to_lee(induce_scm(derive_lee(m)))
