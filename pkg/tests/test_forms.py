import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from emidg.dg_space import DgSpace
from emidg.forms import (BCMode, BoundaryCondition, CoefficientSet, ExactSolution, FormError,
                         Sources, assemble_load, assemble_membrane_mass, assemble_stiffness,
                         assemble_stiffness_single_cell, dg_seminorm, dg_seminorm_operator,
                         error_norms, export_matrix_market, import_matrix_market)
from emidg.mesh import GeometrySpec, analytic_interface_length, build
from emidg.quadrature import line_rule


def onecell_coeff(**kw):
    return CoefficientSet({0: 1.0, 1: 2.0}, 1.0, **kw)


def twocell_coeff(**kw):
    return CoefficientSet({0: 1.0, 1: 2.0, 2: 3.0}, {(0, 1): 1.0, (0, 2): 1.0, (1, 2): 0.5}, **kw)


@pytest.fixture(scope="module", params=[1, 2, 3])
def plus_space(request, plus_mesh):
    return DgSpace(plus_mesh, request.param)


@pytest.mark.parametrize("bc", [BCMode.NEUMANN_MEAN, BCMode.DIRICHLET])
def test_sipg_stiffness_is_symmetric(plus_space, bc):
    A = assemble_stiffness(plus_space, onecell_coeff(), BoundaryCondition(bc))
    assert abs(A - A.T).max() == 0.0


def test_constants_are_in_the_kernel(plus_space):
    A = assemble_stiffness(plus_space, onecell_coeff())
    one = plus_space.constant(1.0)
    assert np.linalg.norm(A @ one) <= 1e-12 * sp.linalg.norm(A)
    # piecewise constants too: membrane facets carry no consistency terms
    assert np.linalg.norm(A @ plus_space.indicator(1)) <= 1e-12 * sp.linalg.norm(A)


def test_nonsymmetric_variant_is_not_symmetric(plus_mesh):
    space = DgSpace(plus_mesh, 1)
    A = assemble_stiffness(space, onecell_coeff(epsilon=-1))
    B = assemble_stiffness(space, onecell_coeff(epsilon=1))
    assert abs(A - A.T).max() > 1e-3
    assert abs((A + A.T) / 2 - (B + B.T) / 2).max() > 1e-3
    # the volume and penalty parts agree, so A_sym + A_nonsym is twice the
    # incomplete form
    C = assemble_stiffness(space, onecell_coeff(epsilon=0))
    assert abs((A + B) / 2 - C).max() <= 1e-13 * abs(C).max()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), k=st.sampled_from([1, 2, 3]))
def test_stiffness_is_positive_semidefinite_property(plus_mesh, seed, k):
    space = DgSpace(plus_mesh, k)
    A = _stiffness_cache(k)
    v = np.random.default_rng(seed).standard_normal(space.dim)
    assert v @ (A @ v) >= -1e-10 * (v @ v)


_CACHE = {}


def _stiffness_cache(k):
    if k not in _CACHE:
        mesh = build(GeometrySpec("plus_cell", 8, diagonal="left"))
        _CACHE[k] = assemble_stiffness(DgSpace(mesh, k), onecell_coeff())
    return _CACHE[k]


@pytest.mark.parametrize("k", [1, 2, 3])
def test_stiffness_is_positive_definite_on_the_mean_free_complement(plus_mesh, k):
    space = DgSpace(plus_mesh, k)
    A = assemble_stiffness(space, onecell_coeff()).toarray()
    ev = np.linalg.eigvalsh(A)
    # kernel: one constant per subdomain (extracellular and the cell)
    assert np.all(ev[:2] < 1e-9 * ev[-1])
    assert ev[2] > 1e-6


@pytest.mark.parametrize("dirichlet", [False, True])
def test_single_cell_path_matches_general_assembly(plus_space, dirichlet):
    coeff = onecell_coeff()
    bc = BoundaryCondition(BCMode.DIRICHLET if dirichlet else BCMode.NEUMANN_MEAN)
    A = assemble_stiffness(plus_space, coeff, bc)
    B = assemble_stiffness_single_cell(plus_space, 2.0, 1.0, dirichlet=dirichlet)
    assert abs(A - B).max() <= 1e-14 * abs(A).max()


def test_single_cell_path_rejects_two_cells(two_cell_mesh):
    with pytest.raises(FormError):
        assemble_stiffness_single_cell(DgSpace(two_cell_mesh, 1), 1.0, 1.0)


def test_anisotropic_tensor_energy_of_linear_fields():
    # on a single subdomain, a(x, y) reduces to K_xy * |Omega|
    space = DgSpace(build(GeometrySpec("square", 4)), 1)
    K = np.array([[2.0, 0.5], [0.5, 1.0]])
    A = assemble_stiffness(space, CoefficientSet({0: K}))
    assert abs(A - A.T).max() <= 1e-13 * abs(A).max()
    ux, uy = space.project(lambda x, y: x), space.project(lambda x, y: y)
    assert ux @ (A @ ux) == pytest.approx(K[0, 0], rel=1e-12)
    assert ux @ (A @ uy) == pytest.approx(K[0, 1], rel=1e-12)
    assert uy @ (A @ uy) == pytest.approx(K[1, 1], rel=1e-12)


@pytest.mark.parametrize("k", [1, 2])
def test_membrane_mass_of_cell_indicator_is_the_perimeter(plus_mesh, k):
    space = DgSpace(plus_mesh, k)
    M = assemble_membrane_mass(space, onecell_coeff())
    chi = space.indicator(1)
    perim = analytic_interface_length(GeometrySpec("plus_cell", 8))
    assert chi @ (M @ chi) == pytest.approx(perim, rel=1e-12)


def test_membrane_mass_scales_with_capacitance(plus_mesh):
    space = DgSpace(plus_mesh, 1)
    M1 = assemble_membrane_mass(space, CoefficientSet({0: 1, 1: 1}, 1.0))
    M3 = assemble_membrane_mass(space, CoefficientSet({0: 1, 1: 1}, 3.0))
    assert abs(M3 - 3 * M1).max() <= 1e-14 * abs(M3).max()


def test_membrane_mass_vanishes_on_continuous_fields(two_cell_mesh):
    space = DgSpace(two_cell_mesh, 2)
    M = assemble_membrane_mass(space, twocell_coeff())
    u = space.project(lambda x, y: x ** 2 - 3 * x * y + y)
    assert abs(u @ (M @ u)) <= 1e-13


def test_membrane_mass_matches_brute_force_gram(two_cell_mesh, rng):
    space = DgSpace(two_cell_mesh, 1)
    coeff = twocell_coeff()
    M = assemble_membrane_mass(space, coeff)
    u, v = rng.standard_normal(space.dim), rng.standard_normal(space.dim)
    s, w = line_rule(4)
    total = 0.0
    mesh = two_cell_mesh
    for f in mesh.membrane_facets:
        a, b = mesh.vertices[mesh.facets[f]]
        pts = a + s[:, None] * (b - a)
        e0, e1 = mesh.facet_elements[f]
        ju = space.eval_physical(u, e0, pts) - space.eval_physical(u, e1, pts)
        jv = space.eval_physical(v, e0, pts) - space.eval_physical(v, e1, pts)
        cm = coeff.capacitance_of(tuple(mesh.facet_labels[f]))
        total += cm * mesh.facet_lengths[f] * np.sum(w * ju * jv)
    assert u @ (M @ v) == pytest.approx(total, rel=1e-12)


def test_zero_sources_give_zero_load(plus_space):
    assert not np.any(assemble_load(plus_space, Sources(volume=lambda x, y, l, t: 0 * x)))
    assert not np.any(assemble_load(plus_space, None))


@given(c=st.floats(-10, 10, allow_nan=False))
@settings(max_examples=20, deadline=None)
def test_constant_volume_load_pairs_with_integrals_property(plus_mesh, c):
    space = DgSpace(plus_mesh, 1)
    F = assemble_load(space, Sources(volume=lambda x, y, l, t: c + 0 * x))
    ones = space.constant(1.0)
    assert F @ ones == pytest.approx(c, abs=1e-12)
    assert F @ space.indicator(1) == pytest.approx(c * np.sum(plus_mesh.areas[plus_mesh.labels == 1]),
                                                   abs=1e-12)


def test_membrane_load_pairs_with_the_jump(plus_mesh):
    space = DgSpace(plus_mesh, 1)
    F = assemble_load(space, Sources(membrane=lambda x, y, nx, ny, l1, l2, t: 1 + 0 * x))
    perim = analytic_interface_length(GeometrySpec("plus_cell", 8))
    # [chi_cell] = 1 on every membrane facet since the cell is the first side
    assert F @ space.indicator(1) == pytest.approx(perim, rel=1e-12)
    assert F @ space.constant(1.0) == pytest.approx(0.0, abs=1e-12)


def test_dirichlet_load_is_consistent_for_linear_data():
    # u = x solves -div grad u = 0 on the unit square; the discrete solution is exact
    mesh = build(GeometrySpec("square", 4))
    space = DgSpace(mesh, 1)
    coeff = CoefficientSet({0: 1.0})
    bc = BoundaryCondition(BCMode.DIRICHLET, data=lambda x, y, t: x)
    A = assemble_stiffness(space, coeff, bc)
    F = assemble_load(space, Sources(), coeff=coeff, bc=bc)
    u = sp.linalg.spsolve(A.tocsc(), F)
    assert np.allclose(u, space.project(lambda x, y: x), atol=1e-12)


def test_dirichlet_load_requires_coefficients():
    space = DgSpace(build(GeometrySpec("square", 2)), 1)
    bc = BoundaryCondition(BCMode.DIRICHLET, data=lambda x, y, t: x)
    with pytest.raises(FormError):
        assemble_load(space, Sources(), bc=bc)


def test_dg_seminorm_of_constants_and_indicators_vanishes(plus_space):
    assert dg_seminorm(plus_space, plus_space.constant(3.0)) <= 1e-10
    assert dg_seminorm(plus_space, plus_space.indicator(1)) <= 1e-10


def test_dg_seminorm_of_x_on_unit_square_is_one():
    space = DgSpace(build(GeometrySpec("square", 4)), 2)
    assert dg_seminorm(space, space.project(lambda x, y: x)) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("include_boundary", [False, True])
def test_dg_seminorm_operator_matches_quadrature(two_cell_mesh, rng, include_boundary):
    space = DgSpace(two_cell_mesh, 2)
    G = dg_seminorm_operator(space, 20.0, include_boundary)
    u = rng.standard_normal(space.dim)
    assert np.sqrt(u @ (G @ u)) == pytest.approx(
        dg_seminorm(space, u, 20.0, include_boundary), rel=1e-12)


def _quadratic_exact():
    return ExactSolution(lambda x, y, l, t: x * x + y * l,
                         lambda x, y, l, t: (2 * x, 0 * x + l))


def test_error_of_exact_polynomial_vanishes(plus_mesh):
    space = DgSpace(plus_mesh, 2)
    exact = _quadratic_exact()
    u = space.project(lambda x, y, l: x * x + y * l, per_label=True)
    err = error_norms(space, u, exact, 0.0)
    assert err["err_l2"] <= 1e-12
    assert err["err_dg"] <= 1e-12
    assert err["err_jump"] <= 1e-12


def test_l2_error_against_zero_is_the_mass_norm(plus_mesh, rng):
    space = DgSpace(plus_mesh, 2)
    zero = ExactSolution(lambda x, y, l, t: 0 * x, lambda x, y, l, t: (0 * x, 0 * x))
    u = rng.standard_normal(space.dim)
    err = error_norms(space, u, zero, 0.0)
    assert err["err_l2"] == pytest.approx(np.sqrt(u @ (space.mass_matrix() @ u)), rel=1e-12)
    assert err["err_dg"] == pytest.approx(dg_seminorm(space, u), rel=1e-12)


def test_mean_free_error_ignores_an_extracellular_shift(plus_mesh):
    space = DgSpace(plus_mesh, 1)
    exact = ExactSolution(lambda x, y, l, t: 0 * x + 5.0, lambda x, y, l, t: (0 * x, 0 * x),
                          mean_free=True)
    err = error_norms(space, space.constant(0.0), exact, 0.0)
    assert err["err_l2"] <= 1e-12


def test_matrix_market_round_trip(tmp_path, plus_mesh):
    space = DgSpace(plus_mesh, 1)
    A = assemble_stiffness(space, onecell_coeff())
    export_matrix_market(A, tmp_path / "a.mtx")
    B = import_matrix_market(tmp_path / "a.mtx")
    assert abs(A - B).max() <= 1e-15 * abs(A).max()
    N = assemble_stiffness(space, onecell_coeff(epsilon=-1))
    export_matrix_market(N, tmp_path / "n.mtx")
    assert abs(N - import_matrix_market(tmp_path / "n.mtx")).max() <= 1e-15 * abs(N).max()


@pytest.mark.parametrize("kw", [
    {"kappa": {0: -1.0}},
    {"kappa": {0: [[1.0, 2.0], [0.0, 1.0]]}},
    {"kappa": {0: 1.0}, "gamma": 0.0},
    {"kappa": {0: 1.0}, "epsilon": 2},
    {"kappa": {0: 1.0}, "capacitance": 0.0},
    {"kappa": {0: 1.0}, "capacitance": {(0, 1): -1.0}},
])
def test_invalid_coefficients_are_rejected(kw):
    with pytest.raises(FormError):
        CoefficientSet(**kw)


def test_missing_conductivity_is_reported(two_cell_mesh):
    with pytest.raises(FormError, match="subdomains"):
        assemble_stiffness(DgSpace(two_cell_mesh, 1), onecell_coeff())


def test_capacitance_keys_are_unordered():
    c = CoefficientSet({0: 1.0}, {(1, 0): 2.0})
    assert c.capacitance_of((0, 1)) == 2.0 == c.capacitance_of((1, 0))
    with pytest.raises(FormError):
        c.capacitance_of((1, 2))


def test_kappa_penalty_weight():
    c = CoefficientSet({0: 1.0, 1: [[4.0, 0.0], [0.0, 2.0]]})
    assert np.allclose(c.penalty_weight(np.array([0, 1]), np.array([0, 0])), [1.0, 4.0])
    plain = CoefficientSet({0: 1.0, 1: 4.0}, kappa_penalty=False)
    assert np.allclose(plain.penalty_weight(np.array([0, 1])), 1.0)
