import math

import numpy as np
import pytest

from lusinfields.exprs import (
    BumpBox,
    ClampProf,
    CombProf,
    ComposeVec,
    Const,
    CosP,
    ExpP,
    LinearForm,
    MapField,
    PlateauProf,
    Product,
    Quotient,
    RegionCorrection,
    ScalarField,
    Scale,
    SinP,
    Sum,
    Unary,
    VectorField,
    bump,
    coordinate,
    expr_from_dict,
)
from lusinfields.geometry import Box
from lusinfields.parsing import ParseError, parse_expression


def fd_grad(expr, X, h=1e-5):
    """Central-difference gradient oracle."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    g = np.zeros_like(X)
    for k in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[k] = h
        g[:, k] = (expr.eval(X + e) - expr.eval(X - e)) / (2 * h)
    return g


def assert_grad_matches_fd(expr, X, h=1e-5, rtol=1e-6):
    g = expr.grad(X)
    fd = fd_grad(expr, X, h)
    tol = rtol * np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd)))
    assert np.all(np.abs(g - fd) <= tol), np.max(np.abs(g - fd) / tol)


def random_tree(rng, dim, depth=3):
    """Random expression over a moderate range, safe for interval bounds."""
    if depth == 0 or rng.random() < 0.25:
        choice = rng.integers(3)
        if choice == 0:
            return Const(float(rng.uniform(-2, 2)), dim)
        if choice == 1:
            return coordinate(int(rng.integers(dim)), dim)
        return LinearForm(rng.uniform(-2, 2, dim), float(rng.uniform(-1, 1)))
    choice = rng.integers(6)
    if choice == 0:
        return Sum([random_tree(rng, dim, depth - 1),
                    random_tree(rng, dim, depth - 1)])
    if choice == 1:
        return Product(random_tree(rng, dim, depth - 1),
                       random_tree(rng, dim, depth - 1))
    if choice == 2:
        return Scale(float(rng.uniform(-2, 2)), random_tree(rng, dim, depth - 1))
    if choice == 3:
        prof = [SinP(), CosP()][int(rng.integers(2))]
        return Unary(prof, random_tree(rng, dim, depth - 1))
    if choice == 4:
        # keep exponents tame
        return Unary(ExpP(), Scale(0.3, Unary(SinP(),
                     random_tree(rng, dim, depth - 1))))
    den = Sum([Const(2.5, dim), Unary(SinP(), random_tree(rng, dim, depth - 1))])
    return Quotient(random_tree(rng, dim, depth - 1), den)


# ---------------------------------------------------------------------------
# exact evaluation and gradients
# ---------------------------------------------------------------------------

def test_constant_value_and_gradient():
    c = Const(3.0, 2)
    X = np.array([[0.0, 0.0], [5.0, -7.0]])
    np.testing.assert_array_equal(c.eval(X), [3.0, 3.0])
    np.testing.assert_array_equal(c.grad(X), np.zeros((2, 2)))


def test_product_rule_example():
    e = Product(coordinate(0, 2), coordinate(1, 2))
    g = e.grad(np.array([[2.0, 5.0]]))
    np.testing.assert_array_equal(g[0], [5.0, 2.0])


def test_random_trees_match_fd_oracle():
    rng = np.random.default_rng(42)
    for _ in range(40):
        dim = int(rng.integers(1, 4))
        tree = random_tree(rng, dim, depth=3)
        X = rng.uniform(-1.5, 1.5, (50, dim))
        assert_grad_matches_fd(tree, X)


def test_eval_linearity():
    rng = np.random.default_rng(0)
    a = random_tree(rng, 2, 2)
    b = random_tree(rng, 2, 2)
    s = Sum([a, b])
    X = rng.uniform(-1, 1, (20, 2))
    np.testing.assert_allclose(s.eval(X), a.eval(X) + b.eval(X), rtol=1e-14)
    np.testing.assert_allclose(s.grad(X), a.grad(X) + b.grad(X), rtol=1e-14)


def test_compose_affine_chain_rule():
    rng = np.random.default_rng(8)
    # inner over 2 vars composed with affine maps of 3 vars
    inner = Product(coordinate(0, 2), Unary(SinP(), coordinate(1, 2)))
    args = [LinearForm(rng.uniform(-1, 1, 3), 0.3),
            LinearForm(rng.uniform(-1, 1, 3), -0.2)]
    comp = ComposeVec(inner, args)
    X = rng.uniform(-1, 1, (40, 3))
    assert_grad_matches_fd(comp, X)


def test_quotient_grad_and_bounds():
    num = coordinate(0, 2)
    den = Sum([Const(2.0, 2), Unary(SinP(), coordinate(1, 2))])
    q = Quotient(num, den)
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, (30, 2))
    assert_grad_matches_fd(q, X)

    box = Box([-1.0, -1.0], [1.0, 1.0])
    lo, hi = q.value_bounds(box)
    vals = q.eval(box.grid(60))
    assert lo <= vals.min() and vals.max() <= hi

    bad = Quotient(num, Unary(SinP(), coordinate(1, 2)))
    with pytest.raises(ValueError):
        bad.value_bounds(box)


# ---------------------------------------------------------------------------
# plateau profile
# ---------------------------------------------------------------------------

def test_plateau_defaults_frozen_values():
    # zeta = 0.1 with defaults plateau = transition = 0.025
    h = PlateauProf(0.1)
    assert h.plateau == 0.025 and h.transition == 0.025
    t = np.array([0.3, -0.3, 0.0, 0.06, -0.06])
    vals = h.f(t)
    assert vals[0] - vals[1] <= 0.1
    assert h.df(np.array([0.0]))[0] == 1.0
    assert h.df(np.array([0.06]))[0] == 0.0
    assert h.df(np.array([-0.06]))[0] == 0.0


def test_plateau_grid_envelope():
    h = PlateauProf(0.1)
    t = np.linspace(-0.2, 0.2, 100000)
    slope = h.df(t)
    vals = h.f(t)
    assert slope.min() >= 0.0 and slope.max() <= 1.0
    assert vals.min() >= 0.0 and vals.max() <= 0.1
    # nondecreasing
    assert np.all(np.diff(vals) >= 0.0)


def test_plateau_rejects_oversized_rise():
    with pytest.raises(ValueError):
        PlateauProf(0.1, plateau=0.04, transition=0.02)


def test_plateau_is_c1_against_fd():
    h = Unary(PlateauProf(0.1), coordinate(0, 1))
    rng = np.random.default_rng(2)
    X = rng.uniform(-0.1, 0.1, (300, 1))
    assert_grad_matches_fd(h, X)


# ---------------------------------------------------------------------------
# bump cutoff
# ---------------------------------------------------------------------------

def test_bump_frozen_slope_bound():
    chi = bump(Box([0.3, 0.3], [0.7, 0.7]), Box([0.4, 0.4], [0.6, 0.6]))
    np.testing.assert_allclose(chi.slope_bounds(), [15.0, 15.0])
    assert chi.eval(np.array([[0.5, 0.5]]))[0] == 1.0
    assert chi.eval(np.array([[0.72, 0.5]]))[0] == 0.0
    assert chi.eval(np.array([[0.25, 0.25]]))[0] == 0.0


def test_bump_gradient_vanishes_inner_and_outside():
    chi = bump(Box([0.3, 0.3], [0.7, 0.7]), Box([0.4, 0.4], [0.6, 0.6]))
    inner_pts = Box([0.4, 0.4], [0.6, 0.6]).grid(20)
    np.testing.assert_array_equal(chi.grad(inner_pts), 0.0)
    outside = np.array([[0.1, 0.5], [0.9, 0.9], [0.5, 0.75]])
    np.testing.assert_array_equal(chi.grad(outside), 0.0)
    # values exactly 1 on the inner grid
    np.testing.assert_array_equal(chi.eval(inner_pts), 1.0)


def test_bump_is_c1_and_bounded():
    chi = bump(Box([-1.0, -1.0], [1.0, 1.0]), Box([-0.5, -0.5], [0.5, 0.5]))
    rng = np.random.default_rng(3)
    X = rng.uniform(-1.2, 1.2, (400, 2))
    assert_grad_matches_fd(chi, X)
    box = Box([-2.0, -2.0], [2.0, 2.0])
    g = chi.grad(box.grid(150))
    assert np.max(np.linalg.norm(g, axis=1)) <= chi.grad_norm_bound(box)


def test_bump_rejects_bad_margins():
    with pytest.raises(ValueError):
        bump(Box([0.0, 0.0], [1.0, 1.0]), Box([0.0, 0.1], [0.5, 0.5]))


# ---------------------------------------------------------------------------
# comb profile
# ---------------------------------------------------------------------------

def test_comb_slope_one_at_knots_exactly():
    knots = np.array([-0.7, -0.1, 0.33, 0.9])
    comb = CombProf(knots, 0.01, 0.005)
    np.testing.assert_array_equal(comb.df(knots), 1.0)
    # far away the slope is exactly zero
    np.testing.assert_array_equal(comb.df(np.array([-2.0, 2.0, 0.5])), 0.0)


def test_comb_slope_within_unit_interval_and_rise():
    rng = np.random.default_rng(4)
    knots = np.sort(rng.uniform(-1, 1, 30))
    comb = CombProf(knots, 0.004, 0.002)
    t = np.linspace(-1.2, 1.2, 200001)
    slope = comb.df(t)
    assert slope.min() >= 0.0 and slope.max() <= 1.0
    vals = comb.f(t)
    assert np.all(np.diff(vals) >= -1e-15)
    assert vals.max() <= comb.rise * (1 + 1e-12)
    assert vals.min() >= 0.0


def test_comb_merges_close_knots():
    # knots closer than the ramps force a single plateau through both
    comb = CombProf(np.array([0.0, 0.001]), 0.01, 0.05)
    t = np.linspace(-0.001, 0.002, 101)
    np.testing.assert_array_equal(comb.df(t), 1.0)


def test_comb_is_c1_against_fd():
    comb = Unary(CombProf(np.array([-0.2, 0.4]), 0.02, 0.01), coordinate(0, 1))
    rng = np.random.default_rng(5)
    X = rng.uniform(-0.5, 0.7, (400, 1))
    # feature width of the comb sets the step
    assert_grad_matches_fd(comb, X, h=1e-6, rtol=2e-5)


def test_comb_subulp_widths_are_exact_at_floats():
    # tooth widths far below 1 ulp at the knots: the comb degenerates to
    # slope exactly 1 at the knot floats and 0 at every neighboring float
    knots = np.array([0.3337819, 0.71129344, 0.9251886])
    comb = CombProf(knots, 1e-22, 5e-23)
    np.testing.assert_array_equal(comb.df(knots), 1.0)
    neighbors = np.concatenate([np.nextafter(knots, -np.inf),
                                np.nextafter(knots, np.inf)])
    np.testing.assert_array_equal(comb.df(neighbors), 0.0)
    vals = comb.f(np.concatenate([knots, neighbors]))
    assert np.all(vals <= comb.rise)
    assert np.all(vals >= 0.0)


# ---------------------------------------------------------------------------
# clamp profile
# ---------------------------------------------------------------------------

def test_clamp_identity_region_is_bitwise():
    cl = ClampProf(2.0, 0.5)
    t = np.array([-2.0, -1.3337, 0.0, 0.725, 2.0])
    np.testing.assert_array_equal(cl.f(t), t)
    np.testing.assert_array_equal(cl.df(t), 1.0)


def test_clamp_flattens_with_bounded_overshoot():
    cl = ClampProf(1.0, 0.2)
    t = np.linspace(-3, 3, 10001)
    vals = cl.f(t)
    assert np.max(np.abs(vals)) <= 1.0 + 0.1 + 1e-15
    assert vals[0] == -(1.0 + 0.1) and vals[-1] == 1.0 + 0.1
    slope = cl.df(t)
    assert slope.min() >= 0.0 and slope.max() <= 1.0
    e = Unary(cl, coordinate(0, 1))
    assert_grad_matches_fd(e, t[::50][:, None])


# ---------------------------------------------------------------------------
# certified bounds
# ---------------------------------------------------------------------------

def test_sup_certificate_constant_exact():
    f = ScalarField(Const(-4.5, 2), Box([0, 0], [1, 1]))
    assert f.sup_certificate() == 4.5


def test_leibniz_bound_for_amplitude_cutoff_width():
    # a * chi * phi with |a| <= A, phi <= zeta: sup <= A*zeta and the grad
    # bound is at most A*(sup|Dphi| + zeta*|Dchi|) up to padding
    A, zeta = 2.0, 0.1
    outer = Box([-1.0, -1.0], [1.0, 1.0])
    inner = Box([-0.5, -0.5], [0.5, 0.5])
    chi = bump(outer, inner)
    phi = Unary(PlateauProf(zeta), coordinate(0, 2))
    w = Scale(A, Product(chi, phi))
    f = ScalarField(w, outer)

    assert f.sup_certificate() <= A * zeta * (1 + 1e-9)
    dphi = phi.grad_norm_bound(outer)
    dchi = chi.grad_norm_bound(outer)
    assert f.grad_sup_certificate() <= A * (dphi + zeta * dchi) * (1 + 1e-9)


def test_certificates_dominate_grid_suprema():
    rng = np.random.default_rng(6)
    box = Box([-1.0, -1.0], [1.0, 1.0])
    grid = box.grid(40)
    for _ in range(60):
        tree = random_tree(rng, 2, depth=3)
        vals = tree.eval(grid)
        grads = np.linalg.norm(tree.grad(grid), axis=1)
        assert tree.sup_bound(box) >= np.max(np.abs(vals))
        assert tree.grad_norm_bound(box) >= np.max(grads)


def test_certificates_dominate_for_composites():
    box = Box([0.0, 0.0], [1.0, 1.0])
    chi = bump(box, Box([0.25, 0.25], [0.75, 0.75]))
    comb = Unary(CombProf(np.array([0.2, 0.5, 0.8]), 0.01, 0.01),
                 coordinate(0, 2))
    e = Product(chi, comb)
    grid = box.inflate(0.2).grid(200)
    assert e.sup_bound(box.inflate(0.2)) >= np.max(np.abs(e.eval(grid)))
    assert (e.grad_norm_bound(box.inflate(0.2))
            >= np.max(np.linalg.norm(e.grad(grid), axis=1)))


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

def test_scalar_field_support_masking_exact():
    f = ScalarField(Const(1.0, 2), Box([0, 0], [1, 1]))
    X = np.array([[0.5, 0.5], [1.5, 0.5], [-0.1, 0.2]])
    np.testing.assert_array_equal(f.eval(X), [1.0, 0.0, 0.0])
    g = f.grad(X)
    np.testing.assert_array_equal(g[1], 0.0)
    np.testing.assert_array_equal(g[2], 0.0)
    # scalar convenience
    assert f.eval(np.array([2.0, 2.0])) == 0.0


def test_vector_field_divergence_and_jacobian():
    rng = np.random.default_rng(7)
    box = Box([-2.0, -2.0], [2.0, 2.0])
    s1 = ScalarField(Product(coordinate(0, 2), coordinate(1, 2)), box)
    s2 = ScalarField(Unary(SinP(), coordinate(0, 2)), box)
    v1 = np.array([1.0, 0.0])
    v2 = np.array([0.0, 1.0])
    V = VectorField([(s1, v1), (s2, v2)])
    X = rng.uniform(-1, 1, (30, 2))
    # V = (x1*x2, sin(x1)): div = x2 + 0
    np.testing.assert_allclose(V.divergence(X), X[:, 1], atol=1e-14)
    J = V.jacobian(X)
    np.testing.assert_allclose(J[:, 0, 0], X[:, 1], atol=1e-14)
    np.testing.assert_allclose(J[:, 0, 1], X[:, 0], atol=1e-14)
    np.testing.assert_allclose(J[:, 1, 0], np.cos(X[:, 0]), atol=1e-14)
    np.testing.assert_allclose(J[:, 1, 1], 0.0, atol=1e-14)


def test_map_field_determinant():
    box = Box([-2.0, -2.0], [2.0, 2.0])
    s = ScalarField(Scale(0.25, Product(coordinate(0, 2), coordinate(1, 2))), box)
    phi = MapField(VectorField([(s, np.array([1.0, 0.0]))]))
    X = np.random.default_rng(9).uniform(-1, 1, (20, 2))
    # DPhi = I + e1 (x) grad(x1*x2/4): det = 1 + x2/4
    np.testing.assert_allclose(phi.det_jacobian(X), 1 + X[:, 1] / 4, atol=1e-13)


def test_region_correction_disjointness_and_eval():
    b1 = Box([0.0, 0.0], [1.0, 1.0])
    b2 = Box([2.0, 0.0], [3.0, 1.0])
    r = RegionCorrection([
        ([b1], Const(1.0, 2)),
        ([b2], Const(2.0, 2)),
    ])
    X = np.array([[0.5, 0.5], [2.5, 0.5], [1.5, 0.5]])
    np.testing.assert_array_equal(r.eval(X), [1.0, 2.0, 0.0])

    with pytest.raises(ValueError):
        RegionCorrection([
            ([b1], Const(1.0, 2)),
            ([Box([0.5, 0.5], [1.5, 1.5])], Const(2.0, 2)),
        ])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_expression_roundtrip_is_bitwise():
    rng = np.random.default_rng(10)
    box = Box([-1.0, -1.0], [1.0, 1.0])
    for _ in range(20):
        tree = random_tree(rng, 2, depth=3)
        clone = expr_from_dict(tree.to_dict())
        X = rng.uniform(-1, 1, (40, 2))
        np.testing.assert_array_equal(tree.eval(X), clone.eval(X))
        np.testing.assert_array_equal(tree.grad(X), clone.grad(X))
        assert tree.sup_bound(box) == clone.sup_bound(box)


def test_field_roundtrip():
    box = Box([0.0, 0.0], [1.0, 1.0])
    chi = bump(box, Box([0.25, 0.25], [0.75, 0.75]))
    f = ScalarField(Scale(0.5, chi), box)
    f2 = ScalarField.from_dict(f.to_dict())
    X = np.random.default_rng(11).uniform(-0.2, 1.2, (50, 2))
    np.testing.assert_array_equal(f.eval(X), f2.eval(X))

    V = VectorField([(f, np.array([0.0, 1.0]))])
    V2 = VectorField.from_dict(V.to_dict())
    np.testing.assert_array_equal(V.eval(X), V2.eval(X))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def test_parse_basic_formulas():
    e = parse_expression("sin(3*x1) + 0.5", 2)
    X = np.array([[0.4, 0.0], [1.1, 2.0]])
    np.testing.assert_allclose(e.eval(X), np.sin(3 * X[:, 0]) + 0.5, rtol=1e-15)

    e2 = parse_expression("x1*x2 - exp(x2)/2", 2)
    np.testing.assert_allclose(
        e2.eval(X), X[:, 0] * X[:, 1] - np.exp(X[:, 1]) / 2, rtol=1e-15)

    assert_grad_matches_fd(e2, X)


def test_parse_folds_affine_subtrees():
    e = parse_expression("2*x1 + 3*x2 - 1", 2)
    assert isinstance(e, LinearForm)
    np.testing.assert_array_equal(e.weights, [2.0, 3.0])
    assert e.offset == -1.0

    c = parse_expression("2*3 + 1", 1)
    assert isinstance(c, Const) and c.value == 7.0

    z = parse_expression("x1 - x1", 1)
    assert isinstance(z, Const) and z.value == 0.0


def test_parse_unary_minus_and_nesting():
    e = parse_expression("-x1 + -(cos(x2) * 2)", 2)
    X = np.array([[0.3, 0.7]])
    np.testing.assert_allclose(e.eval(X), -0.3 - 2 * math.cos(0.7), rtol=1e-15)


def test_parse_errors_carry_positions():
    with pytest.raises(ParseError) as err:
        parse_expression("x3 + 1", 2)
    assert "position 0" in str(err.value)

    with pytest.raises(ParseError):
        parse_expression("sin x1", 2)
    with pytest.raises(ParseError):
        parse_expression("(x1 + 2", 2)
    with pytest.raises(ParseError):
        parse_expression("x1 + 2)", 2)
    with pytest.raises(ParseError):
        parse_expression("1/0", 2)
    with pytest.raises(ParseError):
        parse_expression("x1 @ 2", 2)
    with pytest.raises(ParseError):
        parse_expression("foo(x1)", 2)
