import math

import numpy as np
import pytest

from lusinfields.exprs import (
    Const,
    LinearForm,
    ScalarField,
    Scale,
    SinP,
    Sum,
    Unary,
)
from lusinfields.geometry import Box, Cone, c_alpha, first_box_clash
from lusinfields.measures import (
    AtomCloud,
    GraphCarrier,
    ModelMeasure,
    atoms_certificate,
    sample_atoms,
    sparse_ifs_atoms,
)
from lusinfields.scheme import (
    SchemeParams,
    choose_t,
    greedy_cover_partition,
    modulus_radius,
    refine_and_separate,
    run_scheme,
)
from test_measures import OMEGA, cantor_middle_thirds, unit_segment, sine_graph

VERT = Cone([0.0, 1.0], math.pi / 4)
HORIZ = Cone([1.0, 0.0], math.pi / 4)
UBOX = Box([-1.0, -1.0], [3.0, 2.0])


def stage_inequality(t, slack):
    return 1.0 / (1.0 - t) + t ** 4 / (1.0 - t * t) < 1.0 + slack


def segment_cloud(n=100):
    m = ModelMeasure(OMEGA, [(unit_segment(), 1.0)])
    return sample_atoms(m, n)


def coord0():
    return ScalarField(LinearForm([1.0, 0.0], 0.0))


# ---------------------------------------------------------------------------
# stage ratio
# ---------------------------------------------------------------------------

def test_choose_t_frozen_values():
    assert choose_t(0.1, 9.0) == 0.09
    assert choose_t(1.0, 1.0) == 0.48
    assert choose_t(1e-4, 5.0) == 9e-05


def test_choose_t_is_largest_on_grid():
    for slack in [1.0, 0.5, 0.1, 0.03]:
        t = choose_t(slack, slack)
        assert stage_inequality(t, slack)
        # the next grid step up must fail, otherwise t was not maximal
        assert not stage_inequality(round(t + 0.01, 2), slack)


def test_choose_t_monotone_in_slack():
    slacks = [1e-7, 1e-5, 1e-3, 0.05, 0.3, 2.0]
    ts = [choose_t(s, s) for s in slacks]
    assert all(a <= b for a, b in zip(ts, ts[1:]))
    assert all(stage_inequality(t, s) for t, s in zip(ts, slacks))


def test_choose_t_rejects_nonpositive_slack():
    with pytest.raises(ValueError):
        choose_t(0.0, 1.0)
    with pytest.raises(ValueError):
        choose_t(0.5, -1.0)


def test_scheme_params_validate_ratio():
    with pytest.raises(ValueError, match="geometric inequality"):
        SchemeParams(eta=0.1, delta=0.1, t=0.4, tau=1.0, max_stage=5,
                     residual_tol=1e-9, working_box=OMEGA)


# ---------------------------------------------------------------------------
# oscillation radius
# ---------------------------------------------------------------------------

def test_modulus_radius_constant_datum_is_box_diameter():
    lam = ScalarField(Const(3.0, 2))
    cloud = segment_cloud(40)
    box = Box([0.0, 0.0], [1.0, 1.0])
    assert modulus_radius(lam, cloud, 0.01, box=box) == box.diameter()


def test_modulus_radius_linear_datum():
    lam = coord0()
    cloud = segment_cloud(200)
    box = Box([-1.0, -1.0], [2.0, 2.0])
    rho = modulus_radius(lam, cloud, 0.01, box=box)
    assert 0.0099 <= rho <= 0.01
    # oracle: the datum oscillates below the bound on any pair within rho
    rng = np.random.default_rng(7)
    x = box.sample(10 ** 4, rng)
    step = rng.standard_normal((10 ** 4, 2))
    step *= (rho * rng.random(10 ** 4) / np.linalg.norm(step, axis=1))[:, None]
    osc = np.abs(lam.eval(x + step) - lam.eval(x))
    assert np.all(osc <= 0.01 * (1 + 1e-9))


def test_modulus_radius_floored_at_atom_spacing():
    pts = np.array([[0.0, 0.0], [0.5, 0.0]])
    cloud = AtomCloud(pts, [1.0, 1.0], [0, 0])
    lam = coord0()
    rho = modulus_radius(lam, cloud, 1e-8, box=Box([-1.0, -1.0], [1.0, 1.0]))
    # no distinct pair is closer than the floor, so it costs nothing
    assert rho == pytest.approx(0.99 * 0.5)


def test_modulus_radius_rejects_nonpositive_bound():
    with pytest.raises(ValueError):
        modulus_radius(coord0(), segment_cloud(10), 0.0)


# ---------------------------------------------------------------------------
# cluster partition
# ---------------------------------------------------------------------------

def test_partition_single_atom():
    cloud = AtomCloud([[0.3, 0.4]], [1.0], [0])
    parts = greedy_cover_partition(cloud, 0.5)
    assert len(parts) == 1 and parts[0].tolist() == [0]


def test_partition_two_far_atoms():
    cloud = AtomCloud([[0.0, 0.0], [3.0, 0.0]], [1.0, 1.0], [0, 0])
    parts = greedy_cover_partition(cloud, 1.0)
    assert len(parts) == 2


def test_partition_properties_random_cloud():
    rng = np.random.default_rng(11)
    pts = rng.uniform(-1, 1, (300, 2))
    cloud = AtomCloud(pts, np.full(300, 1.0), np.zeros(300, dtype=int))
    for rho in [0.1, 0.4, 1.5]:
        parts = greedy_cover_partition(cloud, rho)
        seen = np.sort(np.concatenate(parts))
        np.testing.assert_array_equal(seen, np.arange(300))
        for idx in parts:
            if idx.size > 1:
                d = np.linalg.norm(pts[idx][:, None] - pts[idx][None], axis=2)
                assert d.max() <= rho
        again = greedy_cover_partition(cloud, rho)
        assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def test_partition_rejects_bad_input():
    cloud = AtomCloud([[0.0, 0.0]], [1.0], [0])
    with pytest.raises(ValueError):
        greedy_cover_partition(cloud, 0.0)
    with pytest.raises(ValueError):
        greedy_cover_partition(cloud.select(np.zeros(1, dtype=bool)), 1.0)


# ---------------------------------------------------------------------------
# separation
# ---------------------------------------------------------------------------

WBOX = Box([-10.0, -10.0], [20.0, 10.0])


def two_clump_cloud():
    pts = np.array([[0.0, 0.0], [0.2, 0.0], [10.0, 0.0], [10.2, 0.0]])
    cloud = AtomCloud(pts, np.full(4, 0.25), np.zeros(4, dtype=int))
    return cloud, [np.array([0, 1]), np.array([2, 3])]


def test_separation_keeps_distant_clusters():
    cloud, clusters = two_clump_cloud()
    live, boxes, dropped, margin = refine_and_separate(
        cloud, clusters, 0.1, WBOX, 1.0)
    assert dropped == 0.0 and margin > 0.0
    assert [idx.tolist() for idx in live] == [[0, 1], [2, 3]]
    lo = np.stack([b.lo for b in boxes])
    hi = np.stack([b.hi for b in boxes])
    assert first_box_clash(lo, hi) is None
    for idx, box in zip(live, boxes):
        assert np.all(box.contains(cloud.points[idx]))


def test_separation_drops_lighter_of_near_duplicate_pair():
    pts = np.array([[0.0, 0.0], [1e-9, 0.0], [5.0, 0.0]])
    cloud = AtomCloud(pts, [2.0, 1.0, 1.0], np.zeros(3, dtype=int))
    clusters = [np.array([0]), np.array([1, 2])]
    live, boxes, dropped, _ = refine_and_separate(cloud, clusters, 2.0, WBOX, 1.0)
    assert dropped == 1.0
    assert sorted(np.concatenate(live).tolist()) == [0, 2]


def test_separation_budget_guard():
    pts = np.array([[0.0, 0.0], [1e-9, 0.0], [5.0, 0.0]])
    cloud = AtomCloud(pts, [2.0, 1.0, 1.0], np.zeros(3, dtype=int))
    clusters = [np.array([0]), np.array([1, 2])]
    with pytest.raises(ValueError, match="separation drops need mass"):
        refine_and_separate(cloud, clusters, 0.5, WBOX, 1.0)


def test_separation_drops_interleaved_cluster_whole():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]])
    cloud = AtomCloud(pts, [1.0, 1.0, 0.5], np.zeros(3, dtype=int))
    clusters = [np.array([0, 1]), np.array([2])]
    live, boxes, dropped, _ = refine_and_separate(cloud, clusters, 1.0, WBOX, 1.0)
    # the middle atom's box nests inside the other cluster's box at every
    # margin, so the lighter cluster goes as a whole
    assert dropped == 0.5
    assert [idx.tolist() for idx in live] == [[0, 1]]
    with pytest.raises(ValueError, match="box-disjointness drops need mass"):
        refine_and_separate(cloud, clusters, 0.4, WBOX, 1.0)


def test_separation_needs_working_box_clearance():
    pts = np.array([[-10.0, 0.0], [5.0, 0.0]])
    cloud = AtomCloud(pts, [1.0, 1.0], np.zeros(2, dtype=int))
    clusters = [np.array([0]), np.array([1])]
    with pytest.raises(ValueError, match="clearance"):
        refine_and_separate(cloud, clusters, 1.0, WBOX, 1.0)


# ---------------------------------------------------------------------------
# full scheme, flat segment
# ---------------------------------------------------------------------------

def test_zero_datum_returns_zero_field():
    nu = segment_cloud(60)
    res = run_scheme(UBOX, nu, VERT, ScalarField(Const(0.0, 2)),
                     eta=0.1, delta=0.1)
    assert res.stage_log == [] and res.residual_bound == 0.0
    assert res.certified_grad_bound == 0.0 and res.certified_sup_bound == 0.0
    assert not res.truncated
    X = UBOX.sample(50, np.random.default_rng(0))
    assert np.all(res.u.eval(X) == 0.0)


def test_constant_datum_resolves_in_one_stage():
    nu = segment_cloud(80)
    res = run_scheme(UBOX, nu, VERT, ScalarField(Const(0.7, 2)),
                     eta=0.1, delta=0.1)
    assert len(res.stage_log) == 1
    du = res.u.grad(res.K.points) @ VERT.axis
    # the slope-1 plateau makes the derivative land exactly on the datum
    assert np.all(du == 0.7)
    assert res.residual_bound <= 1e-250
    assert not res.truncated


def test_linear_datum_decay_and_ledger():
    nu = segment_cloud(100)
    lam = coord0()
    res = run_scheme(UBOX, nu, VERT, lam, eta=0.5, delta=0.5)
    M = res.datum_bound
    t = res.params.t
    assert t == 0.32
    assert len(res.stage_log) >= 2
    for s in res.stage_log:
        assert s["residual_sup_after"] <= t ** (s["index"] + 1) * M * (1 + 1e-12)
    # mass ledger: kept plus dropped accounts for every input atom
    assert res.K.mass() + res.total_dropped() == pytest.approx(
        nu.mass(), abs=1e-12)
    assert res.drop_ledger[0]["total"] == res.initial_drop
    # final exactness at the retained atoms
    du = res.u.grad(res.K.points) @ VERT.axis
    err = np.abs(du - lam.eval(res.K.points))
    assert np.max(err) <= res.residual_bound
    assert res.certified_grad_bound < (1 + 0.5) * c_alpha(VERT.half_angle) * M
    assert res.certified_sup_bound <= 0.5


def test_certificates_dominate_grid_sups():
    nu = segment_cloud(100)
    lam = ScalarField(Sum([Const(0.5, 2),
                           Unary(SinP(), LinearForm([3.0, 0.0], 0.0))]))
    res = run_scheme(UBOX, nu, VERT, lam, eta=0.5, delta=0.5)
    G = UBOX.grid(150)
    vals = res.u.eval(G)
    grads = np.linalg.norm(res.u.grad(G), axis=1)
    assert np.abs(vals).max() <= res.certified_sup_bound
    assert grads.max() <= res.certified_grad_bound
    W = res.params.working_box
    outside = G[~W.contains(G)]
    assert np.all(res.u.eval(outside) == 0.0)
    assert np.all(res.u.grad(outside) == 0.0)


def test_truncation_reports_honestly():
    nu = segment_cloud(100)
    res = run_scheme(UBOX, nu, VERT, coord0(), eta=0.5, delta=0.5,
                     stop={"max_stage": 2})
    assert len(res.stage_log) == 2
    assert res.truncated
    du = res.u.grad(res.K.points) @ VERT.axis
    err = np.abs(du - res.K.points[:, 0])
    assert np.max(err) <= res.residual_bound
    assert res.residual_bound <= res.params.t ** 2 * res.datum_bound * (1 + 1e-12)


def test_min_stage_keeps_logging_after_exactness():
    nu = segment_cloud(60)
    res = run_scheme(UBOX, nu, VERT, ScalarField(Const(0.7, 2)),
                     eta=0.1, delta=0.1, stop={"min_stage": 4})
    assert len(res.stage_log) == 4
    assert all(s["residual_sup_after"] == 0.0 for s in res.stage_log)
    assert not res.truncated


def test_initial_refine_cuts_atoms_outside_working_box():
    nu = segment_cloud(100)
    narrow = Box([-1.0, -1.0], [0.845, 2.0])
    res = run_scheme(narrow, nu, VERT, ScalarField(Const(1.0, 2)),
                     eta=0.5, delta=0.5)
    assert res.initial_drop == pytest.approx(0.15, abs=0.03)
    assert np.all(res.K.points[:, 0] < 0.845)
    assert res.K.mass() + res.total_dropped() == pytest.approx(1.0, abs=1e-12)


def test_initial_refine_budget_guard():
    nu = segment_cloud(100)
    half = Box([-1.0, -1.0], [0.5, 2.0])
    with pytest.raises(ValueError, match="cannot refine"):
        run_scheme(half, nu, VERT, ScalarField(Const(1.0, 2)),
                   eta=0.5, delta=0.5)


def test_rejects_nonpositive_budgets():
    nu = segment_cloud(10)
    with pytest.raises(ValueError):
        run_scheme(UBOX, nu, VERT, coord0(), eta=0.0, delta=0.5)
    with pytest.raises(ValueError):
        run_scheme(UBOX, nu, VERT, coord0(), eta=0.5, delta=-1.0)


def test_curved_graph_with_foreign_axis_is_rejected():
    m = ModelMeasure(OMEGA, [(sine_graph(), 1.0)])
    nu = sample_atoms(m, 60)
    tilted = Cone([math.sin(0.15), math.cos(0.15)], math.pi / 6)
    with pytest.raises(ValueError, match="carrier's own axis"):
        run_scheme(UBOX, nu, tilted, ScalarField(Const(1.0, 2)),
                   eta=0.5, delta=0.5)


def test_certs_override_solves_foreign_axis_with_atom_combs():
    # same configuration as above, but the caller certifies the retained
    # atoms directly: finite sets are cone-null, so atom combs apply
    m = ModelMeasure(OMEGA, [(sine_graph(), 1.0)])
    nu = sample_atoms(m, 60)
    tilted = Cone([math.sin(0.15), math.cos(0.15)], math.pi / 6)
    lam = ScalarField(Const(1.0, 2))
    res = run_scheme(UBOX, nu, tilted, lam, eta=0.5, delta=0.5,
                     certs={0: atoms_certificate(tilted)})
    du = res.u.grad(res.K.points) @ tilted.axis
    assert np.max(np.abs(du - 1.0)) <= res.residual_bound
    assert res.certified_grad_bound < 1.5 * c_alpha(math.pi / 6)


# ---------------------------------------------------------------------------
# full scheme, curved graph and union
# ---------------------------------------------------------------------------

def test_sine_graph_scheme():
    m = ModelMeasure(OMEGA, [(sine_graph(), 1.0)])
    nu = sample_atoms(m, 150)
    lam = coord0()
    res = run_scheme(UBOX, nu, VERT, lam, eta=0.5, delta=0.5)
    du = res.u.grad(res.K.points) @ VERT.axis
    err = np.abs(du - lam.eval(res.K.points))
    assert np.max(err) <= res.residual_bound
    assert res.residual_bound <= 1e-9 * res.datum_bound * (1 + 1e-12)


def vertical_segment(x=1.6):
    return GraphCarrier(
        origin=[x, 0.0], frame=[[0.0, 1.0]], axis=[1.0, 0.0],
        profile=Const(0.0, 1), domain=Box([0.0], [1.0]),
    )


def union_cloud(cantor, seg, n_cantor=150, n_seg=120):
    """Half the mass on deep sparse attractor cells, half on the segment."""
    a = sparse_ifs_atoms(cantor, 45, n_cantor, weight=0.5, seed=2)
    m = ModelMeasure(OMEGA, [(seg, 1.0)])
    b = sample_atoms(m, n_seg)
    return AtomCloud(
        np.vstack([a.points, b.points]),
        np.concatenate([a.weights, 0.5 * b.weights]),
        np.concatenate([np.zeros(a.size, dtype=int),
                        np.ones(b.size, dtype=int)]),
        {0: a.params[0], 1: b.params[0]},
        [cantor, seg],
    )


def test_union_of_cantor_and_segment():
    cantor = cantor_middle_thirds(cap=64)
    seg = vertical_segment()
    nu = union_cloud(cantor, seg)
    lam = ScalarField(Sum([Const(0.2, 2), Scale(0.5, LinearForm([1.0, 0.0]))]))
    res = run_scheme(UBOX, nu, HORIZ, lam, eta=0.5, delta=0.5)
    assert set(np.unique(res.K.piece_ids)) == {0, 1}
    du = res.u.grad(res.K.points) @ HORIZ.axis
    err = np.abs(du - lam.eval(res.K.points))
    assert np.max(err) <= res.residual_bound
    assert res.residual_bound <= 1e-9 * res.datum_bound * (1 + 1e-12)
    M = res.datum_bound
    t = res.params.t
    for s in res.stage_log:
        assert s["residual_sup_after"] <= t ** (s["index"] + 1) * M * (1 + 1e-12)
    assert res.K.mass() + res.total_dropped() == pytest.approx(
        nu.mass(), abs=1e-12)


def test_deep_sparse_cantor_reaches_tiny_residual():
    cantor = cantor_middle_thirds(cap=64)
    nu = sparse_ifs_atoms(cantor, 50, 300, seed=5)
    lam = ScalarField(Sum([Const(0.5, 2),
                           Unary(SinP(), LinearForm([3.0, 0.0], 0.0))]))
    res = run_scheme(UBOX, nu, HORIZ, lam, eta=0.5, delta=0.5)
    du = res.u.grad(res.K.points) @ HORIZ.axis
    err = np.abs(du - lam.eval(res.K.points))
    assert np.max(err) <= res.residual_bound
    assert res.residual_bound <= 1e-9 * res.datum_bound * (1 + 1e-12)
    assert len(res.stage_log) >= 10
