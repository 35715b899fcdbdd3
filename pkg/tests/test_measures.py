import math

import numpy as np
import pytest

from lusinfields.exprs import Const, Scale, SinP, Unary, coordinate
from lusinfields.geometry import Box, Cone, build_direction_net
from lusinfields.measures import (
    AtomCloud,
    ConeNullRejection,
    GraphCarrier,
    IFSCarrier,
    ModelMeasure,
    atoms_certificate,
    bundle_at,
    cloud_bundles,
    cone_null_certificate,
    empirical_cone_null_test,
    inner_regular_refine,
    sample_atoms,
    sparse_ifs_atoms,
)


def unit_segment(lo=0.0, hi=1.0):
    """The segment {(s, 0): s in [lo, hi]} as a graph over the x-axis."""
    return GraphCarrier(
        origin=[0.0, 0.0], frame=[[1.0, 0.0]], axis=[0.0, 1.0],
        profile=Const(0.0, 1), domain=Box([lo], [hi]),
    )


def sine_graph(amp=0.5):
    return GraphCarrier(
        origin=[0.0, 0.0], frame=[[1.0, 0.0]], axis=[0.0, 1.0],
        profile=Scale(amp, Unary(SinP(), coordinate(0, 1))),
        domain=Box([0.0], [2.0]),
    )


def cantor_middle_thirds(cap=10):
    return IFSCarrier(
        ratios=[1 / 3, 1 / 3],
        translations=[[0.0, 0.0], [2 / 3, 0.0]],
        axis=[1.0, 0.0],
        base_box=Box([0.0, 0.0], [1.0, 0.0]),
        generation_cap=cap,
    )


OMEGA = Box([-1.0, -1.0], [3.0, 2.0])


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_segment_sampling_uniform_weights():
    m = ModelMeasure(OMEGA, [(unit_segment(), 1.0)])
    cloud = sample_atoms(m, 100)
    assert cloud.size == 100
    np.testing.assert_array_equal(cloud.weights, 0.01)
    np.testing.assert_array_equal(cloud.points[:, 1], 0.0)
    assert cloud.mass() == pytest.approx(1.0, abs=1e-12)


def test_cantor_generation5_atoms():
    m = ModelMeasure(OMEGA, [(cantor_middle_thirds(), 1.0)])
    cloud = sample_atoms(m, 5)
    assert cloud.size == 32
    np.testing.assert_array_equal(cloud.weights, 1.0 / 32)
    # atoms are generation-5 cell centers: first one at (1/3)^5 / 2
    first = 0.5 / 3 ** 5
    assert cloud.points[:, 0].min() == pytest.approx(first, rel=1e-12)
    np.testing.assert_array_equal(cloud.points[:, 1], 0.0)


def test_union_piece_masses():
    m = ModelMeasure(OMEGA, [(unit_segment(), 0.3), (cantor_middle_thirds(), 0.7)])
    cloud = sample_atoms(m, 6)
    assert cloud.piece_mass(0) == pytest.approx(0.3, abs=1e-12)
    assert cloud.piece_mass(1) == pytest.approx(0.7, abs=1e-12)
    assert cloud.mass() == pytest.approx(1.0, abs=1e-9)


def test_graph_weights_follow_surface_density():
    m = ModelMeasure(OMEGA, [(sine_graph(), 1.0)])
    cloud = sample_atoms(m, 200)
    w = cloud.weights
    Y = cloud.params[0]
    dens = np.sqrt(1 + (0.5 * np.cos(Y[:, 0])) ** 2)
    np.testing.assert_allclose(w / w.sum(), dens / dens.sum(), rtol=1e-12)


def test_sampling_budget_rejected():
    m = ModelMeasure(OMEGA, [(cantor_middle_thirds(cap=30), 1.0)])
    with pytest.raises(ValueError, match="budget"):
        sample_atoms(m, 30, max_atoms=1000)


def test_sparse_ifs_atoms_distinct_and_deterministic():
    c = cantor_middle_thirds(cap=8)
    cloud = sparse_ifs_atoms(c, generation=25, count=64, seed=3)
    again = sparse_ifs_atoms(c, generation=25, count=64, seed=3)
    np.testing.assert_array_equal(cloud.points, again.points)
    assert cloud.size == 64
    assert np.unique(cloud.points[:, 0]).size == 64
    # all centers genuinely in the attractor's base box
    assert np.all((cloud.points[:, 0] >= 0) & (cloud.points[:, 0] <= 1))


def test_carrier_must_sit_inside_omega():
    with pytest.raises(ValueError, match="inside omega"):
        ModelMeasure(Box([0.0, -1.0], [1.0, 1.0]), [(unit_segment(), 1.0)])


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

def test_bundle_on_segment():
    m = ModelMeasure(OMEGA, [(unit_segment(), 1.0)])
    L = bundle_at(m, np.array([0.37, 0.0]))
    assert L.dim == 1
    np.testing.assert_allclose(np.abs(L.basis[0]), [1.0, 0.0], atol=1e-12)


def test_bundle_on_cantor_is_zero():
    m = ModelMeasure(OMEGA, [(cantor_middle_thirds(), 1.0)])
    cloud = sample_atoms(m, 4)
    # generation-4 cell centers sit half a child cell away from the attractor
    L = bundle_at(m, cloud.points[5], tol=3.0 ** -5)
    assert L.dim == 0


def test_bundle_on_sine_graph_matches_fd():
    m = ModelMeasure(OMEGA, [(sine_graph(), 1.0)])
    x = np.array([0.0, 0.0])
    L = bundle_at(m, x)
    v = L.basis[0] * np.sign(L.basis[0, 0])
    np.testing.assert_allclose(v, np.array([1.0, 0.5]) / math.sqrt(1.25),
                               rtol=1e-12)
    # derived check: slope via finite differences of the profile
    h = 1e-6
    prof = sine_graph().profile
    slope_fd = (prof.eval(np.array([[h]])) - prof.eval(np.array([[-h]])))[0] / (2 * h)
    assert v[1] / v[0] == pytest.approx(slope_fd, abs=1e-9)


def test_bundle_at_rejects_unknown_point():
    m = ModelMeasure(OMEGA, [(unit_segment(), 1.0)])
    with pytest.raises(ValueError, match="does not belong"):
        bundle_at(m, np.array([0.5, 0.5]))


def test_bundles_never_full_and_net_transversal():
    # every atom's bundle must be proper and transverse to some net direction
    m = ModelMeasure(OMEGA, [
        (unit_segment(), 0.4), (sine_graph(), 0.3), (cantor_middle_thirds(), 0.3),
    ])
    cloud = sample_atoms(m, 5)
    net = build_direction_net(2, math.pi / 4)
    for L in cloud_bundles(cloud):
        assert L.dim < cloud.dim
        assert net.first_transverse(L) >= 0


# ---------------------------------------------------------------------------
# cone-null certificates
# ---------------------------------------------------------------------------

def test_segment_certified_for_vertical_cone():
    cert = cone_null_certificate(unit_segment(), Cone([0.0, 1.0], math.pi / 4))
    assert cert.kind == "graph-axis"
    assert cert.lip_transverse <= 1e-12


def test_cantor_certificate_cover_decay():
    cert = cone_null_certificate(cantor_middle_thirds(),
                                 Cone([1.0, 0.0], math.pi / 4))
    assert cert.kind == "ifs"
    assert cert.ratio_sum == pytest.approx(2 / 3, rel=1e-15)
    # frozen: (2/3)^8 with unit initial length
    assert cert.cover_length(8) == pytest.approx(0.03901844231062338, rel=1e-12)
    # independent oracle: sum the projected lengths of the actual cells
    c = cantor_middle_thirds()
    lo, hi = c.cells(6)
    total = float(np.sum(hi[:, 0] - lo[:, 0]))
    assert total == pytest.approx(cert.cover_length(6), abs=1e-12)


def test_steep_graph_rejected():
    steep = GraphCarrier(
        origin=[0.0, 0.0], frame=[[1.0, 0.0]], axis=[0.0, 1.0],
        profile=Scale(2.0, coordinate(0, 1)), domain=Box([0.0], [1.0]),
    )
    with pytest.raises(ConeNullRejection, match="lip_profile"):
        cone_null_certificate(steep, Cone([0.0, 1.0], math.pi / 4))


def test_affine_regraph_over_tilted_cone():
    # flat segment, cone axis tilted 30 degrees from the carrier axis
    seg = unit_segment()
    e = np.array([math.sin(0.5), math.cos(0.5)])
    cert = cone_null_certificate(seg, Cone(e, math.pi / 4))
    assert cert.kind == "graph-transverse"
    # defect form vanishes on the carrier and has slope 1 along e
    pts = seg.embed(np.linspace(0.1, 0.9, 7)[:, None])
    np.testing.assert_allclose(cert.defect_form.eval(pts), 0.0, atol=1e-12)
    g = cert.defect_form.grad(pts[:1])[0]
    assert g @ e == pytest.approx(1.0, rel=1e-12)
    # transverse slope equals tan(angle between axes) here
    assert cert.lip_transverse == pytest.approx(math.tan(0.5), rel=1e-9)


def test_affine_regraph_rejects_near_parallel_cone():
    seg = unit_segment()
    # cone axis almost along the segment: tangent inside the cone
    with pytest.raises(ConeNullRejection, match="not transverse"):
        cone_null_certificate(seg, Cone([1.0, 0.05], math.pi / 4))


def test_sampled_certificate_for_curved_graph():
    # axis tilted 0.15 rad off vertical; tangents have slope at most 0.5,
    # at least 0.61 rad away, so the pi/6 cone misses every tangent line
    cert = cone_null_certificate(
        sine_graph(), Cone([math.sin(0.15), math.cos(0.15)], math.pi / 6))
    assert cert.kind == "graph-sampled"
    assert cert.sample_margin > 0


def test_atoms_certificate_any_cone():
    cert = atoms_certificate(Cone([1.0, 0.0], math.pi / 3))
    assert cert.kind == "atoms"


# ---------------------------------------------------------------------------
# empirical probe
# ---------------------------------------------------------------------------

def test_probe_transverse_segment_decays():
    rep = empirical_cone_null_test(
        unit_segment(), Cone([0.0, 1.0], math.pi / 4), trials=80, seed=1)
    assert rep["decaying"]
    assert rep["estimates"][-1] <= 0.35 * rep["estimates"][0] + 1e-4


def test_probe_parallel_segment_flagged():
    rep = empirical_cone_null_test(
        unit_segment(), Cone([1.0, 0.0], math.pi / 4), trials=80, seed=1)
    assert not rep["decaying"]
    assert rep["estimates"][-1] > 0.02


def test_probe_cantor_decays():
    rep = empirical_cone_null_test(
        cantor_middle_thirds(cap=6), Cone([1.0, 0.0], math.pi / 4),
        trials=80, seed=2)
    assert rep["decaying"]


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

def test_refine_drop_nothing():
    m = ModelMeasure(OMEGA, [(unit_segment(), 1.0)])
    cloud = sample_atoms(m, 100)
    out, log = inner_regular_refine(cloud, 0.5, [("none", np.zeros(100, bool))])
    assert out.size == 100
    assert log.total == 0.0


def test_refine_arithmetic_and_conservation():
    m = ModelMeasure(OMEGA, [(unit_segment(), 1.0)])
    cloud = sample_atoms(m, 100)
    mask = np.zeros(100, bool)
    mask[[3, 50, 97]] = True
    out, log = inner_regular_refine(cloud, 0.05, [("marked", mask)])
    assert out.size == 97
    assert log.total == pytest.approx(0.03, abs=1e-12)
    assert out.mass() + log.total == pytest.approx(cloud.mass(), abs=1e-12)
    # provenance survives the selection
    assert out.params[0].shape[0] == 97


def test_refine_infeasible_budget_names_predicate():
    m = ModelMeasure(OMEGA, [(unit_segment(), 1.0)])
    cloud = sample_atoms(m, 100)
    mask = np.zeros(100, bool)
    mask[[3, 50, 97]] = True
    with pytest.raises(ValueError, match="'marked'"):
        inner_regular_refine(cloud, 0.01, [("marked", mask)])


def test_refine_orders_drops_smallest_first():
    cloud = AtomCloud(
        points=np.array([[0.1, 0.0], [0.2, 0.0], [0.3, 0.0]]),
        weights=np.array([0.3, 0.1, 0.2]),
        piece_ids=np.zeros(3, int),
    )
    mask = np.array([True, True, True])
    with pytest.raises(ValueError):
        inner_regular_refine(cloud, 0.5, [("all", mask)])
    out, log = inner_regular_refine(cloud, 0.7, [("all", mask)])
    assert out.size == 0
    label, idx, mass = log.entries[0]
    assert idx == [1, 2, 0]
    assert mass == pytest.approx(0.6, abs=1e-12)
