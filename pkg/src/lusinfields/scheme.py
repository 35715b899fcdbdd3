"""Residual-correction scheme: realize a datum as a directional derivative.

Given a finite measure (an atom cloud on certified carriers), a cone
C(e, alpha) and Lipschitz data lam, the scheme builds a compactly supported
C^1 function u with ∂u/∂e equal to lam at every retained atom up to a
geometrically decaying truncation bound, while keeping certified gradient
and sup bounds.  Each stage clusters the retained atoms at the residual's
oscillation scale, corrects the residual by one locally constant slope per
cluster (a cutoff times a width function), and drops a budgeted sliver of
mass to keep the cluster neighborhoods disjoint.

The stage geometry shrinks like t^n for a ratio t chosen from the slack
budgets, so the summed gradient certificates stay below (1 + delta) * c_alpha
times the datum bound and the summed sup certificates stay below eta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exprs import Const, Product, RegionCorrection, Scale, ScalarField, Sum
from .exprs import bump as bump_expr
from .geometry import Box, c_alpha, first_box_clash
from .measures import cone_null_certificate, inner_regular_refine
from .width import build_width

_T_GRID = [round(0.49 - 0.01 * i, 2) for i in range(49)]


def _t_ok(t, slack):
    return 1.0 / (1.0 - t) + t ** 4 / (1.0 - t * t) < 1.0 + slack


def choose_t(delta, eta):
    """Largest grid ratio satisfying the geometric stage inequality.

    The base grid is 0.49 down to 0.01; for very small slacks it continues
    through finer decades, since the inequality needs roughly t < slack.
    """
    if delta <= 0 or eta <= 0:
        raise ValueError("slacks must be positive")
    slack = min(delta, eta)
    for t in _T_GRID:
        if _t_ok(t, slack):
            return t
    for k in range(3, 13):
        for j in range(9, 0, -1):
            t = j * 10.0 ** -k
            if _t_ok(t, slack):
                return t
    raise ValueError(f"no stage ratio above 1e-12 fits slack {slack:g}")


@dataclass
class SchemeParams:
    eta: float
    delta: float
    t: float
    tau: float
    max_stage: int
    residual_tol: float
    working_box: Box

    def __post_init__(self):
        if not _t_ok(self.t, min(self.delta, self.eta)):
            raise ValueError("stage ratio violates the geometric inequality")


@dataclass
class Stage:
    index: int
    retained: object
    clusters: list
    correction: ScalarField
    dropped_mass: float
    zeta: float
    rho: float
    grad_cert: float
    sup_cert: float
    residual_sup_after: float

    def summary(self):
        return {
            "index": self.index,
            "clusters": len(self.clusters),
            "dropped_mass": self.dropped_mass,
            "zeta": self.zeta,
            "rho": self.rho,
            "grad_cert": self.grad_cert,
            "sup_cert": self.sup_cert,
            "residual_sup_after": self.residual_sup_after,
            "retained_mass": self.retained.mass(),
        }


@dataclass
class SchemeResult:
    u: ScalarField
    K: object
    residual_bound: float
    certified_grad_bound: float
    certified_sup_bound: float
    stage_log: list
    params: SchemeParams
    datum_bound: float
    truncated: bool
    initial_drop: float
    drop_ledger: list = field(default_factory=list)

    def total_dropped(self):
        return self.initial_drop + sum(s["dropped_mass"] for s in self.stage_log)


def modulus_radius(lam, cloud, bound, box=None):
    """Distance below which the datum certifiably oscillates less than
    `bound`, floored at the cloud's closest distinct-atom spacing (pairs
    nearer than that do not exist, so the floor never weakens the
    guarantee on the cloud)."""
    if bound <= 0:
        raise ValueError("oscillation bound must be positive")
    if box is None:
        bb = cloud.bounding_box()
        box = bb.inflate(0.1 * max(bb.diameter(), 1e-9))
    lip = lam.grad_sup_certificate(box)
    diam = box.diameter()
    if lip <= 0.0 or bound / lip >= diam:
        return diam
    raw = bound / lip
    if cloud.size > 1:
        d, _ = cKDTree(cloud.points).query(cloud.points, k=2)
        nn = d[:, 1]
        pos = nn[nn > 0]
        if pos.size:
            raw = max(raw, 0.99 * float(pos.min()))
    return raw


def greedy_cover_partition(cloud, rho):
    """Farthest-point cluster partition with diameter at most rho.

    Centers are picked greedily (first atom, then repeatedly the atom
    farthest from all chosen centers while that distance exceeds rho/2);
    each atom joins the earliest center within rho/2.  Ties break by atom
    index, so the partition is deterministic.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    pts = cloud.points
    n = pts.shape[0]
    if n == 0:
        raise ValueError("cannot partition an empty cloud")
    centers = [0]
    dist = np.linalg.norm(pts - pts[0], axis=1)
    while True:
        far = int(np.argmax(dist))
        if dist[far] <= 0.5 * rho:
            break
        centers.append(far)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[far], axis=1))
    # disjointify: each atom joins the earliest center within rho/2
    assign = np.full(n, -1, dtype=int)
    for ci, c in enumerate(centers):
        near = (np.linalg.norm(pts - pts[c], axis=1) <= 0.5 * rho) \
            & (assign == -1)
        assign[near] = ci
    return [np.flatnonzero(assign == ci) for ci in range(len(centers))]


def _cluster_oscillation(values, clusters):
    worst = 0.0
    for idx in clusters:
        v = values[idx]
        worst = max(worst, float(v.max() - v.min()))
    return worst


def _cross_distance_estimate(pts, owner, rho):
    """Smallest distance between atoms of different clusters among nearest
    neighbors; an overestimate is harmless because box disjointness is
    re-checked explicitly."""
    if pts.shape[0] < 2:
        return rho
    d, j = cKDTree(pts).query(pts, k=2)
    cross = owner[j[:, 1]] != owner
    if not np.any(cross):
        return rho
    return float(d[cross, 1].min())


def refine_and_separate(cloud, clusters, stage_budget, working_box, rho):
    """Drop atoms until clusters are separated and their boxes disjoint.

    Cross-cluster atom pairs closer than a floor of 1e-6 * rho lose their
    lighter member.  Cluster boxes are bounding boxes inflated by a margin
    capped by the estimated cross-cluster distance and by the working-box
    clearance; an overlapping pair first shrinks the margin, and only if
    boxes still overlap near the separation floor (interleaved bounding
    boxes) is the lighter cluster dropped whole.  Total dropped mass must
    stay below the stage budget.
    """
    alive = np.ones(cloud.size, dtype=bool)
    owner = np.full(cloud.size, -1, dtype=int)
    for ci, idx in enumerate(clusters):
        owner[idx] = ci
    dropped = 0.0
    floor = 1e-6 * rho

    pairs = sorted(cKDTree(cloud.points).query_pairs(floor))
    for a, b in pairs:
        if owner[a] == owner[b] or not (alive[a] and alive[b]):
            continue
        victim = a if cloud.weights[a] <= cloud.weights[b] else b
        alive[victim] = False
        dropped += float(cloud.weights[victim])
        if dropped >= stage_budget:
            raise ValueError(
                f"separation drops need mass {dropped:g}, stage budget is "
                f"{stage_budget:g}; increase resolution or eta")

    margin = None
    while True:
        live = [idx[alive[idx]] for idx in clusters if np.any(alive[idx])]
        pts = cloud.points[alive]
        d_est = _cross_distance_estimate(pts, owner[alive], rho)
        clearance = float(min(
            (pts.min(axis=0) - working_box.lo).min(),
            (working_box.hi - pts.max(axis=0)).min()))
        if clearance <= 0:
            raise ValueError("no clearance between atoms and the working box")
        cap = min(d_est / 3.0, 0.9 * clearance)
        margin = cap if margin is None else min(margin, cap)

        tight = np.stack([[cloud.points[idx].min(axis=0),
                           cloud.points[idx].max(axis=0)] for idx in live])
        while True:
            clash = first_box_clash(tight[:, 0] - margin, tight[:, 1] + margin)
            if clash is None:
                boxes = [Box(tight[i, 0] - margin, tight[i, 1] + margin)
                         for i in range(len(live))]
                return live, boxes, dropped, margin
            if margin > floor / 3.0:
                margin *= 0.5
                continue
            break

        i, j = clash
        mi = float(cloud.weights[live[i]].sum())
        mj = float(cloud.weights[live[j]].sum())
        victim = live[i] if mi <= mj else live[j]
        alive[victim] = False
        dropped += float(cloud.weights[victim].sum())
        if dropped >= stage_budget:
            raise ValueError(
                f"box-disjointness drops need mass {dropped:g}, stage budget "
                f"is {stage_budget:g}; increase resolution or eta")


def build_stage(n, cloud, clusters, boxes, margin, residual, cone, params,
                certs):
    """One correction: u_{n+1} = sum_i value_i * cutoff_i * width_i.

    The cutoff is exactly 1 (with zero gradient) on an inner box holding the
    cluster, the width slope along the axis is exactly 1 at the atoms, so
    the correction's axis derivative at each cluster atom is exactly the
    cluster value.  The rise cap zeta is set after the cutoffs so their
    certified gradients scale it down.
    """
    chis = []
    chi_grad = 0.0
    for idx, box in zip(clusters, boxes):
        inner = Box.bounding(cloud.points[idx]).inflate(0.5 * margin)
        chi = bump_expr(box, inner)
        chis.append(chi)
        chi_grad = max(chi_grad, chi.grad_norm_bound(box))
    zeta = params.tau * params.t ** (n + 4) / (1.0 + chi_grad)

    records = []
    regions = []
    grad_cert = 0.0
    sup_cert = 0.0
    for idx, box, chi in zip(clusters, boxes, chis):
        mask = np.zeros(cloud.size, dtype=bool)
        mask[idx] = True
        sub = cloud.select(mask)
        pid = int(cloud.piece_ids[idx[0]])
        w = build_width(certs[pid], sub, cone, zeta)
        rep_local = int(np.argmax(cloud.weights[idx]))
        rep = int(idx[rep_local])
        a = float(residual[rep])
        regions.append(([box], Scale(a, Product(chi, w.phi.expr))))
        phi_sup = w.phi.expr.sup_bound(box)
        phi_grad = w.phi.expr.grad_norm_bound(box)
        g = abs(a) * (chi.grad_norm_bound(box) * phi_sup + phi_grad)
        grad_cert = max(grad_cert, g * (1 + 8 * np.finfo(float).eps))
        sup_cert = max(sup_cert, abs(a) * phi_sup)
        records.append({"idx": idx, "pid": pid, "box": box, "chi": chi,
                        "width": w, "representative": rep, "value": a})

    correction = ScalarField(
        RegionCorrection(regions) if regions else Const(0.0, cloud.dim),
        support_box=params.working_box)
    return Stage(
        index=n, retained=cloud, clusters=records, correction=correction,
        dropped_mass=0.0, zeta=zeta, rho=0.0,
        grad_cert=grad_cert, sup_cert=sup_cert, residual_sup_after=0.0,
    )


def _piece_certificates(cloud, cone):
    certs = {}
    for pid in np.unique(cloud.piece_ids):
        carrier = cloud.carriers[int(pid)]
        cert = cone_null_certificate(carrier, cone)
        if cert.kind == "graph-sampled":
            raise ValueError(
                "curved carrier re-graphed over a foreign axis admits no "
                "width construction; use the carrier's own axis")
        certs[int(pid)] = cert
    return certs


def run_scheme(U_box, nu, cone, lam, eta, delta, stop=None, certs=None):
    """Iterate residual corrections until the certified bound is tiny.

    Returns u with ∂u/∂e = lam at every atom of the final retained cloud up
    to `residual_bound`, dropped mass below eta, certified gradient below
    (1 + delta) * c_alpha * M and certified sup below eta, where M is the
    sup of |lam| over the input atoms.

    `stop` accepts `max_stage`, `residual_tol` (default 1e-9 * M), and
    `min_stage` (keep logging stages after the residual reaches zero, for
    decay studies).  `certs` maps piece ids to cone-null certificates; by
    default each carrier is certified against the cone directly, which
    rejects curved graphs over a foreign axis.  The assembly passes atom
    certificates for such pieces instead.
    """
    stop = dict(stop or {})
    if eta <= 0 or delta <= 0:
        raise ValueError("eta and delta must be positive")

    lam_atoms = lam.eval(nu.points)
    M = float(np.max(np.abs(lam_atoms))) if nu.size else 0.0

    bb = nu.bounding_box()
    W = bb.inflate(0.1 * max(bb.diameter(), 1e-6)).intersect(U_box)
    # atoms hugging the boundary would leave no room for cutoff supports,
    # so the kept cloud stays a real shell away from the working box
    shell = 1e-6 * max(W.diameter(), 1.0)
    inside = W.contains(nu.points, margin=shell)
    K0, log0 = inner_regular_refine(nu, 0.5 * eta,
                                    [("outside working box", ~inside)])
    ledger = [log0.to_dict()]

    max_stage = int(stop.get("max_stage", 60))
    min_stage = int(stop.get("min_stage", 0))
    residual_tol = stop.get("residual_tol")
    if residual_tol is None:
        residual_tol = 1e-9 * M

    if M == 0.0:
        params = SchemeParams(eta, delta, choose_t(delta, eta), 1.0,
                              max_stage, residual_tol, W)
        return SchemeResult(
            u=ScalarField(Const(0.0, nu.dim), support_box=W), K=K0,
            residual_bound=0.0, certified_grad_bound=0.0,
            certified_sup_bound=0.0, stage_log=[], params=params,
            datum_bound=0.0, truncated=False, initial_drop=log0.total,
            drop_ledger=ledger)

    t = choose_t(delta, eta)
    tau = min(1.0, delta / M, eta / M)
    params = SchemeParams(eta, delta, t, tau, max_stage, residual_tol, W)
    if certs is None:
        certs = _piece_certificates(nu, cone)
    e = cone.axis

    cloud = K0
    residual = lam.eval(cloud.points)
    stages = []
    stage_log = []
    n = 0
    while t ** n * M > residual_tol and n < max_stage:
        target = t ** (n + 1) * M
        rho = modulus_radius(lam, cloud, target, box=W)
        while True:
            clusters = []
            for pid in np.unique(cloud.piece_ids):
                sel = np.flatnonzero(cloud.piece_ids == pid)
                part = greedy_cover_partition(cloud.select(
                    np.isin(np.arange(cloud.size), sel)), rho)
                clusters.extend(sel[idx] for idx in part)
            if _cluster_oscillation(residual, clusters) <= 0.9 * target:
                break
            rho *= 0.5

        budget = eta / 2.0 ** (n + 2)
        live, boxes, dropped, margin = refine_and_separate(
            cloud, clusters, budget, W, rho)
        keep = np.zeros(cloud.size, dtype=bool)
        for idx in live:
            keep[idx] = True
        kept_cloud = cloud.select(keep)
        old_index = np.flatnonzero(keep)
        remap = {int(o): i for i, o in enumerate(old_index)}
        live_local = [np.array([remap[int(j)] for j in idx]) for idx in live]
        residual = residual[keep]

        stage = build_stage(n, kept_cloud, live_local,
                            boxes, margin, residual, cone, params, certs)
        stage.dropped_mass = dropped
        stage.rho = rho

        du = stage.correction.grad(kept_cloud.points) @ e
        for rec in stage.clusters:
            got = du[rec["idx"]]
            if np.max(np.abs(got - rec["value"])) > 1e-12 * max(1.0, M):
                raise RuntimeError("stage correction lost atom exactness")
        residual = residual - du
        sup_after = float(np.max(np.abs(residual)))
        if sup_after > target * (1 + 1e-12):
            raise RuntimeError(
                f"stage {n}: residual {sup_after:g} above bound {target:g}")
        stage.residual_sup_after = sup_after

        stages.append(stage)
        stage_log.append(stage.summary())
        cloud = kept_cloud
        n += 1
        if sup_after <= residual_tol and n >= min_stage:
            break

    u_expr = Sum([s.correction.expr for s in stages]) if stages \
        else Const(0.0, nu.dim)
    u = ScalarField(u_expr, support_box=W)
    # certify the residual from a fresh evaluation of the assembled field:
    # the carried residual accumulates stage by stage in a different
    # floating-point order, and the certificate must cover what a verifier
    # recomputing from u will actually see
    exact_sup = float(np.max(np.abs(residual)))
    if stages and cloud.size:
        final = lam.eval(cloud.points) - (u.grad(cloud.points) @ e)
        final_sup = float(np.max(np.abs(final)))
        if abs(final_sup - exact_sup) > 1e-10 * max(1.0, M):
            raise RuntimeError(
                "carried residual and re-evaluated residual disagree")
        exact_sup = max(exact_sup, final_sup)
    residual_bound = min(t ** n * M, exact_sup * (1 + 1e-12) + 1e-300)
    grad_cert = math.fsum(s.grad_cert for s in stages)
    sup_cert = math.fsum(s.sup_cert for s in stages)
    limit = (1 + delta) * c_alpha(cone.half_angle) * M
    if grad_cert >= limit:
        raise RuntimeError(
            f"summed gradient certificates {grad_cert:g} reach the "
            f"(1+delta) c_alpha M limit {limit:g}")
    if sup_cert > eta:
        raise RuntimeError("summed sup certificates exceed eta")

    return SchemeResult(
        u=u, K=cloud,
        residual_bound=residual_bound,
        certified_grad_bound=grad_cert, certified_sup_bound=sup_cert,
        stage_log=stage_log, params=params, datum_bound=M,
        truncated=residual_bound > residual_tol, initial_drop=log0.total,
        drop_ledger=ledger)
