"""Assemble vector fields and maps from per-direction scalar solves.

The divergence solver partitions the atoms by the first net direction
transverse to each atom's bundle subspace, localizes every group inside its
own inflated box with a cutoff, and runs the scalar residual scheme per
group with the localized datum.  The sum V = sum_j u_j v_j then satisfies
div V = f at every retained atom because exactly one group's field is
active there, with certified Lipschitz bound below (1 + delta) * max|f| and
certified sup bound below eps.  The dropped mass splits into three budgeted
parts: transversality drops, separation drops, and the per-group scheme
budgets eps / (3N).

The Jacobian solver is the same pipeline applied to g - 1: the map
Phi = Id + sum u_j v_j has rank-one Jacobian updates with pairwise disjoint
supports, so det DPhi = 1 + div(sum u_j v_j) everywhere, and equals g on
the retained atoms.  Background fields and push-forwards under an analytic
diffeomorphism reduce to the two base solvers by shifting the datum and by
transporting it with the inverse map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exprs import (
    ClampProf,
    ComposeVec,
    Const,
    LinearForm,
    MapField,
    Product,
    Quotient,
    Scale,
    ScalarField,
    Sum,
    Unary,
    VectorField,
    bump,
    coordinate,
    expr_from_dict,
)
from .geometry import Box, Cone, Subspace, build_direction_net, c_alpha
from .geometry import first_box_clash, verify_net
from .measures import (
    AtomCloud,
    ConeNullRejection,
    atoms_certificate,
    cloud_bundles,
    cone_null_certificate,
    inner_regular_refine,
    sample_atoms,
)
from .scheme import run_scheme


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------

@dataclass
class DivergenceProblem:
    """Datum f with tolerance budgets eps (mass/sup) and delta (Lipschitz)."""

    measure: object
    f: ScalarField
    eps: float
    delta: float
    omega: Box = None

    def __post_init__(self):
        if self.eps <= 0 or self.delta <= 0:
            raise ValueError("eps and delta must be positive")
        if self.omega is None:
            self.omega = self.measure.omega


@dataclass
class JacobianProblem:
    """Target determinant g with the same budget semantics."""

    measure: object
    g: ScalarField
    eps: float
    delta: float
    omega: Box = None

    def __post_init__(self):
        if self.eps <= 0 or self.delta <= 0:
            raise ValueError("eps and delta must be positive")
        if self.omega is None:
            self.omega = self.measure.omega


# ---------------------------------------------------------------------------
# angle selection
# ---------------------------------------------------------------------------

def pick_alpha_deltatilde(delta):
    """Cone half-angle and inner Lipschitz margin splitting the slack.

    Scans downward from pi / 2 with a halving step and returns the largest
    grid angle whose gradient constant leaves multiplicative room below
    1 + delta; the margin takes half the remaining room, so the certified
    product (1 + deltatilde) * c_alpha = (c_alpha + 1 + delta) / 2 sits
    strictly between c_alpha and 1 + delta.  Wide angles keep c_alpha small
    but shrink the net spacing pi / 2 - alpha, so the scan prefers the
    coarsest passing step.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    step = math.pi / 6
    while step > 1e-12:
        alpha = math.pi / 2 - step
        ca = c_alpha(alpha)
        if ca < 1.0 + delta:
            deltatilde = ((1.0 + delta) / ca - 1.0) / 2.0
            return alpha, deltatilde
        step *= 0.5
    raise ValueError(f"no admissible half-angle for delta {delta:g}")


# ---------------------------------------------------------------------------
# partition and localization
# ---------------------------------------------------------------------------

def partition_by_direction(cloud, net, budget, bundles=None):
    """Assign each atom the first net direction transverse to its bundle.

    Atoms whose bundle admits no transverse net direction (a full bundle,
    which the catalog measures never produce) are dropped against `budget`.
    Returns the refined cloud, the per-atom direction indices, and the drop
    log.
    """
    if bundles is None:
        bundles = cloud_bundles(cloud)
    assign = np.array([net.first_transverse(b) for b in bundles], dtype=int)
    refined, log = inner_regular_refine(
        cloud, budget, [("no transverse direction", assign < 0)])
    return refined, assign[assign >= 0], log


def _box_gap(a, b):
    """Sup-norm separation of two boxes; <= 0 iff the closed boxes meet."""
    return float(np.max(np.maximum(a.lo - b.hi, b.lo - a.hi)))


def _tight_components(cloud, assign, alive):
    """(direction index, atom indices, tight box) with touching same-
    direction components merged transitively."""
    comps = []
    for di in np.unique(assign[alive]):
        sel = alive & (assign == di)
        for pid in np.unique(cloud.piece_ids[sel]):
            idx = np.flatnonzero(sel & (cloud.piece_ids == pid))
            comps.append((int(di), idx, Box.bounding(cloud.points[idx])))
    merged = True
    while merged:
        merged = False
        for a in range(len(comps)):
            for b in range(a + 1, len(comps)):
                if comps[a][0] != comps[b][0]:
                    continue
                if _box_gap(comps[a][2], comps[b][2]) > 0.0:
                    continue
                di, ia, ba = comps[a]
                _, ib, bb = comps[b]
                comps[a] = (di, np.sort(np.concatenate([ia, ib])),
                            Box(np.minimum(ba.lo, bb.lo),
                                np.maximum(ba.hi, bb.hi)))
                del comps[b]
                merged = True
                break
            if merged:
                break
    return comps


def _first_cross_clash(comps):
    for a in range(len(comps)):
        for b in range(a + 1, len(comps)):
            if comps[a][0] == comps[b][0]:
                continue
            if _box_gap(comps[a][2], comps[b][2]) <= 0.0:
                return a, b
    return None


@dataclass
class LocalGroup:
    """One direction group with its localization geometry."""

    direction_index: int
    direction: np.ndarray
    idx: np.ndarray
    tight: Box
    U: Box
    inner_box: Box
    psi: object


def localize(cloud, assign, directions, omega, budget):
    """Pairwise disjoint inflated boxes and cutoffs around the groups.

    Components of different directions whose tight boxes touch cannot both
    keep inflated neighborhoods, so atoms of the lighter component inside
    the contested zone are dropped against `budget`, for at most 8 rounds.
    The surviving components inflate by min(d_min / 3, 0.45 * clearance),
    where d_min is the smallest pairwise box separation and clearance the
    distance to the boundary of omega: separations shrink by at most two
    thirds, so the inflated boxes stay disjoint and inside omega.
    """
    assign = np.asarray(assign, dtype=int)
    alive = np.ones(cloud.size, dtype=bool)
    marks = []
    for round_ in range(9):
        comps = _tight_components(cloud, assign, alive)
        if not comps:
            raise ValueError("no atoms left to localize")
        clash = _first_cross_clash(comps)
        if clash is None:
            break
        if round_ == 8:
            raise ValueError("groups not separable within budget")
        a, b = clash
        if cloud.weights[comps[a][1]].sum() <= cloud.weights[comps[b][1]].sum():
            light, heavy = comps[a], comps[b]
        else:
            light, heavy = comps[b], comps[a]
        r = 0.02 * max(max(c[2].diameter() for c in comps), 1e-9)
        inside = heavy[2].inflate(r).contains(cloud.points[light[1]])
        if not np.any(inside):
            # boxes touch but no atom sits in the contested zone, so the
            # whole lighter component has to go
            inside = np.ones(light[1].size, dtype=bool)
        mask = np.zeros(cloud.size, dtype=bool)
        mask[light[1][inside]] = True
        marks.append((f"separation clash {len(marks)}: direction "
                      f"{light[0]} vs {heavy[0]}", mask))
        alive &= ~mask
        if float(cloud.weights[~alive].sum()) >= budget:
            raise ValueError("groups not separable within budget")
    refined, log = inner_regular_refine(cloud, budget, marks)

    comps.sort(key=lambda c: c[0])
    gaps = [_box_gap(comps[a][2], comps[b][2])
            for a in range(len(comps)) for b in range(a + 1, len(comps))]
    d_min = min(gaps) if gaps else math.inf
    assert d_min > 0.0
    old_to_new = np.cumsum(alive) - 1
    groups = []
    for di, idx, tight in comps:
        clearance = float(min(np.min(tight.lo - omega.lo),
                              np.min(omega.hi - tight.hi)))
        if clearance <= 0:
            raise ValueError("group touches the boundary of omega")
        infl = min(d_min / 3.0, 0.45 * clearance)
        U = tight.inflate(infl)
        inner_box = tight.inflate(0.5 * infl)
        groups.append(LocalGroup(di, np.asarray(directions[di], dtype=float),
                                 old_to_new[idx], tight, U, inner_box,
                                 bump(U, inner_box)))
    if len(groups) > 1:
        assert first_box_clash(np.stack([g.U.lo for g in groups]),
                               np.stack([g.U.hi for g in groups])) is None
    return refined, assign[alive], groups, log


# ---------------------------------------------------------------------------
# direction groups and solutions
# ---------------------------------------------------------------------------

@dataclass
class GroupRecord:
    """Outcome of one per-direction scheme run."""

    direction: np.ndarray
    direction_index: int
    U: Box
    inner_box: Box
    eta: float
    atom_count: int
    residual_bound: float
    grad_certificate: float
    sup_certificate: float
    dropped_mass: float
    truncated: bool
    stage_log: list
    u: ScalarField = None
    K: object = None
    lam: ScalarField = None
    scheme: object = None

    def summary(self):
        return {
            "direction": np.asarray(self.direction).tolist(),
            "direction_index": int(self.direction_index),
            "U": self.U.to_dict(),
            "inner_box": self.inner_box.to_dict(),
            "eta": float(self.eta),
            "atom_count": int(self.atom_count),
            "residual_bound": float(self.residual_bound),
            "grad_certificate": float(self.grad_certificate),
            "sup_certificate": float(self.sup_certificate),
            "dropped_mass": float(self.dropped_mass),
            "truncated": bool(self.truncated),
            "stage_log": self.stage_log,
        }

    @staticmethod
    def from_summary(d):
        return GroupRecord(
            direction=np.asarray(d["direction"], dtype=float),
            direction_index=int(d["direction_index"]),
            U=Box.from_dict(d["U"]),
            inner_box=Box.from_dict(d["inner_box"]),
            eta=float(d["eta"]),
            atom_count=int(d["atom_count"]),
            residual_bound=float(d["residual_bound"]),
            grad_certificate=float(d["grad_certificate"]),
            sup_certificate=float(d["sup_certificate"]),
            dropped_mass=float(d["dropped_mass"]),
            truncated=bool(d["truncated"]),
            stage_log=d["stage_log"],
        )


def _cloud_to_dict(K):
    return {
        "points": K.points.tolist(),
        "weights": K.weights.tolist(),
        "piece_ids": K.piece_ids.tolist(),
    }


def _cloud_from_dict(d):
    return AtomCloud(np.asarray(d["points"], dtype=float),
                     np.asarray(d["weights"], dtype=float),
                     np.asarray(d["piece_ids"], dtype=int))


@dataclass
class Solution:
    """Divergence solve output: field, retained atoms, certified bounds."""

    V: VectorField
    K: object
    M: float
    eps: float
    delta: float
    alpha: float
    deltatilde: float
    lip_certificate: float
    sup_certificate: float
    residual_bound: float
    per_direction: list
    atom_groups: np.ndarray
    dropped: dict
    initial_mass: float
    datum: ScalarField
    omega: Box
    report: dict
    background: VectorField = None

    def to_dict(self):
        return {
            "kind": "divergence",
            "V": self.V.to_dict(),
            "K": _cloud_to_dict(self.K),
            "M": float(self.M),
            "eps": float(self.eps),
            "delta": float(self.delta),
            "alpha": float(self.alpha),
            "deltatilde": float(self.deltatilde),
            "lip_certificate": float(self.lip_certificate),
            "sup_certificate": float(self.sup_certificate),
            "residual_bound": float(self.residual_bound),
            "per_direction": [g.summary() for g in self.per_direction],
            "atom_groups": np.asarray(self.atom_groups).tolist(),
            "dropped": self.dropped,
            "initial_mass": float(self.initial_mass),
            "datum": self.datum.to_dict(),
            "omega": self.omega.to_dict(),
            "report": self.report,
            "background": None if self.background is None
            else self.background.to_dict(),
        }

    @staticmethod
    def from_dict(d):
        bg = d.get("background")
        return Solution(
            V=VectorField.from_dict(d["V"]),
            K=_cloud_from_dict(d["K"]),
            M=float(d["M"]),
            eps=float(d["eps"]),
            delta=float(d["delta"]),
            alpha=float(d["alpha"]),
            deltatilde=float(d["deltatilde"]),
            lip_certificate=float(d["lip_certificate"]),
            sup_certificate=float(d["sup_certificate"]),
            residual_bound=float(d["residual_bound"]),
            per_direction=[GroupRecord.from_summary(g)
                           for g in d["per_direction"]],
            atom_groups=np.asarray(d["atom_groups"], dtype=int),
            dropped=d["dropped"],
            initial_mass=float(d["initial_mass"]),
            datum=ScalarField.from_dict(d["datum"]),
            omega=Box.from_dict(d["omega"]),
            report=d["report"],
            background=None if bg is None else VectorField.from_dict(bg),
        )


@dataclass
class MapSolution:
    """Jacobian solve output: the map, its flags, and the inner bounds.

    For transported problems `F` is the outer analytic diffeomorphism,
    `Phi` composes the inner correction map with it, `L` is the sup of the
    transported datum minus one over the image atoms, and `K` holds the
    original-side preimages of the retained image atoms (so `atom_groups`
    indexes the image-side solve, not `K`).
    """

    Phi: object
    K: object
    L: float
    eps: float
    delta: float
    alpha: float
    deltatilde: float
    diffeo_flag: bool
    inverse_lip_bound: float
    lip_certificate: float
    sup_certificate: float
    residual_bound: float
    per_direction: list
    atom_groups: np.ndarray
    dropped: dict
    initial_mass: float
    datum: ScalarField
    omega: Box
    report: dict
    F: object = None
    lip_F: float = None
    transported_bound: float = None
    inner: Solution = None

    def det_rank_one(self, X):
        """det DPhi from the rank-one identity det(I + v w^T) = 1 + w . v.

        Valid everywhere because the group fields have pairwise disjoint
        supports, so at most one rank-one update is active at any point.
        """
        X = np.asarray(X, dtype=float)
        P = np.atleast_2d(X)
        if self.F is None:
            out = 1.0 + self.Phi.displacement.divergence(P)
        else:
            Y = self.F.eval(P)
            inner = 1.0 + self.Phi.second.displacement.divergence(Y)
            out = inner * self.F.det(P)
        return float(out[0]) if X.ndim == 1 else out

    def det_direct(self, X):
        """det DPhi by direct determinant of the assembled Jacobian."""
        X = np.asarray(X, dtype=float)
        P = np.atleast_2d(X)
        out = np.linalg.det(self.Phi.jacobian(P))
        return float(out[0]) if X.ndim == 1 else out

    def to_dict(self):
        if self.F is None:
            phi = self.Phi.to_dict()
        else:
            phi = {"type": "ComposedMap", "first": self.F.to_dict(),
                   "second": self.Phi.second.to_dict()}
        return {
            "kind": "transported" if self.F is not None else "jacobian",
            "Phi": phi,
            "K": _cloud_to_dict(self.K),
            "L": float(self.L),
            "eps": float(self.eps),
            "delta": float(self.delta),
            "alpha": float(self.alpha),
            "deltatilde": float(self.deltatilde),
            "diffeo_flag": bool(self.diffeo_flag),
            "inverse_lip_bound": (None if not math.isfinite(
                self.inverse_lip_bound) else float(self.inverse_lip_bound)),
            "lip_certificate": float(self.lip_certificate),
            "sup_certificate": float(self.sup_certificate),
            "residual_bound": float(self.residual_bound),
            "per_direction": [g.summary() for g in self.per_direction],
            "atom_groups": np.asarray(self.atom_groups).tolist(),
            "dropped": self.dropped,
            "initial_mass": float(self.initial_mass),
            "datum": self.datum.to_dict(),
            "omega": self.omega.to_dict(),
            "report": self.report,
            "lip_F": None if self.lip_F is None else float(self.lip_F),
            "transported_bound": (None if self.transported_bound is None
                                  else float(self.transported_bound)),
        }

    @staticmethod
    def from_dict(d):
        phi = d["Phi"]
        F = None
        if phi.get("type") == "ComposedMap":
            F = AnalyticDiffeo.from_dict(phi["first"])
            Phi = ComposedMap(F, MapField.from_dict(phi["second"]))
        else:
            Phi = MapField.from_dict(phi)
        inv = d["inverse_lip_bound"]
        return MapSolution(
            Phi=Phi,
            K=_cloud_from_dict(d["K"]),
            L=float(d["L"]),
            eps=float(d["eps"]),
            delta=float(d["delta"]),
            alpha=float(d["alpha"]),
            deltatilde=float(d["deltatilde"]),
            diffeo_flag=bool(d["diffeo_flag"]),
            inverse_lip_bound=math.inf if inv is None else float(inv),
            lip_certificate=float(d["lip_certificate"]),
            sup_certificate=float(d["sup_certificate"]),
            residual_bound=float(d["residual_bound"]),
            per_direction=[GroupRecord.from_summary(g)
                           for g in d["per_direction"]],
            atom_groups=np.asarray(d["atom_groups"], dtype=int),
            dropped=d["dropped"],
            initial_mass=float(d["initial_mass"]),
            datum=ScalarField.from_dict(d["datum"]),
            omega=Box.from_dict(d["omega"]),
            report=d["report"],
            F=F,
            lip_F=d.get("lip_F"),
            transported_bound=d.get("transported_bound"),
        )


def solution_from_dict(d):
    return Solution.from_dict(d) if d["kind"] == "divergence" \
        else MapSolution.from_dict(d)


# ---------------------------------------------------------------------------
# shared engine
# ---------------------------------------------------------------------------

def _group_certificates(sub, cone, atoms_only):
    certs = {}
    for pid in np.unique(sub.piece_ids):
        pid = int(pid)
        if atoms_only:
            certs[pid] = atoms_certificate(cone)
            continue
        try:
            cert = cone_null_certificate(sub.carriers[pid], cone)
        except ConeNullRejection:
            cert = atoms_certificate(cone)
        else:
            if cert.kind == "graph-sampled":
                # sampled transversality carries no width payload; the
                # finite retained set is cone-null on its own
                cert = atoms_certificate(cone)
        certs[pid] = cert
    return certs


def _concat_clouds(parts, carriers):
    if len(parts) == 1:
        return parts[0]
    params = {}
    for p in parts:
        for pid, arr in p.params.items():
            params.setdefault(pid, []).append(arr)
    return AtomCloud(
        np.concatenate([p.points for p in parts], axis=0),
        np.concatenate([p.weights for p in parts]),
        np.concatenate([p.piece_ids for p in parts]),
        {pid: np.concatenate(arrs, axis=0) for pid, arrs in params.items()},
        carriers,
    )


def _solve_directional(f, measure, eps, delta, omega, resolution=48,
                       stop=None, seed=0, cloud=None, bundles=None,
                       atoms_only=False):
    """Run the per-direction pipeline for datum f and return a Solution.

    `cloud` and `bundles` override the sampling step for transported
    problems whose atoms are push-forwards; `atoms_only` then certifies
    every piece by its finite retained set, since the stored carrier
    geometry no longer matches the transported positions.
    """
    if eps <= 0 or delta <= 0:
        raise ValueError("eps and delta must be positive")
    alpha, deltatilde = pick_alpha_deltatilde(delta)
    d = omega.dim
    net = build_direction_net(d, alpha, seed=seed)
    net_report = verify_net(net, trials=400, seed=seed)
    if not net_report["passed"]:
        raise ValueError("direction net failed its sampling certificate")

    if cloud is None:
        cloud = sample_atoms(measure, resolution)
    initial_mass = cloud.mass()
    if bundles is None:
        bundles = cloud_bundles(cloud)

    cloud, assign, translog = partition_by_direction(
        cloud, net, eps / 3.0, bundles=bundles)
    cloud, assign, groups, seplog = localize(
        cloud, assign, net.directions, omega, eps / 3.0)

    f_atoms = f.eval(cloud.points)
    M = float(np.max(np.abs(f_atoms))) if cloud.size else 0.0
    # the clamp is the identity on [-M, M], so it never moves an atom value
    clamp = ClampProf(M, 0.5 * M if M > 0 else 1.0)
    tilde_f = Unary(clamp, f.expr)

    N = len(groups)
    eta = eps / (3.0 * N)
    base_stop = {"residual_tol": 5e-10 * M}
    base_stop.update(stop or {})

    records = []
    terms = []
    retained = []
    group_ids = []
    scheme_dropped = 0.0
    for gi, grp in enumerate(groups):
        mask = np.zeros(cloud.size, dtype=bool)
        mask[grp.idx] = True
        sub = cloud.select(mask)
        cone = Cone(grp.direction, alpha)
        lam = ScalarField(Product(grp.psi, tilde_f), support_box=grp.U)
        res = run_scheme(grp.U, sub, cone, lam, eta, deltatilde,
                         stop=dict(base_stop),
                         certs=_group_certificates(sub, cone, atoms_only))
        terms.append((res.u, grp.direction))
        retained.append(res.K)
        group_ids.append(np.full(res.K.size, gi, dtype=int))
        scheme_dropped += res.total_dropped()
        records.append(GroupRecord(
            direction=grp.direction, direction_index=grp.direction_index,
            U=grp.U, inner_box=grp.inner_box, eta=eta,
            atom_count=res.K.size, residual_bound=res.residual_bound,
            grad_certificate=res.certified_grad_bound,
            sup_certificate=res.certified_sup_bound,
            dropped_mass=res.total_dropped(), truncated=res.truncated,
            stage_log=res.stage_log, u=res.u, K=res.K, lam=lam, scheme=res))

    V = VectorField(terms)
    K = _concat_clouds(retained, cloud.carriers)
    atom_groups = np.concatenate(group_ids) if group_ids else \
        np.zeros(0, dtype=int)

    # disjoint supports make every foreign group field vanish identically
    # at another group's atoms; the assembly would be wrong otherwise
    max_foreign = 0.0
    for gi in range(N):
        pts = K.points[atom_groups == gi]
        if pts.size == 0:
            continue
        for gj in range(N):
            if gj == gi:
                continue
            max_foreign = max(max_foreign,
                              float(np.max(np.abs(records[gj].u.eval(pts)))),
                              float(np.max(np.abs(records[gj].u.grad(pts)))))
    assert max_foreign == 0.0

    lip_certificate = max(r.grad_certificate for r in records)
    sup_certificate = max(r.sup_certificate for r in records)
    residual_bound = max(r.residual_bound for r in records)
    assert lip_certificate <= (1.0 + delta) * M
    assert sup_certificate <= eps
    assert scheme_dropped < eps / 3.0

    total_dropped = translog.total + seplog.total + scheme_dropped
    assert total_dropped < eps
    dropped = {
        "transversality": translog.to_dict(),
        "separation": seplog.to_dict(),
        "schemes": {
            "per_group": [{"direction_index": r.direction_index,
                           "eta": float(r.eta),
                           "dropped": float(r.dropped_mass)}
                          for r in records],
            "total": float(scheme_dropped),
        },
        "budget": {"transversality": eps / 3.0, "separation": eps / 3.0,
                   "schemes": eps / 3.0},
        "total": float(total_dropped),
    }

    report = {
        "alpha": float(alpha),
        "deltatilde": float(deltatilde),
        "c_alpha": float(c_alpha(alpha)),
        "net": {"size": int(net.size), "passed": True},
        "groups": N,
        "direction_indices": [r.direction_index for r in records],
        "eta": float(eta),
        "M": float(M),
        "initial_atoms": int(len(bundles)),
        "retained_atoms": int(K.size),
        "lip_certificate": float(lip_certificate),
        "sup_certificate": float(sup_certificate),
        "residual_bound": float(residual_bound),
        "dropped_total": float(total_dropped),
        "mass_error": float(initial_mass - K.mass() - total_dropped),
        "locality_max_foreign": float(max_foreign),
        "truncated_groups": int(sum(r.truncated for r in records)),
    }

    return Solution(
        V=V, K=K, M=M, eps=eps, delta=delta, alpha=alpha,
        deltatilde=deltatilde, lip_certificate=lip_certificate,
        sup_certificate=sup_certificate, residual_bound=residual_bound,
        per_direction=records, atom_groups=atom_groups, dropped=dropped,
        initial_mass=initial_mass, datum=f, omega=omega, report=report)


# ---------------------------------------------------------------------------
# divergence
# ---------------------------------------------------------------------------

def solve_divergence(problem, resolution=48, stop=None, seed=0, cloud=None):
    """Build V with div V = f at every retained atom.

    Certifies Lip(V) < (1 + delta) * M for M the atom sup of |f|, sup
    |V| <= eps, and total dropped mass below eps in three audited parts.
    `stop` is forwarded to every per-group scheme run; `cloud` replaces the
    quadrature sampling for hand-built atom sets such as sparse deep words.
    """
    return _solve_directional(problem.f, problem.measure, problem.eps,
                              problem.delta, problem.omega,
                              resolution=resolution, stop=stop, seed=seed,
                              cloud=cloud)


def perturb_background(W, div_W, problem, resolution=48, stop=None, seed=0):
    """Correct a background field W so that div(W + Z) = f on the atoms.

    `div_W` must be the closed-form divergence of W; it is checked against
    the exact per-term derivatives of W before use.  The returned solution
    carries V = W + Z with W recorded in `background`; the certificates
    describe the correction Z, whose sup stays below eps.
    """
    rng = np.random.default_rng(seed)
    probe = np.vstack([sample_atoms(problem.measure, resolution).points,
                       problem.omega.sample(256, rng)])
    exact = W.divergence(probe)
    closed = div_W.eval(probe)
    scale = max(1.0, float(np.max(np.abs(closed))))
    gap = float(np.max(np.abs(exact - closed)))
    if gap > 1e-9 * scale:
        raise ValueError(
            f"div_W does not match the divergence of W: gap {gap:.3g}")

    datum = ScalarField(Sum([problem.f.expr, Scale(-1.0, div_W.expr)]))
    sol = _solve_directional(datum, problem.measure, problem.eps,
                             problem.delta, problem.omega,
                             resolution=resolution, stop=stop, seed=seed)
    sol.report["background_terms"] = len(W.terms)
    return Solution(
        V=VectorField(list(W.terms) + list(sol.V.terms)), K=sol.K, M=sol.M,
        eps=sol.eps, delta=sol.delta, alpha=sol.alpha,
        deltatilde=sol.deltatilde, lip_certificate=sol.lip_certificate,
        sup_certificate=sol.sup_certificate,
        residual_bound=sol.residual_bound, per_direction=sol.per_direction,
        atom_groups=sol.atom_groups, dropped=sol.dropped,
        initial_mass=sol.initial_mass, datum=problem.f, omega=sol.omega,
        report=sol.report, background=W)


# ---------------------------------------------------------------------------
# jacobian
# ---------------------------------------------------------------------------

def rank_one_det(v, w):
    """det(I + outer(v, w)) without forming the matrix."""
    return 1.0 + float(np.dot(np.asarray(v, dtype=float),
                              np.asarray(w, dtype=float)))


def _shift_by_one(g):
    """g - 1 with the shift folded into constant and affine tops.

    Folding keeps the scheme datum exact: for g between 1/2 and 2 the
    subtraction g - 1 is exact in floating point, so reconstructing
    1 + (g - 1) at an atom returns the original value bitwise.
    """
    e = g.expr
    if isinstance(e, Const):
        shifted = Const(e.value - 1.0, e.dim)
    elif isinstance(e, LinearForm):
        shifted = LinearForm(e.weights, e.offset - 1.0)
    else:
        shifted = Sum([e, Const(-1.0, e.dim)])
    return ScalarField(shifted, support_box=g.support_box)


def solve_jacobian(problem, resolution=48, stop=None, seed=0):
    """Build Phi = Id + sum u_j v_j with det DPhi = g on the atoms.

    The displacement solves the divergence problem for g - 1, so the
    rank-one determinant identity turns the divergence contract into the
    determinant contract.  When (1 + delta) * L < 1 for L the atom sup of
    |g - 1|, the map is bi-Lipschitz with inverse Lipschitz bound
    1 / (1 - (1 + delta) * L).
    """
    datum = _shift_by_one(problem.g)
    sol = _solve_directional(datum, problem.measure, problem.eps,
                             problem.delta, problem.omega,
                             resolution=resolution, stop=stop, seed=seed)
    L = sol.M
    expansion = (1.0 + problem.delta) * L
    diffeo_flag = expansion < 1.0
    inverse_lip_bound = 1.0 / (1.0 - expansion) if diffeo_flag else math.inf
    sol.report["L"] = float(L)
    sol.report["diffeo_flag"] = diffeo_flag
    return MapSolution(
        Phi=MapField(sol.V), K=sol.K, L=L, eps=sol.eps, delta=sol.delta,
        alpha=sol.alpha, deltatilde=sol.deltatilde, diffeo_flag=diffeo_flag,
        inverse_lip_bound=inverse_lip_bound,
        lip_certificate=sol.lip_certificate,
        sup_certificate=sol.sup_certificate,
        residual_bound=sol.residual_bound, per_direction=sol.per_direction,
        atom_groups=sol.atom_groups, dropped=sol.dropped,
        initial_mass=sol.initial_mass, datum=problem.g, omega=sol.omega,
        report=sol.report)


# ---------------------------------------------------------------------------
# analytic diffeomorphisms and transported problems
# ---------------------------------------------------------------------------

@dataclass
class AnalyticDiffeo:
    """Diffeomorphism given by closed-form forward, inverse, and Jacobian.

    `forward` and `inverse` are lists of d scalar expressions; `jac` is the
    d x d nested list with row i the gradient of forward[i].  The inverse
    and the Jacobian are trusted inputs and re-checked numerically by
    `perturb_diffeomorphism` before use.
    """

    forward: list
    inverse: list
    jac: list

    @property
    def dim(self):
        return len(self.forward)

    def eval(self, X):
        X = np.asarray(X, dtype=float)
        P = np.atleast_2d(X)
        out = np.stack([e.eval(P) for e in self.forward], axis=1)
        return out[0] if X.ndim == 1 else out

    def eval_inverse(self, Y):
        Y = np.asarray(Y, dtype=float)
        P = np.atleast_2d(Y)
        out = np.stack([e.eval(P) for e in self.inverse], axis=1)
        return out[0] if Y.ndim == 1 else out

    def jacobian(self, X):
        P = np.atleast_2d(np.asarray(X, dtype=float))
        rows = [np.stack([e.eval(P) for e in row], axis=1)
                for row in self.jac]
        return np.stack(rows, axis=1)

    def det(self, X):
        X = np.asarray(X, dtype=float)
        out = np.linalg.det(self.jacobian(X))
        return float(out[0]) if X.ndim == 1 else out

    def det_expr(self):
        """Determinant of the Jacobian as one expression, by cofactors."""
        return _cofactor_det(self.jac)

    def lip_bound(self, box):
        """Upper bound for the operator norm of DF over the box.

        Constant Jacobians get the exact spectral norm; otherwise the
        Frobenius norm of the per-entry sup bounds dominates pointwise.
        """
        flat = [e for row in self.jac for e in row]
        if all(isinstance(e, Const) for e in flat):
            A = np.array([[e.value for e in row] for row in self.jac])
            return float(np.linalg.norm(A, 2))
        sups = [e.sup_bound(box) for e in flat]
        return float(math.sqrt(sum(s * s for s in sups)))

    def to_dict(self):
        return {
            "type": "AnalyticDiffeo",
            "forward": [e.to_dict() for e in self.forward],
            "inverse": [e.to_dict() for e in self.inverse],
            "jac": [[e.to_dict() for e in row] for row in self.jac],
        }

    @staticmethod
    def from_dict(d):
        return AnalyticDiffeo(
            [expr_from_dict(e) for e in d["forward"]],
            [expr_from_dict(e) for e in d["inverse"]],
            [[expr_from_dict(e) for e in row] for row in d["jac"]],
        )


def _cofactor_det(entries):
    d = len(entries)
    if d == 1:
        return entries[0][0]
    terms = []
    for k in range(d):
        minor = [row[:k] + row[k + 1:] for row in entries[1:]]
        piece = Product(entries[0][k], _cofactor_det(minor))
        terms.append(piece if k % 2 == 0 else Scale(-1.0, piece))
    return Sum(terms)


def shear_map(d, s, i=0, j=1):
    """x -> x + s * x_j * e_i, a volume-preserving shear."""
    if i == j:
        raise ValueError("shear needs two distinct coordinates")
    forward = [coordinate(k, d) for k in range(d)]
    inverse = [coordinate(k, d) for k in range(d)]
    wf = np.zeros(d)
    wf[i] = 1.0
    wf[j] = s
    wb = np.zeros(d)
    wb[i] = 1.0
    wb[j] = -s
    forward[i] = LinearForm(wf, 0.0)
    inverse[i] = LinearForm(wb, 0.0)
    jac = [[Const(1.0 if r == c else 0.0, d) for c in range(d)]
           for r in range(d)]
    jac[i][j] = Const(s, d)
    return AnalyticDiffeo(forward, inverse, jac)


def scaling_map(factors):
    """x -> diag(factors) x with nonzero factors."""
    factors = np.asarray(factors, dtype=float)
    if np.any(factors == 0.0):
        raise ValueError("scaling factors must be nonzero")
    d = factors.size
    forward = []
    inverse = []
    for k in range(d):
        w = np.zeros(d)
        w[k] = factors[k]
        forward.append(LinearForm(w, 0.0))
        wi = np.zeros(d)
        wi[k] = 1.0 / factors[k]
        inverse.append(LinearForm(wi, 0.0))
    jac = [[Const(factors[r] if r == c else 0.0, d) for c in range(d)]
           for r in range(d)]
    return AnalyticDiffeo(forward, inverse, jac)


class ComposedMap:
    """Phi = second after first, for an analytic first factor."""

    def __init__(self, first, second):
        self.first = first
        self.second = second
        self.dim = first.dim

    def eval(self, X):
        X = np.asarray(X, dtype=float)
        P = np.atleast_2d(X)
        out = self.second.eval(self.first.eval(P))
        return out[0] if X.ndim == 1 else out

    def jacobian(self, X):
        P = np.atleast_2d(np.asarray(X, dtype=float))
        J1 = self.first.jacobian(P)
        J2 = self.second.jacobian(self.first.eval(P))
        return np.einsum("nij,njk->nik", J2, J1)

    def det_jacobian(self, X):
        X = np.asarray(X, dtype=float)
        out = np.linalg.det(self.jacobian(np.atleast_2d(X)))
        return float(out[0]) if X.ndim == 1 else out

    def to_dict(self):
        return {"type": "ComposedMap", "first": self.first.to_dict(),
                "second": self.second.to_dict()}

    @staticmethod
    def from_dict(d):
        return ComposedMap(AnalyticDiffeo.from_dict(d["first"]),
                           MapField.from_dict(d["second"]))


def _check_jacobian_fd(F, pts, tol=1e-6):
    if pts.shape[0] == 0:
        return
    d = pts.shape[1]
    J = F.jacobian(pts)
    scale = 1.0 + float(np.max(np.abs(J)))
    h = 1e-6 * max(1.0, float(np.max(np.abs(pts))))
    for k in range(d):
        step = np.zeros(d)
        step[k] = h
        col = (F.eval(pts + step) - F.eval(pts - step)) / (2.0 * h)
        gap = float(np.max(np.abs(col - J[:, :, k])))
        if gap > tol * scale:
            raise ValueError(
                f"jacobian of F disagrees with finite differences by "
                f"{gap:.3g} in coordinate {k}")


def perturb_diffeomorphism(F, g, eps, delta, measure, resolution=48,
                           stop=None, seed=0):
    """Correct an analytic diffeomorphism so det DPhi = g on the atoms.

    Pushes the atoms forward by F (same weights), solves the Jacobian
    problem on the image for the transported datum
    h = (g / det DF) o F^{-1}, and composes: Phi = Psi o F.  By the chain
    rule det DPhi = det DPsi(F(x)) det DF(x) = g(x) at every retained
    preimage atom.  The certified Lipschitz bound of Phi - F is the inner
    certificate times the Lipschitz bound of F, which stays below
    (1 + delta) * Lip(F) * max atom |g / det DF - 1|.
    """
    if eps <= 0 or delta <= 0:
        raise ValueError("eps and delta must be positive")
    omega = measure.omega
    d = omega.dim
    rng = np.random.default_rng(seed)
    X0 = sample_atoms(measure, resolution)
    probe = np.vstack([X0.points, omega.sample(256, rng)])
    scale = max(1.0, float(np.max(np.abs(probe))))
    roundtrip = float(np.max(np.abs(F.eval_inverse(F.eval(probe)) - probe)))
    if roundtrip > 1e-9 * scale:
        raise ValueError(
            f"inverse mismatch: |F^-1(F(x)) - x| reaches {roundtrip:.3g}")
    dets = np.atleast_1d(F.det(probe))
    if float(np.min(np.abs(dets))) <= 1e-9:
        raise ValueError("det DF is not bounded away from zero")
    _check_jacobian_fd(F, X0.points[:200])

    J = F.jacobian(X0.points)
    Y = F.eval(X0.points)
    image_bundles = []
    for i, b in enumerate(cloud_bundles(X0)):
        if b.dim == 0:
            image_bundles.append(Subspace.zero(d))
        else:
            image_bundles.append(Subspace.span(b.basis @ J[i].T))
    # image params store original atom indices so retained preimages can be
    # recovered after the inner solve's drops
    params = {pid: np.flatnonzero(X0.piece_ids == pid)
              for pid in range(len(X0.carriers))}
    image = AtomCloud(Y, X0.weights.copy(), X0.piece_ids.copy(), params,
                      X0.carriers)

    hull = Box.bounding(Y)
    margin = 0.2 * max(hull.diameter(), 1.0)
    sigma = hull.inflate(margin)
    budget = min(0.5 * eps, 0.5 * margin)

    h = Quotient(ComposeVec(g.expr, list(F.inverse)),
                 ComposeVec(F.det_expr(), list(F.inverse)))
    inner = _solve_directional(
        _shift_by_one(ScalarField(h)), None, budget, delta, sigma,
        stop=stop, seed=seed, cloud=image, bundles=image_bundles,
        atoms_only=True)

    T = inner.M
    lip_F = F.lip_bound(omega)
    Psi = MapField(inner.V)
    Phi = ComposedMap(F, Psi)
    keep = np.zeros(X0.size, dtype=bool)
    for arr in inner.K.params.values():
        keep[np.asarray(arr, dtype=int)] = True
    K = X0.select(keep)

    lip_certificate = inner.lip_certificate * lip_F
    transported_bound = (1.0 + delta) * lip_F * T
    assert lip_certificate <= transported_bound
    expansion = (1.0 + delta) * T
    diffeo_flag = expansion < 1.0
    inverse_lip_bound = 1.0 / (1.0 - expansion) if diffeo_flag else math.inf

    report = dict(inner.report)
    report.update({
        "lip_F": float(lip_F),
        "transported_datum_sup": float(T),
        "transported_bound": float(transported_bound),
        "image_budget": float(budget),
        "roundtrip_error": roundtrip,
    })
    return MapSolution(
        Phi=Phi, K=K, L=T, eps=eps, delta=delta, alpha=inner.alpha,
        deltatilde=inner.deltatilde, diffeo_flag=diffeo_flag,
        inverse_lip_bound=inverse_lip_bound,
        lip_certificate=lip_certificate,
        sup_certificate=inner.sup_certificate,
        residual_bound=inner.residual_bound,
        per_direction=inner.per_direction, atom_groups=inner.atom_groups,
        dropped=inner.dropped, initial_mass=inner.initial_mass, datum=g,
        omega=omega, report=report, F=F, lip_F=lip_F,
        transported_bound=transported_bound, inner=inner)
