"""Width functions: capped slope fields adapted to a cone and a target set.

A width function for a cone C(e, alpha) and a finite target set E is a
scalar field phi with three properties: its values stay in [0, zeta], its
derivative along the axis e is a slope in [0, 1] that equals 1 exactly at
every atom of E, and every derivative transverse to e is bounded by
1/tan(alpha).  The scalar scheme trades phi's rise budget zeta against the
slope-1 region, so both bounds are enforced at build time and re-checked by
`verify_width` on dense grids.

Three constructions cover the supported targets.  For a Lipschitz graph the
transverse defect coordinate s (height minus profile) composes with a
plateau ramp: the slope in s is 1 where s is near 0, i.e. on the carrier.
For an iterated-function-system carrier the axis projections of a cover
generation form short intervals; integrating a comb profile that has slope
1 on those intervals gives a function of p.e alone, so transverse
derivatives vanish identically.  When neither structure applies (a curved
graph assigned a foreign axis, or atoms whose recorded words are too short
for the cover the rise cap demands), the target's own finite projection set
carries a comb directly: finite sets are cone-null for every cone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exprs import (
    CombProf,
    ComposeVec,
    LinearForm,
    PlateauProf,
    ScalarField,
    Scale,
    Sum,
    Unary,
    coordinate,
)
from .geometry import Box, Cone, c_alpha
from .measures import AtomCloud, GraphCarrier, IFSCarrier, atoms_certificate


@dataclass
class WidthFunction:
    phi: ScalarField
    cone: Cone
    target: AtomCloud
    zeta: float

    def to_dict(self):
        return {
            "phi": self.phi.to_dict(),
            "cone": {"axis": self.cone.axis.tolist(),
                     "half_angle": self.cone.half_angle},
            "zeta": self.zeta,
            "target": {"points": self.target.points.tolist(),
                       "weights": self.target.weights.tolist()},
        }

    @staticmethod
    def from_dict(d):
        t = d["target"]
        pts = np.asarray(t["points"], dtype=float)
        cloud = AtomCloud(pts, np.asarray(t["weights"], dtype=float),
                          np.zeros(pts.shape[0], dtype=int))
        return WidthFunction(
            ScalarField.from_dict(d["phi"]),
            Cone(np.asarray(d["cone"]["axis"]), d["cone"]["half_angle"]),
            cloud, d["zeta"])


def _check_cone(cert, cone):
    if (np.max(np.abs(cert.cone.axis - cone.axis)) > 1e-12
            or abs(cert.cone.half_angle - cone.half_angle) > 1e-12):
        raise ValueError("certificate was issued for a different cone")


def graph_defect_expr(carrier):
    """Height-minus-profile as a global scalar expression.

    For an exact coordinate frame the composition re-evaluates the profile
    on bitwise-identical orthogonal coordinates, so the defect vanishes
    exactly at sampled atoms; the general affine frame leaves roundoff-scale
    defects that the plateau absorbs.
    """
    d = carrier.dim
    if carrier._exact is not None:
        cols, axis_col = carrier._exact
        args = [coordinate(c, d) for c in cols]
        height = coordinate(axis_col, d)
    else:
        args = [LinearForm(row, -float(carrier.origin @ row))
                for row in carrier.frame]
        height = LinearForm(carrier.axis, -float(carrier.origin @ carrier.axis))
    return Sum([height, Scale(-1.0, ComposeVec(carrier.profile, args))])


def width_for_graph(cert, E, cone, zeta):
    """Plateau of the graph's transverse defect coordinate.

    The slope-1 region is |s| <= zeta/4 around the carrier; target atoms
    must sit within 90% of it so the exactness check has float headroom.
    """
    _check_cone(cert, cone)
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    if cert.kind == "graph-axis":
        s_expr = graph_defect_expr(cert.carrier)
    elif cert.kind == "graph-transverse":
        s_expr = cert.defect_form
    elif cert.kind == "graph-sampled":
        raise ValueError(
            "no closed-form defect coordinate for a curved carrier over a "
            "foreign axis; use the carrier's own axis as the cone direction")
    else:
        raise ValueError(f"not a graph certificate: {cert.kind}")

    h = PlateauProf(zeta)
    if E.size:
        s = s_expr.eval(E.points)
        worst = float(np.max(np.abs(s)))
        if worst > 0.9 * h.plateau:
            raise ValueError(
                f"target atom off the carrier: defect {worst:.3g} exceeds "
                f"90% of the slope-1 half-width {h.plateau:.3g}")
    return WidthFunction(ScalarField(Unary(h, s_expr)), cone, E, float(zeta))


def rescaled_width(w, zeta, target=None):
    """Same transverse coordinate, new rise cap.

    Cluster-level widths reuse the carrier-level defect expression: the
    slope-1 region still contains the smaller target, and shrinking zeta
    only tightens every bound.
    """
    expr = w.phi.expr
    if not isinstance(expr, Unary) or not isinstance(expr.profile, PlateauProf):
        raise ValueError("only plateau widths can be rescaled in place")
    return WidthFunction(ScalarField(Unary(PlateauProf(zeta), expr.inner)),
                         w.cone, w.target if target is None else target,
                         float(zeta))


def _project_cells(weights, lo, hi):
    """Axis-projection intervals of boxes, accumulated in LinearForm's
    term order so projections of interior points land inside in float."""
    t_lo = np.zeros(lo.shape[0])
    t_hi = np.zeros(lo.shape[0])
    for j in range(weights.size):
        a = weights[j] * lo[:, j]
        b = weights[j] * hi[:, j]
        t_lo = t_lo + np.minimum(a, b)
        t_hi = t_hi + np.maximum(a, b)
    return t_lo, t_hi


def _target_words(carrier, E):
    blocks = []
    for pid, c in enumerate(E.carriers):
        if c is carrier and pid in E.params:
            blocks.append(np.atleast_2d(E.params[pid]))
    if not blocks:
        raise ValueError("target cloud carries no word provenance for this "
                         "carrier")
    depth = min(b.shape[1] for b in blocks)
    return np.vstack([b[:, :depth] for b in blocks])


def width_for_atoms(cert, E, cone, zeta):
    """Comb with slope-1 teeth at the target atoms' own axis projections.

    A finite atom set is cone-null for every cone, so this is the generic
    construction when a carrier offers no usable structure for the requested
    axis: curved graphs assigned a foreign direction, pushforward images,
    or IFS targets whose recorded words are shorter than the cover
    generation a tiny rise cap demands.  phi depends on p.e only, so
    transverse derivatives vanish identically; teeth of half-width
    zeta/(8k) keep the total rise at 3 zeta/8 even before merging.
    """
    _check_cone(cert, cone)
    if cert.kind != "atoms":
        raise ValueError(f"not an atoms certificate: {cert.kind}")
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    if E.size == 0:
        raise ValueError("atom comb needs a nonempty target")
    form = LinearForm(cone.axis, 0.0)
    knots = np.unique(form.eval(E.points))
    half = zeta / (8.0 * knots.size)
    comb = CombProf(knots, half, half)
    phi = ScalarField(Unary(comb, form))
    return WidthFunction(phi, cone, E, float(zeta))


def width_for_ifs(cert, E, cone, zeta):
    """Integrated comb over the axis projections of a cover generation.

    Uses the sub-cover spanned by the target atoms' word prefixes: its
    projected length is at most the full cover's certified length, and it
    still contains every atom by cell nesting.  phi depends on p.e only, so
    property (iii) holds with bound 0.
    """
    _check_cone(cert, cone)
    if cert.kind != "ifs":
        raise ValueError(f"not an IFS certificate: {cert.kind}")
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    carrier = cert.carrier
    words = _target_words(carrier, E)
    e = cone.axis

    max_n = min(words.shape[1], carrier.generation_cap)

    # Sort the words once; distinct depth-n prefix groups start wherever two
    # consecutive sorted words first differ before column n.  This replaces
    # a per-generation np.unique with an O(k) boundary lookup.
    order = np.lexsort(words.T[::-1])
    sw = words[order]
    if sw.shape[0] > 1:
        neq = sw[1:] != sw[:-1]
        first_diff = np.where(neq.any(axis=1), neq.argmax(axis=1), sw.shape[1])
    else:
        first_diff = np.zeros(0, dtype=int)

    r_list = carrier.ratios.tolist()
    t_list = carrier.translations.tolist()
    blo = carrier.base_box.lo.tolist()
    bhi = carrier.base_box.hi.tolist()
    e_list = e.tolist()
    d = len(blo)

    def sub_cover(n):
        """Projected prefix-cell intervals, bitwise equal to projecting
        carrier.cells_for_words on the distinct depth-n prefixes.  The
        scalar path repeats the identical IEEE operation sequence, because
        at sub-ulp scale the comb construction depends on the exact floats,
        not just their values up to rounding."""
        starts = np.concatenate(([0], np.flatnonzero(first_diff < n) + 1))
        rows = sw[starts, :n]
        if rows.shape[0] > 8:
            lo, hi = carrier.cells_for_words(rows)
            t_lo, t_hi = _project_cells(e, lo, hi)
            return t_lo, t_hi, math.fsum(t_hi - t_lo)
        t_lo = np.empty(rows.shape[0])
        t_hi = np.empty(rows.shape[0])
        for i in range(rows.shape[0]):
            letters = rows[i].tolist()
            lo = blo[:]
            hi = bhi[:]
            for col in range(n - 1, -1, -1):
                k = letters[col]
                r = r_list[k]
                tv = t_list[k]
                for j in range(d):
                    lo[j] = r * lo[j] + tv[j]
                    hi[j] = r * hi[j] + tv[j]
            a_lo = 0.0
            a_hi = 0.0
            for j in range(d):
                a = e_list[j] * lo[j]
                b = e_list[j] * hi[j]
                a_lo = a_lo + min(a, b)
                a_hi = a_hi + max(a, b)
            t_lo[i] = a_lo
            t_hi[i] = a_hi
        return t_lo, t_hi, math.fsum(t_hi - t_lo)

    # The float-measured cover length is nonincreasing in the generation:
    # child cells nest inside their parents and rounding is monotone, so
    # the smallest feasible generation is found by bisection.  At sub-ulp
    # zeta this length is quantized by endpoint rounding and reaches zero
    # only when the projected intervals collapse, which is exactly when the
    # degenerate comb becomes usable.
    chosen = None
    t_lo, t_hi, length = sub_cover(max_n)
    if length <= 0.5 * zeta:
        chosen = (max_n, t_lo, t_hi)
        lo_n, hi_n = 1, max_n
        while lo_n < hi_n:
            mid = (lo_n + hi_n) // 2
            t_lo, t_hi, length = sub_cover(mid)
            if length <= 0.5 * zeta:
                chosen = (mid, t_lo, t_hi)
                hi_n = mid
            else:
                lo_n = mid + 1
    if chosen is None:
        rs = float(carrier.ratios.sum())
        len0 = carrier.len0(e)
        need = (1 if len0 <= 0.5 * zeta
                else math.ceil(math.log(0.5 * zeta / len0) / math.log(rs)))
        raise ValueError(
            f"no cover generation up to {max_n} projects below zeta/2; "
            f"the full cover needs generation {need} (cap "
            f"{carrier.generation_cap}, atom words of length {words.shape[1]})")

    n, t_lo, t_hi = chosen
    order = np.argsort(t_lo, kind="stable")
    t_lo, t_hi = t_lo[order], t_hi[order]
    gaps = t_lo[1:] - t_hi[:-1]
    pos = gaps[gaps > 0]
    min_gap = float(pos.min()) if pos.size else math.inf
    ramp = min(0.4 * min_gap, zeta / (8 * t_lo.size))
    pad = 0.1 * ramp
    comb = CombProf.from_intervals(t_lo - pad, t_hi + pad, ramp)
    if comb.rise > zeta:
        raise ValueError("comb budget exceeded; gaps too congested")
    phi = ScalarField(Unary(comb, LinearForm(e, 0.0)))
    return WidthFunction(phi, cone, E, float(zeta))


def build_width(cert, E, cone, zeta):
    if cert.kind == "atoms":
        return width_for_atoms(cert, E, cone, zeta)
    if cert.kind == "ifs":
        try:
            return width_for_ifs(cert, E, cone, zeta)
        except ValueError as err:
            # Cover generations beyond the recorded word depth cannot be
            # enumerated; the finite target itself is still cone-null.
            if "cover generation" not in str(err):
                raise
            return width_for_atoms(atoms_certificate(cone), E, cone, zeta)
    return width_for_graph(cert, E, cone, zeta)


def _worst(values, bound, sense):
    """Index and margin of the worst point; margin > 0 means violation."""
    if sense == "max":
        i = int(np.argmax(values))
        return i, float(values[i] - bound)
    i = int(np.argmin(values))
    return i, float(bound - values[i])


def verify_width(w, grid_resolution=200):
    """Grid-plus-atoms audit of the three width properties.

    Samples a dense grid over the inflated target bounding box together
    with the atoms themselves, and reports the worst margin for each bound;
    a positive margin is a violation and flips the check (and the report)
    to failing.  Nothing is raised: corrupted inputs are report entries.
    """
    e = w.cone.axis
    bb = w.target.bounding_box()
    pad = max(w.zeta, 0.05 * max(bb.diameter(), 1.0))
    box = bb.inflate(pad)
    X = np.vstack([box.grid(grid_resolution), w.target.points])
    n_atoms = w.target.points.shape[0]

    vals = w.phi.eval(X)
    G = w.phi.grad(X)
    slope = G @ e
    perp = G - slope[:, None] * e
    perp_norm = np.linalg.norm(perp, axis=1)
    grad_norm = np.linalg.norm(G, axis=1)
    atom_slope = slope[-n_atoms:] if n_atoms else np.array([1.0])

    t_bound = 1.0 / math.tan(w.cone.half_angle)
    checks = []

    def add(name, values, bound, sense, tol, pts=X):
        i, margin = _worst(values, bound, sense)
        checks.append({
            "name": name,
            "ok": bool(margin <= tol),
            "worst": float(values[i]),
            "bound": bound,
            "margin": margin,
            "witness": pts[i].tolist() if pts.shape[0] else None,
        })

    add("value_nonnegative", vals, 0.0, "min", 1e-12)
    add("value_below_zeta", vals, w.zeta, "max", 1e-9)
    add("axis_slope_nonnegative", slope, 0.0, "min", 1e-9)
    add("axis_slope_below_one", slope, 1.0, "max", 1e-9)
    add("axis_slope_one_on_target", np.abs(atom_slope - 1.0), 0.0, "max",
        1e-9, pts=w.target.points if n_atoms else np.zeros((1, w.phi.dim)))
    add("transverse_slope", perp_norm, t_bound, "max", 1e-9)
    add("gradient_norm", grad_norm, c_alpha(w.cone.half_angle), "max", 1e-9)

    return {
        "ok": all(c["ok"] for c in checks),
        "checks": checks,
        "grid_points": int(X.shape[0]),
        "zeta": w.zeta,
        "half_angle": w.cone.half_angle,
    }
