"""Model singular measures: carriers, atom clouds, bundles, cone-null data.

Measures are finite weighted atom clouds sampled from analytic carriers.
Two carrier classes are supported: Lipschitz graphs with a certified
Lipschitz constant, and iterated-function-system carriers whose contraction
ratios sum below 1 (so the projections of generation covers decay).  Each
carrier states its decomposability bundle analytically and can produce a
cone-null certificate carrying the data the width constructions need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exprs import ScalarExpr
from .geometry import Box, Cone, Subspace, subspace_transverse, unit_vector

_MASS_TOL = 1e-12


class ConeNullRejection(ValueError):
    """Carrier cannot be certified cone-null for the requested cone."""

    def __init__(self, condition):
        super().__init__(condition)
        self.condition = condition


# ---------------------------------------------------------------------------
# carriers
# ---------------------------------------------------------------------------

class GraphCarrier:
    """Lipschitz graph {origin + Y.frame + profile(Y) axis : Y in domain}.

    `frame` holds the (d-1) orthonormal rows spanning the orthogonal
    coordinates, `axis` is the transverse unit direction, and `profile` is a
    scalar expression over the orthogonal coordinates.  When the frame is the
    identity arrangement with zero origin, embedding is pure coordinate
    assignment, so re-evaluating the graph equation at sampled atoms
    reproduces the profile values bitwise; thin width constructions rely on
    that.
    """

    kind = "graph"

    def __init__(self, origin, frame, axis, profile, domain, lip_profile=None):
        self.origin = np.asarray(origin, dtype=float)
        self.frame = np.asarray(frame, dtype=float)
        self.axis = unit_vector(axis)
        self.profile = profile
        self.domain = domain
        d = self.origin.size
        if self.frame.shape != (d - 1, d):
            raise ValueError("frame must be (d-1, d)")
        gram = self.frame @ self.frame.T
        if not np.allclose(gram, np.eye(d - 1), atol=1e-10):
            raise ValueError("frame rows must be orthonormal")
        if not np.allclose(self.frame @ self.axis, 0.0, atol=1e-10):
            raise ValueError("frame rows must be orthogonal to the axis")
        if profile.dim != d - 1 or domain.dim != d - 1:
            raise ValueError("profile/domain must live in d-1 variables")
        self.dim = d
        if lip_profile is None:
            lip_profile = profile.grad_norm_bound(domain)
        self.lip_profile = float(lip_profile)
        self._exact = self._detect_exact_frame()

    def _detect_exact_frame(self):
        if np.any(self.origin != 0.0):
            return None
        cols = []
        for row in self.frame:
            hits = np.nonzero(row == 1.0)[0]
            if hits.size != 1 or np.any(row[np.arange(row.size) != hits[0]] != 0.0):
                return None
            cols.append(int(hits[0]))
        hits = np.nonzero(self.axis == 1.0)[0]
        if hits.size != 1 or np.any(self.axis[np.arange(self.dim) != hits[0]] != 0.0):
            return None
        axis_col = int(hits[0])
        if axis_col in cols:
            return None
        return (cols, axis_col)

    @property
    def exact_frame(self):
        return self._exact is not None

    def embed(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        p = self.profile.eval(Y)
        if self._exact is not None:
            cols, axis_col = self._exact
            X = np.zeros((Y.shape[0], self.dim))
            for j, c in enumerate(cols):
                X[:, c] = Y[:, j]
            X[:, axis_col] = p
            return X
        return self.origin + Y @ self.frame + p[:, None] * self.axis

    def normal_form(self, X):
        """Orthogonal coordinates Y and graph defect s = height - profile(Y)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self._exact is not None:
            cols, axis_col = self._exact
            Y = X[:, cols]
            s = X[:, axis_col] - self.profile.eval(Y)
            return Y, s
        Z = X - self.origin
        Y = Z @ self.frame.T
        s = Z @ self.axis - self.profile.eval(Y)
        return Y, s

    def owns(self, x, tol=1e-9):
        Y, s = self.normal_form(x)
        ok = self.domain.contains(Y, margin=-tol) & (np.abs(s) <= tol)
        return bool(ok[0]) if np.asarray(x).ndim == 1 else ok

    def tangent_rows(self, Y):
        """Tangent basis rows at each parameter point; shape (n, d-1, d)."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        g = self.profile.grad(Y)
        return self.frame[None, :, :] + g[:, :, None] * self.axis[None, None, :]

    def bundle(self, x):
        Y, _ = self.normal_form(x)
        return Subspace.span(self.tangent_rows(Y)[0])

    def surface_density(self, Y):
        g = self.profile.grad(np.atleast_2d(Y))
        return np.sqrt(1.0 + np.sum(g * g, axis=1))

    def bounding_box(self):
        """Sound enclosure of the embedded carrier."""
        p_lo, p_hi = self.profile.value_bounds(self.domain)
        lo = self.origin.copy()
        hi = self.origin.copy()
        for k in range(self.dim):
            a = self.frame[:, k] * self.domain.lo
            b = self.frame[:, k] * self.domain.hi
            lo[k] += np.minimum(a, b).sum()
            hi[k] += np.maximum(a, b).sum()
            c, dd = self.axis[k] * p_lo, self.axis[k] * p_hi
            lo[k] += min(c, dd) - 1e-12
            hi[k] += max(c, dd) + 1e-12
        return Box(lo, hi)


class IFSCarrier:
    """Attractor of scalar similarities x -> r_i x + t_i inside base_box.

    Requires sum r_i < 1, so generation-n covers have projected length
    (sum r)^n * len0 along every direction; that decay is the cone-null
    certificate for every cone.
    """

    kind = "ifs"

    def __init__(self, ratios, translations, axis, base_box, generation_cap=10):
        self.ratios = np.asarray(ratios, dtype=float)
        self.translations = np.atleast_2d(np.asarray(translations, dtype=float))
        self.axis = unit_vector(axis)
        self.base_box = base_box
        self.generation_cap = int(generation_cap)
        self.dim = base_box.dim
        m = self.ratios.size
        if self.translations.shape != (m, self.dim):
            raise ValueError("translations must be (m, d)")
        if np.any(self.ratios <= 0) or np.any(self.ratios >= 1):
            raise ValueError("ratios must lie strictly in (0, 1)")
        if self.ratios.sum() >= 1.0:
            raise ValueError(
                f"ratios sum to {self.ratios.sum():.6f} >= 1; "
                "projected covers would not decay"
            )
        lo1, hi1 = self.cells(1)
        for i in range(m):
            if np.any(lo1[i] < base_box.lo - 1e-12) or np.any(
                hi1[i] > base_box.hi + 1e-12
            ):
                raise ValueError("map images must stay inside the base box")
            for j in range(i + 1, m):
                if np.all(hi1[i] > lo1[j]) and np.all(hi1[j] > lo1[i]):
                    raise ValueError(
                        f"open-set condition fails: images {i} and {j} overlap"
                    )

    @property
    def branching(self):
        return self.ratios.size

    def cells(self, n):
        """Generation-n cell boxes as (lo, hi) arrays of shape (m^n, d).

        Row order matches the lexicographic order of ``words(n)``: each step
        composes the new map on the inside, so column 0 of the word is the
        outermost map.
        """
        rho = np.ones(1)
        off = np.zeros((1, self.dim))
        for _ in range(n):
            off = (rho[:, None, None] * self.translations[None, :, :]
                   + off[:, None, :]).reshape(-1, self.dim)
            rho = (rho[:, None] * self.ratios[None, :]).reshape(-1)
        lo = rho[:, None] * self.base_box.lo + off
        hi = rho[:, None] * self.base_box.hi + off
        return lo, hi

    def cells_for_words(self, words):
        """Cell boxes for explicit words, shape (k, n); applied outermost last."""
        words = np.atleast_2d(np.asarray(words, dtype=int))
        lo = np.broadcast_to(self.base_box.lo, (words.shape[0], self.dim)).copy()
        hi = np.broadcast_to(self.base_box.hi, (words.shape[0], self.dim)).copy()
        for col in range(words.shape[1] - 1, -1, -1):
            r = self.ratios[words[:, col]][:, None]
            t = self.translations[words[:, col]]
            lo = r * lo + t
            hi = r * hi + t
        return lo, hi

    def words(self, n):
        """All generation-n words in cell order, shape (m^n, n)."""
        m = self.branching
        total = m ** n
        out = np.zeros((total, n), dtype=np.int64)
        for col in range(n):
            reps = m ** (n - col - 1)
            out[:, col] = (np.arange(total) // reps) % m
        return out

    def sparse_words(self, n, count, seed=0):
        """Deterministic sample of distinct generation-n words."""
        m = self.branching
        rng = np.random.default_rng(seed)
        if m ** min(n, 60) <= count:
            return self.words(n)
        seen = set()
        rows = []
        while len(rows) < count:
            w = tuple(int(v) for v in rng.integers(0, m, n))
            if w not in seen:
                seen.add(w)
                rows.append(w)
        return np.array(sorted(rows), dtype=np.int64)

    def len0(self, direction):
        direction = np.asarray(direction, dtype=float)
        return float(np.abs(direction) @ self.base_box.widths)

    def cover_length(self, n, direction):
        """Projected length of the full generation-n cover along a direction."""
        return float(self.ratios.sum() ** n) * self.len0(direction)

    def owns(self, x, tol=1e-9):
        """Whether x lies within roughly tol of the attractor.

        Walks down the cell tree, refining the inner map at each step; a
        point stuck between generations is accepted when it sits within tol
        of the next cover, the outer approximation of the attractor.
        """
        x = np.asarray(x, dtype=float)
        if np.any(x < self.base_box.lo - tol) or np.any(x > self.base_box.hi + tol):
            return False
        rho = 1.0
        off = np.zeros(self.dim)
        for _ in range(self.generation_cap):
            parent_rho, parent_off = rho, off
            found = False
            best = math.inf
            for i in range(self.branching):
                r2 = parent_rho * self.ratios[i]
                c2 = parent_rho * self.translations[i] + parent_off
                clo = r2 * self.base_box.lo + c2
                chi = r2 * self.base_box.hi + c2
                gap = np.maximum(np.maximum(clo - x, x - chi), 0.0)
                if gap.max() < best:
                    best = float(gap.max())
                    if best <= tol:
                        rho, off, found = r2, c2, True
            if not found:
                return False
        return True

    def bundle(self, x):
        return Subspace.zero(self.dim)

    def bounding_box(self):
        return self.base_box


# ---------------------------------------------------------------------------
# measures and clouds
# ---------------------------------------------------------------------------

@dataclass
class ModelMeasure:
    """Finite measure: weighted carriers inside an ambient open box omega."""

    omega: Box
    pieces: list  # list of (carrier, weight)
    total_mass: float = None

    def __post_init__(self):
        weights = [w for _, w in self.pieces]
        if any(w <= 0 for w in weights):
            raise ValueError("piece weights must be positive")
        s = float(sum(weights))
        if self.total_mass is None:
            self.total_mass = s
        elif abs(self.total_mass - s) > _MASS_TOL * max(1.0, s):
            raise ValueError("total_mass does not match the sum of weights")
        for carrier, _ in self.pieces:
            bb = carrier.bounding_box()
            if np.any(bb.lo <= self.omega.lo) or np.any(bb.hi >= self.omega.hi):
                raise ValueError(
                    "carrier must lie strictly inside omega with positive "
                    "distance to the boundary"
                )

    @property
    def dim(self):
        return self.omega.dim


@dataclass
class AtomCloud:
    """Weighted atoms with per-piece provenance.

    `params` maps piece index to the generating parameters of that piece's
    atoms, in atom order: graph pieces store the orthogonal coordinates Y,
    IFS pieces store the generation words.
    """

    points: np.ndarray
    weights: np.ndarray
    piece_ids: np.ndarray
    params: dict = field(default_factory=dict)
    carriers: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        self.piece_ids = np.asarray(self.piece_ids, dtype=int)
        if np.any(self.weights <= 0):
            raise ValueError("atom weights must be positive")

    @property
    def size(self):
        return self.weights.size

    @property
    def dim(self):
        return self.points.shape[1]

    def mass(self):
        return float(self.weights.sum())

    def piece_mass(self, pid):
        return float(self.weights[self.piece_ids == pid].sum())

    def select(self, mask):
        mask = np.asarray(mask, dtype=bool)
        params = {}
        for pid, arr in self.params.items():
            sub = mask[self.piece_ids == pid]
            params[pid] = arr[sub]
        return AtomCloud(self.points[mask], self.weights[mask],
                         self.piece_ids[mask], params, self.carriers)

    def piece_atoms(self, pid):
        mask = self.piece_ids == pid
        return self.points[mask], self.weights[mask]

    def bounding_box(self):
        return Box.bounding(self.points)


def sample_atoms(measure, resolution, max_atoms=2 ** 20):
    """Quadrature cloud for a model measure.

    Graph pieces: parameter-grid quadrature with weights proportional to the
    local surface density, normalized to the piece weight.  IFS pieces:
    uniform weights at generation min(resolution, generation_cap) cell
    centers.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    pts, wts, pids = [], [], []
    params = {}
    carriers = []
    for pid, (carrier, w) in enumerate(measure.pieces):
        carriers.append(carrier)
        if carrier.kind == "graph":
            n_cells = resolution ** carrier.domain.dim
            if n_cells > max_atoms:
                raise ValueError(
                    f"resolution {resolution} needs {n_cells} atoms, "
                    f"budget is {max_atoms}"
                )
            Y = carrier.domain.grid(resolution)
            X = carrier.embed(Y)
            dens = carrier.surface_density(Y)
            wv = w * dens / dens.sum()
            params[pid] = Y
        else:
            n = min(resolution, carrier.generation_cap)
            count = carrier.branching ** n
            if count > max_atoms:
                raise ValueError(
                    f"generation {n} needs {count} atoms, budget is {max_atoms}"
                )
            lo, hi = carrier.cells(n)
            X = 0.5 * (lo + hi)
            wv = np.full(count, w / count)
            params[pid] = carrier.words(n)
        pts.append(X)
        wts.append(wv)
        pids.append(np.full(X.shape[0], pid))
    cloud = AtomCloud(np.vstack(pts), np.concatenate(wts),
                      np.concatenate(pids), params, carriers)
    if abs(cloud.mass() - measure.total_mass) > 1e-9 * max(1.0, measure.total_mass):
        raise AssertionError("quadrature mass drifted beyond tolerance")
    return cloud


def sparse_ifs_atoms(carrier, generation, count, weight=1.0, seed=0, pid=0):
    """Cloud of distinct generation-`generation` cell centers of an IFS piece.

    Deep generations stay affordable because only `count` random words are
    realized; weights are uniform over the chosen cells.
    """
    words = carrier.sparse_words(generation, count, seed)
    lo, hi = carrier.cells_for_words(words)
    X = 0.5 * (lo + hi)
    wv = np.full(words.shape[0], weight / words.shape[0])
    return AtomCloud(X, wv, np.full(words.shape[0], pid),
                     {pid: words}, [carrier])


def bundle_at(measure, x, tol=1e-9):
    """Decomposability-bundle oracle at a sampled point; never full space."""
    for carrier, _ in measure.pieces:
        if carrier.owns(x, tol):
            return carrier.bundle(x)
    raise ValueError("point does not belong to any piece of the measure")


def cloud_bundles(cloud):
    """Bundle subspaces for every atom, using stored provenance."""
    out = [None] * cloud.size
    for pid, carrier in enumerate(cloud.carriers):
        idx = np.nonzero(cloud.piece_ids == pid)[0]
        if idx.size == 0:
            continue
        if carrier.kind == "graph":
            rows = carrier.tangent_rows(cloud.params[pid])
            for j, i in enumerate(idx):
                out[i] = Subspace.span(rows[j])
        else:
            zero = Subspace.zero(cloud.dim)
            for i in idx:
                out[i] = zero
    return out


# ---------------------------------------------------------------------------
# cone-null certificates
# ---------------------------------------------------------------------------

@dataclass
class ConeNullCertificate:
    """Carrier-for-cone certificate with the width-construction payload.

    kinds:
      graph-axis:       cone axis equals the carrier axis; payload carries
                        the shared profile and lip_profile < 1/tan(alpha)
      graph-transverse: affine carrier re-graphed over the cone axis;
                        payload carries the linear defect form and its
                        transverse slope
      graph-sampled:    non-affine carrier, axis mismatch; tangent planes
                        checked transverse at sampled points; width
                        constructions must fall back to atom combs
      ifs:              projected cover decay (sum r)^n len0 along the axis
      atoms:            a finite atom set, cone-null for every cone
    """

    kind: str
    cone: Cone
    carrier: object = None
    lip_transverse: float = 0.0
    defect_form: object = None   # LinearForm for graph-transverse
    len0: float = 0.0
    ratio_sum: float = 0.0
    sample_margin: float = 0.0

    def cover_length(self, n):
        if self.kind != "ifs":
            raise ValueError("cover_length only applies to IFS certificates")
        return self.ratio_sum ** n * self.len0


def _affine_profile(profile):
    """(slope vector, offset) when the profile is affine, else None."""
    from .exprs import Const, LinearForm
    if isinstance(profile, Const):
        return np.zeros(profile.dim), profile.value
    if isinstance(profile, LinearForm):
        return profile.weights.copy(), profile.offset
    return None


def cone_null_certificate(carrier, cone, samples=256, seed=0):
    """Certify a carrier cone-null for the given cone, or reject with the
    violated condition."""
    if isinstance(carrier, IFSCarrier):
        if carrier.dim != cone.dim:
            raise ValueError("carrier and cone dimensions disagree")
        return ConeNullCertificate(
            kind="ifs", cone=cone, carrier=carrier,
            len0=carrier.len0(cone.axis), ratio_sum=float(carrier.ratios.sum()),
        )
    if not isinstance(carrier, GraphCarrier):
        raise TypeError("unsupported carrier type")
    if carrier.dim != cone.dim:
        raise ValueError("carrier and cone dimensions disagree")

    inv_tan = 1.0 / math.tan(cone.half_angle)
    axis_match = np.allclose(np.abs(carrier.axis @ cone.axis), 1.0, atol=1e-12)
    if axis_match:
        if carrier.lip_profile >= inv_tan * (1 - 1e-12):
            raise ConeNullRejection(
                f"lip_profile {carrier.lip_profile:.6g} >= 1/tan(alpha) "
                f"{inv_tan:.6g}"
            )
        return ConeNullCertificate(
            kind="graph-axis", cone=cone, carrier=carrier,
            lip_transverse=carrier.lip_profile,
        )

    aff = _affine_profile(carrier.profile)
    if aff is not None:
        slope, offset = aff
        # hyperplane normal N = axis - sum_j slope_j frame_j
        normal = carrier.axis - slope @ carrier.frame
        normal /= np.linalg.norm(normal)
        e_dot = float(normal @ cone.axis)
        if e_dot < 0:
            normal = -normal
            e_dot = -e_dot
        sin_beta = math.sqrt(max(0.0, 1.0 - e_dot * e_dot))
        if sin_beta >= math.cos(cone.half_angle) * (1 - 1e-12):
            raise ConeNullRejection(
                f"tangent plane not transverse: sin(angle) {sin_beta:.6g} >= "
                f"cos(alpha) {math.cos(cone.half_angle):.6g}"
            )
        # defect s(x) = ((x - origin).N - offset_into_normal)/(e.N); slope 1
        # along e, slope tan(beta) transversally
        c0 = float(carrier.origin @ normal + offset * (carrier.axis @ normal))
        from .exprs import LinearForm
        form = LinearForm(normal / e_dot, -c0 / e_dot)
        tan_beta = sin_beta / e_dot
        return ConeNullCertificate(
            kind="graph-transverse", cone=cone, carrier=carrier,
            lip_transverse=tan_beta, defect_form=form,
        )

    # non-affine, non-axis: sampled tangent transversality
    rng = np.random.default_rng(seed)
    Y = carrier.domain.sample(samples, rng)
    Y = np.vstack([Y, carrier.domain.grid(max(2, int(samples ** (1 / max(1, carrier.dim - 1)))))])
    rows = carrier.tangent_rows(Y)
    cos_a = math.cos(cone.half_angle)
    worst = 0.0
    for r in rows:
        L = Subspace.span(r)
        proj = float(np.linalg.norm(L.basis @ cone.axis))
        worst = max(worst, proj)
        if proj >= cos_a * (1 - 1e-9):
            raise ConeNullRejection(
                f"sampled tangent plane meets the cone: projection {proj:.6g} "
                f">= cos(alpha) {cos_a:.6g}"
            )
    return ConeNullCertificate(
        kind="graph-sampled", cone=cone, carrier=carrier,
        sample_margin=cos_a - worst,
    )


def atoms_certificate(cone):
    """Finite atom sets are cone-null for every cone."""
    return ConeNullCertificate(kind="atoms", cone=cone)


# ---------------------------------------------------------------------------
# empirical cone-null probe
# ---------------------------------------------------------------------------

def _cone_directions(cone, count, rng):
    d = cone.dim
    theta = cone.half_angle * np.sqrt(rng.random(count))
    g = rng.standard_normal((count, d))
    g -= (g @ cone.axis)[:, None] * cone.axis
    norms = np.linalg.norm(g, axis=1)
    norms[norms < 1e-12] = 1.0
    u = g / norms[:, None]
    return np.cos(theta)[:, None] * cone.axis + np.sin(theta)[:, None] * u


def _graph_membership(carrier, X, h):
    Y, s = carrier.normal_form(X)
    near = np.abs(s) <= h * math.sqrt(1.0 + carrier.lip_profile ** 2)
    return near & carrier.domain.inflate(h).contains(Y)


def _ifs_membership(carrier, X, generation, pad):
    lo, hi = carrier.cells(generation)
    hit = np.zeros(X.shape[0], dtype=bool)
    for i in range(lo.shape[0]):
        hit |= np.all(X >= lo[i] - pad, axis=1) & np.all(X <= hi[i] + pad, axis=1)
    return hit


def _probe_starts(carrier, bb, span, trials, rng):
    """Half the curves start on the carrier: a cone-directed curve that can
    run along the set only shows up if something launches from the set."""
    free = bb.inflate(0.2 * span).sample(trials - trials // 2, rng)
    if isinstance(carrier, GraphCarrier):
        Y = carrier.domain.sample(trials // 2, rng)
        seeded = carrier.embed(Y)
    else:
        gen = min(4, carrier.generation_cap)
        lo, hi = carrier.cells(gen)
        pick = rng.integers(0, lo.shape[0], trials // 2)
        seeded = 0.5 * (lo[pick] + hi[pick])
    return np.vstack([seeded, free])


def empirical_cone_null_test(carrier, cone, trials=200, seed=0, levels=5,
                             steps=150):
    """Monte-Carlo probe: cone-directed polylines should spend vanishing
    length in shrinking thickenings of a cone-null carrier.

    A fifth of the curves run exactly along the cone axis (the extreme ray
    of the closed cone) and half of all curves start on the carrier, so a
    carrier that a cone curve can follow is actually caught.  The statistic
    per level is the worst fraction over all curves, not the mean: averaging
    would dilute the single curve that stays on a parallel carrier.  A
    non-decaying profile is flagged, not raised.
    """
    rng = np.random.default_rng(seed)
    bb = carrier.bounding_box()
    span = max(bb.diameter(), 1e-6)
    step = span / steps

    estimates = []
    scales = []
    for level in range(levels):
        if isinstance(carrier, GraphCarrier):
            h = span * 0.05 * (0.5 ** level)
            scales.append(h)
        else:
            gen = min(1 + level, carrier.generation_cap)
            scales.append(gen)
        worst = 0.0
        starts = _probe_starts(carrier, bb, span, trials, rng)
        for t in range(trials):
            if t % 5 == 0:
                dirs = np.broadcast_to(cone.axis, (steps, cone.dim))
            else:
                dirs = _cone_directions(cone, steps, rng)
            path = starts[t] + np.cumsum(step * dirs, axis=0)
            if isinstance(carrier, GraphCarrier):
                inside = _graph_membership(carrier, path, h)
            else:
                inside = _ifs_membership(carrier, path, gen, pad=0.1 * step)
            worst = max(worst, float(inside.mean()))
        estimates.append(worst)

    first = max(estimates[0], 1e-12)
    ratio = estimates[-1] / first
    return {
        "scales": scales,
        "estimates": estimates,
        "ratio": ratio,
        "decaying": bool(ratio < 0.5 or estimates[-1] < 1e-4),
    }


# ---------------------------------------------------------------------------
# inner-regular refinement
# ---------------------------------------------------------------------------

@dataclass
class DropLog:
    entries: list  # (label, sorted atom indices, mass)
    total: float

    def to_dict(self):
        return {
            "entries": [
                {"label": lbl, "count": len(idx), "mass": mass,
                 "indices": [int(i) for i in idx]}
                for lbl, idx, mass in self.entries
            ],
            "total": self.total,
        }


def inner_regular_refine(cloud, budget, marks):
    """Drop all marked atoms, requiring dropped mass strictly below budget.

    `marks` is a list of (label, boolean mask) predicates.  The drop log
    lists each predicate's atoms smallest-weight-first; an infeasible budget
    raises naming the predicate responsible for the most mass.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    combined = np.zeros(cloud.size, dtype=bool)
    entries = []
    for label, mask in marks:
        mask = np.asarray(mask, dtype=bool)
        fresh = mask & ~combined
        combined |= mask
        idx = np.nonzero(fresh)[0]
        order = np.argsort(cloud.weights[idx], kind="stable")
        idx = idx[order]
        entries.append((label, idx.tolist(), float(cloud.weights[idx].sum())))
    total = float(cloud.weights[combined].sum())
    if total >= budget:
        worst = max(entries, key=lambda e: e[2])
        raise ValueError(
            f"cannot refine: dropping {total:.6g} >= budget {budget:.6g}; "
            f"binding predicate {worst[0]!r} accounts for {worst[2]:.6g}"
        )
    return cloud.select(~combined), DropLog(entries, total)
