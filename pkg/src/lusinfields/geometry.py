"""Axis-aligned boxes, cones, subspaces and finite direction nets.

The transversality workhorse: a proper linear subspace L avoids the closed
cone C(e, alpha) = {v : v . e >= cos(alpha) |v|} exactly when the projection
of the axis onto L is shorter than cos(alpha).  Finite direction nets make
that property available for *every* proper subspace at once: any net whose
geodesic covering radius is at most (pi/2 - alpha)/2 contains, for each
proper subspace, at least one transverse direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Closed-cone membership uses a relative slack so that exact boundary vectors
# computed in floating point (e.g. (1,1) against a pi/4 cone) land inside.
# Transversality errs the opposite way: it demands a definitive gap, so that
# float rounding can never promote boundary contact to transverse.
_CONE_RTOL = 1e-12


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

@dataclass
class Box:
    """Closed axis-aligned box given by per-axis lower and upper bounds."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(self.hi < self.lo):
            raise ValueError("box has hi < lo on some axis")

    @property
    def dim(self):
        return self.lo.size

    @property
    def widths(self):
        return self.hi - self.lo

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    def diameter(self):
        return float(np.linalg.norm(self.widths))

    def contains(self, points, margin=0.0):
        """Boolean mask of rows of `points` inside the box (shrunk by margin)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ok = np.all(pts >= self.lo + margin, axis=1) & np.all(
            pts <= self.hi - margin, axis=1
        )
        return ok

    def inflate(self, amount):
        """New box grown by `amount` on every side (scalar or per-axis)."""
        amount = np.asarray(amount, dtype=float)
        return Box(self.lo - amount, self.hi + amount)

    def intersect(self, other):
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(hi < lo):
            raise ValueError("boxes do not intersect")
        return Box(lo, hi)

    def overlaps(self, other):
        return bool(
            np.all(self.hi > other.lo) and np.all(other.hi > self.lo)
        )

    def grid(self, resolution):
        """Uniform grid of cell centers, `resolution` cells per axis."""
        axes = [
            self.lo[k] + (np.arange(resolution) + 0.5) * (self.widths[k] / resolution)
            for k in range(self.dim)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def sample(self, n, rng):
        """n uniform points from the box."""
        u = rng.random((n, self.dim))
        return self.lo + u * self.widths

    @staticmethod
    def bounding(points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return Box(pts.min(axis=0), pts.max(axis=0))

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @staticmethod
    def from_dict(d):
        return Box(np.asarray(d["lo"]), np.asarray(d["hi"]))


def first_box_clash(lo, hi, owner=None):
    """First pair of boxes with overlapping interiors, or None.

    `lo` and `hi` are stacked (k, d) bound arrays.  The sweep runs along the
    axis where the boxes are most spread out, so long thin clusters of many
    small boxes are checked in near-linear time instead of all pairs.  Pairs
    sharing an `owner` label are skipped.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape[0] < 2:
        return None
    ax = int(np.argmax(lo.max(axis=0) - lo.min(axis=0)))
    order = np.argsort(lo[:, ax], kind="stable")
    active = []
    for oi in order:
        oi = int(oi)
        x = lo[oi, ax]
        active = [aj for aj in active if hi[aj, ax] > x]
        for aj in active:
            if owner is not None and owner[aj] == owner[oi]:
                continue
            if np.all(hi[oi] > lo[aj]) and np.all(hi[aj] > lo[oi]):
                return (aj, oi) if aj < oi else (oi, aj)
        active.append(oi)
    return None


# ---------------------------------------------------------------------------
# directions and cones
# ---------------------------------------------------------------------------

def unit_vector(v):
    """Normalize v, rejecting near-zero input."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n < 1e-300:
        raise ValueError("cannot normalize a zero vector")
    return v / n


@dataclass
class Cone:
    """Closed round cone {v : v . axis >= cos(half_angle) |v|}."""

    axis: np.ndarray
    half_angle: float

    def __post_init__(self):
        self.axis = unit_vector(self.axis)
        if not 0.0 < self.half_angle < math.pi / 2:
            raise ValueError("half_angle must lie strictly between 0 and pi/2")

    @property
    def dim(self):
        return self.axis.size

    def contains(self, v):
        """Closed-cone membership test, vectorized over rows of v.

        Boundary vectors are included; a relative tolerance absorbs the
        rounding of cos(half_angle) * |v|.
        """
        v = np.atleast_2d(np.asarray(v, dtype=float))
        dots = v @ self.axis
        norms = np.linalg.norm(v, axis=1)
        thresh = math.cos(self.half_angle) * norms
        out = dots >= thresh - _CONE_RTOL * np.maximum(norms, 1.0)
        return out if out.size > 1 else bool(out[0])

    def reflected(self):
        """The cone with opposite axis; transversality is invariant under it."""
        return Cone(-self.axis, self.half_angle)

    def to_dict(self):
        return {"axis": self.axis.tolist(), "half_angle": self.half_angle}

    @staticmethod
    def from_dict(d):
        return Cone(np.asarray(d["axis"]), float(d["half_angle"]))


@dataclass
class Subspace:
    """Linear subspace of R^d stored as an orthonormal basis (k x d rows)."""

    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim != 2:
            raise ValueError("basis must be a (k, d) array; use k = 0 for {0}")
        if b.shape[0] > 0:
            gram = b @ b.T
            if not np.allclose(gram, np.eye(b.shape[0]), atol=1e-10):
                raise ValueError("basis rows must be orthonormal")
        self.basis = b

    @property
    def dim(self):
        return self.basis.shape[0]

    @property
    def ambient_dim(self):
        return self.basis.shape[1]

    def project(self, v):
        """Orthogonal projection of v onto the subspace."""
        if self.dim == 0:
            return np.zeros_like(np.asarray(v, dtype=float))
        return (np.asarray(v, dtype=float) @ self.basis.T) @ self.basis

    @staticmethod
    def span(vectors):
        """Subspace spanned by the given (possibly dependent) row vectors."""
        m = np.atleast_2d(np.asarray(vectors, dtype=float))
        q, r = np.linalg.qr(m.T)
        keep = np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())
        return Subspace(q.T[keep])

    @staticmethod
    def zero(d):
        return Subspace(np.zeros((0, d)))

    @staticmethod
    def random(d, k, rng):
        """Haar-random k-dimensional subspace from a Gaussian frame."""
        g = rng.standard_normal((d, k))
        q, _ = np.linalg.qr(g)
        return Subspace(q.T)


def subspace_transverse(subspace, cone):
    """True iff the subspace meets the cone only at the origin.

    Equivalent to |P_L(axis)| < cos(half_angle), strictly; boundary contact
    counts as failure.  The full space is never transverse.
    """
    if subspace.dim >= subspace.ambient_dim:
        return False
    if subspace.dim == 0:
        return True
    proj = np.linalg.norm(subspace.basis @ cone.axis)
    return bool(proj < math.cos(cone.half_angle) - _CONE_RTOL)


def projection_gap(subspace, cone):
    """cos(half_angle) - |P_L(axis)|; positive iff transverse (proper L)."""
    proj = float(np.linalg.norm(subspace.basis @ cone.axis)) if subspace.dim else 0.0
    return math.cos(cone.half_angle) - proj


def c_alpha(alpha):
    """Gradient budget 1 + 1/tan(alpha) of a width function for angle alpha."""
    if not 0.0 < alpha < math.pi / 2:
        raise ValueError("alpha must lie strictly between 0 and pi/2")
    return 1.0 + 1.0 / math.tan(alpha)


# ---------------------------------------------------------------------------
# direction nets
# ---------------------------------------------------------------------------

@dataclass
class DirectionNet:
    """Finite set of unit directions with a certified geodesic covering radius.

    If the covering radius is at most (pi/2 - half_angle)/2, every proper
    subspace has a transverse direction in the net: pick the net point
    nearest a unit normal of the subspace, and the angle bookkeeping
    sin(radius) < cos(half_angle) does the rest.
    """

    directions: np.ndarray
    half_angle: float
    radius: float = field(default=0.0)

    def __post_init__(self):
        dirs = np.atleast_2d(np.asarray(self.directions, dtype=float))
        norms = np.linalg.norm(dirs, axis=1)
        self.directions = dirs / norms[:, None]
        if self.radius <= 0.0:
            self.radius = 0.5 * (math.pi / 2 - self.half_angle)

    @property
    def dim(self):
        return self.directions.shape[1]

    @property
    def size(self):
        return self.directions.shape[0]

    def first_transverse(self, subspace):
        """Index of the first direction transverse to the subspace, or -1."""
        if subspace.dim >= subspace.ambient_dim:
            return -1
        if subspace.dim == 0:
            return 0
        proj = np.linalg.norm(self.directions @ subspace.basis.T, axis=1)
        hits = np.nonzero(proj < math.cos(self.half_angle) - _CONE_RTOL)[0]
        return int(hits[0]) if hits.size else -1

    def covering_defect(self, points):
        """Max geodesic distance from the sample points to the net, minus radius."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        dots = np.clip(pts @ self.directions.T, -1.0, 1.0)
        nearest = np.arccos(dots.max(axis=1))
        return float(nearest.max() - self.radius)

    def to_dict(self):
        return {
            "directions": self.directions.tolist(),
            "half_angle": self.half_angle,
            "radius": self.radius,
        }

    @staticmethod
    def from_dict(d):
        return DirectionNet(
            np.asarray(d["directions"]), float(d["half_angle"]), float(d["radius"])
        )


def _circle_net(alpha):
    spacing_max = math.pi / 2 - alpha
    n = int(math.ceil(2 * math.pi / spacing_max))
    angles = 2 * math.pi * np.arange(n) / n
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _sphere_spiral(n):
    """n points along a generalized spiral on S^2, roughly equal spacing."""
    k = np.arange(n)
    z = -1.0 + 2.0 * (k + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = math.pi * (3.0 - math.sqrt(5.0))
    theta = golden * k
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _greedy_packing(d, n, rng):
    """Greedy farthest-point subset of a large Gaussian candidate pool."""
    pool = rng.standard_normal((max(40 * n, 2000), d))
    pool /= np.linalg.norm(pool, axis=1)[:, None]
    chosen = [0]
    dots = pool @ pool[0]
    for _ in range(n - 1):
        idx = int(np.argmin(dots))
        chosen.append(idx)
        dots = np.maximum(dots, pool @ pool[idx])
    return pool[chosen]

def build_direction_net(d, alpha, seed=0):
    """Net of unit directions in R^d with covering radius (pi/2 - alpha)/2.

    d = 2 uses equally spaced angles (spacing <= pi/2 - alpha, hence radius
    at most half that).  Higher dimensions place candidate points by spiral
    (d = 3) or greedy packing (d >= 4) and certify the radius by sampling,
    doubling the candidate count on failure up to 8 times.
    """
    if d < 2:
        raise ValueError("direction nets need ambient dimension >= 2")
    if not 0.0 < alpha < math.pi / 2:
        raise ValueError("alpha must lie strictly between 0 and pi/2")
    radius = 0.5 * (math.pi / 2 - alpha)
    if d == 2:
        return DirectionNet(_circle_net(alpha), alpha, radius)

    rng = np.random.default_rng(seed)
    # Cap-area covering estimate with headroom; doubled on certification failure.
    count = int(math.ceil(6.0 * (2.0 / radius) ** (d - 1)))
    for _ in range(8):
        if d == 3:
            dirs = _sphere_spiral(count)
        else:
            dirs = _greedy_packing(d, count, rng)
        net = DirectionNet(dirs, alpha, radius)
        probes = rng.standard_normal((20000, d))
        probes /= np.linalg.norm(probes, axis=1)[:, None]
        # Build with slack so an independent certification pass has margin.
        if net.covering_defect(probes) < -0.05 * radius:
            return net
        count *= 2
    raise RuntimeError(
        f"could not certify a covering net for d={d}, alpha={alpha:.4f}"
    )


def verify_net(net, trials=10000, seed=0):
    """Sampling certificate for a direction net.

    For every subspace dimension 1..d-1, draws Haar-random subspaces and
    checks that some net direction is transverse; also checks the covering
    radius on random unit vectors and the reflected-cone invariance on the
    failures' complements.  Returns a dict report with failure witnesses.
    """
    rng = np.random.default_rng(seed)
    d = net.dim
    cos_a = math.cos(net.half_angle)
    report = {
        "dim": d,
        "half_angle": net.half_angle,
        "size": net.size,
        "trials_per_dim": trials,
        "transversality_failures": [],
        "covering_defect": None,
        "passed": True,
    }
    for k in range(1, d):
        g = rng.standard_normal((trials, d, k))
        q, _ = np.linalg.qr(g)
        # projections of every net direction onto every sampled subspace
        proj = np.linalg.norm(
            np.einsum("ndk,md->nmk", q, net.directions), axis=2
        )
        ok = (proj < cos_a - _CONE_RTOL).any(axis=1)
        bad = np.nonzero(~ok)[0]
        for idx in bad[:5]:
            report["transversality_failures"].append(
                {"subspace_dim": k, "basis": q[idx].T.tolist()}
            )
        if bad.size:
            report["passed"] = False
    probes = rng.standard_normal((max(trials, 20000), d))
    probes /= np.linalg.norm(probes, axis=1)[:, None]
    defect = net.covering_defect(probes)
    report["covering_defect"] = defect
    if defect > 0:
        report["passed"] = False
    return report
