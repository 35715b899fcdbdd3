"""C^1 expression trees with exact gradients and certified interval bounds.

Every node evaluates values and gradients in closed form over point batches
(n, d) -> (n,) / (n, d), and propagates sound upper bounds for its value and
its per-axis partial derivatives over an axis-aligned box.  Bound arithmetic
is padded for floating-point rounding, so a certified bound always dominates
the true supremum, never the other way round.

The primitive catalog is deliberately piecewise-cubic: smoothstep ramps give
exact derivatives and exact slope constants, and C^1 is all the downstream
constructions need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree as _cKDTree

from .geometry import Box, first_box_clash

_EPS = np.finfo(float).eps
_TINY = 1e-300


def _pad_lo(value, magnitude, nops=1):
    """Lower bound padded below `value` by the worst-case rounding of nops ops."""
    return value - (nops + 2) * _EPS * abs(magnitude) - _TINY


def _pad_hi(value, magnitude, nops=1):
    return value + (nops + 2) * _EPS * abs(magnitude) + _TINY


def _interval_abs_max(lo, hi):
    return max(abs(lo), abs(hi))


# node registry for serialization
_EXPR_TYPES = {}
_PROFILE_TYPES = {}


def _register(cls):
    _EXPR_TYPES[cls.__name__] = cls
    return cls


def _register_profile(cls):
    _PROFILE_TYPES[cls.__name__] = cls
    return cls


def expr_from_dict(d):
    """Rebuild an expression tree from its to_dict form."""
    return _EXPR_TYPES[d["type"]]._from_dict(d)


def profile_from_dict(d):
    return _PROFILE_TYPES[d["type"]]._from_dict(d)


# ---------------------------------------------------------------------------
# base node
# ---------------------------------------------------------------------------

class ScalarExpr:
    """Base expression node; subclasses implement the five-method contract."""

    dim = None  # ambient dimension of the argument

    def eval(self, X):
        raise NotImplementedError

    def grad(self, X):
        raise NotImplementedError

    def value_bounds(self, box):
        """Certified (lo, hi) enclosing all values on the box."""
        raise NotImplementedError

    def partial_bounds(self, box):
        """Certified per-axis array b with sup_box |d_k expr| <= b[k]."""
        raise NotImplementedError

    def feature_width(self, box):
        """Heuristic smallest internal length scale (for choosing FD steps)."""
        return math.inf

    def to_dict(self):
        raise NotImplementedError

    # derived conveniences -------------------------------------------------

    def sup_bound(self, box):
        lo, hi = self.value_bounds(box)
        return _interval_abs_max(lo, hi)

    def grad_norm_bound(self, box):
        """Certified sup of the Euclidean gradient norm over the box."""
        b = self.partial_bounds(box)
        return _pad_hi(float(np.sqrt(np.sum(b * b))), float(np.sum(np.abs(b))),
                       nops=b.size + 1)

    def grad_max_partial(self, box):
        return float(np.max(self.partial_bounds(box)))

    def lipschitz_bound(self, box):
        # boxes are convex, so the gradient sup bounds the Lipschitz constant
        return self.grad_norm_bound(box)


def _as_batch(X, dim):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != dim:
        raise ValueError(f"points have dimension {X.shape[1]}, expression wants {dim}")
    return X


# ---------------------------------------------------------------------------
# arithmetic nodes
# ---------------------------------------------------------------------------

@_register
class Const(ScalarExpr):
    def __init__(self, value, dim):
        self.value = float(value)
        self.dim = int(dim)

    def eval(self, X):
        X = _as_batch(X, self.dim)
        return np.full(X.shape[0], self.value)

    def grad(self, X):
        X = _as_batch(X, self.dim)
        return np.zeros_like(X)

    def value_bounds(self, box):
        return (self.value, self.value)

    def partial_bounds(self, box):
        return np.zeros(self.dim)

    def to_dict(self):
        return {"type": "Const", "value": self.value, "dim": self.dim}

    @staticmethod
    def _from_dict(d):
        return Const(d["value"], d["dim"])


@_register
class LinearForm(ScalarExpr):
    """w . x + c with a fixed left-to-right accumulation order.

    The dot product is the one evaluation that must be bitwise reproducible
    between construction time and verification time (comb knots are built
    from it), so it is computed with an explicit cumulative sum rather than
    whatever BLAS variant np.dot picks for a given shape.
    """

    def __init__(self, weights, offset=0.0):
        self.weights = np.asarray(weights, dtype=float)
        self.offset = float(offset)
        self.dim = self.weights.size

    def eval(self, X):
        X = _as_batch(X, self.dim)
        acc = np.full(X.shape[0], self.offset)
        for k in range(self.dim):
            acc = acc + self.weights[k] * X[:, k]
        return acc

    def grad(self, X):
        X = _as_batch(X, self.dim)
        return np.broadcast_to(self.weights, X.shape).copy()

    def value_bounds(self, box):
        a = self.weights * box.lo
        b = self.weights * box.hi
        lo = self.offset + np.minimum(a, b).sum()
        hi = self.offset + np.maximum(a, b).sum()
        mag = abs(self.offset) + np.abs(np.stack([a, b])).max(axis=0).sum()
        return (_pad_lo(lo, mag, self.dim + 1), _pad_hi(hi, mag, self.dim + 1))

    def partial_bounds(self, box):
        return np.abs(self.weights)

    def to_dict(self):
        return {"type": "LinearForm", "weights": self.weights.tolist(),
                "offset": self.offset}

    @staticmethod
    def _from_dict(d):
        return LinearForm(np.asarray(d["weights"]), d["offset"])


def coordinate(k, dim):
    """The coordinate selector x_{k+1} as a LinearForm."""
    w = np.zeros(dim)
    w[k] = 1.0
    return LinearForm(w, 0.0)


@_register
class Sum(ScalarExpr):
    def __init__(self, terms):
        if not terms:
            raise ValueError("Sum needs at least one term")
        self.terms = list(terms)
        self.dim = self.terms[0].dim
        if any(t.dim != self.dim for t in self.terms):
            raise ValueError("sum terms disagree on dimension")

    def eval(self, X):
        out = self.terms[0].eval(X)
        for t in self.terms[1:]:
            out = out + t.eval(X)
        return out

    def grad(self, X):
        out = self.terms[0].grad(X)
        for t in self.terms[1:]:
            out = out + t.grad(X)
        return out

    def value_bounds(self, box):
        bounds = [t.value_bounds(box) for t in self.terms]
        lo = sum(b[0] for b in bounds)
        hi = sum(b[1] for b in bounds)
        mag = sum(_interval_abs_max(*b) for b in bounds)
        n = len(self.terms)
        return (_pad_lo(lo, mag, n), _pad_hi(hi, mag, n))

    def partial_bounds(self, box):
        total = np.zeros(self.dim)
        mag = np.zeros(self.dim)
        for t in self.terms:
            b = t.partial_bounds(box)
            total += b
            mag += np.abs(b)
        return total + (len(self.terms) + 2) * _EPS * mag

    def feature_width(self, box):
        return min(t.feature_width(box) for t in self.terms)

    def to_dict(self):
        return {"type": "Sum", "terms": [t.to_dict() for t in self.terms]}

    @staticmethod
    def _from_dict(d):
        return Sum([expr_from_dict(t) for t in d["terms"]])


@_register
class Scale(ScalarExpr):
    def __init__(self, factor, inner):
        self.factor = float(factor)
        self.inner = inner
        self.dim = inner.dim

    def eval(self, X):
        return self.factor * self.inner.eval(X)

    def grad(self, X):
        return self.factor * self.inner.grad(X)

    def value_bounds(self, box):
        lo, hi = self.inner.value_bounds(box)
        a, b = self.factor * lo, self.factor * hi
        lo2, hi2 = min(a, b), max(a, b)
        mag = _interval_abs_max(a, b)
        return (_pad_lo(lo2, mag), _pad_hi(hi2, mag))

    def partial_bounds(self, box):
        b = abs(self.factor) * self.inner.partial_bounds(box)
        return b + 3 * _EPS * np.abs(b)

    def feature_width(self, box):
        return self.inner.feature_width(box)

    def to_dict(self):
        return {"type": "Scale", "factor": self.factor,
                "inner": self.inner.to_dict()}

    @staticmethod
    def _from_dict(d):
        return Scale(d["factor"], expr_from_dict(d["inner"]))


@_register
class Product(ScalarExpr):
    def __init__(self, left, right):
        if left.dim != right.dim:
            raise ValueError("product factors disagree on dimension")
        self.left = left
        self.right = right
        self.dim = left.dim

    def eval(self, X):
        return self.left.eval(X) * self.right.eval(X)

    def grad(self, X):
        fl = self.left.eval(X)[:, None]
        fr = self.right.eval(X)[:, None]
        return fl * self.right.grad(X) + fr * self.left.grad(X)

    def value_bounds(self, box):
        a_lo, a_hi = self.left.value_bounds(box)
        b_lo, b_hi = self.right.value_bounds(box)
        prods = [a_lo * b_lo, a_lo * b_hi, a_hi * b_lo, a_hi * b_hi]
        mag = max(abs(p) for p in prods)
        return (_pad_lo(min(prods), mag), _pad_hi(max(prods), mag))

    def partial_bounds(self, box):
        sa = self.left.sup_bound(box)
        sb = self.right.sup_bound(box)
        ga = self.left.partial_bounds(box)
        gb = self.right.partial_bounds(box)
        b = sa * gb + sb * ga
        return b + 5 * _EPS * np.abs(b)

    def feature_width(self, box):
        return min(self.left.feature_width(box), self.right.feature_width(box))

    def to_dict(self):
        return {"type": "Product", "left": self.left.to_dict(),
                "right": self.right.to_dict()}

    @staticmethod
    def _from_dict(d):
        return Product(expr_from_dict(d["left"]), expr_from_dict(d["right"]))


@_register
class Quotient(ScalarExpr):
    """left / right; bounds require the denominator interval to exclude 0."""

    def __init__(self, left, right):
        if left.dim != right.dim:
            raise ValueError("quotient operands disagree on dimension")
        self.left = left
        self.right = right
        self.dim = left.dim

    def eval(self, X):
        return self.left.eval(X) / self.right.eval(X)

    def grad(self, X):
        fl = self.left.eval(X)[:, None]
        fr = self.right.eval(X)[:, None]
        return (self.left.grad(X) * fr - fl * self.right.grad(X)) / (fr * fr)

    def _den_bounds(self, box):
        d_lo, d_hi = self.right.value_bounds(box)
        if d_lo <= 0.0 <= d_hi:
            raise ValueError("denominator interval contains 0; no certified bound")
        return d_lo, d_hi

    def value_bounds(self, box):
        n_lo, n_hi = self.left.value_bounds(box)
        d_lo, d_hi = self._den_bounds(box)
        quots = [n_lo / d_lo, n_lo / d_hi, n_hi / d_lo, n_hi / d_hi]
        mag = max(abs(q) for q in quots)
        return (_pad_lo(min(quots), mag), _pad_hi(max(quots), mag))

    def partial_bounds(self, box):
        d_lo, d_hi = self._den_bounds(box)
        d_min = min(abs(d_lo), abs(d_hi))
        sn = self.left.sup_bound(box)
        gn = self.left.partial_bounds(box)
        gd = self.right.partial_bounds(box)
        b = gn / d_min + sn * gd / (d_min * d_min)
        return b + 8 * _EPS * np.abs(b)

    def feature_width(self, box):
        return min(self.left.feature_width(box), self.right.feature_width(box))

    def to_dict(self):
        return {"type": "Quotient", "left": self.left.to_dict(),
                "right": self.right.to_dict()}

    @staticmethod
    def _from_dict(d):
        return Quotient(expr_from_dict(d["left"]), expr_from_dict(d["right"]))


@_register
class ComposeVec(ScalarExpr):
    """inner(a_1(x), ..., a_k(x)) for scalar argument expressions a_j.

    Covers composition with affine maps (LinearForm arguments), profiles
    over transverse coordinates, and data pulled back through inverse maps.
    """

    def __init__(self, inner, args):
        self.inner = inner
        self.args = list(args)
        if inner.dim != len(self.args):
            raise ValueError("inner expression arity != number of arguments")
        self.dim = self.args[0].dim
        if any(a.dim != self.dim for a in self.args):
            raise ValueError("composition arguments disagree on dimension")

    def _arg_matrix(self, X):
        return np.stack([a.eval(X) for a in self.args], axis=1)

    def eval(self, X):
        X = _as_batch(X, self.dim)
        return self.inner.eval(self._arg_matrix(X))

    def grad(self, X):
        X = _as_batch(X, self.dim)
        gi = self.inner.grad(self._arg_matrix(X))
        out = np.zeros_like(X)
        for j, a in enumerate(self.args):
            out += gi[:, j:j + 1] * a.grad(X)
        return out

    def _arg_box(self, box):
        los, his = [], []
        for a in self.args:
            lo, hi = a.value_bounds(box)
            los.append(lo)
            his.append(hi)
        return Box(np.array(los), np.array(his))

    def value_bounds(self, box):
        return self.inner.value_bounds(self._arg_box(box))

    def partial_bounds(self, box):
        abox = self._arg_box(box)
        gi = self.inner.partial_bounds(abox)
        total = np.zeros(self.dim)
        mag = np.zeros(self.dim)
        for j, a in enumerate(self.args):
            contrib = gi[j] * a.partial_bounds(box)
            total += contrib
            mag += np.abs(contrib)
        return total + (len(self.args) + 3) * _EPS * mag

    def feature_width(self, box):
        abox = self._arg_box(box)
        arg_lip = max(max(a.grad_norm_bound(box) for a in self.args), 1.0)
        w = self.inner.feature_width(abox) / arg_lip
        return min(w, min(a.feature_width(box) for a in self.args))

    def to_dict(self):
        return {"type": "ComposeVec", "inner": self.inner.to_dict(),
                "args": [a.to_dict() for a in self.args]}

    @staticmethod
    def _from_dict(d):
        return ComposeVec(expr_from_dict(d["inner"]),
                          [expr_from_dict(a) for a in d["args"]])


# ---------------------------------------------------------------------------
# one-dimensional C^1 profiles
# ---------------------------------------------------------------------------

def _smoothstep(u):
    """Cubic smoothstep on [0, 1]: 0 -> 0, 1 -> 1, C^1 at both ends."""
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _smoothstep_d(u):
    inside = (u > 0.0) & (u < 1.0)
    return np.where(inside, 6.0 * u * (1.0 - u), 0.0)


def _smoothstep_int(u):
    """Antiderivative of the smoothstep, 0 at u = 0; equals 1/2 at u = 1."""
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 - 0.5 * u ** 4


class Profile1:
    """One-dimensional C^1 function with certified range and slope data."""

    def f(self, t):
        raise NotImplementedError

    def df(self, t):
        raise NotImplementedError

    def range_on(self, lo, hi):
        raise NotImplementedError

    def max_abs_df(self, lo, hi):
        raise NotImplementedError

    def feature_width(self):
        return math.inf

    def to_dict(self):
        raise NotImplementedError


@_register_profile
class SinP(Profile1):
    def f(self, t):
        return np.sin(t)

    def df(self, t):
        return np.cos(t)

    def range_on(self, lo, hi):
        return _trig_range(lo, hi, phase=0.0)

    def max_abs_df(self, lo, hi):
        # |cos| attains 1 wherever the interval contains a multiple of pi
        r_lo, r_hi = _trig_range(lo, hi, phase=math.pi / 2)
        return max(abs(r_lo), abs(r_hi))

    def to_dict(self):
        return {"type": "SinP"}

    @staticmethod
    def _from_dict(d):
        return SinP()


@_register_profile
class CosP(Profile1):
    def f(self, t):
        return np.cos(t)

    def df(self, t):
        return -np.sin(t)

    def range_on(self, lo, hi):
        return _trig_range(lo, hi, phase=math.pi / 2)

    def max_abs_df(self, lo, hi):
        r_lo, r_hi = _trig_range(lo, hi, phase=0.0)
        return max(abs(r_lo), abs(r_hi))

    def to_dict(self):
        return {"type": "CosP"}

    @staticmethod
    def _from_dict(d):
        return CosP()


def _trig_range(lo, hi, phase):
    """Sound range of sin(t + phase) over [lo, hi]."""
    if hi - lo >= 2 * math.pi:
        return (-1.0, 1.0)
    a, b = lo + phase, hi + phase
    vals = [math.sin(a), math.sin(b)]
    # critical points pi/2 + k*pi inside [a, b]
    k_min = math.ceil((a - math.pi / 2) / math.pi)
    k_max = math.floor((b - math.pi / 2) / math.pi)
    for k in range(k_min, k_max + 1):
        vals.append(1.0 if k % 2 == 0 else -1.0)
    r_lo, r_hi = min(vals), max(vals)
    return (max(-1.0, _pad_lo(r_lo, 1.0, 4)), min(1.0, _pad_hi(r_hi, 1.0, 4)))


@_register_profile
class ExpP(Profile1):
    def f(self, t):
        return np.exp(t)

    def df(self, t):
        return np.exp(t)

    def range_on(self, lo, hi):
        a, b = math.exp(lo), math.exp(hi)
        return (max(0.0, _pad_lo(a, a, 2)), _pad_hi(b, b, 2))

    def max_abs_df(self, lo, hi):
        b = math.exp(hi)
        return _pad_hi(b, b, 2)

    def to_dict(self):
        return {"type": "ExpP"}

    @staticmethod
    def _from_dict(d):
        return ExpP()


@_register_profile
class PlateauProf(Profile1):
    """Nondecreasing C^1 profile whose slope is a plateau with smooth ramps.

    slope = 0 outside [-(p+tr), p+tr], 1 on [-p, p], cubic smoothstep ramps
    between.  Total rise = 2p + tr, required to stay at or below the cap
    zeta; the constructor rejects parameter combinations exceeding it (using
    the conservative reading 2p + 2tr <= zeta).
    """

    def __init__(self, zeta, plateau=None, transition=None):
        if zeta <= 0:
            raise ValueError("zeta must be positive")
        if plateau is None:
            plateau = zeta / 4
        if transition is None:
            transition = zeta / 4
        if plateau <= 0 or transition <= 0:
            raise ValueError("plateau and transition must be positive")
        if 2 * plateau + 2 * transition > zeta * (1 + 1e-12):
            raise ValueError("plateau/transition combination rises above zeta")
        self.zeta = float(zeta)
        self.plateau = float(plateau)
        self.transition = float(transition)
        self.rise = 2 * self.plateau + self.transition

    def f(self, t):
        # keep extended-precision arguments: verification probes slope-1
        # bands far below one float64 ulp with longdouble stencils
        t = np.asarray(t, dtype=np.result_type(t, float))
        p, tr = self.plateau, self.transition
        up = tr * _smoothstep_int((t + p + tr) / tr)
        mid = 0.5 * tr + (t + p)
        down = 0.5 * tr + 2 * p + tr * (0.5 - _smoothstep_int((p + tr - t) / tr))
        out = np.where(t <= -p, up, np.where(t <= p, mid, down))
        return np.where(t <= -p - tr, 0.0, np.where(t >= p + tr, self.rise, out))

    def df(self, t):
        t = np.asarray(t, dtype=float)
        p, tr = self.plateau, self.transition
        up = _smoothstep((t + p + tr) / tr)
        down = _smoothstep((p + tr - t) / tr)
        out = np.where(np.abs(t) <= p, 1.0, np.where(t < 0, up, down))
        return np.where(np.abs(t) >= p + tr, 0.0, out)

    def range_on(self, lo, hi):
        a = float(self.f(np.array([lo]))[0])
        b = float(self.f(np.array([hi]))[0])
        return (max(0.0, _pad_lo(a, self.rise, 4)),
                min(_pad_hi(self.rise, self.rise), _pad_hi(b, self.rise, 4)))

    def max_abs_df(self, lo, hi):
        edge = self.plateau + self.transition
        if hi < -edge or lo > edge:
            return 0.0
        if hi < -self.plateau:
            return float(self.df(np.array([hi]))[0]) + 4 * _EPS
        if lo > self.plateau:
            return float(self.df(np.array([lo]))[0]) + 4 * _EPS
        return 1.0

    def feature_width(self):
        return self.transition

    def to_dict(self):
        return {"type": "PlateauProf", "zeta": self.zeta,
                "plateau": self.plateau, "transition": self.transition}

    @staticmethod
    def _from_dict(d):
        return PlateauProf(d["zeta"], d["plateau"], d["transition"])


@_register_profile
class RampProf(Profile1):
    """C^1 smoothstep from 0 to 1 over [x0, x1]; slope peak (3/2)/(x1-x0)."""

    def __init__(self, x0, x1):
        if not x1 > x0:
            raise ValueError("ramp needs x1 > x0")
        self.x0 = float(x0)
        self.x1 = float(x1)

    def f(self, t):
        t = np.asarray(t, dtype=float)
        return _smoothstep((t - self.x0) / (self.x1 - self.x0))

    def df(self, t):
        t = np.asarray(t, dtype=float)
        return _smoothstep_d((t - self.x0) / (self.x1 - self.x0)) / (self.x1 - self.x0)

    def range_on(self, lo, hi):
        a = float(self.f(np.array([lo]))[0])
        b = float(self.f(np.array([hi]))[0])
        return (max(0.0, _pad_lo(a, 1.0, 4)), min(1.0, _pad_hi(b, 1.0, 4)))

    def max_abs_df(self, lo, hi):
        if hi <= self.x0 or lo >= self.x1:
            return 0.0
        mid = 0.5 * (self.x0 + self.x1)
        if lo <= mid <= hi:
            return _pad_hi(1.5 / (self.x1 - self.x0), 1.5 / (self.x1 - self.x0), 2)
        t = lo if lo > mid else hi
        return float(self.df(np.array([t]))[0]) * (1 + 8 * _EPS)

    def feature_width(self):
        return self.x1 - self.x0

    def to_dict(self):
        return {"type": "RampProf", "x0": self.x0, "x1": self.x1}

    @staticmethod
    def _from_dict(d):
        return RampProf(d["x0"], d["x1"])


@_register_profile
class ClampProf(Profile1):
    """Odd C^1 clamp: identity on [-limit, limit], flattening to a constant.

    The flattened value overshoots limit by width/2 (it cannot both stay at
    or below the limit and be the exact identity up to it); callers rely only
    on the identity region.
    """

    def __init__(self, limit, width):
        if limit < 0 or width <= 0:
            raise ValueError("clamp needs limit >= 0 and width > 0")
        self.limit = float(limit)
        self.width = float(width)

    def f(self, t):
        t = np.asarray(t, dtype=float)
        m, w = self.limit, self.width
        a = np.abs(t)
        excess = m + w * (0.5 - _smoothstep_int((m + w - a) / w))
        flat = m + 0.5 * w
        mag = np.where(a <= m, a, np.where(a >= m + w, flat, excess))
        return np.sign(t) * mag

    def df(self, t):
        t = np.asarray(t, dtype=float)
        m, w = self.limit, self.width
        a = np.abs(t)
        ramp = _smoothstep((m + w - a) / w)
        return np.where(a <= m, 1.0, np.where(a >= m + w, 0.0, ramp))

    def range_on(self, lo, hi):
        a = float(self.f(np.array([lo]))[0])
        b = float(self.f(np.array([hi]))[0])
        cap = self.limit + 0.5 * self.width
        return (max(-cap, _pad_lo(a, cap, 4)), min(cap, _pad_hi(b, cap, 4)))

    def max_abs_df(self, lo, hi):
        if lo > self.limit + self.width or hi < -self.limit - self.width:
            return 0.0
        return 1.0

    def feature_width(self):
        return self.width

    def to_dict(self):
        return {"type": "ClampProf", "limit": self.limit, "width": self.width}

    @staticmethod
    def _from_dict(d):
        return ClampProf(d["limit"], d["width"])


@_register_profile
class CombProf(Profile1):
    """Nondecreasing C^1 profile whose slope is 1 on bands around given knots.

    The slope is exactly 1 on merged plateau intervals [knot - plateau_half,
    knot + plateau_half], descends to 0 through cubic ramps of width
    ramp_half, and is 0 between teeth.  f is the antiderivative with f = 0
    left of everything.

    The half-widths may be far below the float spacing at the knots; the
    piecewise formulas then degenerate gracefully (interval ends collapse
    onto the knot floats) and evaluation at every representable float still
    coincides with a genuine C^1 comb: slope exactly 1.0 at knot floats and
    exactly 0.0 at every other float.  Late-stage constructions with caps far
    below 1 ulp rely on exactly this behavior.
    """

    def __init__(self, knots, plateau_half, ramp_half):
        knots = np.unique(np.asarray(knots, dtype=float))
        if knots.size == 0:
            raise ValueError("comb needs at least one knot")
        if plateau_half <= 0 or ramp_half <= 0:
            raise ValueError("comb half-widths must be positive")
        self.knots = knots
        self.plateau_half = float(plateau_half)
        self.ramp_half = float(ramp_half)
        self._mode = "knots"
        self._setup(knots - self.plateau_half, knots + self.plateau_half,
                    knots.size * (2 * self.plateau_half + self.ramp_half))

    @classmethod
    def from_intervals(cls, lo, hi, ramp_half):
        """Comb with slope 1 on each [lo_i, hi_i]; lengths may differ or
        vanish.  Intervals whose ramps would collide are merged."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.size == 0 or lo.shape != hi.shape:
            raise ValueError("need matching nonempty interval end arrays")
        if np.any(hi < lo):
            raise ValueError("interval ends out of order")
        if ramp_half <= 0:
            raise ValueError("comb half-widths must be positive")
        order = np.argsort(lo, kind="stable")
        obj = cls.__new__(cls)
        obj.knots = 0.5 * (lo[order] + hi[order])
        obj.plateau_half = None
        obj.ramp_half = float(ramp_half)
        obj._mode = "intervals"
        obj._interval_lo = lo[order]
        obj._interval_hi = hi[order]
        analytic = math.fsum(hi - lo) + lo.size * obj.ramp_half
        obj._setup(obj._interval_lo, obj._interval_hi, analytic)
        return obj

    def _setup(self, lo, hi, analytic_rise):
        # merge plateau intervals whose ramps would collide
        m_lo, m_hi = [lo[0]], [hi[0]]
        for a, b in zip(lo[1:], hi[1:]):
            if a - m_hi[-1] < 2 * self.ramp_half:
                m_hi[-1] = max(m_hi[-1], b)
            else:
                m_lo.append(a)
                m_hi.append(b)
        self.group_lo = np.array(m_lo)
        self.group_hi = np.array(m_hi)
        per_group = self.group_hi - self.group_lo + self.ramp_half
        self.cum = np.concatenate([[0.0], np.cumsum(per_group)])
        # evaluated values stay below cum[-1]; the analytic total dominates
        # it whenever interval arithmetic collapsed
        self.rise = float(max(self.cum[-1], analytic_rise))
        self._ld_bands = None

    def bands(self, dtype=np.float64):
        """Merged band arrays (group_lo, group_hi, cum) for the given dtype.

        The float64 arrays are the stored ones.  Longdouble arrays are
        rebuilt from the analytic knot parameters, which recovers bands that
        collapsed onto single floats in float64; interval-mode ends only
        exist as float64, so there promotion recovers nothing.
        """
        if dtype != np.longdouble:
            return self.group_lo, self.group_hi, self.cum
        if self._ld_bands is None:
            w = np.longdouble(self.ramp_half)
            if self._mode == "knots":
                k = self.knots.astype(np.longdouble)
                p = np.longdouble(self.plateau_half)
                lo, hi = k - p, k + p
            else:
                lo = self._interval_lo.astype(np.longdouble)
                hi = self._interval_hi.astype(np.longdouble)
            m_lo, m_hi = [lo[0]], [hi[0]]
            for a, b in zip(lo[1:], hi[1:]):
                if a - m_hi[-1] < 2 * w:
                    m_hi[-1] = max(m_hi[-1], b)
                else:
                    m_lo.append(a)
                    m_hi.append(b)
            g_lo = np.array(m_lo, dtype=np.longdouble)
            g_hi = np.array(m_hi, dtype=np.longdouble)
            cum = np.concatenate([[np.longdouble(0.0)],
                                  np.cumsum(g_hi - g_lo + w)])
            self._ld_bands = (g_lo, g_hi, cum)
        return self._ld_bands

    def f(self, t):
        # keep extended-precision arguments: verification probes slope-1
        # bands far below one float64 ulp with longdouble stencils
        t = np.asarray(t, dtype=np.result_type(t, float))
        glo, ghi, cum = self.bands(t.dtype)
        w = self.ramp_half
        idx = np.searchsorted(glo, t, side="right") - 1
        out = np.zeros_like(t)
        gone = idx >= 0
        i = np.clip(idx, 0, None)
        a, b, base = glo[i], ghi[i], cum[i]
        # within group i: up-ramp already accumulated w/2 by t = a
        in_plateau = gone & (t <= b)
        after = gone & (t > b)
        out = np.where(in_plateau, base + 0.5 * w + (t - a), out)
        down = 0.5 * w + (b - a) + w * (0.5 - _smoothstep_int((b + w - t) / w))
        out = np.where(after, base + np.minimum(down, b - a + w), out)
        # up-ramp of the NEXT group
        nxt = idx + 1
        has_next = nxt < glo.size
        j = np.clip(nxt, 0, glo.size - 1)
        na, nbase = glo[j], cum[j]
        in_up = has_next & (t > na - w)
        up = w * _smoothstep_int((t - (na - w)) / w)
        out = np.where(in_up, nbase + up, out)
        return out

    def df(self, t):
        t = np.asarray(t, dtype=float)
        w = self.ramp_half
        idx = np.searchsorted(self.group_lo, t, side="right") - 1
        out = np.zeros_like(t)
        gone = idx >= 0
        i = np.clip(idx, 0, None)
        a, b = self.group_lo[i], self.group_hi[i]
        out = np.where(gone & (t <= b), 1.0, out)
        down = _smoothstep((b + w - t) / w)
        out = np.where(gone & (t > b) & (t < b + w), down, out)
        nxt = np.clip(idx + 1, 0, self.group_lo.size - 1)
        na = self.group_lo[nxt]
        up = _smoothstep((t - (na - w)) / w)
        in_up = (idx + 1 < self.group_lo.size) & (t > na - w) & (t < na)
        out = np.where(in_up, up, out)
        return out

    def range_on(self, lo, hi):
        a = float(self.f(np.array([lo]))[0])
        b = float(self.f(np.array([hi]))[0])
        return (max(0.0, _pad_lo(a, self.rise, 6)),
                min(_pad_hi(self.rise, self.rise), _pad_hi(b, self.rise, 6)))

    def max_abs_df(self, lo, hi):
        if (hi < self.group_lo[0] - self.ramp_half
                or lo > self.group_hi[-1] + self.ramp_half):
            return 0.0
        return 1.0

    def feature_width(self):
        return self.ramp_half

    def to_dict(self):
        if self._mode == "intervals":
            return {"type": "CombProf",
                    "interval_lo": self._interval_lo.tolist(),
                    "interval_hi": self._interval_hi.tolist(),
                    "ramp_half": self.ramp_half}
        return {"type": "CombProf", "knots": self.knots.tolist(),
                "plateau_half": self.plateau_half, "ramp_half": self.ramp_half}

    @staticmethod
    def _from_dict(d):
        if "interval_lo" in d:
            return CombProf.from_intervals(
                np.asarray(d["interval_lo"]), np.asarray(d["interval_hi"]),
                d["ramp_half"])
        return CombProf(np.asarray(d["knots"]), d["plateau_half"], d["ramp_half"])


@_register
class Unary(ScalarExpr):
    """profile(inner(x)) for a one-dimensional C^1 profile."""

    def __init__(self, profile, inner):
        self.profile = profile
        self.inner = inner
        self.dim = inner.dim

    def eval(self, X):
        return self.profile.f(self.inner.eval(X))

    def grad(self, X):
        t = self.inner.eval(X)
        return self.profile.df(t)[:, None] * self.inner.grad(X)

    def value_bounds(self, box):
        lo, hi = self.inner.value_bounds(box)
        return self.profile.range_on(lo, hi)

    def partial_bounds(self, box):
        lo, hi = self.inner.value_bounds(box)
        slope = self.profile.max_abs_df(lo, hi)
        b = slope * self.inner.partial_bounds(box)
        return b + 4 * _EPS * np.abs(b)

    def feature_width(self, box):
        lip = max(1.0, self.inner.grad_norm_bound(box))
        return min(self.inner.feature_width(box),
                   self.profile.feature_width() / lip)

    def to_dict(self):
        return {"type": "Unary", "profile": self.profile.to_dict(),
                "inner": self.inner.to_dict()}

    @staticmethod
    def _from_dict(d):
        return Unary(profile_from_dict(d["profile"]), expr_from_dict(d["inner"]))


# ---------------------------------------------------------------------------
# tensor-product cutoff
# ---------------------------------------------------------------------------

@_register
class BumpBox(ScalarExpr):
    """C^1 cutoff: exactly 1 on the inner box, exactly 0 outside the outer.

    Tensor product of per-axis trapezoid profiles with cubic smoothstep
    ramps.  The certified per-axis slope is (3/2)/margin_k; the max-partial
    norm matches that closed form and the Euclidean norm pads it soundly.
    """

    def __init__(self, outer, inner):
        if inner.dim != outer.dim:
            raise ValueError("boxes disagree on dimension")
        margins_lo = inner.lo - outer.lo
        margins_hi = outer.hi - inner.hi
        if np.any(margins_lo <= 0) or np.any(margins_hi <= 0):
            raise ValueError("inner box must sit strictly inside outer box")
        self.outer = outer
        self.inner = inner
        self.dim = outer.dim
        self.margins = np.minimum(margins_lo, margins_hi)

    def _factors(self, X):
        """Per-axis trapezoid values, shape (n, d); exactly 1 / 0 off-ramp."""
        n = X.shape[0]
        vals = np.empty((n, self.dim))
        for k in range(self.dim):
            t = X[:, k]
            lo_o, lo_i = self.outer.lo[k], self.inner.lo[k]
            hi_i, hi_o = self.inner.hi[k], self.outer.hi[k]
            up = _smoothstep((t - lo_o) / (lo_i - lo_o))
            down = _smoothstep((hi_o - t) / (hi_o - hi_i))
            v = np.where((t >= lo_i) & (t <= hi_i), 1.0,
                         np.where(t < lo_i, up, down))
            vals[:, k] = np.where((t <= lo_o) | (t >= hi_o), 0.0, v)
        return vals

    def _factor_d(self, X):
        n = X.shape[0]
        ders = np.zeros((n, self.dim))
        for k in range(self.dim):
            t = X[:, k]
            lo_o, lo_i = self.outer.lo[k], self.inner.lo[k]
            hi_i, hi_o = self.inner.hi[k], self.outer.hi[k]
            up = _smoothstep_d((t - lo_o) / (lo_i - lo_o)) / (lo_i - lo_o)
            down = -_smoothstep_d((hi_o - t) / (hi_o - hi_i)) / (hi_o - hi_i)
            d = np.where(t < lo_i, up, np.where(t > hi_i, down, 0.0))
            ders[:, k] = np.where((t <= lo_o) | (t >= hi_o), 0.0, d)
        return ders

    def eval(self, X):
        X = _as_batch(X, self.dim)
        return np.prod(self._factors(X), axis=1)

    def grad(self, X):
        X = _as_batch(X, self.dim)
        vals = self._factors(X)
        ders = self._factor_d(X)
        out = np.zeros_like(X)
        for k in range(self.dim):
            others = np.prod(np.delete(vals, k, axis=1), axis=1)
            out[:, k] = ders[:, k] * others
        return out

    def value_bounds(self, box):
        if not box.overlaps(self.outer):
            return (0.0, 0.0)
        if np.all(box.lo >= self.inner.lo) and np.all(box.hi <= self.inner.hi):
            return (1.0, 1.0)
        return (0.0, 1.0)

    def partial_bounds(self, box):
        if not box.overlaps(self.outer):
            return np.zeros(self.dim)
        if np.all(box.lo >= self.inner.lo) and np.all(box.hi <= self.inner.hi):
            return np.zeros(self.dim)
        return (1.5 / self.margins) * (1 + 4 * _EPS)

    def slope_bounds(self):
        """Closed-form per-axis slope constants (3/2)/margin_k."""
        return 1.5 / self.margins

    def feature_width(self, box):
        return float(np.min(self.margins))

    def to_dict(self):
        return {"type": "BumpBox", "outer": self.outer.to_dict(),
                "inner": self.inner.to_dict()}

    @staticmethod
    def _from_dict(d):
        return BumpBox(Box.from_dict(d["outer"]), Box.from_dict(d["inner"]))


def bump(outer, inner):
    """Tensor cutoff that is 1 on `inner`, 0 outside `outer`."""
    return BumpBox(outer, inner)


# ---------------------------------------------------------------------------
# disjoint-region aggregate
# ---------------------------------------------------------------------------

@_register
class RegionCorrection(ScalarExpr):
    """Sum of expressions with pairwise disjoint box-union supports.

    Each term must vanish C^1 on the boundary of its box union (the caller
    guarantees this by building terms as amplitude * cutoff * width with the
    cutoff supported inside the boxes).  Evaluation routes every point to
    the single region containing it, so cost does not scale with the number
    of regions times the number of points in the dense-grid checks.
    """

    def __init__(self, regions):
        # regions: list of (list[Box], ScalarExpr)
        if not regions:
            raise ValueError("RegionCorrection needs at least one region")
        self.regions = [(list(boxes), expr) for boxes, expr in regions]
        self.dim = self.regions[0][0][0].dim
        for boxes, expr in self.regions:
            if expr.dim != self.dim or any(b.dim != self.dim for b in boxes):
                raise ValueError("region dimensions disagree")
        flat = [(b, ri) for ri, (boxes, _) in enumerate(self.regions)
                for b in boxes]
        clash = first_box_clash(
            np.stack([b.lo for b, _ in flat]),
            np.stack([b.hi for b, _ in flat]),
            owner=[ri for _, ri in flat])
        if clash is not None:
            i, j = flat[clash[0]][1], flat[clash[1]][1]
            raise ValueError(f"regions {i} and {j} have overlapping boxes")

    def _apply(self, X, fn_shape, fn):
        X = _as_batch(X, self.dim)
        out = np.zeros(fn_shape(X))
        if X.shape[0] * len(self.regions) <= 4096:
            for boxes, expr in self.regions:
                mask = np.zeros(X.shape[0], dtype=bool)
                for b in boxes:
                    mask |= b.contains(X)
                if mask.any():
                    out[mask] = fn(expr, X[mask])
            return out
        # many regions x many points: route through a Chebyshev-ball lookup
        # so each region only inspects points near its boxes
        tree = _cKDTree(X)
        for boxes, expr in self.regions:
            hits = []
            for b in boxes:
                r = 0.5 * float(b.widths.max())
                cand = tree.query_ball_point(
                    b.center, r * (1 + 1e-12) + _TINY, p=np.inf)
                if cand:
                    cand = np.asarray(cand, dtype=int)
                    hits.append(cand[b.contains(X[cand])])
            if hits:
                idx = np.unique(np.concatenate(hits))
                if idx.size:
                    out[idx] = fn(expr, X[idx])
        return out

    def eval(self, X):
        return self._apply(X, lambda X: X.shape[0], lambda e, P: e.eval(P))

    def grad(self, X):
        return self._apply(X, lambda X: X.shape, lambda e, P: e.grad(P))

    def _active(self, box):
        for boxes, expr in self.regions:
            sub = [b for b in boxes if b.overlaps(box)]
            if sub:
                yield sub, expr

    def value_bounds(self, box):
        lo, hi = 0.0, 0.0
        for sub, expr in self._active(box):
            for b in sub:
                l2, h2 = expr.value_bounds(b.intersect(box))
                lo, hi = min(lo, l2), max(hi, h2)
        return (lo, hi)

    def partial_bounds(self, box):
        out = np.zeros(self.dim)
        for sub, expr in self._active(box):
            for b in sub:
                out = np.maximum(out, expr.partial_bounds(b.intersect(box)))
        return out

    def feature_width(self, box):
        widths = [expr.feature_width(box) for _, expr in self._active(box)]
        return min(widths) if widths else math.inf

    def to_dict(self):
        return {"type": "RegionCorrection",
                "regions": [{"boxes": [b.to_dict() for b in boxes],
                             "expr": expr.to_dict()}
                            for boxes, expr in self.regions]}

    @staticmethod
    def _from_dict(d):
        return RegionCorrection([
            ([Box.from_dict(b) for b in r["boxes"]], expr_from_dict(r["expr"]))
            for r in d["regions"]
        ])


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class ScalarField:
    """Expression plus an optional support box outside which it is exactly 0."""

    expr: ScalarExpr
    support_box: Box | None = None

    @property
    def dim(self):
        return self.expr.dim

    def eval(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        P = _as_batch(X, self.dim)
        out = self.expr.eval(P)
        if self.support_box is not None:
            out = np.where(self.support_box.contains(P), out, 0.0)
        return float(out[0]) if single else out

    def grad(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        P = _as_batch(X, self.dim)
        out = self.expr.grad(P)
        if self.support_box is not None:
            out = np.where(self.support_box.contains(P)[:, None], out, 0.0)
        return out[0] if single else out

    def _box(self, box):
        if box is not None:
            return box
        if self.support_box is None:
            raise ValueError("field has no support box; pass one explicitly")
        return self.support_box

    def sup_certificate(self, box=None):
        return self.expr.sup_bound(self._box(box))

    def grad_sup_certificate(self, box=None):
        return self.expr.grad_norm_bound(self._box(box))

    def lipschitz_certificate(self, box=None):
        return self.expr.lipschitz_bound(self._box(box))

    def feature_width(self, box=None):
        return self.expr.feature_width(self._box(box))

    def to_dict(self):
        return {"expr": self.expr.to_dict(),
                "support_box": None if self.support_box is None
                else self.support_box.to_dict()}

    @staticmethod
    def from_dict(d):
        sb = d.get("support_box")
        return ScalarField(expr_from_dict(d["expr"]),
                           None if sb is None else Box.from_dict(sb))


def sup_certificate(field, box=None):
    return field.sup_certificate(box)


def grad_sup_certificate(field, box=None):
    return field.grad_sup_certificate(box)


class VectorField:
    """V(x) = sum_i scalar_i(x) * direction_i for unit directions."""

    def __init__(self, terms):
        # terms: list of (ScalarField, unit direction array)
        self.terms = [(s, np.asarray(v, dtype=float)) for s, v in terms]
        if self.terms:
            self.dim = self.terms[0][1].size
        else:
            raise ValueError("vector field needs at least one term")

    def eval(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        P = _as_batch(X, self.dim)
        out = np.zeros_like(P)
        for s, v in self.terms:
            out += s.eval(P)[:, None] * v
        return out[0] if single else out

    def jacobian(self, X):
        """DV(x) = sum_i direction_i (x) grad scalar_i(x); shape (n, d, d)."""
        P = _as_batch(np.asarray(X, dtype=float), self.dim)
        out = np.zeros((P.shape[0], self.dim, self.dim))
        for s, v in self.terms:
            out += v[None, :, None] * s.grad(P)[:, None, :]
        return out

    def divergence(self, X):
        """Exact divergence sum_i grad scalar_i . direction_i."""
        P = _as_batch(np.asarray(X, dtype=float), self.dim)
        out = np.zeros(P.shape[0])
        for s, v in self.terms:
            out += s.grad(P) @ v
        return out

    def sup_certificate(self, disjoint_supports=True):
        vals = [s.sup_certificate() for s, _ in self.terms]
        return max(vals) if disjoint_supports else sum(vals)

    def lipschitz_certificate(self, disjoint_supports=True):
        # with pairwise disjoint supports the pieces never interact and the
        # zero boundary values make the max of the piece constants global
        vals = [s.lipschitz_certificate() for s, _ in self.terms]
        return max(vals) if disjoint_supports else sum(vals)

    def to_dict(self):
        return {"terms": [{"scalar": s.to_dict(), "direction": v.tolist()}
                          for s, v in self.terms]}

    @staticmethod
    def from_dict(d):
        return VectorField([
            (ScalarField.from_dict(t["scalar"]), np.asarray(t["direction"]))
            for t in d["terms"]
        ])


class MapField:
    """Map of the form Phi(x) = x + displacement(x)."""

    def __init__(self, displacement):
        self.displacement = displacement
        self.dim = displacement.dim

    def eval(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        P = _as_batch(X, self.dim)
        out = P + self.displacement.eval(P)
        return out[0] if single else out

    def jacobian(self, X):
        P = _as_batch(np.asarray(X, dtype=float), self.dim)
        return np.eye(self.dim)[None] + self.displacement.jacobian(P)

    def det_jacobian(self, X):
        """det DPhi by direct determinant evaluation."""
        return np.linalg.det(self.jacobian(X))

    def to_dict(self):
        return {"displacement": self.displacement.to_dict()}

    @staticmethod
    def from_dict(d):
        return MapField(VectorField.from_dict(d["displacement"]))
