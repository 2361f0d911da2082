"""Interval, box, and affine-relaxation primitives.

Everything downstream (moment relaxations, the backward value recursion,
the certification surface) is assembled from three objects: closed
intervals, axis-aligned boxes, and pairs of affine maps that sandwich a
function on a box. Linear maps act on either object through saturation
arithmetic: split the matrix into its elementwise positive and negative
parts and route lower/upper ends accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# tolerated lo > hi inversion from float roundoff; anything larger is a bug
INVERSION_SLACK = 1e-12


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def pos_part(m):
    """Elementwise max(m, 0); pos_part(m) + neg_part(m) == m."""
    return np.maximum(_arr(m), 0.0)


def neg_part(m):
    """Elementwise min(m, 0)."""
    return np.minimum(_arr(m), 0.0)


@dataclass(frozen=True)
class Interval:
    """Closed interval; lo/hi are scalars or same-shape arrays.

    Tiny inversions (lo exceeding hi by at most INVERSION_SLACK) collapse
    to the midpoint; larger inversions raise.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = np.broadcast_arrays(_arr(self.lo), _arr(self.hi))
        lo = np.array(lo, dtype=float)
        hi = np.array(hi, dtype=float)
        bad = lo > hi
        if np.any(bad):
            gap = np.max((lo - hi)[bad])
            if gap > INVERSION_SLACK:
                raise ValueError(f"interval inverted beyond slack: gap {gap:.3e}")
            mid = 0.5 * (lo + hi)
            lo = np.where(bad, mid, lo)
            hi = np.where(bad, mid, hi)
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = _arr(x)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def intersect_bounds(self, lo=None, hi=None) -> "Interval":
        """Clip both ends into known global bounds of the quantity."""
        new_lo, new_hi = self.lo, self.hi
        if lo is not None:
            new_lo = np.maximum(new_lo, lo)
            new_hi = np.maximum(new_hi, lo)
        if hi is not None:
            new_lo = np.minimum(new_lo, hi)
            new_hi = np.minimum(new_hi, hi)
        return Interval(new_lo, new_hi)

    def widen(self, eps: float) -> "Interval":
        return Interval(self.lo - eps, self.hi + eps)

    def __add__(self, other: "Interval") -> "Interval":
        return Interval(self.lo + other.lo, self.hi + other.hi)

    def scale(self, c: float) -> "Interval":
        c = float(c)
        if c >= 0:
            return Interval(c * self.lo, c * self.hi)
        return Interval(c * self.hi, c * self.lo)

    def hull(self, other: "Interval") -> "Interval":
        return Interval(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in R^n; per-dim unbounded ends are +-inf.

    Explicit unbounded flags are derived once at construction so callers
    can branch without re-testing for infinities.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(_arr(self.lo)).copy()
        hi = np.atleast_1d(_arr(self.hi)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box ends must be 1-d arrays of equal length")
        bad = lo > hi
        if np.any(bad):
            gap = np.max((lo - hi)[bad])
            if gap > INVERSION_SLACK:
                raise ValueError(f"box inverted beyond slack: gap {gap:.3e}")
            mid = 0.5 * (lo + hi)
            lo = np.where(bad, mid, lo)
            hi = np.where(bad, mid, hi)
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        lo_unb = np.isneginf(lo)
        hi_unb = np.isposinf(hi)
        lo_unb.flags.writeable = False
        hi_unb.flags.writeable = False
        object.__setattr__(self, "lo_unbounded", lo_unb)
        object.__setattr__(self, "hi_unbounded", hi_unb)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def bounded(self) -> bool:
        return not (np.any(self.lo_unbounded) or np.any(self.hi_unbounded))

    @property
    def center(self) -> np.ndarray:
        if not self.bounded:
            raise ValueError("center of an unbounded box")
        return 0.5 * (self.lo + self.hi)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, z, tol: float = 0.0) -> bool:
        z = _arr(z)
        return bool(np.all(z >= self.lo - tol) and np.all(z <= self.hi + tol))

    def relu_image(self) -> "Box":
        """Image under elementwise max(., 0)."""
        return Box(np.maximum(self.lo, 0.0), np.maximum(self.hi, 0.0))

    def relu_hull(self) -> "Box":
        """Hull of the box and its relu image: [lo, max(hi, 0)]."""
        return Box(self.lo, np.maximum(self.hi, 0.0))

    def split(self, dim: int, at: float) -> tuple["Box", "Box"]:
        left_hi = self.hi.copy()
        left_hi[dim] = at
        right_lo = self.lo.copy()
        right_lo[dim] = at
        return Box(self.lo, left_hi), Box(right_lo, self.hi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if not self.bounded:
            raise ValueError("cannot sample an unbounded box")
        u = rng.random((n, self.dim))
        return self.lo + u * (self.hi - self.lo)

    @staticmethod
    def full_space(dim: int) -> "Box":
        return Box(np.full(dim, -np.inf), np.full(dim, np.inf))

    @staticmethod
    def ball_inf(center, radius: float) -> "Box":
        c = np.atleast_1d(_arr(center))
        return Box(c - radius, c + radius)


def _masked_prod(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    # 0 * inf must vanish, so zero coefficients are masked before the product
    out = a * v
    if np.any(np.isinf(v)):
        out = np.where(a == 0.0, 0.0, out)
    return out


def linmap_interval(m, iv: Interval) -> Interval:
    """Exact range of {M x : x in iv} assuming independent coordinates."""
    m = np.atleast_2d(_arr(m))
    lo = np.atleast_1d(_arr(iv.lo))
    hi = np.atleast_1d(_arr(iv.hi))
    if np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)):
        p, n = pos_part(m), neg_part(m)
        return Interval(p @ lo + n @ hi, p @ hi + n @ lo)
    t_lo = _masked_prod(m, lo[None, :])
    t_hi = _masked_prod(m, hi[None, :])
    return Interval(
        np.minimum(t_lo, t_hi).sum(axis=1), np.maximum(t_lo, t_hi).sum(axis=1)
    )


@dataclass(frozen=True)
class AffineRelaxation:
    """Two affine maps with lower(z) <= f(z) <= upper(z) on a stated box.

    A_lo/A_hi are (n_out, n_in); b_lo/b_hi are (n_out,).
    """

    A_lo: np.ndarray
    b_lo: np.ndarray
    A_hi: np.ndarray
    b_hi: np.ndarray

    def __post_init__(self):
        a_lo = np.atleast_2d(_arr(self.A_lo))
        a_hi = np.atleast_2d(_arr(self.A_hi))
        b_lo = np.atleast_1d(_arr(self.b_lo))
        b_hi = np.atleast_1d(_arr(self.b_hi))
        if a_lo.shape != a_hi.shape or b_lo.shape != b_hi.shape:
            raise ValueError("lower/upper shapes differ")
        if a_lo.shape[0] != b_lo.shape[0]:
            raise ValueError("matrix rows and offset length differ")
        for arr in (a_lo, a_hi, b_lo, b_hi):
            arr.flags.writeable = False
        object.__setattr__(self, "A_lo", a_lo)
        object.__setattr__(self, "A_hi", a_hi)
        object.__setattr__(self, "b_lo", b_lo)
        object.__setattr__(self, "b_hi", b_hi)

    @property
    def n_out(self) -> int:
        return self.A_lo.shape[0]

    @property
    def n_in(self) -> int:
        return self.A_lo.shape[1]

    @staticmethod
    def exact(a, b) -> "AffineRelaxation":
        return AffineRelaxation(a, b, a, b)

    def lower(self, z) -> np.ndarray:
        z = _arr(z)
        return z @ self.A_lo.T + self.b_lo

    def upper(self, z) -> np.ndarray:
        z = _arr(z)
        return z @ self.A_hi.T + self.b_hi

    def range_on(self, box: Box) -> Interval:
        return Interval(
            affine_range_on_box(self.A_lo, self.b_lo, box).lo,
            affine_range_on_box(self.A_hi, self.b_hi, box).hi,
        )

    def shift(self, offset) -> "AffineRelaxation":
        offset = _arr(offset)
        return AffineRelaxation(
            self.A_lo, self.b_lo + offset, self.A_hi, self.b_hi + offset
        )

    def stack(self, other: "AffineRelaxation") -> "AffineRelaxation":
        return AffineRelaxation(
            np.vstack([self.A_lo, other.A_lo]),
            np.concatenate([self.b_lo, other.b_lo]),
            np.vstack([self.A_hi, other.A_hi]),
            np.concatenate([self.b_hi, other.b_hi]),
        )


def linmap_affine(m, rel: AffineRelaxation) -> AffineRelaxation:
    """Push an affine relaxation of y through x -> M y symbolically."""
    m = np.atleast_2d(_arr(m))
    p, n = pos_part(m), neg_part(m)
    return AffineRelaxation(
        p @ rel.A_lo + n @ rel.A_hi,
        p @ rel.b_lo + n @ rel.b_hi,
        p @ rel.A_hi + n @ rel.A_lo,
        p @ rel.b_hi + n @ rel.b_lo,
    )


def affine_range_on_box(a, b, box: Box) -> Interval:
    """Exact range of z -> A z + b over a box (coordinates independent).

    Unbounded dims paired with nonzero coefficients produce infinite ends;
    zero coefficients never do (0 * inf is treated as 0).
    """
    a = np.atleast_2d(_arr(a))
    b = np.atleast_1d(_arr(b))
    if a.shape[1] != box.dim:
        raise ValueError("coefficient/box dimension mismatch")
    t_lo = _masked_prod(a, box.lo[None, :])
    t_hi = _masked_prod(a, box.hi[None, :])
    return Interval(
        b + np.minimum(t_lo, t_hi).sum(axis=1),
        b + np.maximum(t_lo, t_hi).sum(axis=1),
    )


@dataclass(frozen=True)
class PwaRelaxation:
    """Piecewise-affine relaxation: affine pieces on boxes plus at most one
    complement piece carrying only a constant interval."""

    pieces: Sequence[tuple[Box, AffineRelaxation]]
    complement: Optional[Interval] = None

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple(self.pieces))
        for box, rel in self.pieces:
            if box.dim != rel.n_in:
                raise ValueError("piece box and relaxation dimensions differ")

    @property
    def n_pieces(self) -> int:
        return len(self.pieces)
