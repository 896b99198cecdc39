"""Parabolic geometry: anisotropic metric, rectangles, dyadic grids, chaining.

Distances in the (t, x) plane are measured with

    delta(p1, p2) = max(|t1 - t2|**(1/4), |x1 - x2|**(1/2)),

the natural scaling metric of the heat operator: a rectangle with sides
2**(-4n) in time and 2**(-2n) in space has diameter exactly 2**(-n).

Grid coordinates are dyadic rationals stored as integer mantissas at a fixed
maximum refinement level, so neighbour, corner and containment relations are
exact; floating point only enters when distances are measured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ParabolicPoint",
    "ParabolicRect",
    "AxisRect",
    "GridLevel",
    "DyadicPoint",
    "ChainPath",
    "delta_metric",
    "n0_level",
    "oscillation",
    "oscillation_of_points",
    "chain_path",
    "neighbor_pair_count",
    "min_two_point_level",
    "dyadic_rect",
    "grid_points_in",
]

DEFAULT_MAX_LEVEL = 20


class NotAGridPoint(ValueError):
    """Point does not lie on any grid level up to the configured maximum."""


class RectOutsideGrid(ValueError):
    """Rectangle does not intersect the field's grid."""


@dataclass(frozen=True)
class ParabolicPoint:
    """A point p = (t, x) of the time-space plane, t >= 0."""

    t: float
    x: float

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"time must be nonnegative, got {self.t}")


@dataclass(frozen=True)
class AxisRect:
    """Closed axis-aligned rectangle [t_lo, t_hi] x [x_lo, x_hi]."""

    t_lo: float
    t_hi: float
    x_lo: float
    x_hi: float

    def __post_init__(self):
        if self.t_lo > self.t_hi or self.x_lo > self.x_hi:
            raise ValueError(f"degenerate rectangle bounds: {self}")

    def contains(self, t, x) -> bool:
        return self.t_lo <= t <= self.t_hi and self.x_lo <= x <= self.x_hi

    @property
    def side_t(self) -> float:
        return self.t_hi - self.t_lo

    @property
    def side_x(self) -> float:
        return self.x_hi - self.x_lo


@dataclass(frozen=True)
class ParabolicRect:
    """Metric ball substitute: |t - t0| <= rho^4, |x - x0| <= rho^2.

    rho is restricted to (0, 1/2]; the time half-width rho^4 and space
    half-width rho^2 make the rectangle compatible with the parabolic metric.
    """

    center: ParabolicPoint
    rho: float

    def __post_init__(self):
        if not 0 < self.rho <= 0.5:
            raise ValueError(f"rho must be in (0, 1/2], got {self.rho}")

    @property
    def t_half(self) -> float:
        return self.rho ** 4

    @property
    def x_half(self) -> float:
        return self.rho ** 2

    def as_axis_rect(self) -> AxisRect:
        c = self.center
        return AxisRect(c.t - self.t_half, c.t + self.t_half,
                        c.x - self.x_half, c.x + self.x_half)


@dataclass(frozen=True)
class GridLevel:
    """Level-n grid: spacing 2^(-4n) in t, 2^(-2n) in x, optionally shifted.

    Nearest neighbours of level n are at parabolic distance exactly 2^(-n).
    """

    n: int
    origin: ParabolicPoint = ParabolicPoint(0.0, 0.0)

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("grid level must be nonnegative")

    @property
    def spacing_t(self) -> float:
        return 2.0 ** (-4 * self.n)

    @property
    def spacing_x(self) -> float:
        return 2.0 ** (-2 * self.n)


def delta_metric(p1, p2) -> float:
    """Parabolic distance max(|t1-t2|^(1/4), |x1-x2|^(1/2))."""
    dt = abs(p1.t - p2.t) if hasattr(p1, "t") else abs(p1[0] - p2[0])
    dx = abs(p1.x - p2.x) if hasattr(p1, "x") else abs(p1[1] - p2[1])
    return max(dt ** 0.25, dx ** 0.5)


def n0_level(p1, p2) -> int:
    """Integer part of log2(1/delta(p1, p2)); the coarsest chaining level.

    Raises ValueError for coincident points (distance zero).
    """
    d = delta_metric(p1, p2)
    if d == 0.0:
        raise ValueError("zero distance: n0 undefined for coincident points")
    return math.floor(math.log2(1.0 / d))


# ---------------------------------------------------------------------------
# exact dyadic points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DyadicPoint:
    """Grid point t = it * 2^(-4L), x = ix * 2^(-2L) at refinement level L.

    The mantissas are arbitrary-precision integers, so all grid relations
    (membership in a coarser level, neighbour steps, rectangle corners)
    are computed exactly.
    """

    it: int
    ix: int
    level: int

    def __post_init__(self):
        # numpy integers overflow silently under shifts; normalise once
        object.__setattr__(self, "it", int(self.it))
        object.__setattr__(self, "ix", int(self.ix))
        object.__setattr__(self, "level", int(self.level))
        if self.level < 0:
            raise ValueError("refinement level must be nonnegative")

    @property
    def t(self) -> float:
        return self.it * 2.0 ** (-4 * self.level)

    @property
    def x(self) -> float:
        return self.ix * 2.0 ** (-2 * self.level)

    def at_level(self, level: int) -> "DyadicPoint":
        """Re-express at a finer (or equal) refinement level."""
        if level < self.level:
            raise ValueError("cannot coarsen a dyadic point exactly")
        s = level - self.level
        return DyadicPoint(self.it << (4 * s), self.ix << (2 * s), level)

    def min_level(self) -> int:
        """Smallest n with this point in the level-n grid."""
        nt = 0 if self.it == 0 else self.level - (_trailing_zeros(self.it) // 4)
        nx = 0 if self.ix == 0 else self.level - (_trailing_zeros(self.ix) // 2)
        return max(nt, nx, 0)

    @staticmethod
    def from_floats(t: float, x: float,
                    max_level: int = DEFAULT_MAX_LEVEL) -> "DyadicPoint":
        """Exact conversion of float coordinates onto the level-max_level grid.

        Floats are dyadic rationals, so membership is decided exactly from
        the integer ratio; NotAGridPoint is raised when the value carries
        mantissa bits below the grid resolution.
        """
        try:
            it = _exact_mantissa(t, 4 * max_level)
            ix = _exact_mantissa(x, 2 * max_level)
        except _OffGrid:
            raise NotAGridPoint(
                f"({t}, {x}) is not a grid point at levels <= {max_level}")
        return DyadicPoint(it, ix, max_level)


class _OffGrid(Exception):
    pass


def _exact_mantissa(v: float, bits: int) -> int:
    """v as an integer multiple of 2^-bits, or _OffGrid."""
    num, den = float(v).as_integer_ratio()  # den is a power of two
    scale = 1 << bits
    if den <= scale:
        return num * (scale // den)
    q, r = divmod(num * scale, den)
    if r:
        raise _OffGrid
    return q


def _trailing_zeros(n: int) -> int:
    return ((n & -n).bit_length() - 1) if n else 0


def _n0_exact(p1: DyadicPoint, p2: DyadicPoint) -> int:
    """n0 for dyadic points, by integer arithmetic only.

    n0 is the largest n >= 0 with |t1-t2| <= 2^(-4n) and |x1-x2| <= 2^(-2n);
    it equals floor(log2(1/delta)).
    """
    L = max(p1.level, p2.level)
    a, b = p1.at_level(L), p2.at_level(L)
    dt, dx = abs(a.it - b.it), abs(a.ix - b.ix)
    if dt == 0 and dx == 0:
        raise ValueError("zero distance")
    # |t1-t2| = dt * 2^(-4L) <= 2^(-4n)  iff  dt <= 2^(4(L-n))
    nt = (4 * L - _ceil_log2(dt)) // 4 if dt else 10 ** 9
    nx = (2 * L - _ceil_log2(dx)) // 2 if dx else 10 ** 9
    return max(min(nt, nx), 0)


def _ceil_log2(n: int) -> int:
    return (n - 1).bit_length()


# ---------------------------------------------------------------------------
# oscillation
# ---------------------------------------------------------------------------

def oscillation_of_points(values: np.ndarray, exact_cap: int = 4000) -> float:
    """Diameter of a cloud of R^d values: sup |v_i - v_j| over pairs.

    Exact by pairwise distances up to `exact_cap` points; beyond that the
    diameter is realised on convex hull vertices (attempted for d <= 3;
    Qhull cost explodes in higher dimension).  Affinely degenerate clouds,
    common for smooth fields whose values trace a curve, are projected onto
    their principal subspace first (diameters are invariant up to the
    discarded singular mass, below 1e-9 relative).
    """
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.ndim != 2:
        v = v.reshape(len(v), -1)
    m, d = v.shape
    if m < 2:
        return 0.0
    if d == 1:
        return float(v.max() - v.min())
    if m > exact_cap:
        if d > 3:
            raise ValueError(
                f"{m} points in dimension {d}: exact oscillation too large; "
                "use the envelope bound")
        centred = v - v.mean(axis=0)
        _, sv, vt = np.linalg.svd(centred, full_matrices=False)
        rank = int((sv > max(sv[0], 1e-300) * 1e-9).sum())
        if rank <= 1:
            proj = centred @ vt[0]
            return float(proj.max() - proj.min())
        if rank < d:
            v = centred @ vt[:rank].T
            d = rank
        from scipy.spatial import ConvexHull, QhullError
        try:
            hull = ConvexHull(v, qhull_options="QbB")
            v = v[hull.vertices]
            m = len(v)
        except QhullError:
            pass  # near-degenerate cloud; fall through to the guard
        if m > exact_cap:
            raise ValueError("hull still too large for exact oscillation")
    diff = v[:, None, :] - v[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def envelope_oscillation(values: np.ndarray) -> float:
    """Upper bound sqrt(sum_k (max_k - min_k)^2) >= true diameter."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.shape[0] < 2:
        return 0.0
    rng = v.max(axis=0) - v.min(axis=0)
    return float(np.sqrt((rng ** 2).sum()))


def oscillation(field, rect: AxisRect) -> float:
    """Oscillation of a field over the grid points inside `rect`.

    `field` must expose values_in(rect) -> (m, d) array; raises
    RectOutsideGrid when the rectangle misses the grid entirely.
    """
    vals = field.values_in(rect)
    if vals.shape[0] == 0:
        raise RectOutsideGrid(f"rect outside grid: {rect}")
    return oscillation_of_points(vals)


# ---------------------------------------------------------------------------
# grid combinatorics
# ---------------------------------------------------------------------------

def _axis_line_count(lo: float, hi: float, spacing: float, shift: float) -> int:
    """Number of gridlines shift + k*spacing inside [lo, hi]."""
    k_lo = math.ceil((lo - shift) / spacing - 1e-12)
    k_hi = math.floor((hi - shift) / spacing + 1e-12)
    return max(0, k_hi - k_lo + 1)


def grid_points_in(rect: AxisRect, level: GridLevel) -> list[ParabolicPoint]:
    """All points of the (shifted) level-n grid inside a rectangle."""
    st, sx = level.spacing_t, level.spacing_x
    ot, ox = level.origin.t, level.origin.x
    k_lo = math.ceil((rect.t_lo - ot) / st - 1e-12)
    k_hi = math.floor((rect.t_hi - ot) / st + 1e-12)
    l_lo = math.ceil((rect.x_lo - ox) / sx - 1e-12)
    l_hi = math.floor((rect.x_hi - ox) / sx + 1e-12)
    return [ParabolicPoint(ot + k * st, ox + l * sx)
            for k in range(k_lo, k_hi + 1)
            for l in range(l_lo, l_hi + 1)]


def neighbor_pair_count(rect: AxisRect, level) -> int:
    """Exact number of nearest-neighbour pairs of the level-n grid in rect.

    Always satisfies count <= 2^(6n+2) for rectangles with sides <= 1.
    """
    lv = level if isinstance(level, GridLevel) else GridLevel(int(level))
    nt = _axis_line_count(rect.t_lo, rect.t_hi, lv.spacing_t, lv.origin.t)
    nx = _axis_line_count(rect.x_lo, rect.x_hi, lv.spacing_x, lv.origin.x)
    if nt == 0 or nx == 0:
        return 0
    return nt * (nx - 1) + nx * (nt - 1)


def min_two_point_level(rect: AxisRect, max_level: int = 60) -> int:
    """Smallest level whose grid meets the rectangle in >= 2 points."""
    for n in range(max_level + 1):
        lv = GridLevel(n)
        nt = _axis_line_count(rect.t_lo, rect.t_hi, lv.spacing_t, 0.0)
        nx = _axis_line_count(rect.x_lo, rect.x_hi, lv.spacing_x, 0.0)
        if nt * nx >= 2:
            return n
    raise ValueError("rectangle too small for any level <= max_level")


def dyadic_rect(order: int, p) -> AxisRect:
    """The unique order-l anisotropic dyadic rectangle containing p.

    Tiles are [m1 2^(-4l), (m1+1) 2^(-4l)] x [m2 2^(-2l), (m2+1) 2^(-2l)];
    points on shared edges go to the tile having them as lower-left corner.
    """
    if order < 0:
        raise ValueError("order must be nonnegative")
    t = p.t if hasattr(p, "t") else p[0]
    x = p.x if hasattr(p, "x") else p[1]
    st, sx = 2.0 ** (-4 * order), 2.0 ** (-2 * order)
    m1, m2 = math.floor(t / st), math.floor(x / sx)
    return AxisRect(m1 * st, (m1 + 1) * st, m2 * sx, (m2 + 1) * sx)


# ---------------------------------------------------------------------------
# chaining
# ---------------------------------------------------------------------------

@dataclass
class ChainPath:
    """A nearest-neighbour path with per-step grid levels.

    Invariant (checked by validate): consecutive vertices are nearest
    neighbours at the recorded level, every vertex stays inside the ambient
    rectangle, every level is >= n0, and no level is used by more than 40
    steps.
    """

    vertices: list[DyadicPoint]
    step_levels: list[int]
    n0: int

    def tally(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for n in self.step_levels:
            out[n] = out.get(n, 0) + 1
        return out

    def validate(self, p1: DyadicPoint, p2: DyadicPoint, rect: AxisRect,
                 origin: DyadicPoint) -> None:
        L = max([v.level for v in self.vertices] + [p1.level, p2.level,
                                                    origin.level])
        vs = [v.at_level(L) for v in self.vertices]
        a, b, o = p1.at_level(L), p2.at_level(L), origin.at_level(L)
        if len(vs) != len(self.step_levels) + 1:
            raise AssertionError("vertex/step count mismatch")
        if (vs[0].it, vs[0].ix) != (a.it, a.ix) or \
           (vs[-1].it, vs[-1].ix) != (b.it, b.ix):
            raise AssertionError("path endpoints wrong")
        box = _rect_mantissas(rect, L)
        for v in vs:
            if not (box[0] <= v.it <= box[1] and box[2] <= v.ix <= box[3]):
                raise AssertionError(f"vertex outside rect: {v}")
        for (u, v), n in zip(zip(vs, vs[1:]), self.step_levels):
            if n < self.n0:
                raise AssertionError(f"step level {n} below n0={self.n0}")
            ht, hx = 1 << (4 * (L - n)), 1 << (2 * (L - n))
            dt, dx = abs(u.it - v.it), abs(u.ix - v.ix)
            if not ((dt == ht and dx == 0) or (dt == 0 and dx == hx)):
                raise AssertionError(f"not a level-{n} neighbour step")
            for w in (u, v):
                if (w.it - o.it) % ht or (w.ix - o.ix) % hx:
                    raise AssertionError(f"vertex off the level-{n} grid")
        for n, count in self.tally().items():
            if count > 40:
                raise AssertionError(f"{count} steps of level {n} (> 40)")


def _rect_mantissas(rect: AxisRect, L: int) -> tuple[int, int, int, int]:
    st, sx = 2.0 ** (4 * L), 2.0 ** (2 * L)
    return (round(rect.t_lo * st), round(rect.t_hi * st),
            round(rect.x_lo * sx), round(rect.x_hi * sx))


def _as_dyadic(p, max_level: int) -> DyadicPoint:
    if isinstance(p, DyadicPoint):
        return p
    t = p.t if hasattr(p, "t") else p[0]
    x = p.x if hasattr(p, "x") else p[1]
    return DyadicPoint.from_floats(t, x, max_level)


def chain_path(p1, p2, grid_origin=None, rect: AxisRect | None = None,
               max_level: int = DEFAULT_MAX_LEVEL) -> ChainPath:
    """Connect two grid points inside `rect` by nearest-neighbour steps.

    The path realises the two-sided descent: each endpoint walks down from
    its own refinement level to the coarse level n0 determined by the
    endpoint separation, moving through chosen corners of the nested dyadic
    rectangles that contain it, and the two descents meet at a corner shared
    by the endpoints' level-n0 rectangles.  Per level the construction uses
    at most 16 time steps plus 4 space steps per endpoint, hence at most 40
    steps of any one level, and never uses a level below n0.

    `rect` must have its lower-left corner at `grid_origin` (the rectangle
    is covered by the nonnegative quadrant of the shifted grid); corners are
    chosen closest to the descending endpoint, ties broken on t then x.
    """
    if rect is None:
        rect = AxisRect(0.0, 1.0, 0.0, 1.0)
    if grid_origin is None:
        grid_origin = ParabolicPoint(rect.t_lo, rect.x_lo)
    origin = _as_dyadic(grid_origin, max_level)
    a = _as_dyadic(p1, max_level)
    b = _as_dyadic(p2, max_level)
    L = max(a.level, b.level, origin.level)
    a, b, o = a.at_level(L), b.at_level(L), origin.at_level(L)
    box = _rect_mantissas(rect, L)
    if not (box[0] == o.it and box[2] == o.ix):
        raise ValueError("rect lower-left corner must coincide with grid origin")
    if rect.side_t > 1 or rect.side_x > 1:
        raise ValueError("rect sides must be <= 1")
    # work in shifted mantissas (grid anchored at the origin)
    sa = (a.it - o.it, a.ix - o.ix)
    sb = (b.it - o.it, b.ix - o.ix)
    bt, bx = box[1] - box[0], box[3] - box[2]
    for (st, sx_) in (sa, sb):
        if not (0 <= st <= bt and 0 <= sx_ <= bx):
            raise ValueError("endpoint outside rect")
    if sa == sb:
        return ChainPath([a], [], 0)
    n0 = _n0_exact(a, b)
    n0 = min(n0, L)

    def cell_of(pt, n):
        # lower-left index of the level-n cell containing pt; points on a
        # gridline are that cell's lower-left corner (floor tie-break)
        ht, hx = 4 * (L - n), 2 * (L - n)
        return (pt[0] >> ht, pt[1] >> hx)

    # shared corner of the two level-n0 cells (cells coincide or are adjacent)
    ca, cb = cell_of(sa, n0), cell_of(sb, n0)
    if abs(ca[0] - cb[0]) > 1 or abs(ca[1] - cb[1]) > 1:
        raise AssertionError("level-n0 cells neither equal nor adjacent")
    ht0, hx0 = 1 << (4 * (L - n0)), 1 << (2 * (L - n0))
    shared = (max(ca[0], cb[0]) * ht0, max(ca[1], cb[1]) * hx0)

    def min_level(pt):
        nt = 0 if pt[0] == 0 else L - (_trailing_zeros(pt[0]) // 4)
        nx = 0 if pt[1] == 0 else L - (_trailing_zeros(pt[1]) // 2)
        return max(nt, nx, 0)

    def corner_of(pt, n):
        """Corner of the level-n cell of pt lying in rect, closest to pt."""
        ht, hx = 1 << (4 * (L - n)), 1 << (2 * (L - n))
        c = cell_of(pt, n)
        cands = []
        for dt_ in (0, 1):
            for dx_ in (0, 1):
                q = ((c[0] + dt_) * ht, (c[1] + dx_) * hx)
                if 0 <= q[0] <= bt and 0 <= q[1] <= bx:
                    cands.append(q)
        # the lower-left corner is always admissible, so cands is nonempty
        cands.sort(key=lambda q: (max(abs(q[0] - pt[0]) ** 0.25,
                                      abs(q[1] - pt[1]) ** 0.5),
                                  q[0], q[1]))
        return cands[0]

    def descent(pt):
        """Corner chain [shared = q_{n0}, q_{n0+1}, ..., q_{n1} = pt] plus the
        level of each link; link i connects chain[i] to chain[i+1]."""
        if pt == shared:
            return [pt], []
        n1 = max(min_level(pt), n0)
        if n1 == n0:
            # pt is itself a corner of its level-n0 cell: one corner hop
            return [shared, pt], [n0]
        corners = [corner_of(pt, n) for n in range(n0 + 1, n1)]
        chain = [shared] + corners + [pt]
        return chain, list(range(n0 + 1, n1 + 1))

    def link(u, v, n, verts, levels):
        """L-shaped walk u -> v with level-n steps, t first then x."""
        ht, hx = 1 << (4 * (L - n)), 1 << (2 * (L - n))
        cur = u
        step_t = ht if v[0] > u[0] else -ht
        while cur[0] != v[0]:
            cur = (cur[0] + step_t, cur[1])
            verts.append(cur)
            levels.append(n)
        step_x = hx if v[1] > u[1] else -hx
        while cur[1] != v[1]:
            cur = (cur[0], cur[1] + step_x)
            verts.append(cur)
            levels.append(n)

    def walk_down(pt):
        """Vertices/levels from pt down to the shared corner."""
        chain, link_levels = descent(pt)
        verts, levels = [pt], []
        for i in range(len(chain) - 1, 0, -1):
            link(chain[i], chain[i - 1], link_levels[i - 1], verts, levels)
        return verts, levels

    va, la = walk_down(sa)           # p1 ... shared
    vb, lb = walk_down(sb)           # p2 ... shared
    verts = va + vb[-2::-1] if len(vb) > 1 else va
    levels = la + lb[::-1]
    out_vertices = [DyadicPoint(o.it + v[0], o.ix + v[1], L) for v in verts]
    return ChainPath(out_vertices, levels, n0)
