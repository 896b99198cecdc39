"""Scale gauge, window ladder, good-rectangle covers and range covers.

The gauge f(r) = r (log2 log2 (1/r))^(-1/6) is the sub-linear oscillation
threshold that makes six-dimensional cover masses vanish; its companion
zeta(x) = x^6 log2 log2 (1/x) converts cover radii into mass.  The window
ladder at scale index q consists of radii r_{q,l} = 2^-q q^-l for
l = 0..floor(q / log2 q), spanning [~2^-2q, 2^-q].

Covers are built over the base rectangle [1, 2] x [0, 1] from anisotropic
dyadic tiles of order l (side 2^-4l in time, 2^-2l in space).  The search
is greedy, largest tiles first: a tile is good when the field's measured
oscillation over the grid points it contains stays under d_l =
8 sigma1 Ktilde f(2^-l).  Tiles holding fewer than two grid points have
zero measured oscillation and are good at the first scanned order; they
are aggregated as exact counts instead of materialised (at desk scales the
deeper orders sit below grid resolution, which mirrors the regime where
all but an exp(-sqrt q) fraction of tiles are good immediately).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import constants
from .heat_kernel import covariance_root, n0_covariance_matrix
from .noise import counter_normals, _stream_key
from .parabolic import AxisRect, envelope_oscillation
from .solver import FieldPath

__all__ = [
    "GaugeConfig",
    "ScaleLadder",
    "CoverReport",
    "gauge_f",
    "gauge_zeta",
    "scale_ladder",
    "window_search",
    "WindowOracle",
    "build_cover",
    "range_cover_check",
    "box_dimension",
]

R0 = AxisRect(1.0, 2.0, 0.0, 1.0)


class ResolutionError(ValueError):
    """q too large for the grid to resolve the requested scales."""


def gauge_f(r) -> float:
    """f(r) = r (log2 log2 (1/r))^(-1/6) on 0 < r < 1/2."""
    r = np.asarray(r, dtype=float)
    if np.any((r <= 0) | (r >= 0.5)):
        raise ValueError("gauge defined for 0 < r < 1/2")
    out = r * np.log2(np.log2(1.0 / r)) ** (-1.0 / 6.0)
    return float(out) if out.ndim == 0 else out


def gauge_zeta(x) -> float:
    """zeta(x) = x^6 log2 log2 (1/x) on 0 < x < 1/2."""
    x = np.asarray(x, dtype=float)
    if np.any((x <= 0) | (x >= 0.5)):
        raise ValueError("zeta defined for 0 < x < 1/2")
    out = x ** 6 * np.log2(np.log2(1.0 / x))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GaugeConfig:
    k_tilde: float = constants.GAUGE_K_TILDE
    sigma1: float = 1.0
    k2: float = constants.COVER_K2
    q0: int = 2

    def __post_init__(self):
        if self.q0 < 2:
            raise ValueError("q0 must be >= 2 (gauge domain)")

    def d_ell(self, ell: int) -> float:
        return 8.0 * self.sigma1 * self.k_tilde * gauge_f(2.0 ** -ell)


@dataclass(frozen=True)
class ScaleLadder:
    q: int
    radii: tuple

    @property
    def ell_q(self) -> int:
        return len(self.radii) - 1


def scale_ladder(q: int) -> ScaleLadder:
    """Radii 2^-q q^-l for l = 0..floor(q/log2 q); bottom stays >= 2^-2q."""
    if q < 2:
        raise ValueError("need q >= 2")
    ell_q = int(math.floor(q / math.log2(q)))
    radii = tuple(2.0 ** -q * q ** -l for l in range(ell_q + 1))
    assert radii[0] == 2.0 ** -q and radii[-1] >= 2.0 ** (-2 * q)
    return ScaleLadder(q, radii)


# ---------------------------------------------------------------------------
# window search
# ---------------------------------------------------------------------------

def _window_rect(t0, x0, r) -> AxisRect:
    return AxisRect(t0 - r ** 4, t0 + r ** 4, x0 - r ** 2, x0 + r ** 2)


def window_search(field_osc, t0: float, x0: float, q: int, cfg: GaugeConfig):
    """First ladder radius whose window oscillation meets the gauge.

    field_osc(rect, r) must return the oscillation of the frozen-coefficient
    field over the window; a FieldPath is accepted directly (grid-backed
    measurement, raising ResolutionError when a ladder rectangle holds
    fewer than two grid rows or columns).  Returns
    (found, r_star, osc_star, stat) where stat = min_l osc_l/(2 sigma1
    f(r_l)) makes the threshold comparison monotone in k_tilde:
    found == (stat <= k_tilde).
    """
    if q < cfg.q0:
        raise ValueError(f"q={q} below the configured floor q0={cfg.q0}")
    ladder = scale_ladder(q)
    if isinstance(field_osc, FieldPath):
        field_osc = _grid_window_osc(field_osc)
    stat = math.inf
    found_r, found_osc = None, None
    for r in ladder.radii:
        osc = field_osc(_window_rect(t0, x0, r), r)
        s = osc / (2.0 * cfg.sigma1 * gauge_f(r))
        if s < stat:
            stat = s
        if found_r is None and s <= cfg.k_tilde:
            found_r, found_osc = r, osc
    return found_r is not None, found_r, found_osc, stat


def _grid_window_osc(path: FieldPath):
    def osc(rect, r):
        g = path.grid
        if rect.side_t < 2 * g.dt or rect.side_x < 2 * g.dx:
            raise ResolutionError(
                f"q too large for grid: window radius {r} unresolved")
        vals = path.values_in(rect)
        if vals.shape[0] < 4:
            raise ResolutionError(
                f"q too large for grid: window radius {r} unresolved")
        return envelope_oscillation(vals) if vals.shape[0] > 4000 else \
            _exact_osc(vals)
    return osc


def _exact_osc(vals):
    from .parabolic import oscillation_of_points
    return oscillation_of_points(vals)


class WindowOracle:
    """Exact sampler of the base Gaussian field on ladder-window lattices.

    In the linear scenario (constant scalar coefficient, zero initial data)
    the frozen-coefficient field is the base field itself at any
    resolution, so oscillations over arbitrarily small windows can be drawn
    from the closed-form covariance instead of a grid.  The lattice has
    (2m+1)^2 points per window, parabolic aspect.
    """

    def __init__(self, t0: float, x0: float, q: int, m: int = 4):
        self.t0, self.x0, self.q, self.m = t0, x0, q, m
        self.ladder = scale_ladder(q)
        pts, slices = [], []
        grid1 = np.linspace(-1.0, 1.0, 2 * m + 1)
        for r in self.ladder.radii:
            block = [(t0 + r ** 4 * a, x0 + r ** 2 * b)
                     for a in grid1 for b in grid1]
            slices.append((len(pts), len(pts) + len(block)))
            pts.extend(block)
        self.points = pts
        self.slices = slices
        self.root = covariance_root(n0_covariance_matrix(pts))

    def draw_oscillations(self, seed: int, n_draws: int) -> np.ndarray:
        """(n_draws, n_ladder) oscillations of the scalar base field."""
        key = _stream_key(seed, 0)
        n = len(self.points)
        counters = np.arange(n_draws * n, dtype=np.uint64)
        z = counter_normals(key, counters).reshape(n_draws, n)
        fields = z @ self.root.T
        out = np.empty((n_draws, len(self.slices)))
        for k, (a, b) in enumerate(self.slices):
            block = fields[:, a:b]
            out[:, k] = block.max(axis=1) - block.min(axis=1)
        return out

    def search_stats(self, seed: int, n_draws: int,
                     sigma1: float = 1.0) -> np.ndarray:
        """Per-draw statistic min_l osc_l / (2 sigma1 f(r_l)).

        The window event at gauge constant k is {stat <= k}, so found
        frequencies are exactly monotone in the constant on fixed draws.
        """
        oscs = self.draw_oscillations(seed, n_draws)
        f = np.array([gauge_f(r) for r in self.ladder.radii])
        return (oscs / (2.0 * sigma1 * f)).min(axis=1)


# ---------------------------------------------------------------------------
# covers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoverRect:
    """Read-only view of one explicit tile of a cover."""

    order: int
    tid: int
    jid: int
    radius: float
    center_value: np.ndarray
    n_points: int
    good: bool

    def corner(self):
        return (self.tid * 2.0 ** (-4 * self.order),
                self.jid * 2.0 ** (-2 * self.order))


class CoverRects:
    """Column storage for explicit tiles (single-point tiles dominate at
    fine orders, so per-tile objects are avoided)."""

    def __init__(self, orders, tids, jids, radii, centers, n_points, good):
        self.orders = orders
        self.tids = tids
        self.jids = jids
        self.radii = radii
        self.centers = centers
        self.n_points = n_points
        self.good = good

    def __len__(self):
        return len(self.orders)

    def __getitem__(self, k) -> CoverRect:
        return CoverRect(int(self.orders[k]), int(self.tids[k]),
                         int(self.jids[k]), float(self.radii[k]),
                         self.centers[k], int(self.n_points[k]),
                         bool(self.good[k]))

    def __iter__(self):
        return (self[k] for k in range(len(self)))


@dataclass
class CoverReport:
    q: int
    cfg: GaugeConfig
    rects: CoverRects            # explicit (point-bearing) tiles
    free_good_counts: dict       # order -> count of point-free good tiles
    point_assignment: np.ndarray  # grid-point index -> index into rects
    n_points: int
    resolved_order: int
    covered_fraction: float      # area fraction covered by the good family
    omega_q1: bool
    omega_q2: bool
    stops_untriggered: bool
    n_residual: int

    def mass_terms(self):
        """(sum zeta(r_A), sum r_A^6, max r_A) over the whole family."""
        radii = self.rects.radii
        z_sum = float(gauge_zeta(radii).sum()) if len(radii) else 0.0
        r6_sum = float((radii ** 6).sum()) if len(radii) else 0.0
        r_max = float(radii.max()) if len(radii) else 0.0
        for order, count in self.free_good_counts.items():
            ra = self.cfg.d_ell(order)
            z_sum += count * gauge_zeta(ra)
            r6_sum += count * ra ** 6
            if count:
                r_max = max(r_max, ra)
        return z_sum, r6_sum, r_max

    def to_json(self, path=None, max_explicit: int = 10_000):
        z_sum, r6_sum, r_max = self.mass_terms()
        doc = {
            "schema": "cover/1",
            "q": self.q,
            "k_tilde": self.cfg.k_tilde,
            "sigma1": self.cfg.sigma1,
            "k2": self.cfg.k2,
            "n_points": self.n_points,
            "n_explicit": len(self.rects),
            "resolved_order": self.resolved_order,
            "covered_fraction": self.covered_fraction,
            "omega_q1": self.omega_q1,
            "omega_q2": self.omega_q2,
            "stops_untriggered": self.stops_untriggered,
            "n_residual": self.n_residual,
            "zeta_mass": z_sum,
            "r6_mass": r6_sum,
            "r_max": r_max,
            "free_good_counts": {str(k): str(v) for k, v in
                                 self.free_good_counts.items()},
            "rects": [
                {"order": r.order, "tid": r.tid, "jid": r.jid,
                 "radius": r.radius, "good": r.good,
                 "n_points": r.n_points,
                 "center_value": [float(v) for v in r.center_value]}
                for r in (self.rects[k] for k in
                          range(min(len(self.rects), max_explicit)))
            ],
        }
        if path is not None:
            with open(path, "w") as fh:
                json.dump(doc, fh)
        return doc


def _dyadic_exponent(step: float, name: str) -> int:
    e = round(math.log2(1.0 / step))
    if abs(step - 2.0 ** -e) > 1e-12 * step:
        raise ValueError(f"{name}={step} is not a dyadic step; "
                         "covers need dyadic grids")
    return e


def _tile_ids(i_idx, j_idx, at: int, ax: int, order: int):
    """Exact integer tile ids at the given order for grid nodes.

    Times are 1 + i 2^-at (gridlines), space nodes (2j+1) 2^-(ax+1)
    (cell centres); the time id drops the leading whole unit at [1, 2].
    Shifts stay within int64 for orders <= 15 on desk grids.
    """
    if order > 15:
        raise ValueError("tile ids exceed 63 bits beyond order 15")
    four, two = 4 * order, 2 * order
    if four <= at:
        tid = i_idx >> np.int64(at - four)
    else:
        tid = i_idx << np.int64(four - at)
    num = 2 * j_idx + 1
    if two <= ax + 1:
        jid = num >> np.int64(ax + 1 - two)
    else:
        jid = num << np.int64(two - ax - 1)
    return tid.astype(np.int64), jid.astype(np.int64)


def build_cover(u_tilde_path: FieldPath, q: int, cfg: GaugeConfig,
                stops_untriggered: bool = True,
                strict_resolution: bool = False) -> CoverReport:
    """Greedy good-tile cover of the base rectangle, largest tiles first.

    Orders l = q..2q are scanned in turn; tiles whose measured oscillation
    (per-component envelope over contained grid points, an upper bound for
    the true diameter) stays under the gauge d_l join the good family, and
    whatever still holds points after order 2q becomes the residual family
    with radius k2 2^-2q q.  Point-free tiles are good at the first scanned
    order and are accounted exactly by integer tile counts.

    strict_resolution raises when the grid cannot resolve order-2q tiles
    (the report otherwise records the deepest resolved order).
    """
    g = u_tilde_path.grid
    at = _dyadic_exponent(g.dt, "dt")
    ax = _dyadic_exponent(g.dx, "dx")
    if strict_resolution and (4 * (2 * q) > at or 2 * (2 * q) > ax + 1):
        raise ResolutionError(f"grid (dt=2^-{at}, dx=2^-{ax}) cannot resolve "
                              f"order-{2 * q} tiles")
    ts = u_tilde_path.times
    xs = g.x_centers
    mt = (ts >= 1.0 - 1e-12) & (ts <= 2.0 + 1e-12)
    mx = (xs > 0.0) & (xs < 1.0)
    if not mt.any() or not mx.any():
        raise ValueError("path does not cover the base rectangle")
    i_idx = np.round((ts[mt] - 1.0) / g.dt).astype(np.int64)
    # drop a final slice at t = 2 exactly: under the floor tie-break it
    # belongs to the next unit tile
    keep_t = i_idx < (1 << at)
    i_idx = i_idx[keep_t]
    j_idx = np.round((xs[mx] - g.dx / 2 - g.x0) / g.dx).astype(np.int64)
    vals = u_tilde_path.values[mt][keep_t][:, mx, :]
    n_t, n_x, d = vals.shape
    vals_flat = vals.reshape(-1, d)
    II = np.repeat(i_idx, n_x)
    JJ = np.tile(j_idx, n_t)
    n_pts = vals_flat.shape[0]

    uncovered = np.arange(n_pts)
    assignment = np.full(n_pts, -1, dtype=np.int64)
    free_good: dict[int, int] = {}
    col_orders, col_tids, col_jids = [], [], []
    col_radii, col_centers, col_npts, col_good = [], [], [], []
    n_rects = 0
    covered_units = 0           # in order-2q units (python int, exact)
    unit_total = 1 << (12 * q)
    resolved_order = min(at // 4, (ax + 1) // 2)
    thr_2q = cfg.k2 * 2.0 ** (-2 * q) * q
    n_resid = 0

    for order in range(q, 2 * q + 1):
        unit = 1 << (6 * (2 * q - order))
        d_l = cfg.d_ell(order)
        if len(uncovered) == 0:
            free = (1 << (6 * order)) - covered_units // unit
            if free:
                free_good[order] = free
                covered_units += free * unit
            continue
        tid, jid = _tile_ids(II[uncovered], JJ[uncovered], at, ax, order)
        if 4 * order >= at and 2 * order >= ax:
            # tile sides at or below both grid spacings: every tile holds at
            # most one node, so all remaining points are good immediately
            n_take = len(uncovered)
            col_orders.append(np.full(n_take, order, dtype=np.int16))
            col_tids.append(tid)
            col_jids.append(jid)
            col_radii.append(np.full(n_take, d_l))
            col_centers.append(vals_flat[uncovered])
            col_npts.append(np.ones(n_take, dtype=np.int64))
            col_good.append(np.ones(n_take, dtype=bool))
            assignment[uncovered] = n_rects + np.arange(n_take)
            n_rects += n_take
            covered_units += unit * n_take
            free = (1 << (6 * order)) - covered_units // unit
            if free:
                free_good[order] = free
                covered_units += free * unit
            uncovered = np.array([], dtype=np.int64)
            continue
        packed = np.stack([tid, jid], axis=1)
        uniq, inverse, counts = np.unique(packed, axis=0,
                                          return_inverse=True,
                                          return_counts=True)
        # envelope oscillation per tile: per-component range over members;
        # the stable sort keeps members in ascending flat order, so the
        # first member of each group is its lexicographically least point
        order_sort = np.argsort(inverse, kind="stable")
        sorted_members = uncovered[order_sort]
        sorted_vals = vals_flat[sorted_members]
        bounds = np.concatenate([[0], np.cumsum(counts)])
        v_max = np.maximum.reduceat(sorted_vals, bounds[:-1], axis=0)
        v_min = np.minimum.reduceat(sorted_vals, bounds[:-1], axis=0)
        osc = np.sqrt(((v_max - v_min) ** 2).sum(-1))
        last = order == 2 * q
        good_tiles = osc <= d_l
        # tiles holding no uncovered points are good with zero oscillation;
        # counted exactly against the area covered at coarser orders
        bearing = len(uniq)
        total = 1 << (6 * order)
        free = total - covered_units // unit - bearing
        if free:
            free_good[order] = free
            covered_units += free * unit
        take = np.ones(bearing, dtype=bool) if last else good_tiles
        n_take = int(take.sum())
        if n_take:
            col_orders.append(np.full(n_take, order, dtype=np.int16))
            col_tids.append(uniq[take, 0])
            col_jids.append(uniq[take, 1])
            radii = np.where(good_tiles[take], d_l, thr_2q)
            col_radii.append(radii)
            col_centers.append(sorted_vals[bounds[:-1][take]])
            col_npts.append(counts[take])
            col_good.append(good_tiles[take])
            # rect index per taken group, scattered to the member points
            g2r = np.where(take, n_rects + np.cumsum(take) - 1, -1)
            rect_per_pos = np.repeat(g2r, counts)
            hit = rect_per_pos >= 0
            assignment[sorted_members[hit]] = rect_per_pos[hit]
            n_rects += n_take
            covered_units += unit * int(good_tiles[take].sum())
        if last:
            n_resid = int((~good_tiles).sum())
            uncovered = np.array([], dtype=np.int64)
        else:
            keep = np.repeat(~take, counts)
            uncovered = np.sort(sorted_members[keep])

    if n_pts and (assignment < 0).any():
        raise AssertionError("cover left grid points unassigned")
    rects = CoverRects(
        np.concatenate(col_orders) if col_orders else np.empty(0, np.int16),
        np.concatenate(col_tids) if col_tids else np.empty(0, np.int64),
        np.concatenate(col_jids) if col_jids else np.empty(0, np.int64),
        np.concatenate(col_radii) if col_radii else np.empty(0),
        np.concatenate(col_centers) if col_centers else np.empty((0, d)),
        np.concatenate(col_npts) if col_npts else np.empty(0, np.int64),
        np.concatenate(col_good) if col_good else np.empty(0, bool))
    # growth event: every order-2q tile (over all grid points, covered or
    # not) oscillates under k2 2^-2q q; trivially true when order-2q tiles
    # cannot hold two nodes
    if 8 * q >= at and 4 * q >= ax:
        omega_q2 = True
    else:
        tid, jid = _tile_ids(II, JJ, at, ax, 2 * q)
        packed = np.stack([tid, jid], axis=1)
        _, inverse, counts = np.unique(packed, axis=0, return_inverse=True,
                                       return_counts=True)
        order_sort = np.argsort(inverse, kind="stable")
        sv = vals_flat[order_sort]
        bounds = np.concatenate([[0], np.cumsum(counts)])
        v_max = np.maximum.reduceat(sv, bounds[:-1], axis=0)
        v_min = np.minimum.reduceat(sv, bounds[:-1], axis=0)
        omega_q2 = bool(
            (np.sqrt(((v_max - v_min) ** 2).sum(-1)) <= thr_2q).all())
    covered_fraction = covered_units / unit_total
    omega_q1 = covered_fraction >= 1.0 - math.exp(-math.sqrt(q) / 4.0)
    return CoverReport(q=q, cfg=cfg, rects=rects,
                       free_good_counts=free_good,
                       point_assignment=assignment, n_points=n_pts,
                       resolved_order=resolved_order,
                       covered_fraction=covered_fraction,
                       omega_q1=omega_q1, omega_q2=omega_q2,
                       stops_untriggered=stops_untriggered,
                       n_residual=n_resid)


def range_cover_check(u_tilde_path: FieldPath, cover: CoverReport) -> list:
    """Verify every base-rectangle grid value sits in its tile's ball.

    Returns the list of violating point indices (empty when the cover was
    built from the same path and the stops were untriggered).
    """
    g = u_tilde_path.grid
    ts = u_tilde_path.times
    xs = g.x_centers
    mt = (ts >= 1.0 - 1e-12) & (ts <= 2.0 + 1e-12)
    mx = (xs > 0.0) & (xs < 1.0)
    at = _dyadic_exponent(g.dt, "dt")
    i_idx = np.round((ts[mt] - 1.0) / g.dt).astype(np.int64)
    keep_t = i_idx < (1 << at)
    vals = u_tilde_path.values[mt][keep_t][:, mx, :].reshape(-1,
                                                             u_tilde_path.d)
    if vals.shape[0] != cover.n_points:
        raise ValueError("path grid does not match the cover")
    centers = cover.rects.centers[cover.point_assignment]
    radii = cover.rects.radii[cover.point_assignment]
    dist = np.sqrt(((vals - centers) ** 2).sum(-1))
    return list(np.nonzero(dist > radii + 1e-12)[0])


# ---------------------------------------------------------------------------
# box-counting dimension
# ---------------------------------------------------------------------------

def box_dimension(points: np.ndarray, radii) -> dict:
    """Box-counting slope of a point cloud in R^d.

    Counts occupied axis-aligned eps-boxes per radius and fits
    log N(eps) ~ slope * log(1/eps); needs >= 4 radii spanning at least
    two octaves.  Degenerate (single-value) clouds report dimension 0 with
    the zero-variance flag.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("need a (n, d) point cloud")
    radii = np.asarray(sorted(radii, reverse=True), dtype=float)
    if len(radii) < 4 or radii[0] / radii[-1] < 4.0:
        raise ValueError("need >= 4 radii spanning >= 2 octaves")
    lo = pts.min(axis=0)
    if np.allclose(pts, pts[0]):
        return {"dimension": 0.0, "stderr": 0.0, "zero_variance": True,
                "radii": radii.tolist(), "counts": [1] * len(radii)}
    counts = []
    for eps in radii:
        cells = np.floor((pts - lo) / eps).astype(np.int64)
        counts.append(len(np.unique(cells, axis=0)))
    x = np.log(1.0 / radii)
    y = np.log(counts)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    nres = float(res[0]) if len(res) else 0.0
    dof = max(len(x) - 2, 1)
    var = nres / dof / ((x - x.mean()) ** 2).sum()
    return {"dimension": float(coef[0]), "stderr": float(math.sqrt(var)),
            "zero_variance": False, "radii": radii.tolist(),
            "counts": counts}
