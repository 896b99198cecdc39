import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shelab.parabolic import (
    AxisRect,
    DyadicPoint,
    GridLevel,
    NotAGridPoint,
    ParabolicPoint,
    ParabolicRect,
    RectOutsideGrid,
    chain_path,
    delta_metric,
    dyadic_rect,
    grid_points_in,
    min_two_point_level,
    n0_level,
    neighbor_pair_count,
    oscillation,
    oscillation_of_points,
)

UNIT = AxisRect(0.0, 1.0, 0.0, 1.0)


class ArrayField:
    """Minimal field stub: values on a regular grid, for oscillation tests."""

    def __init__(self, ts, xs, fn):
        self.ts, self.xs = np.asarray(ts), np.asarray(xs)
        self.fn = fn

    def values_in(self, rect):
        out = []
        for t in self.ts:
            if not rect.t_lo <= t <= rect.t_hi:
                continue
            for x in self.xs:
                if rect.x_lo <= x <= rect.x_hi:
                    out.append(np.atleast_1d(self.fn(t, x)))
        return np.array(out) if out else np.empty((0, 1))


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

def test_delta_metric_examples():
    assert delta_metric(ParabolicPoint(0, 0), ParabolicPoint(16, 0)) == 2.0
    assert delta_metric(ParabolicPoint(0, 0), ParabolicPoint(0, 0)) == 0.0
    assert delta_metric(ParabolicPoint(0, 0),
                        ParabolicPoint(1 / 16, 1 / 4)) == 0.5


@given(st.lists(st.tuples(st.floats(0, 10), st.floats(-10, 10)),
                min_size=3, max_size=3))
def test_delta_is_a_metric(pts):
    p, q, r = [ParabolicPoint(t, x) for t, x in pts]
    assert delta_metric(p, q) >= 0
    assert delta_metric(p, q) == delta_metric(q, p)
    assert delta_metric(p, q) <= delta_metric(p, r) + delta_metric(r, q) + 1e-12
    if (p.t, p.x) != (q.t, q.x):
        assert delta_metric(p, q) > 0


def test_n0_level():
    # delta = 1/2 -> 1, delta = 1 -> 0
    assert n0_level(ParabolicPoint(0, 0), ParabolicPoint(0, 1 / 4)) == 1
    assert n0_level(ParabolicPoint(0, 0), ParabolicPoint(1, 0)) == 0
    assert n0_level(ParabolicPoint(0, 0), ParabolicPoint(2 ** -8, 0)) == 2
    with pytest.raises(ValueError, match="zero distance"):
        n0_level(ParabolicPoint(1, 1), ParabolicPoint(1, 1))


def test_type_n_rectangle_diameter():
    # two points of one type-n rectangle are at distance <= 2^-n
    for n in range(0, 6):
        r = 2.0 ** -n
        p1 = ParabolicPoint(0, 0)
        p2 = ParabolicPoint(2.0 ** (-4 * n), 2.0 ** (-2 * n))
        assert delta_metric(p1, p2) == pytest.approx(r)


# ---------------------------------------------------------------------------
# oscillation
# ---------------------------------------------------------------------------

def test_oscillation_constant_and_ramp():
    ts = xs = np.linspace(0, 1, 9)
    const = ArrayField(ts, xs, lambda t, x: 3.7)
    assert oscillation(const, UNIT) == 0.0
    ramp = ArrayField(ts, xs, lambda t, x: x)
    assert oscillation(ramp, UNIT) == pytest.approx(1.0)


def test_oscillation_vector_field():
    ts = xs = np.linspace(0, 1, 9)
    f = ArrayField(ts, xs, lambda t, x: np.array([x, -x]))
    # direct enumeration oracle
    vals = f.values_in(UNIT)
    d = vals[:, None, :] - vals[None, :, :]
    expected = np.sqrt((d ** 2).sum(-1)).max()
    assert expected == pytest.approx(math.sqrt(2))
    assert oscillation(f, UNIT) == pytest.approx(expected)


def test_oscillation_outside_grid():
    f = ArrayField([0.5], [0.5], lambda t, x: 0.0)
    with pytest.raises(RectOutsideGrid):
        oscillation(f, AxisRect(2, 3, 2, 3))


def test_oscillation_hull_path_matches_pairwise():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(5000, 2))
    exact = oscillation_of_points(pts[:1500])
    d = pts[:1500, None, :] - pts[None, :1500, :]
    assert exact == pytest.approx(np.sqrt((d ** 2).sum(-1)).max())
    # hull route (m > cap) agrees with subsampled pairwise on the same set
    big = oscillation_of_points(pts, exact_cap=1000)
    d = pts[:, None, :] - pts[None, :, :]
    assert big == pytest.approx(np.sqrt((d ** 2).sum(-1)).max())


# ---------------------------------------------------------------------------
# grids, pair counts, dyadic tiles
# ---------------------------------------------------------------------------

def test_neighbor_pair_count_unit_square():
    assert neighbor_pair_count(UNIT, 0) == 4
    # enumeration oracle at n=1, and the stated envelope 2^(6n+2)
    n1 = neighbor_pair_count(UNIT, 1)
    pts = grid_points_in(UNIT, GridLevel(1))
    count = 0
    for i, p in enumerate(pts):
        for q in pts[i + 1:]:
            dt, dx = abs(p.t - q.t), abs(p.x - q.x)
            if (dt == 2.0 ** -4 and dx == 0) or (dt == 0 and dx == 2.0 ** -2):
                count += 1
    assert n1 == count == 2 ** 7 + 2 ** 4 + 2 ** 2
    assert n1 <= 2 ** 8
    degenerate = AxisRect(0.3, 0.3, 0.7, 0.7)
    assert neighbor_pair_count(degenerate, 0) == 0


@given(st.integers(0, 4),
       st.floats(0, 0.9), st.floats(0, 0.9),
       st.floats(0.05, 1.0), st.floats(0.05, 1.0))
@settings(max_examples=60)
def test_neighbor_pair_count_envelope(n, t0, x0, a, b):
    rect = AxisRect(t0, min(t0 + a, 1.0), x0, min(x0 + b, 1.0))
    assert neighbor_pair_count(rect, n) <= 2 ** (6 * n + 2)


def test_min_two_point_level():
    assert min_two_point_level(UNIT) == 0
    tiny = AxisRect(0.30, 0.31, 0.50, 0.52)
    n = min_two_point_level(tiny)
    assert len(grid_points_in(tiny, GridLevel(n))) >= 2
    if n > 0:
        assert len(grid_points_in(tiny, GridLevel(n - 1))) < 2


def test_dyadic_rect_examples():
    r = dyadic_rect(0, ParabolicPoint(1.5, 0.5))
    assert (r.t_lo, r.t_hi, r.x_lo, r.x_hi) == (1.0, 2.0, 0.0, 1.0)
    r = dyadic_rect(1, ParabolicPoint(1.0, 0.0))
    assert (r.t_lo, r.t_hi) == (1.0, 1.0 + 2.0 ** -4)
    assert (r.x_lo, r.x_hi) == (0.0, 2.0 ** -2)
    # interior corner: the point becomes the lower-left corner
    p = ParabolicPoint(3 * 2.0 ** -4, 2 * 2.0 ** -2)
    r = dyadic_rect(1, p)
    assert (r.t_lo, r.x_lo) == (p.t, p.x)


@given(st.integers(0, 5), st.floats(0, 4), st.floats(-4, 4))
@settings(max_examples=80)
def test_dyadic_rect_tiles(order, t, x):
    r = dyadic_rect(order, (t, x))
    assert r.contains(t, x)
    assert r.side_t == pytest.approx(2.0 ** (-4 * order))
    assert r.side_x == pytest.approx(2.0 ** (-2 * order))
    # tie-break: lower-left closed, upper-right open unless on the seam
    if t < r.t_hi and x < r.x_hi:
        assert dyadic_rect(order, (t, x)) == r


# ---------------------------------------------------------------------------
# chaining
# ---------------------------------------------------------------------------

def _random_dyadic(rng, max_level):
    n = rng.integers(0, max_level + 1)
    it = int(rng.integers(0, 2 ** (4 * n) + 1))
    ix = int(rng.integers(0, 2 ** (2 * n) + 1))
    return DyadicPoint(it, ix, n).at_level(max_level)


def test_chain_path_trivia():
    p = DyadicPoint(3, 2, 2)
    path = chain_path(p, p, rect=UNIT)
    assert path.step_levels == [] and len(path.vertices) == 1
    # nearest neighbours at level n: a single step of type n
    a = DyadicPoint(0, 0, 3)
    b = DyadicPoint(1, 0, 3)  # one time step at level 3
    path = chain_path(a, b, rect=UNIT)
    path.validate(a, b, UNIT, DyadicPoint(0, 0, 3))
    assert path.step_levels == [3]


def test_chain_path_off_grid_point():
    with pytest.raises(NotAGridPoint):
        chain_path(ParabolicPoint(1 / 3, 0.5), ParabolicPoint(0.5, 0.5),
                   rect=UNIT, max_level=8)


def test_chain_path_telescopes_exactly():
    rng = np.random.default_rng(3)
    L = 10
    for _ in range(200):
        a, b = _random_dyadic(rng, L), _random_dyadic(rng, L)
        path = chain_path(a, b, rect=UNIT, max_level=L)
        vs = [v.at_level(L) for v in path.vertices]
        dit = sum(v.it - u.it for u, v in zip(vs, vs[1:]))
        dix = sum(v.ix - u.ix for u, v in zip(vs, vs[1:]))
        assert dit == b.at_level(L).it - a.at_level(L).it
        assert dix == b.at_level(L).ix - a.at_level(L).ix


def test_chain_path_bulk_validation():
    # the acceptance criterion runs 10^4 pairs at level 12; this is the
    # same check at reduced volume for the unit suite
    rng = np.random.default_rng(11)
    origin = DyadicPoint(0, 0, 12)
    for _ in range(500):
        a, b = _random_dyadic(rng, 12), _random_dyadic(rng, 12)
        if (a.it, a.ix) == (b.it, b.ix):
            continue
        path = chain_path(a, b, rect=UNIT, max_level=12)
        path.validate(a, b, UNIT, origin)
        assert path.n0 == n0_level(ParabolicPoint(a.t, a.x),
                                   ParabolicPoint(b.t, b.x))
        assert min(path.step_levels) >= path.n0


def test_chain_path_shifted_grid():
    # grid anchored away from the origin, rectangle lower-left on the anchor
    rect = AxisRect(1.0, 1.5, 0.25, 0.75)
    origin = ParabolicPoint(1.0, 0.25)
    a = ParabolicPoint(1.0 + 5 * 2.0 ** -8, 0.25 + 2 * 2.0 ** -4)
    b = ParabolicPoint(1.0 + 2.0 ** -4, 0.25 + 2.0 ** -2)
    path = chain_path(a, b, origin, rect, max_level=8)
    o = DyadicPoint.from_floats(origin.t, origin.x, 8)
    path.validate(DyadicPoint.from_floats(a.t, a.x, 8),
                  DyadicPoint.from_floats(b.t, b.x, 8), rect, o)


def test_parabolic_rect_extents():
    r = ParabolicRect(ParabolicPoint(1.5, 0.5), 0.5)
    ar = r.as_axis_rect()
    assert ar.t_lo == pytest.approx(1.5 - 0.5 ** 4)
    assert ar.x_hi == pytest.approx(0.5 + 0.25)
    with pytest.raises(ValueError):
        ParabolicRect(ParabolicPoint(1, 0), 0.6)
