import math

import numpy as np
import pytest

from shelab.covering import (
    GaugeConfig,
    ResolutionError,
    WindowOracle,
    box_dimension,
    build_cover,
    gauge_f,
    gauge_zeta,
    range_cover_check,
    scale_ladder,
    window_search,
)
from shelab.noise import SpaceTimeGrid
from shelab.solver import FieldPath


def test_gauge_values():
    assert gauge_f(2.0 ** -2) == pytest.approx(0.25)  # inner log equals 1
    assert gauge_f(2.0 ** -16) == pytest.approx(2.0 ** -16 * 4 ** (-1 / 6))
    assert gauge_f(2.0 ** -16) == pytest.approx(1.2110909e-5, rel=1e-7)
    assert gauge_f(2.0 ** -4) == pytest.approx(2.0 ** -4 * 2 ** (-1 / 6))
    assert gauge_f(2.0 ** -4) == pytest.approx(0.0557, abs=2e-4)
    for bad in (0.0, 0.5, 0.7, -1.0):
        with pytest.raises(ValueError):
            gauge_f(bad)


def test_zeta_values():
    assert gauge_zeta(2.0 ** -16) == pytest.approx(2.0 ** -96 * 4)
    assert gauge_zeta(2.0 ** -2) == pytest.approx(2.0 ** -12)
    # zeta(r)/r^6 = log2 log2 (1/r), increasing as r decreases
    rs = np.array([2.0 ** -k for k in range(2, 20)])
    ratios = gauge_zeta(rs) / rs ** 6
    assert (np.diff(ratios) > 0).all()
    with pytest.raises(ValueError):
        gauge_zeta(0.6)


def test_scale_ladder():
    for q in range(2, 65):
        lad = scale_ladder(q)
        assert lad.radii[0] == 2.0 ** -q
        assert lad.radii[-1] >= 2.0 ** (-2 * q)
        assert all(a > b for a, b in zip(lad.radii, lad.radii[1:]))
        assert lad.ell_q == math.floor(q / math.log2(q))


def flat_path(grid, fn, d=1):
    T, X = np.meshgrid(grid.times, grid.x_centers, indexing="ij")
    base = np.asarray(fn(T, X), dtype=float)
    vals = np.repeat(base[..., None], d, axis=-1)
    return FieldPath(grid, vals, "synthetic")


def cover_grid(at=10, ax=4):
    # dyadic grid over [0, 2.5] x [-2, 2]
    return SpaceTimeGrid(0.0, 2.5, -2.0, 2.0, dt=2.0 ** -at, dx=2.0 ** -ax)


def window_grid():
    # fine dyadic strip around t = 1.5 resolving the whole q = 2 ladder
    # (bottom radius 1/16: time extent 2^-16, space extent 2^-8)
    return SpaceTimeGrid(1.4375, 1.5625, 0.0, 1.0, dt=2.0 ** -17,
                         dx=2.0 ** -9)


def test_window_search_constant_field_found_immediately():
    g = window_grid()
    path = flat_path(g, lambda t, xs: 0.0 * xs)
    cfg = GaugeConfig(k_tilde=4.0, sigma1=1.0)
    found, r_star, osc_star, stat = window_search(path, 1.5, 0.5, 2, cfg)
    assert found and r_star == 0.25 and osc_star == 0.0 and stat == 0.0


def test_window_search_threshold_monotone_in_ktilde():
    g = window_grid()
    rng = np.random.default_rng(0)
    rough = flat_path(g, lambda t, xs: 0.05 * np.sin(40 * xs) * np.sin(900 * t))
    _, _, _, stat = window_search(rough, 1.5, 0.5, 2,
                                  GaugeConfig(k_tilde=1e-9))
    for k in (0.5 * stat, 2.0 * stat):
        found, *_ = window_search(rough, 1.5, 0.5, 2, GaugeConfig(k_tilde=k))
        assert found == (stat <= k)


def test_window_search_resolution_error():
    g = cover_grid()
    path = flat_path(g, lambda t, xs: 0.0 * xs)
    with pytest.raises(ResolutionError):
        window_search(path, 1.5, 0.5, 5, GaugeConfig())


def test_window_oracle_statistics():
    oracle = WindowOracle(1.5, 0.5, q=5, m=3)
    stats = oracle.search_stats(seed=42, n_draws=400)
    assert stats.shape == (400,)
    assert (stats > 0).all()
    # monotone found-frequency in the gauge constant, exact on fixed draws
    freqs = [(stats <= k).mean() for k in (1.0, 2.0, 4.0, 8.0)]
    assert all(a <= b for a, b in zip(freqs, freqs[1:]))
    # same seed reproduces identical statistics
    again = oracle.search_stats(seed=42, n_draws=400)
    assert np.array_equal(stats, again)


def test_build_cover_constant_field():
    g = cover_grid()
    path = flat_path(g, lambda t, xs: 1.7 + 0.0 * xs)
    cfg = GaugeConfig(k_tilde=4.0, sigma1=1.0 / 32.0)
    rep = build_cover(path, q=2, cfg=cfg)
    # constant field: every order-q tile is good, no residuals
    assert rep.n_residual == 0
    assert all(r.good and r.order == 2 for r in rep.rects)
    assert rep.covered_fraction == 1.0
    assert rep.omega_q1 and rep.omega_q2
    # mass equals (number of order-q tiles) x zeta(d_q)
    z_sum, r6_sum, r_max = rep.mass_terms()
    d_q = cfg.d_ell(2)
    assert z_sum == pytest.approx(2 ** 12 * gauge_zeta(d_q))
    assert r6_sum == pytest.approx(2 ** 12 * d_q ** 6)
    # explicit point-bearing tiles plus free counts account for all tiles
    assert len([r for r in rep.rects if r.order == 2]) \
        + rep.free_good_counts.get(2, 0) == 2 ** 12


def test_build_cover_rough_field_descends_and_residuals():
    # strip grid fine enough that even order-4 tiles hold two time rows;
    # a row-alternating spike stays rough at every order and must land in
    # the residual family
    g = SpaceTimeGrid(1.0, 1.0 + 2.0 ** -6, 0.0, 1.0, dt=2.0 ** -17,
                      dx=2.0 ** -9)

    def fn(t, xs):
        spike = (xs > 0.30) & (xs < 0.31) & (t < 1.0 + 2.0 ** -10)
        rows_odd = np.floor(t * 2.0 ** 17).astype(np.int64) % 2 == 1
        return np.where(spike & rows_odd, 50.0, 0.01)

    path = flat_path(g, fn)
    cfg = GaugeConfig(k_tilde=2.0, sigma1=1.0 / 32.0)
    rep = build_cover(path, q=2, cfg=cfg)
    orders = {r.order for r in rep.rects}
    assert max(orders) == 4
    assert rep.n_residual > 0
    assert not rep.omega_q2
    # the residual family carries the growth radius
    resid = [r for r in rep.rects if not r.good]
    assert all(r.radius == cfg.k2 * 2.0 ** -4 * 2 for r in resid)
    # the ball guarantee is conditional on the growth event: with omega_q2
    # broken, violations may appear, but only inside residual tiles
    viol = range_cover_check(path, rep)
    assert len(viol) > 0
    bad_rects = {k for k in rep.point_assignment[viol]}
    assert all(not rep.rects[k].good for k in bad_rects)


def test_build_cover_strict_resolution():
    g = cover_grid()
    path = flat_path(g, lambda t, xs: 0.0 * xs)
    with pytest.raises(ResolutionError):
        build_cover(path, q=4, cfg=GaugeConfig(), strict_resolution=True)


def test_range_cover_check_detects_inflation():
    g = cover_grid()
    path = flat_path(g, lambda t, xs: 0.2 + 0.0 * xs)
    cfg = GaugeConfig(k_tilde=4.0, sigma1=1.0 / 32.0)
    rep = build_cover(path, q=2, cfg=cfg)
    assert range_cover_check(path, rep) == []
    # inflate one value beyond its tile radius: exactly that point reported
    bad = flat_path(g, lambda t, xs: 0.2 + 0.0 * xs)
    i_star = g.time_index(1.5)
    bad.values[i_star, g.nx // 2 + 3, 0] += 10.0
    viol = range_cover_check(bad, rep)
    assert len(viol) == 1


def test_cover_json(tmp_path):
    g = cover_grid()
    path = flat_path(g, lambda t, xs: 0.0 * xs, d=2)
    rep = build_cover(path, q=2, cfg=GaugeConfig(sigma1=1.0 / 32.0))
    doc = rep.to_json(tmp_path / "cover.json")
    assert doc["schema"] == "cover/1"
    import json
    back = json.loads((tmp_path / "cover.json").read_text())
    assert back["q"] == 2 and back["n_residual"] == 0


def test_box_dimension_synthetic():
    rng = np.random.default_rng(1)
    # all equal points: dimension zero with the degenerate flag
    same = np.zeros((2000, 3))
    out = box_dimension(same, [0.5, 0.25, 0.125, 0.0625])
    assert out["dimension"] == 0.0 and out["zero_variance"]
    # filled unit square embedded in R^4: slope 2 +- 0.1 once the boxes are
    # small against the side (the (k+1)^2 edge effect biases large eps)
    side = np.linspace(0, 1, 400)
    sq = np.stack(np.meshgrid(side, side), -1).reshape(-1, 2)
    emb = np.concatenate([sq, np.zeros((len(sq), 2))], axis=1)
    radii = [2.0 ** -4, 2.0 ** -5, 2.0 ** -6, 2.0 ** -7]
    out = box_dimension(emb, radii)
    assert out["dimension"] == pytest.approx(2.0, abs=0.1)
    # unit-speed curve in R^3: slope 1 +- 0.1
    s = np.linspace(0, 3, 40_000)
    curve = np.stack([np.cos(s), np.sin(s), s / 3], 1)
    out = box_dimension(curve, radii)
    assert out["dimension"] == pytest.approx(1.0, abs=0.1)
    with pytest.raises(ValueError):
        box_dimension(curve, [0.2, 0.19, 0.18, 0.17])
