import math

import numpy as np
import pytest

from shelab.heat_kernel import kernel, n0_covariance, n0_variance
from shelab.noise import NoiseRealization, SpaceTimeGrid, generate
from shelab.parabolic import AxisRect
from shelab.solver import (
    ConvolutionSpec,
    FieldPath,
    StabilityError,
    convolve,
    export_csv,
    ic_constant,
    ic_kernel_bump,
    ic_zero,
    read_field,
    sigma_bounded_nonlinear,
    sigma_constant,
    sigma_identity,
    sigma_scaled_rotation,
    solve_deterministic,
    solve_duhamel,
    solve_fd,
    solve_modified,
    write_field,
)


def coarse_grid(t1=0.5, x_half=2.0, dx=1 / 16):
    return SpaceTimeGrid.create(t1, x_half, dx)


def test_sigma_library_bounds():
    for sig in (sigma_identity(3), sigma_scaled_rotation(4, 0.7),
                sigma_bounded_nonlinear(2, sigma1=1.0, eps=0.5)):
        sig.spot_check(seed=1, n=2000)
    s = sigma_bounded_nonlinear(2, sigma1=0.8)
    m = s(np.zeros(2))
    assert np.sqrt((m ** 2).sum()) <= 0.8


def test_ic_library():
    ic = ic_kernel_bump(2, s0=0.1)
    ic.spot_check()
    assert ic.smoothed(0.4, np.array([0.3]))[0, 0] == pytest.approx(
        kernel(0.5, 0.3))
    assert ic_constant([1.0, -2.0])(np.zeros(3)).shape == (3, 2)


def test_constant_preserved():
    g = coarse_grid()
    noise = generate(g, d=2, seed=1)
    u = solve_fd(sigma_constant(np.zeros((2, 2))), ic_constant([3.0, -1.0]),
                 noise)
    assert np.allclose(u.values, u.values[0], atol=1e-13)


def test_deterministic_heat_flow_matches_closed_form():
    # the A1 check at reduced resolution: sup error O(dx^2) against the
    # exact evolution of a kernel bump
    g = SpaceTimeGrid.create(0.5, 4.0, dx=1 / 32)
    noise = generate(g, d=1, seed=0)
    u = solve_fd(sigma_constant(np.zeros((1, 1))), ic_kernel_bump(1, s0=0.1),
                 noise)
    xs = g.x_centers
    errs = []
    for t in (0.125, 0.25, 0.5):
        exact = kernel(0.1 + t, xs)
        errs.append(np.abs(u.slice_at(t)[:, 0] - exact).max())
    assert max(errs) < 5e-3


def test_refinement_order():
    # halving dx (quartering dt) shrinks the deterministic error at
    # observed order >= 1.8
    sup = {}
    for dx in (1 / 16, 1 / 32):
        g = SpaceTimeGrid.create(0.25, 4.0, dx=dx)
        u = solve_deterministic(ic_kernel_bump(1, s0=0.1), g)
        xs = g.x_centers
        exact = kernel(0.1 + 0.25, xs)
        sup[dx] = np.abs(u.slice_at(0.25)[:, 0] - exact).max()
    order = math.log2(sup[1 / 16] / sup[1 / 32])
    assert order >= 1.8


def test_stability_guard():
    g = SpaceTimeGrid(0, 1, -1, 1, dt=0.25, dx=0.5)  # dt > dx^2/2
    with pytest.raises(StabilityError):
        solve_fd(sigma_identity(1), ic_zero(1), generate(g, 1, 0))


def test_adaptedness_bit_compare():
    g = coarse_grid(t1=0.25)
    n_a = generate(g, d=1, seed=5, stream_id=0)
    n_b = generate(g, d=1, seed=5, stream_id=1)

    class Spliced(NoiseRealization):
        """noise equal to n_a before row i_cut, n_b after"""

        def __init__(self, i_cut):
            super().__init__(g, 1, 5, 0)
            self.i_cut = i_cut

        def rows(self, i0, i1):
            a = n_a.rows(i0, i1)
            b = n_b.rows(i0, i1)
            idx = np.arange(i0, i1)
            return np.where((idx < self.i_cut)[:, None, None], a, b)

    i_cut = g.nt // 2
    u_full = solve_fd(sigma_bounded_nonlinear(1), ic_constant([0.5]),
                      generate(g, 1, 5, 0))
    u_spliced = solve_fd(sigma_bounded_nonlinear(1), ic_constant([0.5]),
                         Spliced(i_cut))
    # rows <= i_cut depend only on noise rows < i_cut: bitwise equal
    assert np.array_equal(u_full.values[:i_cut + 1],
                          u_spliced.values[:i_cut + 1])
    assert not np.array_equal(u_full.values[-1], u_spliced.values[-1])


def test_noise_scaling_linearity():
    g = coarse_grid(t1=0.25)
    base = generate(g, d=1, seed=9)

    class Scaled(NoiseRealization):
        def __init__(self, c):
            super().__init__(g, 1, 9, 0)
            self.c = c

        def rows(self, i0, i1):
            return self.c * base.rows(i0, i1)

    u1 = solve_fd(sigma_identity(1), ic_zero(1), base)
    u3 = solve_fd(sigma_identity(1), ic_zero(1), Scaled(3.0))
    assert np.allclose(u3.values, 3.0 * u1.values, rtol=1e-12, atol=1e-13)


def test_linear_marginal_variance():
    # var of one component at (0.5, 0) across replicates vs closed form
    g = SpaceTimeGrid.create(0.5, 2.0, dx=1 / 16)
    reps = 600
    vals = np.empty(reps)
    for r in range(reps):
        u = solve_fd(sigma_identity(1), ic_zero(1), generate(g, 1, 77, r))
        vals[r] = u.value_at(0.5, 0.0)[0]
    target = n0_variance(0.5)
    se = np.sqrt(2.0 / (reps - 1)) * target
    assert abs(vals.var() - target) < 4 * se + 0.02 * target


def test_solve_modified_identities():
    g = coarse_grid(t1=0.25)
    noise = generate(g, d=2, seed=21)
    sig = sigma_bounded_nonlinear(2)
    ic = ic_constant([0.3, -0.2])
    u = solve_fd(sig, ic, noise)
    # untriggered clip: bit-identical to the base solve
    ut = solve_modified(sig, ic, noise, tau1_time=10.0)
    assert np.array_equal(u.values, ut.values)
    # clip at zero: coefficient frozen at initial data for all time
    ut0 = solve_modified(sig, ic, noise, tau1_time=0.0)
    frozen = sigma_constant(sig(np.array([0.3, -0.2])))
    uf = solve_fd(frozen, ic, noise)
    assert np.allclose(ut0.values, uf.values, atol=1e-12)
    # mid-path clip differs from the base only after the clip time
    tmid = g.times[g.nt // 2]
    um = solve_modified(sig, ic, noise, tau1_time=tmid)
    i_mid = g.time_index(tmid)
    assert np.array_equal(um.values[:i_mid + 1], u.values[:i_mid + 1])
    assert not np.allclose(um.values[-1], u.values[-1])


def test_convolve_against_covariance_oracle():
    g = SpaceTimeGrid.create(0.5, 2.0, dx=1 / 16)
    spec = ConvolutionSpec(phi=np.eye(1), phi_bound=1.0, s0=0.0)
    reps = 500
    vals = np.empty(reps)
    for r in range(reps):
        vals[r] = convolve(spec, generate(g, 1, 33, r), [(0.5, 0.0)])[0, 0]
    target = n0_variance(0.5)
    se = math.sqrt(2.0 / (reps - 1)) * target
    assert abs(vals.var() - target) < 4 * se + 0.02 * target
    # zero integrand gives the zero field
    z = convolve(ConvolutionSpec(phi=np.zeros((1, 1)), phi_bound=0.0, s0=0.0),
                 generate(g, 1, 1), [(0.25, 0.3), (0.5, -1.0)])
    assert np.array_equal(z, np.zeros((2, 1)))


def test_convolve_window_violation():
    g = coarse_grid()
    spec = ConvolutionSpec(phi=np.eye(1), phi_bound=1.0, s0=0.25, t_max=0.375)
    with pytest.raises(ValueError, match="window"):
        convolve(spec, generate(g, 1, 0), [(0.5, 0.0)])


def test_duhamel_matches_fd():
    from shelab.constants import DUHAMEL_FD_SMOOTH_TOL, DUHAMEL_FD_TOL
    g = SpaceTimeGrid.create(0.25, 2.0, dx=1 / 16)
    noise = generate(g, d=2, seed=13)
    sig = sigma_bounded_nonlinear(2, sigma1=1.0)
    ic = ic_kernel_bump(2, s0=0.2)
    u_fd = solve_fd(sig, ic, noise)
    u_dh = solve_duhamel(sig, ic, noise)
    diff = u_fd.values - u_dh.values
    assert np.abs(diff).max() <= DUHAMEL_FD_TOL
    # the freshest-layer roughness dominates the raw sup; the smoothed
    # fields must agree much more tightly
    xs = g.x_centers
    w = kernel(1 / 16, xs[:, None] - xs[None, :]) * g.dx
    assert np.abs(w @ diff[-1]).max() <= DUHAMEL_FD_SMOOTH_TOL
    # sigma = 0 reduces the mild form to kernel smoothing of u0
    u0_dh = solve_duhamel(sigma_constant(np.zeros((2, 2))), ic, noise)
    assert np.allclose(u0_dh.slice_at(0.25)[:, 0], kernel(0.45, xs),
                       atol=1e-12)


def test_duhamel_budget_guard():
    g = SpaceTimeGrid.create(2.0, 4.0, dx=1 / 64)
    with pytest.raises(ValueError, match="budget"):
        solve_duhamel(sigma_identity(1), ic_zero(1), generate(g, 1, 0))


def test_field_dump_roundtrip(tmp_path):
    g = coarse_grid(t1=0.125)
    u = solve_fd(sigma_identity(1), ic_zero(1), generate(g, 1, 3))
    write_field(tmp_path / "u.bin", u)
    back = read_field(tmp_path / "u.bin")
    assert back.label == "u"
    assert np.array_equal(back.values, u.values)
    export_csv(tmp_path / "u.csv", u, times=[0.0, 0.125])
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "t,x,u_1"
    assert len(lines) == 1 + 2 * g.nx


def test_values_in_rect():
    g = coarse_grid(t1=0.125)
    u = solve_fd(sigma_identity(2), ic_zero(2), generate(g, 2, 4))
    rect = AxisRect(0.0, 0.125, -0.5, 0.5)
    vals = u.values_in(rect)
    mt = (u.times >= 0) & (u.times <= 0.125)
    assert vals.shape == (mt.sum() * 16, 2)
