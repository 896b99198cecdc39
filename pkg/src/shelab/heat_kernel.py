"""Heat kernel on the line, derivative bounds, square integrals, and the
exact Gaussian law of the additive-noise stochastic convolution.

The scalar covariance of the whole-noise convolution

    N0(t, x) = int_0^t int G(t-s, x-y) W(dy, ds)

is int_0^(t1^t2) G(t1+t2-2r, x1-x2) dr by the semigroup property.  The time
integral of the kernel has the primitive

    F(a) = sqrt(a/pi) exp(-x^2/(4a)) - (|x|/2) erfc(|x| / (2 sqrt(a))),

which gives the covariance in closed form for every pair of points; an
adaptive-quadrature route is kept alongside as an independent cross-check
(the integrand's inverse-square-root endpoint singularity is removed by the
substitution r = min(t1,t2) - s^2).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate
from scipy.special import erfc

from . import constants
from .parabolic import ParabolicPoint, delta_metric

__all__ = [
    "kernel",
    "kernel_grad_bounds",
    "standard_integrals",
    "n0_covariance",
    "n0_covariance_quad",
    "n0_covariance_matrix",
    "n0_variance",
    "exact_gaussian_sampler",
    "CovarianceIndefinite",
]


class CovarianceIndefinite(ValueError):
    """Covariance matrix failed the positive-semidefiniteness tolerance."""


def kernel(t, x):
    """G(t, x) = (4 pi t)^(-1/2) exp(-x^2 / (4t)), t > 0.

    Vectorised in both arguments; integrates to one in x for every t.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("heat kernel needs t > 0")
    x = np.asarray(x, dtype=float)
    out = np.exp(-(x ** 2) / (4.0 * t)) / np.sqrt(4.0 * math.pi * t)
    return float(out) if out.ndim == 0 else out


def kernel_grad_bounds(t: float, x: float, c: float = constants.GRAD_BOUND_C):
    """Exact |dG/dx|, |dG/dt| with their comparison bounds.

    Returns (abs_dx, abs_dt, bound_x, bound_t) where
    bound_x = (c/sqrt(t)) G(2t, x) and bound_t = (c/t) G(2t, x); asserts the
    two dominations, which hold with the frozen constant c.
    """
    if t <= 0:
        raise ValueError("heat kernel needs t > 0")
    g = kernel(t, x)
    abs_dx = abs(-x / (2.0 * t) * g)
    abs_dt = abs((x ** 2 / (4.0 * t ** 2) - 1.0 / (2.0 * t)) * g)
    g2 = kernel(2.0 * t, x)
    bound_x = c / math.sqrt(t) * g2
    bound_t = c / t * g2
    assert abs_dx <= bound_x * (1 + 1e-12), (t, x, abs_dx, bound_x)
    assert abs_dt <= bound_t * (1 + 1e-12), (t, x, abs_dt, bound_t)
    return abs_dx, abs_dt, bound_x, bound_t


def _kernel_sq_space_integral(a):
    """int G(a, w)^2 dw = (8 pi a)^(-1/2)."""
    return 1.0 / np.sqrt(8.0 * math.pi * a)


def standard_integrals(s: float, t: float, x: float, y: float,
                       c_bound: float = constants.STANDARD_INT_C):
    """The three square integrals of kernel increments, with their bounds.

    I_space = int_0^t int [G(t-r, x-z) - G(t-r, y-z)]^2 dz dr  <= C |x-y|
    I_time  = int_0^s int [G(t-r, x-z) - G(s-r, x-z)]^2 dz dr  <= C |t-s|^0.5
    I_tail  = int_s^t int G(t-r, x-z)^2 dz dr = sqrt((t-s)/(2 pi))

    Requires 0 <= s < t.  The space integrals over z are closed forms
    (Gaussian products integrate to kernels at summed times); the remaining
    time integrals are closed-form where elementary and adaptive quadrature
    otherwise (relative tolerance 1e-8).
    """
    if not 0 <= s < t:
        raise ValueError("need 0 <= s < t")
    h = abs(x - y)

    # space-increment integral: integrand 2(8 pi a)^(-1/2) (1 - e^(-h^2/(8a)))
    if h == 0:
        i_space = 0.0
    else:
        def f(a):
            return 2.0 * _kernel_sq_space_integral(a) * (-np.expm1(-h * h / (8.0 * a)))
        i_space, _ = integrate.quad(f, 0.0, t, epsrel=1e-8, epsabs=1e-12,
                                    limit=200)

    # time-increment integral: elementary primitive
    if s == 0:
        i_time = 0.0
    else:
        i_time = (math.sqrt(t) - math.sqrt(t - s) + math.sqrt(s)) / math.sqrt(2 * math.pi) \
            - (math.sqrt(t + s) - math.sqrt(t - s)) / math.sqrt(math.pi)

    i_tail = math.sqrt((t - s) / (2.0 * math.pi))

    assert i_space <= c_bound * h + 1e-12
    assert i_time <= c_bound * math.sqrt(t - s) + 1e-12
    assert i_tail <= c_bound * math.sqrt(t - s) + 1e-12
    return i_space, i_time, i_tail


def _kernel_time_primitive(a, x):
    """Primitive of a -> G(a, x): F(a) = sqrt(a/pi) e^(-x^2/4a) - (|x|/2) erfc(|x|/(2 sqrt a)).

    F'(a) = G(a, x) and F(0+) = 0; vectorised, with the a = 0 limit handled.
    """
    a = np.asarray(a, dtype=float)
    x = np.abs(np.asarray(x, dtype=float))
    a, x = np.broadcast_arrays(a, x)
    out = np.zeros(a.shape)
    pos = a > 0
    ap, xp = a[pos], x[pos]
    out[pos] = (np.sqrt(ap / math.pi) * np.exp(-xp ** 2 / (4.0 * ap))
                - 0.5 * xp * erfc(xp / (2.0 * np.sqrt(ap))))
    return out


def n0_covariance(p1, p2) -> float:
    """Scalar-component covariance of the whole-noise convolution at p1, p2.

    Equals (1/2) [F(t1 + t2) - F(|t1 - t2|)] evaluated at the space lag,
    where F is the time primitive of the kernel; zero when min(t1, t2) = 0.
    """
    t1, x1 = (p1.t, p1.x) if hasattr(p1, "t") else (p1[0], p1[1])
    t2, x2 = (p2.t, p2.x) if hasattr(p2, "t") else (p2[0], p2[1])
    if t1 < 0 or t2 < 0:
        raise ValueError("times must be nonnegative")
    if min(t1, t2) == 0:
        return 0.0
    h = x1 - x2
    val = 0.5 * (_kernel_time_primitive(t1 + t2, h)
                 - _kernel_time_primitive(abs(t1 - t2), h))
    return float(val)


def n0_covariance_quad(p1, p2) -> float:
    """Adaptive-quadrature route for the same covariance (cross-check).

    Integrates G(t1+t2-2r, x1-x2) over r in [0, min(t1,t2)] after the
    substitution r = m - s^2, which removes the inverse-square-root
    behaviour of the integrand at r -> m when the points share a spatial
    coordinate.
    """
    t1, x1 = (p1.t, p1.x) if hasattr(p1, "t") else (p1[0], p1[1])
    t2, x2 = (p2.t, p2.x) if hasattr(p2, "t") else (p2[0], p2[1])
    m = min(t1, t2)
    if m == 0:
        return 0.0
    h = x1 - x2
    gap = abs(t1 - t2)

    def f(s):
        return 2.0 * s * kernel(gap + 2.0 * s * s, h)

    val, _ = integrate.quad(f, 0.0, math.sqrt(m), epsrel=1e-8, epsabs=1e-12,
                            limit=200)
    return val


def n0_variance(t: float) -> float:
    """Variance of one component at time t: sqrt(t / (2 pi))."""
    return math.sqrt(t / (2.0 * math.pi))


def n0_covariance_matrix(points) -> np.ndarray:
    """Covariance matrix of the scalar field over a list of points.

    Vectorised closed form; symmetric by construction.
    """
    ts = np.array([p.t if hasattr(p, "t") else p[0] for p in points])
    xs = np.array([p.x if hasattr(p, "x") else p[1] for p in points])
    tsum = ts[:, None] + ts[None, :]
    tgap = np.abs(ts[:, None] - ts[None, :])
    h = xs[:, None] - xs[None, :]
    cov = 0.5 * (_kernel_time_primitive(tsum, h)
                 - _kernel_time_primitive(tgap, h))
    cov[np.minimum(ts[:, None], ts[None, :]) == 0] = 0.0
    return 0.5 * (cov + cov.T)


def canonical_metric_sq(p1, p2) -> float:
    """E[(N0(p1) - N0(p2))^2] for one component, in closed form."""
    return (n0_covariance(p1, p1) + n0_covariance(p2, p2)
            - 2.0 * n0_covariance(p1, p2))


def exact_gaussian_sampler(points, seed, n_draws: int = 1, d: int = 1,
                           max_points: int = 2000) -> np.ndarray:
    """Exact joint samples of the additive-noise convolution at `points`.

    Returns an array of shape (n_draws, len(points), d): each component is
    an independent mean-zero Gaussian vector with the closed-form covariance
    over the requested points.  The factorisation is a symmetric
    eigendecomposition with a PSD tolerance; a matrix that fails it
    signals an inconsistent covariance evaluation.
    """
    pts = list(points)
    if len(pts) > max_points:
        raise ValueError(f"{len(pts)} points exceeds the dense budget "
                         f"({max_points})")
    if len(pts) == 0:
        return np.empty((n_draws, 0, d))
    cov = n0_covariance_matrix(pts)
    root = covariance_root(cov)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_draws, d, len(pts)))
    samples = np.einsum("jk,ndk->ndj", root, z)
    return np.swapaxes(samples, 1, 2)


def covariance_root(cov: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Symmetric factor R with R R^T = cov (eigenvalue clipping within tol).

    Raises CovarianceIndefinite when the most negative eigenvalue exceeds
    tol * trace in magnitude.
    """
    w, v = np.linalg.eigh(cov)
    scale = max(np.trace(cov), 1e-300)
    if w.min() < -tol * scale:
        raise CovarianceIndefinite(
            f"covariance indefinite: min eigenvalue {w.min():.3e} "
            f"vs trace {scale:.3e}")
    return v * np.sqrt(np.clip(w, 0.0, None))


def semigroup_residual(t: float, s: float, x: float, z: float,
                       half_width: float = 40.0) -> float:
    """|int G(t, x-y) G(s, y-z) dy - G(t+s, x-z)|, by adaptive quadrature."""
    def f(y):
        return kernel(t, x - y) * kernel(s, y - z)

    lo = min(x, z) - half_width * math.sqrt(max(t, s))
    hi = max(x, z) + half_width * math.sqrt(max(t, s))
    val, _ = integrate.quad(f, lo, hi, epsrel=1e-10, epsabs=1e-14, limit=400)
    return abs(val - kernel(t + s, x - z))
