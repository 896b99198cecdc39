"""Seeded discrete space-time white noise with independent components.

Each grid cell (time row i, space cell j, component k) carries a Gaussian
increment of variance dt*dx, produced by a counter-based generator: the
64-bit cell counter is mapped through the splitmix64 output permutation at
a key derived from (seed, stream_id), so any subset of cells can be
generated in any order, in parallel, with bit-identical results.  Rows are
generated on demand; nothing forces the full (nt, nx, d) array into memory.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .parabolic import AxisRect

__all__ = [
    "SpaceTimeGrid",
    "NoiseRealization",
    "generate",
    "restrict",
    "write_noise",
    "read_noise",
]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_NOISE_MAGIC = b"STWN"
_FORMAT_VERSION = 1


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 output permutation (wrapping uint64 arithmetic)."""
    with np.errstate(over="ignore"):
        z = z.astype(np.uint64, copy=True)
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
    return z


def _stream_key(seed: int, stream_id: int) -> np.uint64:
    s = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    r = np.uint64(stream_id & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        k = _mix64(np.array([s + _GAMMA]))[0]
        mixed = k ^ (r * _MIX2 + _GAMMA)
    return _mix64(np.array([mixed]))[0]


def counter_normals(key: np.uint64, counters: np.ndarray) -> np.ndarray:
    """Standard normal deviates indexed by 64-bit counters.

    The state key + counter*GAMMA reproduces the splitmix64 stream, so
    sequential counters give the published generator; arbitrary counter sets
    give the same values as slicing that stream.  Uniforms keep 53 bits and
    are mapped through the exact normal quantile.
    """
    with np.errstate(over="ignore"):
        state = key + counters.astype(np.uint64) * _GAMMA
    bits = _mix64(state)
    u = (bits >> np.uint64(11)).astype(np.float64) * 2.0 ** -53 + 2.0 ** -54
    return ndtri(u)


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform discretisation of [t0, t1] x [x0, x1].

    Noise cells are indexed (i, j) with i < nt, j < nx; field values live at
    times t0 + i*dt (i = 0..nt) and at cell centres x0 + (j + 1/2)*dx.
    The explicit-scheme stability of dt <= dx^2/2 is recorded, not enforced:
    solvers check it themselves.
    """

    t0: float
    t1: float
    x0: float
    x1: float
    dt: float
    dx: float

    def __post_init__(self):
        if self.dt <= 0 or self.dx <= 0:
            raise ValueError("steps must be positive")
        if abs(self.nt * self.dt - (self.t1 - self.t0)) > 1e-9 * max(1.0, self.t1):
            raise ValueError("dt does not divide the time range")
        if abs(self.nx * self.dx - (self.x1 - self.x0)) > 1e-9 * max(1.0, abs(self.x1)):
            raise ValueError("dx does not divide the space range")

    @property
    def nt(self) -> int:
        return round((self.t1 - self.t0) / self.dt)

    @property
    def nx(self) -> int:
        return round((self.x1 - self.x0) / self.dx)

    @property
    def fd_stable(self) -> bool:
        return self.dt <= self.dx ** 2 / 2 + 1e-15

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt + 1)

    @property
    def x_centers(self) -> np.ndarray:
        return self.x0 + self.dx * (np.arange(self.nx) + 0.5)

    def time_index(self, t: float, tol: float = 1e-9) -> int:
        i = round((t - self.t0) / self.dt)
        if not 0 <= i <= self.nt or abs(self.t0 + i * self.dt - t) > tol:
            raise ValueError(f"time {t} is not a grid time")
        return i

    def nearest_time_index(self, t: float) -> int:
        return int(np.clip(round((t - self.t0) / self.dt), 0, self.nt))

    def ceil_time_index(self, t: float) -> int:
        """Smallest grid index at or after t (clipped to the range)."""
        i = int(math.ceil((t - self.t0) / self.dt - 1e-9))
        return int(np.clip(i, 0, self.nt))

    def cell_span(self, x_lo: float, x_hi: float, tol: float = 1e-9):
        """Cell index range [j0, j1) for a cell-aligned interval."""
        j0 = round((x_lo - self.x0) / self.dx)
        j1 = round((x_hi - self.x0) / self.dx)
        if (abs(self.x0 + j0 * self.dx - x_lo) > tol
                or abs(self.x0 + j1 * self.dx - x_hi) > tol):
            raise ValueError("interval not cell-aligned")
        return max(j0, 0), min(j1, self.nx)

    @staticmethod
    def create(t1: float, x_half: float, dx: float, dt: float | None = None,
               t0: float = 0.0) -> "SpaceTimeGrid":
        """Grid over [t0, >= t1] x [-x_half, x_half]; dt defaults to dx^2/4.

        At the stability boundary dt = dx^2/2 the explicit step's
        amplification factor at the space Nyquist frequency has modulus one,
        so white-noise input at that frequency never dissipates and the
        stochastic-convolution variance converges to twice the continuum
        value.  dt = dx^2/4 zeroes that factor and restores the continuum
        law at O(dx).  The time range is extended to the next whole step
        when dt does not divide it exactly.
        """
        if dt is None:
            dt = dx * dx / 4.0
        ratio = (t1 - t0) / dt
        nt = round(ratio)
        if nt < ratio - 1e-9:
            nt += 1
        return SpaceTimeGrid(t0, t0 + nt * dt, -x_half, x_half, dt, dx)


class NoiseRealization:
    """One realisation of the discrete white noise on a grid.

    Values are defined by (seed, stream_id) through the counter map; the
    `rows` accessor materialises any block of time rows, and `increments`
    the whole array.  A realisation restricted with `restrict` shares the
    identical underlying values on the sub-window.
    """

    def __init__(self, grid: SpaceTimeGrid, d: int, seed: int, stream_id: int = 0,
                 _parent=None, _i_off: int = 0, _j_off: int = 0,
                 _shape=None):
        if d < 1:
            raise ValueError("need d >= 1")
        self.grid = grid
        self.d = d
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._key = _stream_key(self.seed, self.stream_id)
        self._parent = _parent
        self._i_off = _i_off
        self._j_off = _j_off
        self._nt, self._nx = _shape if _shape else (grid.nt, grid.nx)
        root = _parent if _parent is not None else self
        if root.grid.nt * root.grid.nx * d > 2 ** 62:
            raise ValueError("counter space exhausted for this grid")

    @property
    def scale(self) -> float:
        g = self._root().grid
        return float(np.sqrt(g.dt * g.dx))

    def _root(self):
        return self._parent if self._parent is not None else self

    def rows(self, i0: int, i1: int) -> np.ndarray:
        """Increments for time rows [i0, i1), shape (i1-i0, nx, d)."""
        if not 0 <= i0 <= i1 <= self._nt:
            raise IndexError("row range outside realisation")
        root = self._root()
        nt_r, nx_r, d = root.grid.nt, root.grid.nx, self.d
        ii = np.arange(self._i_off + i0, self._i_off + i1, dtype=np.uint64)
        jj = np.arange(self._j_off, self._j_off + self._nx, dtype=np.uint64)
        kk = np.arange(d, dtype=np.uint64)
        counters = ((ii[:, None, None] * np.uint64(nx_r) + jj[None, :, None])
                    * np.uint64(d) + kk[None, None, :])
        z = counter_normals(root._key, counters.ravel())
        return (self.scale * z).reshape(i1 - i0, self._nx, d)

    def increments(self) -> np.ndarray:
        """The full (nt, nx, d) array (materialises everything)."""
        return self.rows(0, self._nt)

    @property
    def shape(self):
        return (self._nt, self._nx, self.d)


def generate(grid: SpaceTimeGrid, d: int, seed: int,
             stream_id: int = 0) -> NoiseRealization:
    """Counter-keyed white-noise realisation; per-cell variance dt*dx."""
    return NoiseRealization(grid, d, seed, stream_id)


def restrict(noise: NoiseRealization, sub_rect: AxisRect) -> NoiseRealization:
    """View of the realisation on a cell-aligned sub-rectangle.

    The view exposes only the cells inside sub_rect; values are identical
    to the parent's on those cells.
    """
    g = noise.grid
    root = noise._root()
    tol = 1e-9
    i0f = (sub_rect.t_lo - g.t0) / g.dt
    i1f = (sub_rect.t_hi - g.t0) / g.dt
    i0, i1 = round(i0f), round(i1f)
    if abs(i0 - i0f) > tol or abs(i1 - i1f) > tol:
        raise ValueError("not cell-aligned in time")
    j0, j1 = g.cell_span(sub_rect.x_lo, sub_rect.x_hi)
    sub_grid = SpaceTimeGrid(g.t0 + i0 * g.dt, g.t0 + i1 * g.dt,
                             g.x0 + j0 * g.dx, g.x0 + j1 * g.dx, g.dt, g.dx)
    return NoiseRealization(sub_grid, noise.d, noise.seed, noise.stream_id,
                            _parent=root,
                            _i_off=noise._i_off + i0,
                            _j_off=noise._j_off + j0,
                            _shape=(i1 - i0, j1 - j0))


# ---------------------------------------------------------------------------
# binary dumps: header (grid spec, seed, d), body little-endian float64
# in (i, j, k) row-major order
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sI6dQQIQQ")


def write_noise(path, noise: NoiseRealization) -> None:
    g = noise.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_NOISE_MAGIC, _FORMAT_VERSION,
                              g.t0, g.t1, g.x0, g.x1, g.dt, g.dx,
                              g.nt, g.nx, noise.d,
                              noise.seed & 0xFFFFFFFFFFFFFFFF,
                              noise.stream_id & 0xFFFFFFFFFFFFFFFF))
        arr = noise.increments().astype("<f8")
        fh.write(arr.tobytes())


def read_noise(path) -> tuple[SpaceTimeGrid, int, int, int, np.ndarray]:
    """Returns (grid, d, seed, stream_id, increments array)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, t0, t1, x0, x1, dt, dx, nt, nx, d, seed, stream = \
            _HEADER.unpack(head)
        if magic != _NOISE_MAGIC:
            raise ValueError("not a noise dump")
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported dump version {version}")
        grid = SpaceTimeGrid(t0, t1, x0, x1, dt, dx)
        body = np.frombuffer(fh.read(), dtype="<f8").reshape(nt, nx, d)
    return grid, d, seed, stream, body
