"""Discrete detection of the modulus and growth stopping rules.

The continuum rules are "first time a pair violates the Holder modulus"
(pairs of space-time points within the scan window) and "first time the
field outgrows K(1+|x|)".  On a grid the modulus scan runs over a
deterministic set of index offsets whose parabolic separations cover the
distance cap geometrically, with strided subsampling; the first violating
grid slice is the trigger.  Because a discrete trigger overshoots the
level (continuity gives equality only in the continuum), the clip slice
used to freeze coefficients is the last slice at which the clipped field
passes the same scan; it is found from the trigger by a short rollback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .parabolic import delta_metric
from .solver import FieldPath

__all__ = [
    "StoppingConfig",
    "StoppingResult",
    "HolderEstimate",
    "tau1",
    "tau_growth",
    "estimate_Z",
    "check_clipped_modulus",
    "scan_offsets",
]


@dataclass(frozen=True)
class StoppingConfig:
    K: float = 6.0
    delta: float = 0.25
    T0: float = 3.5
    time_window: tuple = (0.5, 3.5)
    space_window: tuple = (-2.0, 2.0)
    delta_cap: float = 0.5   # scan pairs only up to this parabolic distance
    stride_t: int = 2
    stride_x: int = 2

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0, 1)")
        if self.T0 <= 3:
            raise ValueError("horizon must exceed 3")


@dataclass
class StoppingResult:
    tau1: float
    tau2: float
    tau3: float
    triggered1: bool = False
    triggered2: bool = False
    triggered3: bool = False
    witness1: tuple | None = None
    witness2: tuple | None = None
    witness3: tuple | None = None
    tau1_clip: float | None = None


@dataclass
class HolderEstimate:
    Z_hat: float
    n_pairs: int
    delta: float


def _geometric_offsets(limit: int) -> list[int]:
    """{1, 2, 3, 4, 6, 8, 12, ...} up to limit: gap ratio <= 2, then 1.5."""
    out, k = [], 0
    while True:
        for m in (1 << k, 3 << (k - 1) if k else None):
            if m is not None and m <= limit and m not in out:
                out.append(m)
        if (1 << k) > limit:
            break
        k += 1
    return sorted(out)


def scan_offsets(path: FieldPath, cfg: StoppingConfig):
    """Deterministic offset set for the modulus scan on this grid.

    Returns (a_list, b_list): time offsets (in strided rows, nonnegative)
    and space offsets (in strided columns, symmetric) whose parabolic
    separations stay under the distance cap.
    """
    g = path.grid
    dts = g.dt * cfg.stride_t
    dxs = g.dx * cfg.stride_x
    a_max = int(cfg.delta_cap ** 4 / dts)
    b_max = int(cfg.delta_cap ** 2 / dxs)
    a_list = [0] + _geometric_offsets(a_max)
    b_pos = _geometric_offsets(b_max)
    b_list = [0] + b_pos + [-b for b in b_pos]
    return a_list, b_list


def _scan_window(path: FieldPath, cfg: StoppingConfig):
    """Strided sub-array of the path over the scan window."""
    ts = path.times
    xs = path.grid.x_centers
    t_lo = max(cfg.time_window[0], ts[0])
    t_hi = min(cfg.time_window[1], ts[-1], cfg.T0)
    it = np.where((ts >= t_lo - 1e-12) & (ts <= t_hi + 1e-12))[0]
    ix = np.where((xs >= cfg.space_window[0] - 1e-12)
                  & (xs <= cfg.space_window[1] + 1e-12))[0]
    if it.size == 0 or ix.size == 0:
        raise ValueError("scan window not covered by the path grid")
    it = it[::cfg.stride_t]
    ix = ix[::cfg.stride_x]
    sub = path.values[np.ix_(it, ix)]
    return sub, ts[it], xs[ix], it


def _pair_threshold(cfg: StoppingConfig, a_sep: float, b_sep: float) -> float:
    d = max(a_sep ** 0.25, abs(b_sep) ** 0.5)
    return cfg.K * d ** (1.0 - cfg.delta)


def tau1(u_path: FieldPath, cfg: StoppingConfig):
    """First grid time with a scanned pair violating the Holder modulus.

    Returns a StoppingResult fragment: (tau, witness, tau_clip).  tau is the
    horizon end when no violation is found; tau_clip is the last slice at
    which the clipped field passes the same scan (equal to tau when
    untriggered).  When the very first scanned slice violates through a
    same-time pair, no clip is clean and tau_clip degenerates to the window
    start.
    """
    sub, ts, xs, _ = _scan_window(u_path, cfg)
    a_list, b_list = scan_offsets(u_path, cfg)
    dts = ts[1] - ts[0] if len(ts) > 1 else u_path.grid.dt * cfg.stride_t
    dxs = xs[1] - xs[0] if len(xs) > 1 else 0.0

    best = None  # (later-index, witness)
    nt = sub.shape[0]
    for a in a_list:
        for b in b_list:
            if a == 0 and b <= 0:
                continue
            thr = _pair_threshold(cfg, a * dts, b * dxs)
            hi = sub[a:, max(b, 0) or None: None if b >= 0 else b]
            lo = sub[:nt - a if a else None,
                     None if b >= 0 else -b: -b if b > 0 else None]
            diff = hi - lo
            norms = np.sqrt((diff ** 2).sum(-1))
            viol = norms > thr
            if not viol.any():
                continue
            k = np.argwhere(viol)[0]  # lexicographic: minimal later-time
            later = int(k[0]) + a
            if best is None or later < best[0]:
                j_lo = int(k[1]) + max(-b, 0)
                witness = ((ts[later], xs[j_lo + b]), (ts[int(k[0])], xs[j_lo]))
                best = (later, witness)
    t_end = ts[-1]
    if best is None:
        return t_end, None, t_end
    trigger = ts[best[0]]
    clip = _rollback_clip(sub, ts, xs, cfg, a_list, b_list, best[0])
    return trigger, best[1], clip


def _clipped_violations(sub, ts, xs, cfg, a_list, b_list, i_clip) -> int:
    """Earliest violating later-time of the i_clip-clipped field, or -1."""
    nt = sub.shape[0]
    idx = np.minimum(np.arange(nt), i_clip)
    clipped = sub[idx]
    earliest = -1
    dts = ts[1] - ts[0] if len(ts) > 1 else 1.0
    dxs = xs[1] - xs[0] if len(xs) > 1 else 0.0
    for a in a_list:
        for b in b_list:
            if a == 0 and b <= 0:
                continue
            d = _pair_threshold(cfg, a * dts, b * dxs)
            hi = clipped[a:, max(b, 0) or None: None if b >= 0 else b]
            lo = clipped[:nt - a if a else None,
                         None if b >= 0 else -b: -b if b > 0 else None]
            m = min(hi.shape[0], lo.shape[0])
            diff = hi[:m] - lo[:m]
            norms = np.sqrt((diff ** 2).sum(-1))
            viol = norms > d
            if viol.any():
                later = int(np.argwhere(viol)[:, 0].min()) + a
                if earliest < 0 or later < earliest:
                    earliest = later
    return earliest


def _rollback_clip(sub, ts, xs, cfg, a_list, b_list, i_trigger) -> float:
    """Largest clip slice before the trigger whose clipped field is clean."""
    i = i_trigger - 1
    while i > 0:
        bad = _clipped_violations(sub, ts, xs, cfg, a_list, b_list, i)
        if bad < 0:
            break
        i = min(i - 1, bad - 1)
    return ts[max(i, 0)]


def check_clipped_modulus(u_path: FieldPath, clip_time: float,
                          cfg: StoppingConfig) -> bool:
    """Post-hoc: the clip-frozen field passes the scan (no violations)."""
    sub, ts, xs, _ = _scan_window(u_path, cfg)
    a_list, b_list = scan_offsets(u_path, cfg)
    i_clip = int(np.searchsorted(ts, clip_time + 1e-12) - 1)
    return _clipped_violations(sub, ts, xs, cfg, a_list, b_list,
                               max(i_clip, 0)) < 0


def tau_growth(path: FieldPath, K: float, which: int = 2,
               T0: float | None = None):
    """First grid time with |field(t, x)| >= K (1 + |x|); horizon if none.

    which = 2 scans the frozen-coefficient field, which = 3 the
    additive-noise field; the rule is identical, the label is kept for
    reporting.
    """
    if which not in (2, 3):
        raise ValueError("which must be 2 or 3")
    ts = path.times
    if T0 is not None:
        keep = ts <= T0 + 1e-12
    else:
        keep = slice(None)
    vals = path.values[keep]
    ts = ts[keep]
    xs = path.grid.x_centers
    norms = np.sqrt((vals ** 2).sum(-1))
    bound = K * (1.0 + np.abs(xs))[None, :]
    viol = norms >= bound
    if not viol.any():
        return ts[-1], None
    k = np.argwhere(viol)[0]
    return ts[int(k[0])], (ts[int(k[0])], xs[int(k[1])])


def estimate_Z(u_path: FieldPath, delta: float, n_pairs: int, seed: int = 0,
               time_window=(0.5, 3.5), space_window=(-2.0, 2.0)):
    """Max ratio |u(p1) - u(p2)| / Delta^(1-delta) over random grid pairs.

    Pairs are drawn by a seeded generator, so nested sample sizes reuse the
    same prefix and the estimate is nondecreasing in n_pairs.
    """
    if n_pairs < 1:
        raise ValueError("need n_pairs >= 1")
    cfg = StoppingConfig(K=1.0, delta=delta, T0=max(3.5, time_window[1] + 0.1),
                         time_window=time_window, space_window=space_window,
                         stride_t=1, stride_x=1)
    sub, ts, xs, _ = _scan_window(u_path, cfg)
    rng = np.random.default_rng(seed)
    nt, nx = sub.shape[:2]
    best = 0.0
    chunk = 200_000
    done = 0
    while done < n_pairs:
        m = min(chunk, n_pairs - done)
        i1, i2 = rng.integers(0, nt, (2, m))
        j1, j2 = rng.integers(0, nx, (2, m))
        same = (i1 == i2) & (j1 == j2)
        d = np.maximum(np.abs(ts[i1] - ts[i2]) ** 0.25,
                       np.abs(xs[j1] - xs[j2]) ** 0.5)
        diff = sub[i1, j1] - sub[i2, j2]
        norms = np.sqrt((diff ** 2).sum(-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(same, 0.0, norms / d ** (1.0 - delta))
        best = max(best, float(np.nanmax(ratio)))
        done += m
    return HolderEstimate(best, n_pairs, delta)
