"""Monte Carlo driver: scenarios, replicate batches, estimators, reports.

Replicates are independent noise streams of one seeded counter generator;
the drivers evolve many replicates as a leading array axis (identical
elementwise arithmetic to the single-replicate solvers) and aggregate by
stream id, so results do not depend on scheduling.  Output tables carry a
versioned schema line so downstream consumers can validate strictly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import stats

from . import constants
from .covering import GaugeConfig, WindowOracle, box_dimension, build_cover, \
    range_cover_check
from .decomposition import DecompositionConfig, build_frame, decompose_batch, \
    oscillation_report
from .heat_kernel import n0_variance
from .noise import SpaceTimeGrid, generate
from .solver import FieldPath, deterministic_trace, evolve, ic_kernel_bump, \
    ic_zero, sigma_bounded_nonlinear, sigma_constant, sigma_identity, \
    solve_deterministic
from .stopping import StoppingConfig, StoppingResult, tau1, tau_growth

__all__ = [
    "ExperimentConfig",
    "TailFit",
    "HittingEstimate",
    "tail_fit",
    "wilson_ci",
    "hitting_scan",
    "ks_against_oracle",
    "linear_point_samples",
    "linear_r0_paths",
    "local_split_replicates",
    "window_found_stats",
    "calibrate_gauge_constant",
    "run_scenario",
    "write_table",
    "read_table",
]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    scenario: str = "linear"
    d: int = 1
    sigma_kind: str = "identity"      # identity | constant_scale | nonlinear
    sigma_scale: float = 1.0
    sigma1: float = 1.0
    sigma_eps: float = 0.5
    ic_kind: str = "zero"             # zero | bump
    ic_amp: float = 0.5
    ic_s0: float = 0.5
    T0: float = 3.5
    X: float = 4.0
    dx: float = 1.0 / 64.0
    dt: float | None = None           # defaults to dx^2 / 4
    K: float = constants.STOPPING_K
    delta: float = 0.25
    alpha: float = 0.55
    beta: float = 0.60
    kappa: float = 2.0
    k_tilde: float = constants.GAUGE_K_TILDE
    k2: float = constants.COVER_K2
    q_list: tuple = (4, 5, 6)
    t0: float = 1.5
    x0: float = 0.5
    rho_list: tuple = (0.5, 0.35, 0.25, 0.18)
    replicates: int = 200
    base_seed: int = 20260810
    lambda_floor: float = 0.25
    lambda_points: int = 8
    hit_dims: tuple = (1, 2, 6, 8)
    hit_z: float = 1.2
    hit_eps: tuple = (0.05, 0.08, 0.125, 0.2, 0.32, 0.5, 0.8, 1.25)
    workers: int = 0                  # 0: use up to 2 processes
    out_dir: str = "out"

    def __post_init__(self):
        if self.dt is None:
            self.dt = self.dx * self.dx / 4.0
        self.q_list = tuple(self.q_list)
        self.rho_list = tuple(self.rho_list)
        self.hit_dims = tuple(self.hit_dims)
        self.hit_eps = tuple(self.hit_eps)
        self.validate()

    def validate(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.T0 <= 3:
            raise ValueError("T0 must exceed 3")
        if self.dt > self.dx ** 2 / 2 + 1e-15:
            raise ValueError("dt violates the stability cap dx^2/2")
        if not 0 < self.delta < 1:
            raise ValueError("delta must be in (0,1)")
        if not 0.5 < self.alpha < self.beta < 2 / 3:
            raise ValueError("need 1/2 < alpha < beta < 2/3")
        if any(q < 2 for q in self.q_list):
            raise ValueError("q values must be >= 2")
        if self.scenario not in ("linear", "local", "window", "cover",
                                 "hitting", "calibrate"):
            raise ValueError(f"unknown scenario '{self.scenario}'")

    def build_sigma(self):
        if self.sigma_kind == "identity":
            return sigma_identity(self.d)
        if self.sigma_kind == "constant_scale":
            return sigma_constant(self.sigma_scale * np.eye(self.d))
        if self.sigma_kind == "nonlinear":
            return sigma_bounded_nonlinear(self.d, sigma1=self.sigma1,
                                           eps=self.sigma_eps)
        raise ValueError(f"unknown sigma_kind '{self.sigma_kind}'")

    def build_ic(self):
        if self.ic_kind == "zero":
            return ic_zero(self.d)
        if self.ic_kind == "bump":
            return ic_kernel_bump(self.d, s0=self.ic_s0, amp=self.ic_amp)
        raise ValueError(f"unknown ic_kind '{self.ic_kind}'")

    def build_grid(self, t_end: float | None = None) -> SpaceTimeGrid:
        return SpaceTimeGrid.create(t_end if t_end is not None else self.T0,
                                    self.X, dx=self.dx, dt=self.dt)

    def n_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        return max(1, min(2, os.cpu_count() or 1))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        with open(path) as fh:
            doc = json.load(fh)
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return ExperimentConfig(**doc)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

@dataclass
class TailFit:
    lambdas: np.ndarray
    p_hat: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    slope: float
    intercept: float
    r2: float
    c0: float
    c1: float
    scale: float


def wilson_ci(k: int, n: int, z: float = 1.96):
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


def tail_fit(samples, scale: float = 1.0, lambdas=None,
             min_samples: int = 500, min_points: int = 4) -> TailFit:
    """Exceedance-probability fit: log P(sample > lam) ~ slope * lam^2 * scale.

    The implied pair is (c0, c1) = (exp(intercept), -slope).  Raises when
    fewer than min_points grid values keep nonzero exceedance ("grid too
    high") or the sample is too small.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < min_samples:
        raise ValueError(f"need >= {min_samples} samples, got {x.size}")
    if lambdas is None:
        qs = np.linspace(0.50, 0.995, 10)
        lambdas = np.unique(np.quantile(x, qs))
    lambdas = np.asarray(sorted(lambdas), dtype=float)
    n = x.size
    counts = (x[None, :] > lambdas[:, None]).sum(axis=1)
    keep = counts > 0
    if keep.sum() < min_points:
        raise ValueError("tail grid too high: fewer than "
                         f"{min_points} levels with nonzero exceedance")
    lambdas, counts = lambdas[keep], counts[keep]
    p = counts / n
    cis = np.array([wilson_ci(int(k), n) for k in counts])
    z = lambdas ** 2 * scale
    A = np.stack([z, np.ones_like(z)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, np.log(p), rcond=None)
    ss_tot = ((np.log(p) - np.log(p).mean()) ** 2).sum()
    ss_res = float(res[0]) if len(res) else 0.0
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return TailFit(lambdas, p, cis[:, 0], cis[:, 1],
                   float(coef[0]), float(coef[1]), float(r2),
                   float(math.exp(coef[1])), float(-coef[0]), scale)


@dataclass
class HittingEstimate:
    d: int
    z_id: int
    eps: float
    hits: int
    trials: int

    @property
    def p_hat(self) -> float:
        return self.hits / self.trials if self.trials else 0.0

    def ci(self):
        return wilson_ci(self.hits, self.trials)


def hitting_scan(ranges_by_d: dict, z_by_d: dict, eps_list) -> list:
    """Fraction of replicates whose range enters the ball(z, eps).

    ranges_by_d[d] is a list of per-replicate (n_points, d) arrays;
    estimates are nondecreasing in eps by set inclusion.
    """
    out = []
    for d, reps in ranges_by_d.items():
        for z_id, z in enumerate(np.atleast_2d(z_by_d[d])):
            dists = np.array([np.sqrt(((r - z) ** 2).sum(-1)).min()
                              for r in reps])
            for eps in eps_list:
                hits = int((dists <= eps).sum())
                out.append(HittingEstimate(d, z_id, float(eps), hits,
                                           len(reps)))
    return out


def ks_against_oracle(sim_values: np.ndarray, oracle_values: np.ndarray,
                      min_n: int = 100) -> dict:
    """Two-sample KS per point plus one on the spread functional.

    sim_values and oracle_values are (n, k) arrays of one scalar component
    at k matched space-time points.
    """
    sim = np.atleast_2d(sim_values)
    ora = np.atleast_2d(oracle_values)
    if sim.shape[0] < min_n or ora.shape[0] < min_n:
        raise ValueError("sample too small for a meaningful KS comparison")
    if sim.shape[1] != ora.shape[1]:
        raise ValueError("point counts differ")
    p_values = []
    for k in range(sim.shape[1]):
        p_values.append(float(stats.ks_2samp(sim[:, k], ora[:, k]).pvalue))
    osc_sim = sim.max(axis=1) - sim.min(axis=1)
    osc_ora = ora.max(axis=1) - ora.min(axis=1)
    p_osc = float(stats.ks_2samp(osc_sim, osc_ora).pvalue)
    return {"point_pvalues": p_values, "min_point_pvalue": min(p_values),
            "osc_pvalue": p_osc}


# ---------------------------------------------------------------------------
# batched linear runs (constant scalar coefficient)
# ---------------------------------------------------------------------------

def _batch_noise_rows(noises, i0, i1):
    return np.stack([n.rows(i0, i1) for n in noises])


def _batch_linear_evolve(grid, d, scale, seeds, streams, t_end, recorders,
                         trace=None):
    """Evolve R replicates of the constant-coefficient field jointly.

    recorders: list of (want(i) -> bool, take(i, states)) pairs; states has
    shape (R, nx, d).  The per-element arithmetic matches solve_fd exactly.
    """
    R = len(streams)
    noises = [generate(grid, d, seeds, s) for s in np.atleast_1d(streams)]
    i_end = grid.ceil_time_index(t_end)
    state = np.zeros((R, grid.nx, d))
    if trace is not None:
        tr0 = trace(0)
        state[:, 0, :] = tr0[0]
        state[:, -1, :] = tr0[1]
    block = {"i0": -1, "rows": None}
    B = 256

    def source(i):
        if block["rows"] is None or not (block["i0"] <= i < block["i0"] + B):
            b0 = (i // B) * B
            block["i0"] = b0
            block["rows"] = _batch_noise_rows(noises, b0, min(b0 + B,
                                                              grid.nt))
        dw = block["rows"][:, i - block["i0"]]
        return (dw * scale) / grid.dx

    def trace_r(i):
        tv = trace(i) if trace is not None else np.zeros((2, d))
        return np.broadcast_to(tv, (R, 2, d))

    for rec in recorders:
        rec.start(R, grid, d)
        if rec.want(0):
            rec.take(0, state)

    def on_row(i, u):
        for rec in recorders:
            if rec.want(i):
                rec.take(i, u)

    evolve(grid, state, 0, i_end, source, "dirichlet", trace_r, on_row)
    return recorders


class PointRecorder:
    """Collects field values at fixed space-time points."""

    def __init__(self, points):
        self.points = points

    def start(self, R, grid, d):
        self.idx = {}
        for k, (t, x) in enumerate(self.points):
            i = grid.time_index(t)
            j = int(np.clip(round((x - grid.x0) / grid.dx - 0.5), 0,
                            grid.nx - 1))
            self.idx.setdefault(i, []).append((k, j))
        self.out = np.empty((R, len(self.points), d))

    def want(self, i):
        return i in self.idx

    def take(self, i, states):
        for k, j in self.idx[i]:
            self.out[:, k] = states[:, j]


class WindowRecorder:
    """Collects every row in [i_lo, i_hi], optionally x-masked."""

    def __init__(self, i_lo, i_hi, x_mask=None, stride=1):
        self.i_lo, self.i_hi, self.x_mask = i_lo, i_hi, x_mask
        self.stride = stride

    def start(self, R, grid, d):
        nx = grid.nx if self.x_mask is None else int(self.x_mask.sum())
        n_rows = len(range(self.i_lo, self.i_hi + 1, self.stride))
        self.out = np.empty((R, n_rows, nx, d))
        self._row = {i: k for k, i in
                     enumerate(range(self.i_lo, self.i_hi + 1, self.stride))}

    def want(self, i):
        return i in self._row

    def take(self, i, states):
        s = states if self.x_mask is None else states[:, self.x_mask, :]
        self.out[:, self._row[i]] = s


def linear_point_samples(cfg: ExperimentConfig, points, n_reps, stream0=0,
                         t_end=None) -> np.ndarray:
    """(n_reps, n_points, d) samples of the linear field at fixed points."""
    t_end = t_end if t_end is not None else max(p[0] for p in points)
    grid = cfg.build_grid(t_end)
    scale = cfg.sigma_scale if cfg.sigma_kind == "constant_scale" else 1.0
    out = []
    B = max(1, min(64, n_reps))
    for b0 in range(0, n_reps, B):
        streams = list(range(stream0 + b0, stream0 + min(b0 + B, n_reps)))
        rec = PointRecorder(points)
        _batch_linear_evolve(grid, cfg.d, scale, cfg.base_seed, streams,
                             t_end, [rec])
        out.append(rec.out)
    return np.concatenate(out)


def linear_r0_paths(cfg: ExperimentConfig, n_reps, stream0=0,
                    batch: int = 4):
    """Yields per-replicate FieldPaths of the linear field on [1, 2] x (0, 1).

    Only the base-rectangle columns are kept (cover construction never
    looks outside), which keeps the per-batch row storage modest.
    """
    grid = cfg.build_grid(2.0)
    scale = cfg.sigma_scale if cfg.sigma_kind == "constant_scale" else 1.0
    i_lo = grid.time_index(1.0)
    i_hi = grid.ceil_time_index(2.0)
    xs = grid.x_centers
    mx = (xs > 0.0) & (xs < 1.0)
    sub_grid = SpaceTimeGrid(grid.t0, grid.t1, 0.0, 1.0, grid.dt, grid.dx)
    for b0 in range(0, n_reps, batch):
        streams = list(range(stream0 + b0, stream0 + min(b0 + batch,
                                                         n_reps)))
        rec = WindowRecorder(i_lo, i_hi, x_mask=mx)
        _batch_linear_evolve(grid, cfg.d, scale, cfg.base_seed, streams,
                             2.0, [rec])
        for r, s in enumerate(streams):
            yield s, FieldPath(sub_grid, rec.out[r], "u", t_offset=i_lo)


# ---------------------------------------------------------------------------
# nonlinear local-split pipeline
# ---------------------------------------------------------------------------

def _scan_indices(grid, t_lo, t_hi, x_lo, x_hi, stride_t, stride_x):
    it = np.arange(grid.ceil_time_index(t_lo),
                   grid.ceil_time_index(t_hi) + 1, stride_t)
    xs = grid.x_centers
    jx = np.where((xs >= x_lo - 1e-12) & (xs <= x_hi + 1e-12))[0][::stride_x]
    return it, jx


def local_split_replicates(cfg: ExperimentConfig, n_reps=None, stream0=0,
                           batch: int = 8, check_modulus: bool = False):
    """Stopping scans plus per-rho decompositions for nonlinear replicates.

    Returns a list of dicts (stream, stopping fields, untriggered flag,
    per-rho oscillation reports); replicates whose modulus stop triggers
    are reported but carry no decomposition (the conditioning used by the
    local experiments).
    """
    n_reps = n_reps if n_reps is not None else cfg.replicates
    dcfg = DecompositionConfig(alpha=cfg.alpha, beta=cfg.beta,
                               kappa=cfg.kappa, K=cfg.K, delta=cfg.delta)
    frames = [build_frame(cfg.t0, cfg.x0, rho, dcfg) for rho in cfg.rho_list]
    t_end = max(cfg.t0 + rho ** 4 for rho in cfg.rho_list)
    grid = cfg.build_grid(t_end)
    sigma = cfg.build_sigma()
    ic = cfg.build_ic()
    i_win0 = min(grid.nearest_time_index(f.t0_minus) for f in frames) - 2
    i_end = grid.ceil_time_index(t_end)
    scfg = StoppingConfig(K=cfg.K, delta=cfg.delta, T0=cfg.T0,
                          time_window=(0.5, grid.times[i_end]))
    v_det = solve_deterministic(ic, grid, t_end=grid.times[i_end])
    det_trace = deterministic_trace(ic, grid)

    results = []
    for b0 in range(0, n_reps, batch):
        streams = list(range(stream0 + b0, stream0 + min(b0 + batch,
                                                         n_reps)))
        R = len(streams)
        noises = [generate(grid, cfg.d, cfg.base_seed, s) for s in streams]
        # pass 1: evolve the nonlinear field and the whole-noise convolution
        state = np.zeros((R, 2, grid.nx, cfg.d))
        state[:, 0] = ic(grid.x_centers)
        win_rows = np.empty((R, 2, i_end - i_win0 + 1, grid.nx, cfg.d))
        scan_t, scan_x = _scan_indices(grid, 0.5, grid.times[i_end], -2.0,
                                       2.0, scfg.stride_t, scfg.stride_x)
        scan_rows = np.empty((R, 2, len(scan_t), len(scan_x), cfg.d))
        scan_pos = {i: k for k, i in enumerate(scan_t)}
        grow_t = np.arange(0, i_end + 1, 8)
        grow_rows = np.empty((R, 2, len(grow_t), grid.nx, cfg.d))
        grow_pos = {i: k for k, i in enumerate(grow_t)}

        block = {"i0": -1, "rows": None}
        B = 256

        def dw(i):
            if block["rows"] is None or not (block["i0"] <= i < block["i0"] + B):
                b = (i // B) * B
                block["i0"] = b
                block["rows"] = _batch_noise_rows(noises, b,
                                                  min(b + B, grid.nt))
            return block["rows"][:, i - block["i0"]]

        cur = {"state": state}

        def source(i):
            w = dw(i)
            sig = sigma(cur["state"][:, 0])
            src = np.empty((R, 2, grid.nx, cfg.d))
            src[:, 0] = np.einsum("rxij,rxj->rxi", sig, w) / grid.dx
            src[:, 1] = w / grid.dx
            return src

        def trace(i):
            tv = det_trace(i)
            out = np.zeros((R, 2, 2, cfg.d))
            out[:, 0] = tv
            return out

        def record(i, u):
            cur["state"] = u
            if i >= i_win0:
                win_rows[:, :, i - i_win0] = u
            k = scan_pos.get(i)
            if k is not None:
                scan_rows[:, :, k] = u[:, :, scan_x, :]
            k = grow_pos.get(i)
            if k is not None:
                grow_rows[:, :, k] = u

        if 0 >= i_win0:
            win_rows[:, :, 0] = state
        if 0 in scan_pos:
            scan_rows[:, :, scan_pos[0]] = state[:, :, scan_x, :]
        if 0 in grow_pos:
            grow_rows[:, :, grow_pos[0]] = state
        evolve(grid, state, 0, i_end, source, "dirichlet", trace, record)

        # stopping scans per replicate; the slices were already strided, so
        # the scan config uses unit strides on the sub-grid
        scan_cfg = StoppingConfig(K=cfg.K, delta=cfg.delta, T0=cfg.T0,
                                  time_window=(0.5, grid.times[i_end]),
                                  stride_t=1, stride_x=1)
        batch_entries = []
        u_paths, n0_paths, noise_list, stop_list = [], [], [], []
        for r in range(R):
            u_scan = _ScanPath(grid, scan_rows[r, 0], scan_t, scan_x)
            t1, w1, clip1 = tau1(u_scan, scan_cfg)
            trig1 = w1 is not None
            g_path = _StridedPath(grid, grow_rows[r, 0], grow_t)
            t2, w2 = tau_growth(g_path, cfg.K, which=2)
            v_vals = grow_rows[r, 1] + v_det.values[grow_t]
            t3, w3 = tau_growth(_StridedPath(grid, v_vals, grow_t), cfg.K,
                                which=3)
            trig2, trig3 = w2 is not None, w3 is not None
            st = StoppingResult(tau1=t1, tau2=t2, tau3=t3,
                                triggered1=trig1, triggered2=trig2,
                                triggered3=trig3, witness1=w1, witness2=w2,
                                witness3=w3, tau1_clip=clip1)
            entry = {"stream": streams[r], "stopping": st,
                     "untriggered": not (trig1 or trig2 or trig3),
                     "reports": {}}
            batch_entries.append(entry)
            if not trig1:
                u_paths.append(FieldPath(grid, win_rows[r, 0], "u",
                                         t_offset=i_win0))
                n0_paths.append(FieldPath(grid, win_rows[r, 1], "n0",
                                          t_offset=i_win0))
                noise_list.append(noises[r])
                stop_list.append(st)

        if u_paths:
            kept = [e for e in batch_entries if not e["stopping"].triggered1]
            for frame in frames:
                decs = decompose_batch(u_paths, u_paths, noise_list, frame,
                                       dcfg, stop_list, sigma, ic, n0_paths,
                                       check_modulus=check_modulus)
                for e, dec in zip(kept, decs):
                    e["reports"][frame.rho] = oscillation_report(dec)
        results.extend(batch_entries)
    return results


class _ScanPath:
    """Strided sub-path exposing the FieldPath surface the scans need."""

    def __init__(self, grid, values, t_idx, x_idx):
        self.grid = _SubGrid(grid, t_idx, x_idx)
        self.values = values
        self.t_offset = 0
        self.label = "scan"

    @property
    def times(self):
        return self.grid._times


class _StridedPath:
    def __init__(self, grid, values, t_idx):
        self.grid = grid
        self.values = values
        self._times = grid.times[t_idx]
        self.label = "strided"

    @property
    def times(self):
        return self._times


class _SubGrid:
    def __init__(self, grid, t_idx, x_idx):
        self._times = grid.times[t_idx]
        self.x_centers = grid.x_centers[x_idx]
        self.dt = (self._times[1] - self._times[0]) if len(t_idx) > 1 \
            else grid.dt
        self.dx = (self.x_centers[1] - self.x_centers[0]) if len(x_idx) > 1 \
            else grid.dx

    @property
    def times(self):
        return self._times


# ---------------------------------------------------------------------------
# window search and gauge calibration
# ---------------------------------------------------------------------------

def window_found_stats(t0, x0, q, seed, n_draws, m: int = 4) -> np.ndarray:
    """Ladder statistics for the linear-case window search at one probe."""
    oracle = WindowOracle(t0, x0, q, m=m)
    return oracle.search_stats(seed, n_draws)


_PROBES = tuple((t, x) for t in (1.25, 1.5, 1.75) for x in (0.25, 0.5, 0.75))


def calibrate_gauge_constant(seed: int = 20260810, q: int = 5,
                             n_draws: int = 2000, m: int = 4):
    """Smallest gauge constant reaching the target ladder-event frequency.

    Pools the probe grid over the base rectangle; the target frequency at
    the calibration scale q is 1 - exp(-sqrt(q)).
    """
    stats_all = []
    for k, (t0, x0) in enumerate(_PROBES):
        stats_all.append(window_found_stats(t0, x0, q, seed + k, n_draws,
                                            m=m))
    pooled = np.concatenate(stats_all)
    target = 1.0 - math.exp(-math.sqrt(q))
    return float(np.quantile(pooled, target)), pooled


# ---------------------------------------------------------------------------
# tables with versioned schema lines
# ---------------------------------------------------------------------------

_SCHEMAS = {
    "aggregate": ("name", "value", "stderr", "n"),
    "tails": ("rho", "lam", "p_hat", "ci_lo", "ci_hi", "fit_slope",
              "fit_intercept", "fit_r2"),
    "osc": ("rho", "term", "median_ratio", "q25", "q75", "n"),
    "cover": ("q", "rep", "zeta_mass", "r6_mass", "r_max",
              "covered_fraction", "n_residual", "omega_q1", "omega_q2",
              "violations"),
    "hits": ("d", "z_id", "eps", "hits", "trials", "p_hat", "ci_lo",
             "ci_hi"),
    "dims": ("d", "slope", "stderr", "n_points", "n_replicates"),
    "stops": ("rep", "tau1", "tau2", "tau3", "trig1", "trig2", "trig3"),
    "frames": ("rep", "t0", "x0", "rho", "residual", "rel_residual",
               "osc_n0", "ratio_n1", "ratio_n2", "ratio_sup_n2",
               "ratio_u_hat", "ratio_v1_hat", "osc_u_hat"),
}


def write_table(path, kind: str, rows) -> None:
    cols = _SCHEMAS[kind]
    with open(path, "w") as fh:
        fh.write(f"#schema {kind} v1\n")
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_table(path):
    with open(path) as fh:
        schema = fh.readline().strip()
        if not schema.startswith("#schema "):
            raise ValueError(f"{path}: missing schema line")
        kind, version = schema.split()[1:3]
        cols = fh.readline().strip().split(",")
        expected = list(_SCHEMAS.get(kind, ()))
        if expected and cols != expected:
            missing = set(expected) - set(cols)
            raise ValueError(f"{path}: schema mismatch, missing columns "
                             f"{sorted(missing)}")
        rows = [dict(zip(cols, line.strip().split(",")))
                for line in fh if line.strip()]
    return kind, rows


# ---------------------------------------------------------------------------
# scenario runner
# ---------------------------------------------------------------------------

def run_scenario(cfg: ExperimentConfig) -> dict:
    """Execute a preset scenario and write its result bundle to cfg.out_dir.

    Returns a summary dict (also written as summary.json); the bundle is a
    pure function of (config, base seed).
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.to_json(os.path.join(cfg.out_dir, "config.json"))
    if cfg.scenario == "linear":
        summary = _run_linear(cfg)
    elif cfg.scenario == "local":
        summary = _run_local(cfg)
    elif cfg.scenario == "window":
        summary = _run_window(cfg)
    elif cfg.scenario == "cover":
        summary = _run_cover(cfg)
    elif cfg.scenario == "hitting":
        summary = _run_hitting(cfg)
    elif cfg.scenario == "calibrate":
        summary = _run_calibrate(cfg)
    else:
        raise ValueError(cfg.scenario)
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, default=float)
    return summary


def _run_linear(cfg: ExperimentConfig) -> dict:
    n = cfg.replicates
    samples = linear_point_samples(cfg, [(1.0, 0.0)], n)
    v = samples[:, 0, :].var(axis=0, ddof=1).mean()
    m4 = ((samples[:, 0, :] - samples[:, 0, :].mean(0)) ** 4).mean()
    se = math.sqrt(max(m4 - v * v, 0.0) / n)
    rows = [{"name": "var_u_1_0", "value": float(v), "stderr": se, "n": n},
            {"name": "var_target", "value": n0_variance(1.0), "stderr": 0.0,
             "n": 0}]
    write_table(os.path.join(cfg.out_dir, "aggregate.csv"), "aggregate",
                rows)
    # oscillation tails over three window radii
    tail_rows = []
    c1s = {}
    for rho in (0.5, 0.35, 0.25):
        oscs = _window_osc_samples(cfg, rho, max(500, n // 4))
        fit = tail_fit(oscs / rho, scale=1.0,
                       min_samples=min(500, len(oscs)))
        c1s[rho] = fit.c1
        for k in range(len(fit.lambdas)):
            tail_rows.append({"rho": rho, "lam": float(fit.lambdas[k]),
                              "p_hat": float(fit.p_hat[k]),
                              "ci_lo": float(fit.ci_lo[k]),
                              "ci_hi": float(fit.ci_hi[k]),
                              "fit_slope": fit.slope,
                              "fit_intercept": fit.intercept,
                              "fit_r2": fit.r2})
    write_table(os.path.join(cfg.out_dir, "tails.csv"), "tails", tail_rows)
    return {"variance": float(v), "variance_se": se,
            "variance_target": n0_variance(1.0), "tail_c1": c1s}


def _window_osc_samples(cfg: ExperimentConfig, rho: float, n_reps: int,
                        t0: float = 1.5, x0: float = 0.5) -> np.ndarray:
    """Oscillation of the linear field over the parabolic window, per rep."""
    t_end = t0 + rho ** 4
    grid = cfg.build_grid(t_end)
    scale = cfg.sigma_scale if cfg.sigma_kind == "constant_scale" else 1.0
    i_lo = grid.nearest_time_index(t0 - rho ** 4)
    i_hi = grid.ceil_time_index(t_end)
    xs = grid.x_centers
    mx = (xs >= x0 - rho ** 2 - 1e-12) & (xs <= x0 + rho ** 2 + 1e-12)
    out = []
    B = 32
    for b0 in range(0, n_reps, B):
        streams = list(range(b0, min(b0 + B, n_reps)))
        rec = WindowRecorder(i_lo, i_hi, x_mask=mx)
        _batch_linear_evolve(grid, cfg.d, scale, cfg.base_seed, streams,
                             t_end, [rec])
        vals = rec.out  # (R, rows, nxm, d)
        out.append(vals.max(axis=(1, 2)) - vals.min(axis=(1, 2)))
    flat = np.concatenate(out)
    return np.sqrt((flat ** 2).sum(-1)) if cfg.d > 1 else flat[:, 0]


def _run_local(cfg: ExperimentConfig) -> dict:
    entries = local_split_replicates(cfg)
    stop_rows = []
    frame_rows = []
    for e in entries:
        st = e["stopping"]
        stop_rows.append({"rep": e["stream"], "tau1": st.tau1,
                          "tau2": st.tau2, "tau3": st.tau3,
                          "trig1": st.triggered1, "trig2": st.triggered2,
                          "trig3": st.triggered3})
        for rho, rep in e["reports"].items():
            frame_rows.append({"rep": e["stream"], "t0": rep["t0"],
                               "x0": rep["x0"], "rho": rho,
                               "residual": rep["residual"],
                               "rel_residual": rep["rel_residual"],
                               "osc_n0": rep["osc_n0"],
                               "ratio_n1": rep["ratio_n1"],
                               "ratio_n2": rep["ratio_n2"],
                               "ratio_sup_n2": rep["ratio_sup_n2"],
                               "ratio_u_hat": rep["ratio_u_hat"],
                               "ratio_v1_hat": rep["ratio_v1_hat"],
                               "osc_u_hat": rep["osc_u_hat"]})
    write_table(os.path.join(cfg.out_dir, "stops.csv"), "stops", stop_rows)
    write_table(os.path.join(cfg.out_dir, "frames.csv"), "frames",
                frame_rows)
    osc_rows = []
    medians = {}
    for rho in cfg.rho_list:
        rows = [r for r in frame_rows if r["rho"] == rho]
        for term in ("ratio_n1", "ratio_sup_n2", "ratio_u_hat",
                     "ratio_v1_hat"):
            vals = np.array([r[term] for r in rows])
            if len(vals) == 0:
                continue
            osc_rows.append({"rho": rho, "term": term,
                             "median_ratio": float(np.median(vals)),
                             "q25": float(np.quantile(vals, 0.25)),
                             "q75": float(np.quantile(vals, 0.75)),
                             "n": len(vals)})
            medians.setdefault(term, {})[rho] = float(np.median(vals))
    write_table(os.path.join(cfg.out_dir, "osc.csv"), "osc", osc_rows)
    untrig = sum(e["untriggered"] for e in entries)
    return {"replicates": len(entries), "untriggered": untrig,
            "medians": medians}


def _run_window(cfg: ExperimentConfig) -> dict:
    rows = []
    freq = {}
    for q in cfg.q_list:
        for k, (t0, x0) in enumerate(_PROBES):
            stats_ = window_found_stats(t0, x0, q,
                                        cfg.base_seed + 1000 * q + k,
                                        cfg.replicates)
            found = float((stats_ <= cfg.k_tilde).mean())
            rows.append({"name": f"found_q{q}_p{k}", "value": found,
                         "stderr": math.sqrt(found * (1 - found)
                                             / len(stats_)),
                         "n": len(stats_)})
            freq.setdefault(q, []).append(found)
    write_table(os.path.join(cfg.out_dir, "aggregate.csv"), "aggregate",
                rows)
    return {"found_frequency": {q: min(v) for q, v in freq.items()},
            "k_tilde": cfg.k_tilde}


def _run_cover(cfg: ExperimentConfig) -> dict:
    rows = []
    last_report = None
    gauge = GaugeConfig(k_tilde=cfg.k_tilde,
                        sigma1=cfg.sigma_scale * math.sqrt(cfg.d),
                        k2=cfg.k2)
    for stream, path in linear_r0_paths(cfg, cfg.replicates):
        for q in cfg.q_list:
            rep = build_cover(path, q, gauge)
            viol = range_cover_check(path, rep)
            z, r6, rmax = rep.mass_terms()
            rows.append({"q": q, "rep": stream, "zeta_mass": z,
                         "r6_mass": r6, "r_max": rmax,
                         "covered_fraction": rep.covered_fraction,
                         "n_residual": rep.n_residual,
                         "omega_q1": rep.omega_q1,
                         "omega_q2": rep.omega_q2,
                         "violations": len(viol)})
            last_report = rep
    write_table(os.path.join(cfg.out_dir, "cover.csv"), "cover", rows)
    if last_report is not None:
        last_report.to_json(os.path.join(cfg.out_dir, "cover.json"))
    med = {}
    for q in cfg.q_list:
        vals = [r["r6_mass"] for r in rows if r["q"] == q]
        med[q] = float(np.median(vals))
    return {"median_r6": med,
            "violations": int(sum(r["violations"] for r in rows))}


def _run_hitting(cfg: ExperimentConfig) -> dict:
    ranges_by_d = {}
    sub_t, sub_x = 64, 2  # lattice subsampling of the base-rectangle rows
    for d in cfg.hit_dims:
        sub_cfg = replace(cfg, d=d, scenario="hitting")
        reps = []
        grid = sub_cfg.build_grid(2.0)
        i_lo = grid.time_index(1.0)
        i_hi = grid.ceil_time_index(2.0)
        t_idx = np.arange(i_lo, i_hi + 1, sub_t)
        for b0 in range(0, cfg.replicates, 8):
            streams = list(range(b0, min(b0 + 8, cfg.replicates)))
            rec = _LatticeRecorder(t_idx, sub_x)
            _batch_linear_evolve(grid, d, 1.0, cfg.base_seed, streams, 2.0,
                                 [rec])
            for r in range(len(streams)):
                reps.append(rec.out[r].reshape(-1, d))
        ranges_by_d[d] = reps
    z_by_d = {d: np.concatenate([[cfg.hit_z], np.zeros(d - 1)])
              for d in cfg.hit_dims}
    table = hitting_scan(ranges_by_d, z_by_d, cfg.hit_eps)
    rows = []
    for est in table:
        lo, hi = est.ci()
        rows.append({"d": est.d, "z_id": est.z_id, "eps": est.eps,
                     "hits": est.hits, "trials": est.trials,
                     "p_hat": est.p_hat, "ci_lo": lo, "ci_hi": hi})
    write_table(os.path.join(cfg.out_dir, "hits.csv"), "hits", rows)
    # box dimension of the d = 2 ranges (and synthetic references)
    dim_rows = []
    if 2 in ranges_by_d:
        radii = [0.4, 0.28, 0.2, 0.14, 0.1]
        dims = [box_dimension(r, radii)["dimension"]
                for r in ranges_by_d[2][:64]]
        dim_rows.append({"d": 2, "slope": float(np.median(dims)),
                         "stderr": float(np.std(dims) / math.sqrt(len(dims))),
                         "n_points": len(ranges_by_d[2][0]),
                         "n_replicates": len(dims)})
    write_table(os.path.join(cfg.out_dir, "dims.csv"), "dims", dim_rows)
    return {"hits": [[r["d"], r["eps"], r["p_hat"]] for r in rows],
            "dims": dim_rows}


class _LatticeRecorder:
    def __init__(self, t_idx, sub_x):
        self.t_idx = set(int(i) for i in t_idx)
        self.sub_x = sub_x

    def start(self, R, grid, d):
        xs = grid.x_centers
        self.x_mask = np.where((xs > 0.0) & (xs < 1.0))[0][::self.sub_x]
        self.rows = {}
        self.R, self.d = R, d
        self._parts = []

    def want(self, i):
        return i in self.t_idx

    def take(self, i, states):
        self._parts.append(states[:, self.x_mask, :].copy())

    @property
    def out(self):
        return np.stack(self._parts, axis=1)


def _run_calibrate(cfg: ExperimentConfig) -> dict:
    k_tilde, pooled = calibrate_gauge_constant(cfg.base_seed)
    doc = {"k_tilde_quantile": k_tilde,
           "frozen_k_tilde": constants.GAUGE_K_TILDE,
           "pool_size": int(pooled.size)}
    with open(os.path.join(cfg.out_dir, "calibration.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
    return doc
