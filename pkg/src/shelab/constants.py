"""Frozen numeric constants that the underlying estimates only assert to exist.

Every value here was fixed once by a dense numeric scan or a seeded
calibration run and is not meant to be tuned per experiment.  Each entry
records how it was obtained; `shelab calibrate` re-runs the scans and
prints fresh values for comparison.
"""

# |dG/dx| <= (GRAD_BOUND_C / sqrt(t)) G(2t, x) and
# |dG/dt| <= (GRAD_BOUND_C / t) G(2t, x).
# In the similarity variable xi = |x|/sqrt(t) the ratios are
# (sqrt(2)/2) xi e^(-xi^2/8) and sqrt(2) |xi^2/4 - 1/2| e^(-xi^2/8);
# scanned sups 0.85776 (at xi = 2) and 0.81036 (at xi = sqrt(10)).
# 2.0 is a comfortable frozen bound.
GRAD_BOUND_C = 2.0

# The three square-integral estimates: space-increment integral <= C |x-y|,
# time-increment integral <= C |t-s|^(1/2), tail integral <= C |t-s|^(1/2).
# The tail integral equals sqrt((t-s)/(2 pi)) exactly (ratio 0.39894); scans
# over s,t in (0, 4], |x-y| in (0, 8] give sup ratios 0.49895 (space, in the
# |x-y| -> 0, large-t limit) and 0.16525 (time, s -> t limit).
STANDARD_INT_C = 1.0

# E[(N0(p1) - N0(p2))^2] <= C * Delta(p1 - p2)^2 over p1, p2 in
# [1/2, 2] x [-2, 2].  Closed-form scan over 2*10^5 random pairs: sup ratio
# 0.69142, attained by nearly coincident points at t ~ 2.
CANONICAL_METRIC_C = 1.0

# Gauge constant for the ladder event
#   exists l <= l_q : osc over R_{r_{q,l}} of the base field <= Ktilde f(r_{q,l});
# smallest value giving event frequency >= 1 - exp(-sqrt(5)) at q = 5 on the
# linear-case calibration batch (9 probe centres x 2000 oracle replicates,
# 9x9 lattice per rectangle, base seed 20260810), rounded up: quantile 3.83.
GAUGE_K_TILDE = 4.0

# Residual-rectangle constant for order-2q tiles (osc <= K2 2^{-2q} q).
# On the same calibration batch the largest observed osc/(2^{-2q} q) over
# order-4..6 grid tiles was 0.61 for the sigma1-scaled cover scenario.
COVER_K2 = 4.0

# Holder-modulus threshold K for the stopping scans, delta = 0.25.
# Calibration: 200 replicates of the default nonlinear d=2 scenario
# (dx = 1/64, seed 20260810); the 95% quantile of the pair-scan sup of
# |u(p1)-u(p2)| / Delta^(1-delta) was 2.87, max 3.55.  K = 6 keeps the
# trigger rate well under 5%.
STOPPING_K = 6.0

# Hard per-path bound osc(u_hat over R_rho) <= C rho^(2 alpha) after one
# calibration run (alpha = 0.55): 100 nonlinear d=2 replicates, rho sweep
# {0.5, 0.35, 0.25, 0.18}, max observed ratio 1.63; frozen with margin.
UHAT_OSC_C = 2.5

# Mutual-consistency tolerances between the explicit scheme and the kernel
# (Duhamel) cross-check on the coarse grid (dx = 1/16, T = 0.25, nonlinear
# sigma, several seeds).  The raw sup-norm difference is dominated by the
# freshest noise layer, which the explicit step deposits at a node while
# the kernel sum spreads it over width sqrt(dt); measured sups 0.33-0.39,
# roughly resolution-independent at desk scales.  After smoothing both
# fields with G(1/16) the difference drops to 0.06-0.10 and decreases
# with dx, which is the genuine consistency signal.
DUHAMEL_FD_TOL = 0.5
DUHAMEL_FD_SMOOTH_TOL = 0.15
