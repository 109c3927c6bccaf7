"""Closed-form counterexample machinery.

Two constructions in dimension n = 2, d = 1: the rotation exponential stopped
at the exit of |B| from pi/2, which is a strict local martingale with infinite
first moment at the stopped horizon, and the partition-mixture refinement of
it for which the associated homogeneous linear BSDE has no bounded solution.
Both reduce computationally to the exit-time identity

    E[exp(sigma_b / 2)] = 1 / cos(b),   sigma_b = exit time of |W| from b,

for 0 < b < pi/2, which this module also estimates directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .brownian import PathEnsemble, substream
from .exponential import ExponentialEnsemble
from .fields import StoppedRotationField
from .grids import ConfigurationError

HEAVY_TAIL_LEVEL = np.pi / 3  # beyond this exit level, exp(sigma/2) has no useful variance


@dataclass(frozen=True)
class EmerySpec:
    """Rotation exponential stopped at +-level; n = 2, d = 1."""

    level: float = np.pi / 2
    effective_horizon: float = 48.0

    def field(self) -> StoppedRotationField:
        return StoppedRotationField(self.level)


def emery_closed_form(paths: PathEnsemble, level: float = np.pi / 2) -> ExponentialEnsemble:
    """Exact rotation-times-scalar form of the stopped exponential.

    S_t = exp((tau ^ t)/2) [[cos, sin], [-sin, cos]](B_{tau ^ t}) with tau the
    first grid node where |B| >= level; the state is clamped to +-level from
    then on, so every S_t is exactly a scalar multiple of an orthogonal
    matrix.  S^{-1} = exp(-(tau ^ t)) S^T is filled in closed form as well.
    Paths that never exit within the grid horizon are flagged (truncation
    bias), not dropped.
    """
    if paths.d != 1:
        raise ConfigurationError("the rotation example lives on a 1-d Brownian motion")
    b = paths.states[:, :, 0]
    hit = np.abs(b) >= level
    stopped = np.maximum.accumulate(hit, axis=1)
    # state frozen at the (clamped) exit value once stopped
    m = paths.paths
    k1 = paths.grid.steps + 1
    first = np.where(stopped.any(axis=1), stopped.argmax(axis=1), k1 - 1)
    rows = np.arange(m)
    exit_sign = np.sign(b[rows, first])
    angle = np.where(stopped, (exit_sign * level)[:, None], b)
    tau_t = np.where(stopped, paths.grid.nodes[first][:, None],
                     paths.grid.nodes[None, :])
    scale = np.exp(tau_t / 2.0)
    c, s_ = np.cos(angle), np.sin(angle)
    s = np.empty((m, k1, 2, 2))
    s[..., 0, 0] = scale * c
    s[..., 0, 1] = scale * s_
    s[..., 1, 0] = -scale * s_
    s[..., 1, 1] = scale * c
    s_inv = np.swapaxes(s, -1, -2) / (scale**2)[..., None, None]
    expo = ExponentialEnsemble(StoppedRotationField(level), paths, s, s_inv,
                               scheme="closed_form")
    expo.bad_paths = ~stopped[:, -1]  # never exited: truncation bias contributors
    return expo


def emery_defect_at_horizon(paths: int, horizon: float = 48.0, dt: float = 0.01,
                            seed: int = 0, level: float = np.pi / 2,
                            chunk: int = 256) -> dict:
    """Diagonal martingale defect of the stopped rotation exponential at a
    long horizon, without storing paths.

    Exited paths contribute exactly 0 to the diagonal (cos(+-level) = 0 after
    clamping); survivors contribute exp(horizon/2) cos(B).  The empirical
    mean collapses to 0 once the horizon is long enough that no sampled path
    survives, which is the numerical signature of the uniform-integrability
    failure: the true per-time expectation stays 1, carried by survivors of
    vanishing probability, while the stopped terminal has expectation 0.
    """
    rng = substream(seed, 23)
    sqdt = np.sqrt(dt)
    max_steps = int(np.ceil(horizon / dt))
    w = np.zeros(paths)
    exit_steps = np.full(paths, max_steps, dtype=float)
    alive_idx = np.arange(paths)
    step = 0
    while alive_idx.size and step < max_steps:
        n_now = min(chunk, max_steps - step)
        z = rng.standard_normal((alive_idx.size, n_now)) * sqdt
        w_path = w[alive_idx, None] + np.cumsum(z, axis=1)
        crossed = np.abs(w_path) >= level
        any_cross = crossed.any(axis=1)
        newly = np.nonzero(any_cross)[0]
        exit_steps[alive_idx[newly]] = step + crossed[newly].argmax(axis=1) + 1
        keep = ~any_cross
        w[alive_idx[keep]] = w_path[keep, -1]
        alive_idx = alive_idx[keep]
        step += n_now
    contrib = np.zeros(paths)
    contrib[alive_idx] = np.exp(horizon / 2.0) * np.cos(w[alive_idx])
    mean = float(contrib.mean())
    se = float(contrib.std(ddof=1) / np.sqrt(paths))
    defect = abs(1.0 - mean)
    return {
        "diag_defect": defect,
        "std_error": se,
        "survivors": int(alive_idx.size),
        "significance_vs_half": float("inf") if se == 0 else (defect - 0.5) / se,
        "horizon": horizon,
        # |S_{tau ^ horizon}| = exp((tau ^ horizon)/2): rotation times scalar
        "terminal_opnorm_samples": np.exp(np.minimum(exit_steps * dt, horizon) / 2.0),
    }


@dataclass
class ExitTimeResult:
    level: float
    estimate: float
    std_error: float
    paths: int
    dt: float
    truncated_paths: int
    horizon: float
    heavy_tail_warning: bool
    truncation_levels: np.ndarray = field(default=None)
    truncation_curve: np.ndarray = field(default=None)

    @property
    def exact(self) -> float:
        return 1.0 / np.cos(self.level)


def _default_horizon(b: float) -> float:
    # Tail rate of exp(sigma/2) is lambda_1 - 1/2 with lambda_1 = pi^2 / (8 b^2);
    # run until the remaining relative mass is ~exp(-18).
    rate = np.pi**2 / (8.0 * b * b) - 0.5
    return float(min(18.0 / rate, 2000.0))


def exit_time_exponential(b: float, paths: int, dt: float, seed: int = 0,
                          horizon: float | None = None, bridge: bool = True,
                          chunk: int = 64) -> ExitTimeResult:
    """Monte Carlo estimate of E[exp(sigma_b / 2)], sigma_b = exit of |W| from b.

    The walk is monitored at resolution dt; with `bridge` on, a Brownian
    bridge crossing test per step removes the O(sqrt(dt)) discrete-monitoring
    bias.  Paths alive at the horizon contribute the floor exp(horizon/2) and
    are counted in `truncated_paths`.  For b > pi/3 the exponential has heavy
    tails and the single number comes with a warning plus truncation curves.
    """
    if not 0 < b < np.pi / 2:
        raise ConfigurationError("exit level must lie in (0, pi/2); "
                                 "E[exp(sigma/2)] diverges at pi/2")
    if horizon is None:
        horizon = _default_horizon(b)
    max_steps = int(np.ceil(horizon / dt))
    sqdt = np.sqrt(dt)
    rng = substream(seed, 11)

    exit_steps = np.empty(paths)        # sigma / dt, fractional after bridge hits
    alive_idx = np.arange(paths)
    w = np.zeros(paths)
    step = 0
    # The bridge crossing test only matters within ~5 sqrt(dt) of a barrier:
    # beyond that the crossing probability is below exp(-50).  Restricting the
    # exp evaluations and uniform draws to that band keeps the cost near the
    # raw cost of the normal increments.
    band = 5.0 * sqdt
    while alive_idx.size and step < max_steps:
        n_now = min(chunk, max_steps - step)
        z = rng.standard_normal((alive_idx.size, n_now)) * sqdt
        w_path = w[alive_idx, None] + np.cumsum(z, axis=1)
        crossed = np.abs(w_path) >= b
        if bridge:
            w_prev = np.concatenate([w[alive_idx, None], w_path[:, :-1]], axis=1)
            near = ((np.maximum(w_prev, w_path) > b - band)
                    | (np.minimum(w_prev, w_path) < band - b)) & ~crossed
            sel = np.nonzero(near)
            if sel[0].size:
                wp, wn = w_prev[sel], w_path[sel]
                p_up = np.exp(-2.0 * np.maximum(b - wp, 0) * np.maximum(b - wn, 0) / dt)
                p_dn = np.exp(-2.0 * np.maximum(b + wp, 0) * np.maximum(b + wn, 0) / dt)
                u = rng.random(sel[0].size)
                crossed[sel] |= u < p_up + p_dn
        any_cross = crossed.any(axis=1)
        first = crossed.argmax(axis=1)
        newly = np.nonzero(any_cross)[0]
        exit_steps[alive_idx[newly]] = step + first[newly] + 1
        keep = ~any_cross
        w[alive_idx[keep]] = w_path[keep, -1]
        alive_idx = alive_idx[keep]
        step += n_now

    truncated = alive_idx.size
    exit_steps[alive_idx] = max_steps
    sigma = exit_steps * dt
    vals = np.exp(sigma / 2.0)
    estimate = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(paths))
    heavy = bool(b > HEAVY_TAIL_LEVEL)
    levels = np.geomspace(1.0, vals.max(), 9)
    curve = np.array([np.mean(np.minimum(vals, lv)) for lv in levels])
    return ExitTimeResult(b, estimate, se, paths, dt, truncated, horizon, heavy,
                          levels, curve)


def default_level_sequence(count: int, c: float = 0.9) -> np.ndarray:
    """Admissible exit-level sequence b_k increasing to pi/2.

    cos(b_k) = c (k+1) 2^{-k}, so the partition-weighted terms
    2^{-k} / cos(b_k) = 1 / (c (k+1)) vanish while their sum diverges
    (harmonic).  One admissible choice; nothing in the construction pins a
    particular sequence.
    """
    if not 0 < c < 1:
        raise ConfigurationError("scale c must lie in (0, 1) so that b_1 > 0")
    k = np.arange(1, count + 1)
    cos_b = c * (k + 1) * 0.5**k
    return np.arccos(cos_b)


@dataclass(frozen=True)
class NonexistenceSpec:
    """Mixture-of-exit-levels construction with partition weights 2^{-k}.

    The time-change integrand f vanishes on [0, T/2] and equals 1/(T - s) on
    [T/2, T); in the changed clock u = int f^2 ds each stopping level b_k is a
    plain exit time of a standard Brownian motion, so every expectation below
    reduces to the exit-time identity.
    """

    horizon: float = 1.0
    levels: np.ndarray = field(default_factory=lambda: default_level_sequence(12))

    def __post_init__(self):
        b = np.asarray(self.levels, dtype=float)
        checks = self.condition_report()
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ConfigurationError(f"level sequence violates conditions: {bad}")
        object.__setattr__(self, "levels", b)

    def condition_report(self) -> dict:
        """Numeric check of the three level-sequence conditions on the prefix.

        Divergence of the full series cannot be decided from a prefix; the
        check accepts sequences whose terms decay no faster than harmonically
        (terms * k bounded away from zero), which forces divergence.
        """
        b = np.asarray(self.levels, dtype=float)
        k = np.arange(1, b.size + 1)
        terms = 0.5**k / np.cos(b)
        slow = terms * (k + 1)
        return {
            "range_and_increasing": bool(np.all(b >= 0) and np.all(b < np.pi / 2)
                                         and np.all(np.diff(b) > 0)),
            "partial_sums_diverge": bool(slow.min() > 0.5 * slow.max()),
            "terms_vanish": bool(terms[-1] < 0.5 * terms[0]),
        }

    def f(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        late = s >= self.horizon / 2
        out[late] = 1.0 / (self.horizon - s[late])
        return out

    def partition_weights(self, j: int) -> np.ndarray:
        return 0.5 ** np.arange(1, j + 1)

    def partial_sum(self, j: int) -> float:
        """sum_{k <= j} 2^{-k} / cos(b_k), the divergent lower bound."""
        return float((self.partition_weights(j) / np.cos(self.levels[:j])).sum())

    def remainder_bound(self, j: int) -> float:
        """1 / (2^j cos(b_j)), the vanishing gap |Y_0 - E[S_{sigma_j} xi]|."""
        return float(1.0 / (2.0**j * np.cos(self.levels[j - 1])))

    def terminal_vector(self, angles: np.ndarray) -> np.ndarray:
        """xi = (cos N_tau, sin N_tau); unit length pathwise."""
        return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


@dataclass
class BlowupDiagnostics:
    j: np.ndarray
    partial_sum: np.ndarray          # analytic sum_{k<=j} 2^{-k}/cos(b_k)
    simulated: np.ndarray            # simulated partial sums (same decomposition)
    simulated_std_error: np.ndarray
    remainder_bound: np.ndarray
    full_value: np.ndarray           # mixture estimate of E[exp(.5 int_0^{sigma_j} f^2)]
    heavy_levels: list
    per_level: list

    def to_rows(self):
        return np.column_stack([self.j, self.partial_sum, self.simulated,
                                self.simulated_std_error, self.remainder_bound])


def nonexistence_blowup(spec: NonexistenceSpec, j_max: int, paths_per_level: int = 20_000,
                        dt: float = 1e-3, seed: int = 0) -> BlowupDiagnostics:
    """Divergence diagnostics for the no-solution construction.

    In the changed clock, E[exp(.5 int_0^{sigma_j} f^2 ds)] =
    sum_{k <= j} 2^{-k} E[exp(sigma_{b_k}/2)] + 2^{-j} E[exp(sigma_{b_j}/2)],
    so the mixture estimate combines per-level exit-time estimates; the
    analytic column uses the identity 1/cos(b_k).  Levels beyond pi/3 carry
    the heavy-tail warning and make the simulated column a truncation-biased
    lower estimate.
    """
    if j_max < 1 or j_max > spec.levels.size:
        raise ConfigurationError(f"j_max must be in [1, {spec.levels.size}]")
    per_level = []
    for k in range(j_max):
        per_level.append(exit_time_exponential(
            float(spec.levels[k]), paths_per_level, dt, seed=seed + 101 * k))
    est = np.array([r.estimate for r in per_level])
    ses = np.array([r.std_error for r in per_level])
    j = np.arange(1, j_max + 1)
    w = 0.5 ** np.arange(1, j_max + 1)
    partial = np.array([spec.partial_sum(int(x)) for x in j])
    sim = np.cumsum(w * est)
    sim_se = np.sqrt(np.cumsum((w * ses) ** 2) + (w * ses) ** 2)
    full = sim + w * est                          # tail of the mixture sits at level j
    remainder = np.array([spec.remainder_bound(int(x)) for x in j])
    heavy = [float(spec.levels[k]) for k in range(j_max) if per_level[k].heavy_tail_warning]
    return BlowupDiagnostics(j, partial, sim, sim_se, remainder, full, heavy, per_level)
