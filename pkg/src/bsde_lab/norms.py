"""Path-space norm estimators and least-squares conditional expectations.

The bmo-type norms involve a supremum over stopping times; on a grid we take
the maximum over grid times of an estimated conditional expectation, so the
reported numbers are grid-time lower estimates of the continuous-time norms.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .brownian import PathEnsemble

NORM_KINDS = ("bmo", "bmo_half", "sup_p", "l2q", "l1q")


@dataclass
class NormEstimate:
    kind: str
    value: float
    std_error: float
    grid_times_used: list = field(default_factory=list)
    attaining_index: int | None = None

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("norm estimate must be nonnegative")


def poly_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Monomial features of total degree <= `degree` in the columns of x.

    x: (M, d) -> (M, n_features); the first column is the constant.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, d = x.shape
    cols = [np.ones(m)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            col = np.ones(m)
            for j in combo:
                col = col * x[:, j]
            cols.append(col)
    return np.column_stack(cols)


class RegressionConditional:
    """Least-squares conditional expectation given the Brownian state.

    Valid for Markovian functionals (dependence through (t, B_t)).  Degenerate
    feature matrices (e.g. at t = 0 where B_0 is constant) fall back to lower
    degree automatically; a genuine rank deficiency raises a warning once.
    """

    def __init__(self, degree: int = 3):
        self.degree = degree
        self._warned = False

    def fit_predict(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Fitted E[y | x] at the sample points.  y may have trailing axes."""
        y = np.asarray(y, dtype=float)
        flat = y.reshape(y.shape[0], -1)
        if np.allclose(x, x[0]):
            out = np.broadcast_to(flat.mean(axis=0), flat.shape)
            return out.reshape(y.shape).copy()
        feats = poly_features(x, self.degree)
        coef, _, rank, _ = np.linalg.lstsq(feats, flat, rcond=None)
        if rank < feats.shape[1] and not self._warned:
            warnings.warn(
                f"regression basis rank-deficient (rank {rank} < {feats.shape[1]}); "
                "fit downgraded by lstsq", RuntimeWarning)
            self._warned = True
        return (feats @ coef).reshape(y.shape)


def _integrand_sizes(values: np.ndarray, grid_steps: int) -> np.ndarray:
    """|values| per (path, step), reducing any trailing component axes."""
    v = np.asarray(values, dtype=float)
    if v.ndim < 2 or v.shape[1] != grid_steps:
        raise ValueError(
            f"expected per-step values with shape (paths, {grid_steps}, ...), got {v.shape}")
    return np.sqrt((v * v).reshape(v.shape[0], grid_steps, -1).sum(axis=-1))


def _lp_mean(samples: np.ndarray, q: float) -> tuple[float, float]:
    """(E[samples^q])^{1/q} with a delta-method standard error."""
    m = samples.size
    moment = float(np.mean(samples**q))
    se_moment = float(np.std(samples**q, ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    if moment <= 0:
        return 0.0, 0.0
    value = moment ** (1.0 / q)
    return value, se_moment * value / (q * moment)


def _max_order_stat(samples: np.ndarray) -> tuple[float, float]:
    """Per-path maximum with an order-statistics spread as the error bar."""
    s = np.sort(samples)
    k = max(1, int(np.sqrt(s.size)))
    return float(s[-1]), float(s[-1] - s[-k])


def estimate_norm(kind: str, values: np.ndarray, paths: PathEnsemble,
                  q: float | None = None, times=None, degree: int = 3) -> NormEstimate:
    """Estimate a path-space norm from sampled process values.

    kind:
      - "bmo":      values are per-step integrands (paths, K, ...);
                    sup_tk max_omega E_tk[int_tk^T |Z|^2 dt] ^ (1/2)
      - "bmo_half": same layout; sup_tk max_omega E_tk[int_tk^T |beta| dt]
      - "sup_p":    values are node values (paths, K+1, ...); ||sup_t |Y|||_{L^q}
      - "l2q":      per-step integrands; (E[(int |Z|^2 dt)^{q/2}])^{1/q}
      - "l1q":      per-step integrands; (E[(int |beta| dt)^q])^{1/q}

    `q` is required for sup_p / l2q / l1q (math.inf allowed for sup_p).
    Conditional expectations for the bmo kinds use polynomial regression on
    the Brownian state; the essential sup is the max over fitted node values.
    """
    if kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {kind!r}")
    k_steps = paths.grid.steps
    dt = paths.grid.dt

    if kind in ("sup_p",):
        if q is None or q < 1:
            raise ValueError("sup_p requires q >= 1")
        v = np.asarray(values, dtype=float)
        if v.shape[0] != paths.paths or v.shape[1] != k_steps + 1:
            raise ValueError(f"expected node values (paths, {k_steps + 1}, ...), got {v.shape}")
        sizes = np.sqrt((v * v).reshape(v.shape[0], v.shape[1], -1).sum(axis=-1))
        per_path = sizes.max(axis=1)
        if np.isinf(q):
            value, se = _max_order_stat(per_path)
        else:
            value, se = _lp_mean(per_path, q)
        return NormEstimate(kind, value, se, list(paths.grid.nodes))

    sizes = _integrand_sizes(values, k_steps)

    if kind in ("l2q", "l1q"):
        if q is None or q < 1:
            raise ValueError(f"{kind} requires q >= 1")
        power = 2.0 if kind == "l2q" else 1.0
        path_integral = (sizes**power * dt[None, :]).sum(axis=1)
        per_path = np.sqrt(path_integral) if kind == "l2q" else path_integral
        if np.isinf(q):
            value, se = _max_order_stat(per_path)
        else:
            value, se = _lp_mean(per_path, q)
        return NormEstimate(kind, value, se, list(paths.grid.nodes))

    # bmo kinds: grid-time max over estimated conditional remainders.
    power = 2.0 if kind == "bmo" else 1.0
    contrib = sizes**power * dt[None, :]
    # remaining[:, k] = sum_{j >= k} contrib_j, with remaining[:, K] = 0
    remaining = np.zeros((paths.paths, k_steps + 1))
    remaining[:, :-1] = contrib[:, ::-1].cumsum(axis=1)[:, ::-1]
    if times is None:
        times = range(k_steps + 1)
    reg = RegressionConditional(degree)
    states = paths.states
    best, best_k, best_se = 0.0, 0, 0.0
    used = []
    for k in times:
        used.append(float(paths.grid.nodes[k]))
        fitted = reg.fit_predict(states[:, k], remaining[:, k])
        node = float(np.max(fitted))
        if node > best:
            resid = remaining[:, k] - fitted
            best, best_k = node, int(k)
            best_se = float(np.std(resid, ddof=1) / np.sqrt(max(paths.paths - 1, 1)))
    if kind == "bmo":
        value = float(np.sqrt(max(best, 0.0)))
        se = best_se / (2.0 * value) if value > 0 else best_se
    else:
        value, se = max(best, 0.0), best_se
    return NormEstimate(kind, value, se, used, attaining_index=best_k)
