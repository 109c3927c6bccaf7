"""Quadratic BSDE systems: quadratic-linear and unidirectional drivers.

The solver is backward Euler with an inner per-step fixed-point iteration,
run on a truncated driver; the truncation level k escalates until the solved
Z stays inside the identity region of the clamp with margin, at which point
the computed pair solves the untruncated equation on every sampled path.
Condition checkers (positively spanning a-priori bound, Lyapunov pairs) and
the finite-difference linearization check live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from .brownian import PathEnsemble
from .grids import ConfigurationError
from .linear import (LinearBsdeSpec, SolutionEnsemble, _increment_regression,
                     _martingale_residuals)
from .norms import RegressionConditional, estimate_norm
from .tensors import contract_az


# ---------------------------------------------------------------------------
# drivers

@dataclass
class QuadraticLinearDriver:
    """f(t, omega, y, z) = g(t, omega, y, z) + z b^T z.

    The quadratic term is (z b^T z)_i = z^i . (sum_j b_j z^j).  g is a
    Lipschitz driver with constant `lipschitz`; |b| <= lipschitz is the class
    convention and is checked at construction.
    """

    n: int
    d: int
    g: Callable
    b: np.ndarray
    lipschitz: float
    name: str = "ql"

    kind = "ql"

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        if self.b.shape != (self.n,):
            raise ConfigurationError(f"b must have shape ({self.n},)")
        if np.linalg.norm(self.b) > self.lipschitz + 1e-12:
            raise ConfigurationError("|b| exceeds the declared Lipschitz constant")

    def quadratic_part(self, z: np.ndarray) -> np.ndarray:
        bz = np.einsum("j,...jd->...d", self.b, z)
        return np.einsum("...id,...d->...i", z, bz)

    def __call__(self, t, x, y, z):
        out = self.quadratic_part(z)
        if self.g is not None:
            out = out + self.g(t, x, y, z)
        return out


@dataclass
class UnidirectionalDriver:
    """f(t, omega, y, z) = g(t, omega, y, z) + a h(z), h of quadratic growth."""

    n: int
    d: int
    g: Callable
    a: np.ndarray
    h: Callable
    lipschitz: float
    name: str = "unidirectional"

    kind = "unidirectional"

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if self.a.shape != (self.n,):
            raise ConfigurationError(f"a must have shape ({self.n},)")
        h0 = float(np.asarray(self.h(np.zeros((1, self.n, self.d)))).ravel()[0])
        if abs(h0) > self.lipschitz + 1e-12:
            raise ConfigurationError("|h(0)| exceeds the declared constant")

    def __call__(self, t, x, y, z):
        hv = np.asarray(self.h(z), dtype=float)
        out = hv[..., None] * self.a
        if self.g is not None:
            out = out + self.g(t, x, y, z)
        return out


def evaluate_driver(driver, t, x, y, z) -> np.ndarray:
    """Driver value with shape checks; y: (M, n), z: (M, n, d) -> (M, n)."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if y.shape[-1] != driver.n or z.shape[-2:] != (driver.n, driver.d):
        raise ConfigurationError(
            f"driver of shape (n={driver.n}, d={driver.d}) got y {y.shape}, z {z.shape}")
    return np.asarray(driver(t, x, y, z), dtype=float)


def sampled_lipschitz(driver, rng: np.random.Generator, samples: int = 200,
                      scale: float = 2.0) -> float:
    """Crude sampled Lipschitz constant of the driver's g-part in (y, z)."""
    g = driver.g
    if g is None:
        return 0.0
    worst = 0.0
    for _ in range(samples):
        x = rng.normal(size=(1, driver.d))
        y1, y2 = rng.normal(scale=scale, size=(2, 1, driver.n))
        z1, z2 = rng.normal(scale=scale, size=(2, 1, driver.n, driver.d))
        num = np.linalg.norm(g(0.0, x, y1, z1) - g(0.0, x, y2, z2))
        den = np.linalg.norm(y1 - y2) + np.linalg.norm(z1 - z2)
        if den > 1e-12:
            worst = max(worst, num / den)
    return worst


# ---------------------------------------------------------------------------
# truncation

def radial_clamp(v: np.ndarray, k: float) -> np.ndarray:
    """Smooth radial clamp: identity for |v| <= k, C^2 flattening to radius
    1.5 k by |v| = 2k; 1-Lipschitz and |clamp(v)| <= |v|."""
    v = np.asarray(v, dtype=float)
    r = np.sqrt((v * v).reshape(v.shape[:-2] + (-1,)).sum(axis=-1)) if v.ndim >= 2 \
        else np.abs(v)
    return _apply_radial(v, r, k)


def _clamp_profile(r: np.ndarray, k: float) -> np.ndarray:
    # psi(r) = r on [0, k]; on [k, 2k] with s = (r-k)/k:
    # psi = k (1 + s - s^3 + s^4/2), psi' = 1 - 3s^2 + 2s^3 (C^2 at both ends);
    # constant 1.5 k beyond 2k.
    s = np.clip((r - k) / k, 0.0, 1.0)
    mid = k * (1.0 + s - s**3 + 0.5 * s**4)
    return np.where(r <= k, r, np.where(r >= 2 * k, 1.5 * k, mid))


def _apply_radial(v: np.ndarray, r: np.ndarray, k: float) -> np.ndarray:
    psi = _clamp_profile(r, k)
    scale = np.where(r > 0, psi / np.where(r > 0, r, 1.0), 1.0)
    return v * scale.reshape(scale.shape + (1,) * (v.ndim - scale.ndim))


def clamp_vector(v: np.ndarray, k: float) -> np.ndarray:
    """Radial clamp of batched plain vectors (..., d)."""
    v = np.asarray(v, dtype=float)
    r = np.sqrt((v * v).sum(axis=-1))
    return _apply_radial(v, r, k)


def clamp_vecd(z: np.ndarray, k: float) -> np.ndarray:
    """Radial clamp of batched VecD arrays (..., n, d), radial in the full norm."""
    z = np.asarray(z, dtype=float)
    r = np.sqrt((z * z).reshape(z.shape[:-2] + (-1,)).sum(axis=-1))
    return _apply_radial(z, r, k)


@dataclass
class TruncatedDriver:
    """Driver composed with the radial clamp at level k, per class rules.

    Quadratic-linear: only the quadratic factor b^T z is clamped (the
    truncated driver is z phi_k(b^T z) + g, globally Lipschitz).
    Unidirectional: the whole z argument of both g and h is clamped, which
    preserves the spanning a-priori bound because the clamp is radial with
    |phi_k(z)| <= |z|.
    """

    base: object
    level: float

    @property
    def n(self):
        return self.base.n

    @property
    def d(self):
        return self.base.d

    @property
    def kind(self):
        return self.base.kind

    def __call__(self, t, x, y, z):
        z = np.asarray(z, dtype=float)
        if self.base.kind == "ql":
            bz = np.einsum("j,...jd->...d", self.base.b, z)
            quad = np.einsum("...id,...d->...i", z, clamp_vector(bz, self.level))
            if self.base.g is not None:
                quad = quad + self.base.g(t, x, y, z)
            return quad
        zc = clamp_vecd(z, self.level)
        hv = np.asarray(self.base.h(zc), dtype=float)
        out = hv[..., None] * self.base.a
        if self.base.g is not None:
            out = out + self.base.g(t, x, y, zc)
        return out

    def active_magnitude(self, z: np.ndarray) -> np.ndarray:
        """The norm the clamp acts on: |b^T z| (ql) or |z| (unidirectional)."""
        if self.base.kind == "ql":
            bz = np.einsum("j,...jd->...d", self.base.b, z)
            return np.sqrt((bz * bz).sum(axis=-1))
        return np.sqrt((z * z).reshape(z.shape[:-2] + (-1,)).sum(axis=-1))


def truncate_driver(driver, level: float) -> TruncatedDriver:
    if level <= 0:
        raise ConfigurationError("truncation level must be positive")
    return TruncatedDriver(driver, level)


# ---------------------------------------------------------------------------
# solver

class TruncationEscalationError(RuntimeError):
    """No self-consistent truncation level found within the schedule."""


class StepPicardError(RuntimeError):
    """Inner fixed point failed at a backward step."""


@dataclass
class QuadraticSolveReport:
    solution: SolutionEnsemble
    level: float
    escalation_log: list
    margin: float


def _backward_quadratic(driver, terminal_fn, paths: PathEnsemble, degree: int,
                        picard_tol: float, max_picard: int, init: str) -> tuple:
    m, ksteps, n, d = paths.paths, paths.grid.steps, driver.n, driver.d
    dt = paths.grid.dt
    reg = RegressionConditional(degree)
    y = np.empty((m, ksteps + 1, n))
    z = np.empty((m, ksteps, n, d))
    y[:, ksteps] = np.asarray(terminal_fn(paths), dtype=float).reshape(m, n)
    drift = np.empty((m, ksteps, n))
    for k in range(ksteps - 1, -1, -1):
        x_k = paths.state_at(k)
        ey = reg.fit_predict(x_k, y[:, k + 1])
        z[:, k] = _increment_regression(reg, paths, y[:, k + 1], k, base_values=ey)
        t_k = float(paths.grid.nodes[k])
        cur = np.zeros_like(ey) if init == "zero" else ey.copy()
        damp = 1.0
        prev_delta = np.inf
        for it in range(max_picard):
            f_val = driver(t_k, x_k, cur, z[:, k])
            nxt = ey + f_val * dt[k]
            delta = float(np.abs(nxt - cur).max())
            if delta > prev_delta:            # oscillation / growth: damp updates
                damp = 0.5
            cur = cur + damp * (nxt - cur)
            if delta < picard_tol:
                break
            prev_delta = delta
        else:
            raise StepPicardError(
                f"inner Picard did not converge at step {k} (last delta {delta:.3e})")
        y[:, k] = cur
        drift[:, k] = driver(t_k, x_k, cur, z[:, k])
    return y, z, drift


def solve_quadratic(driver, terminal_fn, paths: PathEnsemble, degree: int = 3,
                    picard_tol: float = 1e-10, max_picard: int = 60,
                    levels=(2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0),
                    margin: float = 0.2, init: str = "mean") -> QuadraticSolveReport:
    """Truncation-escalation solve of the quadratic system.

    For each level k in the schedule, solve with the clamped driver, then
    measure the largest magnitude the clamp acts on along the solution.  The
    level is accepted once that magnitude stays below (1 - margin) k: the
    clamp is then inactive on every sampled path and the pair solves the
    original equation there.
    """
    if driver.kind not in ("ql", "unidirectional"):
        raise ConfigurationError("driver must be quadratic-linear or unidirectional")
    log = []
    for level in levels:
        trunc = truncate_driver(driver, float(level))
        y, z, drift = _backward_quadratic(trunc, terminal_fn, paths, degree,
                                          picard_tol, max_picard, init)
        zmag = float(trunc.active_magnitude(z).max())
        accepted = zmag < (1.0 - margin) * level
        log.append({"level": float(level), "max_magnitude": zmag, "accepted": accepted})
        if accepted:
            diags = _martingale_residuals(paths, y, z, drift)
            diags["terminal_mismatch"] = 0.0
            diags["truncation_level"] = float(level)
            diags["truncation_margin"] = 1.0 - zmag / level
            spec = LinearBsdeSpec(None, terminal_fn)  # driver recorded separately
            sol = SolutionEnsemble(spec, paths, y, z, f"quadratic[{driver.kind}]", diags)
            return QuadraticSolveReport(sol, float(level), log, 1.0 - zmag / level)
    raise TruncationEscalationError(
        f"no self-consistent truncation level found; escalation log: {log}")


def cole_hopf_reference(b: float, terminal_samples: np.ndarray) -> float:
    """Closed-form Y_0 = (1/(2b)) log E[exp(2 b xi)] for the scalar equation
    Y = xi + int b |Z|^2 dt - int Z dB (exp(2bY) is a martingale)."""
    return float(np.log(np.mean(np.exp(2.0 * b * terminal_samples))) / (2.0 * b))


# ---------------------------------------------------------------------------
# condition checkers

@dataclass
class AbCondition:
    """A-priori-boundedness data: nonnegative rho and vectors {a_m}."""

    rho: float
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=float))
        if self.rho < 0:
            raise ConfigurationError("rho must be nonnegative")


def positively_spans(vectors: np.ndarray) -> tuple[bool, dict]:
    """Exact LP test: the cone of {a_m} is all of R^n iff every +-e_i is a
    nonnegative combination.  Returns (flag, certificate of LP weights)."""
    vecs = np.atleast_2d(np.asarray(vectors, dtype=float))
    mcount, n = vecs.shape
    cert = {}
    for i in range(n):
        for sign in (1.0, -1.0):
            target = np.zeros(n)
            target[i] = sign
            res = linprog(c=np.zeros(mcount), A_eq=vecs.T, b_eq=target,
                          bounds=[(0, None)] * mcount, method="highs")
            key = f"{'+' if sign > 0 else '-'}e{i}"
            if not res.success:
                return False, {**cert, key: None}
            cert[key] = res.x.tolist()
    return True, cert


def check_ab_condition(cond: AbCondition, driver, paths_or_rng, samples: int = 400,
                       y_scale: float = 2.0, z_scale: float = 3.0) -> dict:
    """Report on condition (AB) for a driver: spanning certificate plus the
    worst sampled margin of a_m^T f <= rho + |a_m^T z|^2 / 2."""
    rng = paths_or_rng if isinstance(paths_or_rng, np.random.Generator) \
        else np.random.default_rng(0)
    spanning, cert = positively_spans(cond.vectors)
    worst = np.inf
    violations = []
    for s in range(samples):
        x = rng.normal(size=(1, driver.d))
        y = rng.normal(scale=y_scale, size=(1, driver.n))
        z = rng.normal(scale=z_scale, size=(1, driver.n, driver.d))
        f_val = evaluate_driver(driver, 0.0, x, y, z)[0]
        for m_i, a_m in enumerate(cond.vectors):
            am_z = np.einsum("j,jd->d", a_m, z[0])
            margin = cond.rho + 0.5 * float(am_z @ am_z) - float(a_m @ f_val)
            if margin < worst:
                worst = margin
            if margin < -1e-9:
                violations.append({"sample": s, "m": m_i, "margin": float(margin)})
    return {"spanning": spanning, "certificate": cert,
            "worst_margin": float(worst), "violations": violations}


@dataclass
class LyapunovPair:
    """Candidate (h, k): value/gradient/Hessian callbacks plus the constant."""

    value: Callable
    gradient: Callable
    hessian: Callable
    k: float
    radius: float


class InvalidLyapunovPair(ValueError):
    pass


def _validate_pair(pair: LyapunovPair, n: int) -> None:
    zero = np.zeros(n)
    if abs(float(pair.value(zero))) > 1e-10:
        raise InvalidLyapunovPair("h(0) != 0")
    if np.linalg.norm(np.asarray(pair.gradient(zero))) > 1e-8:
        raise InvalidLyapunovPair("Dh(0) != 0")
    # C^2-at-0 surrogate: central second differences must agree with the
    # supplied Hessian at two scales (|y| fails this, its difference quotient
    # blows up like 1/eps).
    h0 = np.asarray(pair.hessian(zero), dtype=float)
    for eps in (1e-3, 5e-4):
        for i in range(n):
            e = np.zeros(n)
            e[i] = eps
            dd = (float(pair.value(e)) - 2 * float(pair.value(zero))
                  + float(pair.value(-e))) / eps**2
            if not np.isfinite(dd) or abs(dd - h0[i, i]) > 0.05 * (1 + abs(h0[i, i])):
                raise InvalidLyapunovPair(
                    f"second difference at scale {eps} disagrees with the "
                    f"Hessian callback (got {dd}, expected {h0[i, i]}); "
                    "h is not C^2 at 0 at this tolerance")


def check_lyapunov(pair: LyapunovPair, driver, rng: np.random.Generator,
                   samples: int = 400, z_scale: float = 2.0,
                   solution: SolutionEnsemble | None = None) -> dict:
    """Pointwise margins of the Lyapunov inequality, plus the implied bmo
    bound ||Z||^2 <= k T + 2 sup_{|y| <= c} |h| checked on a solved instance.

    margin(y, z) = (1/2) sum_ij Hess(y)_ij z^i . z^j - Dh(y) . f - |z|^2 + k,
    required nonnegative for |y| <= radius.
    """
    n, d = driver.n, driver.d
    _validate_pair(pair, n)
    worst = np.inf
    worst_at = None
    for _ in range(samples):
        y = rng.normal(size=n)
        if np.linalg.norm(y) > pair.radius:
            y = y * (pair.radius * rng.random() / np.linalg.norm(y))
        z = rng.normal(scale=z_scale, size=(n, d))
        x = rng.normal(size=(1, d))
        f_val = evaluate_driver(driver, 0.0, x, y[None], z[None])[0]
        hess = np.asarray(pair.hessian(y), dtype=float)
        quad = 0.5 * float(np.einsum("ij,id,jd->", hess, z, z))
        margin = quad - float(np.asarray(pair.gradient(y)) @ f_val) \
            - float((z * z).sum()) + pair.k
        if margin < worst:
            worst, worst_at = margin, (y.copy(), z.copy())
    out = {"worst_margin": float(worst), "worst_at": worst_at, "valid": worst >= -1e-9}
    if solution is not None:
        t_total = float(solution.paths.grid.horizon)
        sup_h = _sup_h_on_ball(pair, n, rng)
        zn = estimate_norm("bmo", solution.z, solution.paths)
        out["bmo_sq_estimate"] = zn.value**2
        out["bound"] = pair.k * t_total + 2.0 * sup_h
        out["bound_satisfied"] = bool(zn.value**2 <= out["bound"] + 3 * zn.std_error)
    return out


def _sup_h_on_ball(pair: LyapunovPair, n: int, rng: np.random.Generator,
                   draws: int = 512) -> float:
    pts = rng.normal(size=(draws, n))
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True) * pair.radius
    return float(max(abs(float(pair.value(p))) for p in pts))


# ---------------------------------------------------------------------------
# finite-difference linearization

def _difference_quotient(num: np.ndarray, dvar: np.ndarray) -> np.ndarray:
    """Rank-one quotient q with q . dvar = num, zero where dvar vanishes.

    num: (M, n); dvar: (M, n) or (M, n, d) -> (M, n, n) or (M, n, n, d).
    """
    flat = dvar.reshape(dvar.shape[0], -1)
    denom = (flat * flat).sum(axis=1)
    safe = np.where(denom > 0, denom, 1.0)
    quot = np.einsum("mi,m...->mi...", num, dvar / safe.reshape((-1,) + (1,) * (dvar.ndim - 1)))
    quot[denom == 0] = 0.0
    return quot


def linearized_difference_check(driver, sol1: SolutionEnsemble, sol2: SolutionEnsemble,
                                degree: int = 3) -> dict:
    """Verify that dY = Y1 - Y2 solves the linear equation with the
    finite-difference coefficients assembled per driver class.

    alpha = dg/dY, dA = dg/dZ, and the structural matrix is
    A = Z^2 b^T + Diag(b^T Z^1) for quadratic-linear drivers or
    A = a (dh/dZ)^T for unidirectional ones.  The reported residual is the
    conditional-moment residual of the difference equation, which vanishes
    to solver tolerance because both solutions share the regression operator.
    """
    paths = sol1.paths
    if sol2.paths is not paths:
        raise ConfigurationError("both solutions must live on the same paths")
    m, ksteps, n, d = paths.paths, paths.grid.steps, driver.n, driver.d
    dt = paths.grid.dt
    dy = sol1.y - sol2.y
    dz = sol1.z - sol2.z
    reg = RegressionConditional(degree)

    equation_residual = 0.0
    drift = np.empty((m, ksteps, n))
    alpha_all = np.empty((m, ksteps, n, n))
    da_all = np.empty((m, ksteps, n, n, d))
    struct_all = np.empty((m, ksteps, n, n, d))
    g = driver.g if driver.g is not None else (lambda t, x, y, z: np.zeros((y.shape[0], n)))
    for k in range(ksteps):
        t_k = float(paths.grid.nodes[k])
        x_k = paths.state_at(k)
        y1, y2 = sol1.y[:, k], sol2.y[:, k]
        z1, z2 = sol1.z[:, k], sol2.z[:, k]
        g_11 = g(t_k, x_k, y1, z1)
        g_21 = g(t_k, x_k, y2, z1)
        g_22 = g(t_k, x_k, y2, z2)
        alpha = _difference_quotient(g_11 - g_21, dy[:, k])
        da = _difference_quotient(g_21 - g_22, dz[:, k])
        if driver.kind == "ql":
            b = driver.b
            bz1 = np.einsum("j,mjd->md", b, z1)
            struct = np.einsum("mid,j->mijd", z2, b)
            idx = np.arange(n)
            struct[:, idx, idx, :] += bz1[:, None, :]
        else:
            h1 = np.asarray(driver.h(z1), dtype=float)
            h2 = np.asarray(driver.h(z2), dtype=float)
            flat = dz[:, k].reshape(m, -1)
            denom = (flat * flat).sum(axis=1)
            safe = np.where(denom > 0, denom, 1.0)
            bvec = dz[:, k] * ((h1 - h2) / safe)[:, None, None]   # dh/dZ, (M, n, d)
            struct = np.einsum("i,mjd->mijd", driver.a, bvec)
        alpha_all[:, k], da_all[:, k], struct_all[:, k] = alpha, da, struct
        drift[:, k] = (np.einsum("mij,mj->mi", alpha, dy[:, k])
                       + contract_az(struct + da, dz[:, k]))
        # dY_k - E_k[dY_{k+1}] - drift dt vanishes to the per-step fixed-point
        # tolerance because the conditional operator is shared and linear
        fitted = reg.fit_predict(x_k, dy[:, k + 1])
        step_res = dy[:, k] - fitted - drift[:, k] * dt[k]
        equation_residual = max(equation_residual, float(np.abs(step_res).max()))
    resid = _martingale_residuals(paths, dy, dz, drift)
    resid["equation_residual"] = equation_residual
    dxi = dy[:, -1]
    dxi_norm = float(np.sqrt((dxi * dxi).sum(axis=1)).max())
    dy_norm = estimate_norm("sup_p", dy, paths, q=np.inf).value
    dz_norm = estimate_norm("bmo", dz, paths).value
    return {
        "residual": resid,
        "dxi_norm": dxi_norm,
        "dy_norm": dy_norm,
        "dz_norm": dz_norm,
        "stability_ratio": (dy_norm + dz_norm) / dxi_norm if dxi_norm > 0 else 0.0,
        "coefficients": {"alpha": alpha_all, "delta_a": da_all, "structural": struct_all},
    }
