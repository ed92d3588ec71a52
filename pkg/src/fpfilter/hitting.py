"""First-passage-to-zero survival probabilities and densities.

For the drift families with closed forms (zero, constant, linear
mean-reversion) the density and survival function are evaluated
directly; for anything else the density is represented as a killed-path
expectation along 3-d Bessel bridges and estimated by Monte Carlo,
optionally cached in a density table.

Conventions: ``ell(t, x)`` is the defective density of the hitting time
of 0 started from x > 0 (it integrates to the total default probability,
which is below 1 for drifts pushing away from the barrier);
``survival(t, x) = 1 - int_0^t ell(u, x) du``, with survival(0, x) = 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar
from scipy.special import log_ndtr, ndtr

from . import kernels, rng
from .coeffs import DriftSpec, linear_growth_K, potential_A

__all__ = [
    "ell_bm", "survival_bm", "ell_drifted_bm", "survival_drifted_bm",
    "ell_ou", "survival_ou", "ell_bridge_mc", "delta_constant",
    "HittingModel", "BoundReport", "check_bounds", "DensityTable",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _check_tx(t, x, t_strict=True):
    t = np.asarray(t, float)
    x = np.asarray(x, float)
    if t_strict and np.any(t <= 0):
        raise ValueError("t must be positive")
    if not t_strict and np.any(t < 0):
        raise ValueError("t must be nonnegative")
    if np.any(x <= 0):
        raise ValueError("x must be positive")
    return t, x


def ell_bm(t, x):
    """Hitting density of 0 for standard Brownian motion from x."""
    t, x = _check_tx(t, x)
    return x / np.sqrt(2.0 * np.pi * t ** 3) * np.exp(-x * x / (2.0 * t))


def survival_bm(t, x):
    """P_x[no hit of 0 before t] for standard Brownian motion."""
    t, x = _check_tx(t, x, t_strict=False)
    with np.errstate(divide="ignore"):
        z = np.where(t > 0, x / np.sqrt(np.where(t > 0, t, 1.0)), np.inf)
    return np.where(t > 0, 2.0 * ndtr(z) - 1.0, 1.0)


def ell_drifted_bm(t, x, c):
    """Hitting density for drift a = c (inverse-Gaussian family)."""
    t, x = _check_tx(t, x)
    c = float(c)
    return ell_bm(t, x) * np.exp(-c * x - 0.5 * c * c * t)


def survival_drifted_bm(t, x, c):
    t, x = _check_tx(t, x, t_strict=False)
    c = float(c)
    tpos = np.where(t > 0, t, 1.0)
    st = np.sqrt(tpos)
    # exp(-2cx) * Phi((ct - x)/sqrt(t)) in log space to dodge overflow
    second = np.exp(-2.0 * c * x + log_ndtr((c * tpos - x) / st))
    val = ndtr((x + c * tpos) / st) - second
    return np.where(t > 0, val, 1.0)


def _ou_timescale(t, K):
    # variance time-change of the mean-reverting bridge to barrier level
    return np.expm1(2.0 * K * t) / (2.0 * K)


def ell_ou(t, x, K):
    """Hitting density of 0 for dX = -K X dt + dW from x > 0.

    Evaluated in log space; continuous in (t, x, K) and matching the
    Brownian density in the K -> 0 limit.
    """
    t, x = _check_tx(t, x)
    K = float(K)
    if K <= 0:
        raise ValueError("K must be positive")
    y = K * t
    # log(K / sinh(y)) = log(2K) - y - log1p(-exp(-2y))
    log_ks = np.log(2.0 * K) - y - np.log1p(-np.exp(-2.0 * y))
    with np.errstate(over="ignore"):
        cothm1 = 2.0 / np.expm1(2.0 * y)
    logv = (np.log(x) + 1.5 * log_ks - math.log(_SQRT_2PI)
            + 0.5 * y - 0.5 * K * x * x * cothm1)
    return np.exp(logv)


def survival_ou(t, x, K):
    """Closed-form survival for the linear mean-reverting drift."""
    t, x = _check_tx(t, x, t_strict=False)
    K = float(K)
    if K <= 0:
        raise ValueError("K must be positive")
    u = _ou_timescale(np.where(t > 0, t, 1.0), K)
    return np.where(t > 0, 2.0 * ndtr(x / np.sqrt(u)) - 1.0, 1.0)


def ell_bridge_mc(spec: DriftSpec, t: float, x: float, n: int,
                  bridge_steps: int = 256, seed: int = 0,
                  state: Optional[int] = None):
    """Monte Carlo estimate of the hitting density for a general drift.

    Represents the density as exp(-A(x)) * E[exp(-0.5 int (a^2+a')(R))]
    * ell_bm(t, x) with R a 3-d Bessel bridge from x to 0 over [0, t],
    and returns (estimate, standard error).
    """
    t, x, n = float(t), float(x), int(n)
    if t <= 0 or x <= 0:
        raise ValueError("t and x must be positive")
    if n < 1000:
        raise ValueError(f"n = {n} bridges is below the floor of 1000")
    if state is None:
        state = rng.derive(rng.stream_state(seed), 0xB71D6E)
    dcode = spec.kernel_code()
    if dcode is not None:
        w, bad = kernels.bridge_weights(state, t, x, n, bridge_steps, dcode)
    else:
        phi = lambda r: np.asarray(spec.a(r)) ** 2 + np.asarray(spec.da(r))
        w, bad = kernels.bridge_weights(state, t, x, n, bridge_steps, None,
                                        drift_phi_fn=phi)
    if np.any(bad >= 0):
        i = int(np.argmax(bad >= 0))
        raise FloatingPointError(
            f"non-finite drift integrand on bridge {i} at interior step "
            f"{int(bad[i])} of {bridge_steps}")
    pref = math.exp(-potential_A(spec, x)) * float(ell_bm(t, x))
    mean = float(np.sum(w)) / n
    # no variance for flat integrands (zero/constant drift)
    var = float(np.sum((w - mean) ** 2)) / (n - 1) if n > 1 else 0.0
    return pref * mean, pref * math.sqrt(var / n)


@lru_cache(maxsize=1)
def delta_constant() -> float:
    """Global maximum of x / (exp(x/6) - exp(-5x/6)) over (0, inf).

    Bracketed by a coarse sweep of (0, 50], then refined by golden
    section to 1e-10; the maximizer sits near x = 5.903.
    """
    def h(x):
        return x / (math.exp(x / 6.0) - math.exp(-5.0 * x / 6.0))

    xs = np.linspace(1e-6, 50.0, 20_001)
    vals = np.array([h(v) for v in xs])
    i = int(np.argmax(vals))
    res = minimize_scalar(lambda v: -h(v), bracket=(xs[i - 1], xs[i], xs[i + 1]),
                          method="golden", options={"xtol": 1e-12})
    return h(float(res.x))


# ---------------------------------------------------------------------------
# model object
# ---------------------------------------------------------------------------

@dataclass
class HittingModel:
    """Density/survival evaluator for one drift, closed form or MC."""

    method: str                      # bm | drifted_bm | ou | bridge_mc
    drift: DriftSpec
    param: float = 0.0               # c for drifted_bm, K for ou
    n_bridges: int = 10_000
    bridge_steps: int = 256
    seed: int = 0
    table: Optional["DensityTable"] = None

    @staticmethod
    def bm() -> "HittingModel":
        return HittingModel("bm", DriftSpec.zero())

    @staticmethod
    def drifted_bm(c: float) -> "HittingModel":
        return HittingModel("drifted_bm", DriftSpec.constant(c), float(c))

    @staticmethod
    def ou(K: float) -> "HittingModel":
        if K <= 0:
            raise ValueError("K must be positive")
        return HittingModel("ou", DriftSpec.affine(0.0, -K), float(K))

    @staticmethod
    def bessel_bridge_mc(drift: DriftSpec, n_bridges: int = 10_000,
                         bridge_steps: int = 256, seed: int = 0
                         ) -> "HittingModel":
        return HittingModel("bridge_mc", drift, 0.0, int(n_bridges),
                            int(bridge_steps), int(seed))

    @staticmethod
    def from_drift(drift: DriftSpec, **mc_opts) -> "HittingModel":
        """Pick the closed form matching the drift, else bridge MC."""
        if drift.kind == "zero":
            return HittingModel.bm()
        if drift.kind == "constant":
            return HittingModel.drifted_bm(drift.params[0])
        if drift.kind == "affine" and drift.params[0] == 0.0 \
                and drift.params[1] < 0.0:
            return HittingModel.ou(-drift.params[1])
        return HittingModel.bessel_bridge_mc(drift, **mc_opts)

    # -- evaluation ------------------------------------------------------
    def ell(self, t, x):
        if self.method == "bm":
            return ell_bm(t, x)
        if self.method == "drifted_bm":
            return ell_drifted_bm(t, x, self.param)
        if self.method == "ou":
            return ell_ou(t, x, self.param)
        if self.table is not None:
            return self.table.ell(t, x)
        t = float(t)
        xs = np.atleast_1d(np.asarray(x, float))
        out = np.array([ell_bridge_mc(self.drift, t, xi, self.n_bridges,
                                      self.bridge_steps, self.seed)[0]
                        for xi in xs])
        return out if np.ndim(x) else float(out[0])

    def survival(self, t, x):
        if self.method == "bm":
            return survival_bm(t, x)
        if self.method == "drifted_bm":
            return survival_drifted_bm(t, x, self.param)
        if self.method == "ou":
            return survival_ou(t, x, self.param)
        t = float(t)
        if t == 0.0:
            return np.ones_like(np.asarray(x, float))
        xs = np.atleast_1d(np.asarray(x, float))
        out = np.array([self._survival_mc(t, xi) for xi in xs])
        out = np.clip(out, 1e-300, 1.0)
        return out if np.ndim(x) else float(out[0])

    def _survival_mc(self, t, x):
        # integrate the (table-backed) density on a refined log-uniform grid
        src = self.table.ell if self.table is not None else \
            (lambda u, xi: ell_bridge_mc(self.drift, u, xi,
                                         max(self.n_bridges // 10, 1000),
                                         self.bridge_steps, self.seed)[0])
        us = np.geomspace(max(t * 1e-6, 1e-8), t, 200)
        vals = np.array([float(np.asarray(src(u, np.array([x]))).ravel()[0])
                         for u in us])
        integral = np.trapezoid(vals, us)
        return 1.0 - min(integral, 1.0)

    def build_table(self, t_max: float, x_max: float, n_t: int = 64,
                    n_x: int = 64) -> "DensityTable":
        """Cache the density on a log-spaced t grid for fast queries."""
        t_grid = np.geomspace(max(t_max * 1e-4, 1e-6), t_max, n_t)
        x_grid = np.linspace(x_max / n_x, x_max, n_x)
        vals = np.empty((n_t, n_x))
        base = rng.derive(rng.stream_state(self.seed), 0x7AB1E)
        for i, t in enumerate(t_grid):
            for j, x in enumerate(x_grid):
                est, _ = ell_bridge_mc(self.drift, t, x, self.n_bridges,
                                       self.bridge_steps,
                                       state=rng.derive(base, i, j))
                vals[i, j] = est
        self.table = DensityTable(t_grid, x_grid, vals)
        return self.table

    def kernel_code(self) -> Optional[tuple]:
        if self.method == "bm":
            return (kernels.HIT_BM, 0.0)
        if self.method == "drifted_bm":
            return (kernels.HIT_DRIFTED, self.param)
        if self.method == "ou":
            return (kernels.HIT_OU, self.param)
        return None


# ---------------------------------------------------------------------------
# cached density tables
# ---------------------------------------------------------------------------

@dataclass
class DensityTable:
    """Density values on (t_grid x x_grid) with monotone interpolation."""

    t_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray
    _t_interp: object = field(default=None, repr=False)

    _LOG_FLOOR = -690.0  # below double-precision underflow

    def _interp(self):
        if self._t_interp is None:
            logv = np.log(np.maximum(self.values, 1e-300))
            self._t_interp = PchipInterpolator(np.log(self.t_grid), logv,
                                               axis=0, extrapolate=False)
        return self._t_interp

    def ell(self, t, x):
        # monotone interpolation of the log density in log time, then x
        t = float(np.clip(t, self.t_grid[0], self.t_grid[-1]))
        logrow = self._interp()(math.log(t))
        col = PchipInterpolator(self.x_grid, logrow, extrapolate=False)
        xs = np.asarray(x, float)
        logs = col(np.clip(xs, self.x_grid[0], self.x_grid[-1]))
        out = np.exp(np.maximum(np.nan_to_num(logs, nan=self._LOG_FLOOR),
                                self._LOG_FLOOR))
        return np.where(out <= math.exp(self._LOG_FLOOR + 1.0), 0.0, out)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"t_grid {self.t_grid.size} x_grid {self.x_grid.size}\n")
            fh.write(" ".join(repr(float(v)) for v in self.t_grid) + "\n")
            fh.write(" ".join(repr(float(v)) for v in self.x_grid) + "\n")
            for row in self.values:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    @staticmethod
    def load(path) -> "DensityTable":
        with open(path) as fh:
            head = fh.readline().split()
            if len(head) != 4 or head[0] != "t_grid" or head[2] != "x_grid":
                raise ValueError(f"{path}: malformed density-table header")
            n_t, n_x = int(head[1]), int(head[3])
            t_grid = np.array([float(v) for v in fh.readline().split()])
            x_grid = np.array([float(v) for v in fh.readline().split()])
            if t_grid.size != n_t or x_grid.size != n_x:
                raise ValueError(f"{path}: grid sizes disagree with header")
            vals = np.loadtxt(fh, ndmin=2)
        if vals.shape != (n_t, n_x):
            raise ValueError(f"{path}: value block is {vals.shape}, "
                             f"expected {(n_t, n_x)}")
        return DensityTable(t_grid, x_grid, vals)


# ---------------------------------------------------------------------------
# Theorem-style bound checks
# ---------------------------------------------------------------------------

@dataclass
class BoundReport:
    """Inverse-first-moment bound and local boundedness of t * density."""

    delta: float
    K_g: float
    xs: np.ndarray
    lhs: np.ndarray            # int_0^inf ell(s, x)/s ds
    rhs: np.ndarray            # 2 delta^{3/2} (1 + K_g x) / x^2
    sup_t_ell: np.ndarray      # sup_{t <= t_max} t * ell(t, x)
    quad_errors: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(self.lhs <= self.rhs * (1.0 + 1e-12)))


def _inverse_moment(model: HittingModel, x: float) -> tuple:
    """int_0^inf ell(s, x) / s ds by panel-split adaptive quadrature."""
    f = lambda s: float(model.ell(s, x)) / s
    split = x * x  # density mode scale separates the two regimes
    with warnings.catch_warnings():
        # roundoff-level warnings are expected at these tolerances; the
        # returned error estimates are asserted downstream instead
        warnings.simplefilter("ignore")
        v1, e1 = quad(f, 0.0, split, epsabs=1e-13, epsrel=1e-12, limit=400)
        # locate where the integrand goes negligible, then close with an
        # explicit tail panel so no mass is dropped
        cut = split
        while f(cut) > 1e-14:
            cut *= 2.0
            if cut > 1e9:
                break
        v2, e2 = quad(f, split, cut, epsabs=1e-13, epsrel=1e-12, limit=400)
        v3, e3 = quad(f, cut, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
    return v1 + v2 + v3, e1 + e2 + e3


def check_bounds(model: HittingModel, xs, t_max: float = 10.0,
                 n_t: int = 2000) -> BoundReport:
    """Verify the inverse-moment bound and measure sup t*ell per start."""
    xs = np.asarray(xs, float)
    if np.any(xs <= 0):
        raise ValueError("starting points must be positive")
    delta = delta_constant()
    K_g = linear_growth_K(model.drift, np.linspace(0.0, 50.0, 10_000))
    lhs = np.empty(xs.size)
    errs = np.empty(xs.size)
    sup_te = np.empty(xs.size)
    t_grid = np.geomspace(t_max * 1e-6, t_max, n_t)
    for i, x in enumerate(xs):
        lhs[i], errs[i] = _inverse_moment(model, float(x))
        if model.method == "bridge_mc":
            vals = np.array([float(np.asarray(model.ell(float(t), x)))
                             for t in t_grid])
        else:
            vals = model.ell(t_grid, float(x))
        sup_te[i] = float(np.max(t_grid * vals))
    rhs = 2.0 * delta ** 1.5 * (1.0 + K_g * xs) / (xs * xs)
    report = BoundReport(delta, K_g, xs, lhs, rhs, sup_te, errs)
    if not report.ok:
        bad = int(np.argmax(lhs > rhs))
        raise AssertionError(
            f"inverse-moment bound violated at x = {xs[bad]}: "
            f"lhs = {lhs[bad]:.6g} > rhs = {rhs[bad]:.6g}")
    return report
