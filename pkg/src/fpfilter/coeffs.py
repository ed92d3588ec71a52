"""Model coefficients: signal drift, observation gain, initial law.

The engine works with a scalar diffusion dX = a(X) dt + dW killed at 0 and
an observation dY = b(t, X) dt + dB.  This module declares the coefficient
functions, checks the standing regularity conditions on a finite grid, and
exposes the handful of derived constants (growth constant, mean-reversion
rate, potential) that the hitting-time bounds and the filter need.

Evaluators are pure and immutable after construction; they can be shared
freely between workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator

from . import rng

__all__ = [
    "DriftSpec", "ObsSpec", "InitialLaw", "ValidationReport",
    "QuadratureError", "validate_drift", "potential_A", "linear_growth_K",
    "default_validation_grid",
]

# numeric codes shared with the jit kernels
DRIFT_ZERO, DRIFT_CONSTANT, DRIFT_AFFINE = 0, 1, 2
OBS_ZERO, OBS_LINEAR, OBS_LINEAR_CLIPPED = 0, 1, 2
INIT_POINT, INIT_LOGNORMAL, INIT_TABULATED = 0, 1, 2


class QuadratureError(RuntimeError):
    """Raised when adaptive quadrature cannot reach the requested error."""


def default_validation_grid() -> np.ndarray:
    return np.linspace(0.0, 50.0, 10_000)


@dataclass(frozen=True)
class DriftSpec:
    """Drift a(x) of the signal, with evaluator and derivative."""

    kind: str
    a: Callable[[np.ndarray], np.ndarray]
    da: Callable[[np.ndarray], np.ndarray]
    params: tuple = ()
    table: Optional[tuple] = None

    # -- constructors ---------------------------------------------------
    @staticmethod
    def zero() -> "DriftSpec":
        return DriftSpec("zero",
                         lambda x: np.zeros_like(np.asarray(x, float)),
                         lambda x: np.zeros_like(np.asarray(x, float)))

    @staticmethod
    def constant(c: float) -> "DriftSpec":
        c = float(c)
        return DriftSpec("constant",
                         lambda x: np.full_like(np.asarray(x, float), c),
                         lambda x: np.zeros_like(np.asarray(x, float)),
                         params=(c,))

    @staticmethod
    def affine(alpha: float, beta: float) -> "DriftSpec":
        """a(x) = alpha + beta * x."""
        alpha, beta = float(alpha), float(beta)
        return DriftSpec("affine",
                         lambda x: alpha + beta * np.asarray(x, float),
                         lambda x: np.full_like(np.asarray(x, float), beta),
                         params=(alpha, beta))

    @staticmethod
    def tabulated(xs: Sequence[float], vals: Sequence[float]) -> "DriftSpec":
        """Monotone cubic interpolation of a sampled drift.

        Beyond the last node the drift continues with the affine tail
        fitted on the trailing decade [x_max/10, x_max]; below the first
        node the value is clamped.  This keeps linear growth intact.
        """
        xs = np.asarray(xs, dtype=float)
        vals = np.asarray(vals, dtype=float)
        if xs.ndim != 1 or xs.size < 4:
            raise ValueError("tabulated drift needs at least 4 nodes")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("tabulated drift nodes must be strictly ascending")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(vals))):
            raise ValueError("tabulated drift contains non-finite entries")
        interp = PchipInterpolator(xs, vals, extrapolate=False)
        dinterp = interp.derivative()
        x_lo, x_hi = xs[0], xs[-1]
        tail = xs >= x_hi / 10.0
        if tail.sum() < 4:
            tail = np.zeros_like(tail)
            tail[-4:] = True
        # least-squares affine tail
        At = np.vstack([np.ones(tail.sum()), xs[tail]]).T
        (t_alpha, t_beta), *_ = np.linalg.lstsq(At, vals[tail], rcond=None)

        def a_eval(x, _i=interp, _lo=x_lo, _hi=x_hi, _al=t_alpha, _be=t_beta,
                   _vlo=vals[0]):
            x = np.asarray(x, dtype=float)
            out = np.where(x < _lo, _vlo,
                           np.where(x > _hi, _al + _be * x, 0.0))
            inside = (x >= _lo) & (x <= _hi)
            if np.any(inside):
                out = np.where(inside, np.nan_to_num(_i(np.clip(x, _lo, _hi)),
                                                     nan=0.0), out)
            return out

        def da_eval(x, _d=dinterp, _lo=x_lo, _hi=x_hi, _be=t_beta):
            x = np.asarray(x, dtype=float)
            out = np.where(x < _lo, 0.0, np.where(x > _hi, _be, 0.0))
            inside = (x >= _lo) & (x <= _hi)
            if np.any(inside):
                out = np.where(inside, np.nan_to_num(_d(np.clip(x, _lo, _hi)),
                                                     nan=0.0), out)
            return out

        return DriftSpec("tabulated", a_eval, da_eval,
                         params=(float(t_alpha), float(t_beta)),
                         table=(xs, vals))

    @staticmethod
    def from_table_file(path) -> "DriftSpec":
        """Two whitespace-separated columns (x, a(x)), ascending x."""
        data = np.loadtxt(path, ndmin=2)
        if data.shape[1] != 2:
            raise ValueError(f"{path}: expected two columns, got {data.shape[1]}")
        return DriftSpec.tabulated(data[:, 0], data[:, 1])

    # -- kernel interface ----------------------------------------------
    def kernel_code(self) -> Optional[tuple]:
        """(code, p0, p1) when the jit kernels can evaluate this drift."""
        if self.kind == "zero":
            return (DRIFT_ZERO, 0.0, 0.0)
        if self.kind == "constant":
            return (DRIFT_CONSTANT, self.params[0], 0.0)
        if self.kind == "affine":
            return (DRIFT_AFFINE, self.params[0], self.params[1])
        return None


@dataclass(frozen=True)
class ObsSpec:
    """Observation gain b(t, x) with b(t, 0) = 0 and |b| <= K_b |x|."""

    kind: str
    b: Callable[[float, np.ndarray], np.ndarray]
    lipschitz: float
    params: tuple = ()

    @staticmethod
    def zero() -> "ObsSpec":
        return ObsSpec("zero", lambda t, x: np.zeros_like(np.asarray(x, float)),
                       0.0)

    @staticmethod
    def linear(slope: float) -> "ObsSpec":
        slope = float(slope)
        return ObsSpec("linear", lambda t, x: slope * np.asarray(x, float),
                       abs(slope), params=(slope,))

    @staticmethod
    def linear_clipped(slope: float, bmax: float) -> "ObsSpec":
        """b(t, x) = clip(slope * x, -bmax, bmax): Lipschitz and bounded."""
        slope, bmax = float(slope), float(bmax)
        if bmax <= 0:
            raise ValueError("bmax must be positive")
        return ObsSpec("linear_clipped",
                       lambda t, x: np.clip(slope * np.asarray(x, float),
                                            -bmax, bmax),
                       abs(slope), params=(slope, bmax))

    def K_b(self, horizon: float = None) -> float:
        return self.lipschitz

    @property
    def bounded_by(self) -> Optional[float]:
        """Upper bound on |b| when one exists (None otherwise)."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "linear_clipped":
            return self.params[1]
        return None

    def kernel_code(self) -> Optional[tuple]:
        if self.kind == "zero":
            return (OBS_ZERO, 0.0, 0.0)
        if self.kind == "linear":
            return (OBS_LINEAR, self.params[0], 0.0)
        if self.kind == "linear_clipped":
            return (OBS_LINEAR_CLIPPED, self.params[0], self.params[1])
        return None

    def check_on_grid(self, ts: np.ndarray, xs: np.ndarray) -> None:
        """Verify the zero-at-origin and linear-growth clauses on a grid."""
        for t in np.asarray(ts, float):
            v0 = float(np.asarray(self.b(t, np.zeros(1)))[0])
            if abs(v0) > 1e-12:
                raise ValueError(f"b({t}, 0) = {v0}, expected 0")
            vx = np.asarray(self.b(t, xs))
            if not np.all(np.isfinite(vx)):
                raise ValueError(f"b({t}, .) non-finite on grid")
            bad = np.abs(vx) > self.lipschitz * np.abs(xs) + 1e-12
            if np.any(bad):
                i = int(np.argmax(bad))
                raise ValueError(
                    f"|b({t}, {xs[i]})| = {abs(vx[i])} exceeds "
                    f"K_b*|x| = {self.lipschitz * abs(xs[i])}")


@dataclass(frozen=True)
class InitialLaw:
    """Law of the starting point; support must lie in (0, inf)."""

    kind: str
    params: tuple
    atoms: Optional[tuple] = None  # (xs, cumulative p) for tabulated

    @staticmethod
    def point(x0: float) -> "InitialLaw":
        x0 = float(x0)
        if not (x0 > 0 and np.isfinite(x0)):
            raise ValueError(f"point mass must sit in (0, inf), got {x0}")
        return InitialLaw("point", (x0,))

    @staticmethod
    def lognormal(m: float, s: float) -> "InitialLaw":
        if s <= 0:
            raise ValueError("lognormal scale must be positive")
        return InitialLaw("lognormal", (float(m), float(s)))

    @staticmethod
    def tabulated(xs: Sequence[float], ps: Sequence[float]) -> "InitialLaw":
        xs = np.asarray(xs, float)
        ps = np.asarray(ps, float)
        if xs.shape != ps.shape or xs.ndim != 1 or xs.size == 0:
            raise ValueError("tabulated law needs matching 1-d xs, ps")
        if np.any(xs <= 0):
            raise ValueError("tabulated law support must lie in (0, inf)")
        if np.any(ps < 0):
            raise ValueError("negative probability")
        tot = ps.sum()
        if abs(tot - 1.0) > 1e-8:
            raise ValueError(f"probabilities sum to {tot}, expected 1")
        return InitialLaw("tabulated", (), atoms=(xs, np.cumsum(ps / tot)))

    @staticmethod
    def from_table_file(path) -> "InitialLaw":
        data = np.loadtxt(path, ndmin=2)
        return InitialLaw.tabulated(data[:, 0], data[:, 1])

    def transform(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms in (0,1) to samples (inverse CDF)."""
        u = np.asarray(u, float)
        if self.kind == "point":
            return np.full_like(u, self.params[0])
        if self.kind == "lognormal":
            m, s = self.params
            return np.exp(m + s * rng.ndtri(u))
        xs, cum = self.atoms
        idx = np.searchsorted(cum, u, side="left")
        return xs[np.minimum(idx, xs.size - 1)]

    def sample(self, n: int, state: int, index0: int = 0) -> np.ndarray:
        """n keyed samples; sample i depends only on (state, index0 + i)."""
        u = rng.u01(state, np.arange(index0, index0 + n), 0, rng.CH_INIT)
        return self.transform(u)

    @property
    def mean(self) -> float:
        if self.kind == "point":
            return self.params[0]
        if self.kind == "lognormal":
            m, s = self.params
            return float(np.exp(m + 0.5 * s * s))
        xs, cum = self.atoms
        ps = np.diff(np.concatenate([[0.0], cum]))
        return float(np.sum(xs * ps))

    @property
    def second_moment(self) -> float:
        if self.kind == "point":
            return self.params[0] ** 2
        if self.kind == "lognormal":
            m, s = self.params
            return float(np.exp(2 * m + 2 * s * s))
        xs, cum = self.atoms
        ps = np.diff(np.concatenate([[0.0], cum]))
        return float(np.sum(xs * xs * ps))

    def kernel_code(self) -> Optional[tuple]:
        if self.kind == "point":
            return (INIT_POINT, self.params[0], 0.0)
        if self.kind == "lognormal":
            return (INIT_LOGNORMAL, self.params[0], self.params[1])
        return None


@dataclass
class ValidationReport:
    """Outcome of the drift regularity checks on a grid."""

    sup_abs_da: float
    a_at_infinity: float            # +-inf allowed
    potential_limit: float          # lim of A(x) at +inf, +-inf allowed
    clause_bounded_derivative: bool
    clause_potential_limit: bool
    clause_tail_decomposition: bool
    K_a: float = 0.0
    g_a: float = 0.0
    c_f: float = 0.0
    p_exponent: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (self.clause_bounded_derivative
                and self.clause_potential_limit
                and self.clause_tail_decomposition)


def _fit_tail_power(x: np.ndarray, y: np.ndarray) -> tuple:
    """log-log least squares y ~ c * x^p on positive pairs."""
    keep = (x > 0) & (y > 0)
    if keep.sum() < 4:
        return 0.0, 0.0
    lx, ly = np.log(x[keep]), np.log(y[keep])
    A = np.vstack([np.ones_like(lx), lx]).T
    (lc, p), *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(np.exp(lc)), float(p)


def validate_drift(spec: DriftSpec, grid: Optional[np.ndarray] = None
                   ) -> ValidationReport:
    """Check the drift's regularity clauses on a grid and fit constants.

    Clause 1: continuously differentiable with a bounded derivative.
    Clause 2: the potential A(x) = int_0^x a has a limit at +inf.
    Clause 3: if a(+inf) = -inf, then beyond some g_a the drift splits as
    -K_a x + f_a with f_a <= 0 and -int_0^x f_a growing slower than x^2.
    Fitted constants (K_a, g_a, c_f, p) are reported, not asserted to be
    optimal.
    """
    if grid is None:
        grid = default_validation_grid()
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty validation grid")
    grid = np.unique(grid)
    ax = np.asarray(spec.a(grid), dtype=float)
    dax = np.asarray(spec.da(grid), dtype=float)
    for name, arr in (("a", ax), ("a'", dax)):
        if not np.all(np.isfinite(arr)):
            i = int(np.argmin(np.isfinite(arr)))
            raise ValueError(f"{name} non-finite at x = {grid[i]}")

    notes = []
    sup_da = float(np.max(np.abs(dax)))
    x_max = float(grid[-1])

    # clause 1
    if spec.kind in ("zero", "constant", "affine"):
        clause1 = True
    else:
        half = grid <= x_max / 2.0
        lo = float(np.max(np.abs(dax[half]))) if half.any() else 0.0
        hi = float(np.max(np.abs(dax[~half]))) if (~half).any() else 0.0
        clause1 = hi <= max(1.2 * lo, lo + 1e-9)
        if not clause1:
            notes.append(
                f"derivative still growing at grid edge: sup|a'|={hi:.3g} on "
                f"upper half vs {lo:.3g} on lower half")

    # limit behaviour of a and A
    if spec.kind == "zero":
        a_inf, A_lim = 0.0, 0.0
        clause2 = True
    elif spec.kind == "constant":
        c = spec.params[0]
        a_inf = c
        A_lim = np.inf if c > 0 else (-np.inf if c < 0 else 0.0)
        clause2 = True
    elif spec.kind == "affine":
        alpha, beta = spec.params
        if beta != 0.0:
            a_inf = np.inf if beta > 0 else -np.inf
            A_lim = np.inf if beta > 0 else -np.inf
        else:
            a_inf = alpha
            A_lim = np.inf if alpha > 0 else (-np.inf if alpha < 0 else 0.0)
        clause2 = True
    else:
        tail = grid >= x_max / 2.0
        tail_vals = ax[tail]
        if len(spec.params) >= 2:
            t_alpha, t_beta = spec.params[0], spec.params[1]
        else:
            At = np.vstack([np.ones(tail.sum()), grid[tail]]).T
            (t_alpha, t_beta), *_ = np.linalg.lstsq(At, tail_vals, rcond=None)
        if t_beta > 1e-12:
            a_inf, A_lim = np.inf, np.inf
        elif t_beta < -1e-12:
            a_inf, A_lim = -np.inf, -np.inf
        elif np.all(tail_vals >= -1e-12) or np.all(tail_vals <= 1e-12):
            a_inf = float(np.mean(tail_vals))
            A_lim = np.inf if a_inf > 1e-12 else (
                -np.inf if a_inf < -1e-12 else 0.0)
        else:
            a_inf = float(np.mean(tail_vals))
            A_lim = np.nan
        clause2 = not np.isnan(A_lim)
        if not clause2:
            notes.append("drift oscillates in sign on the tail grid; "
                         "potential limit not established")

    # clause 3: only binding when a diverges to -inf
    K_a = g_a = c_f = p_fit = 0.0
    if a_inf == -np.inf:
        if spec.kind == "affine":
            K_a = -spec.params[1]
        else:
            K_a = -float(t_beta)  # fitted tail slope
        if K_a <= 0:
            clause3 = False
            notes.append("a diverges to -inf but no positive mean-reversion "
                         "rate could be extracted")
        else:
            f_a = ax + K_a * grid
            ok = f_a <= 1e-9 * (1.0 + K_a * x_max)
            if ok[-1] and ok.any():
                # first index from which the sign condition holds throughout
                idx = np.nonzero(~ok)[0]
                start = (idx[-1] + 1) if idx.size else 0
                g_a = float(grid[start])
                neg_int = -np.concatenate(
                    [[0.0], np.cumsum(0.5 * (f_a[1:] + f_a[:-1])
                                      * np.diff(grid))])
                tail = grid >= max(g_a, x_max / 10.0)
                if np.max(neg_int[tail], initial=0.0) <= 1e-9:
                    clause3 = True
                    c_f, p_fit = max(float(np.max(neg_int, initial=0.0)), 1.0), 0.0
                    notes.append("-int f_a bounded above; growth clause "
                                 "holds with p = 0")
                else:
                    c_f, p_fit = _fit_tail_power(grid[tail], neg_int[tail])
                    clause3 = p_fit < 1.95
                    if not clause3:
                        notes.append(
                            f"fitted growth exponent p = {p_fit:.3f} >= 1.95")
            else:
                clause3 = False
                notes.append("a(x) + K_a x fails to stay nonpositive on the "
                             "tail grid")
    else:
        clause3 = True

    return ValidationReport(
        sup_abs_da=sup_da, a_at_infinity=a_inf, potential_limit=A_lim,
        clause_bounded_derivative=clause1, clause_potential_limit=clause2,
        clause_tail_decomposition=clause3, K_a=K_a, g_a=g_a, c_f=c_f,
        p_exponent=p_fit, notes=notes)


def potential_A(spec: DriftSpec, x: float) -> float:
    """A(x) = int_0^x a(y) dy; closed form where the kind allows it."""
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("x must be finite")
    if spec.kind == "zero":
        return 0.0
    if spec.kind == "constant":
        return spec.params[0] * x
    if spec.kind == "affine":
        alpha, beta = spec.params
        return alpha * x + 0.5 * beta * x * x
    val, err = quad(lambda y: float(np.asarray(spec.a(y))), 0.0, x,
                    epsabs=1e-12, epsrel=1e-12, limit=200)
    if err > 1e-10:
        raise QuadratureError(
            f"potential quadrature reached abs error {err:.2e} > 1e-10")
    return float(val)


def linear_growth_K(spec: DriftSpec, grid: np.ndarray) -> float:
    """Smallest K with |a(x)| <= K (1 + |x|), estimated as a grid supremum."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    ax = np.asarray(spec.a(grid), dtype=float)
    if not np.all(np.isfinite(ax)):
        i = int(np.argmin(np.isfinite(ax)))
        raise ValueError(f"a non-finite at x = {grid[i]}")
    return float(np.max(np.abs(ax) / (1.0 + np.abs(grid))))
