"""Defaultable zero-coupon bond and rebate valuation from filter output.

Prices are conditional expectations under the pricing measure with zero
interest rate.  The survival leg projects the remaining-life survival
function over the alive cloud; the rebate leg integrates the per-particle
hitting density against the rebate schedule; and two independent nested
Monte Carlo routes re-derive the survival price through the hazard
discount with and without an exponential change of measure, giving
cross-checks on the whole filter/intensity stack.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import kernels, rng
from .coeffs import DriftSpec, ObsSpec
from .filtering import FilterAbsorbedError, ParticleCloud
from .hitting import HittingModel

__all__ = ["BondSpec", "RebateSpec", "PricingReport", "survival_price",
           "rebate_value", "bond_price", "price_via_intensity_discount",
           "duffie_diagnostic", "KappaBlowupError"]


class KappaBlowupError(RuntimeError):
    """The exponential deflator left its stable range; the change-of-
    measure route needs a bounded observation gain."""


@dataclass(frozen=True)
class RebateSpec:
    """Payment at default: nothing, a deterministic schedule R(s), or a
    functional g(s, y) of the observation level at default."""

    kind: str = "none"                       # none | deterministic | obs
    fn: Optional[Callable] = None            # R(s) or g(s, y)
    dfn: Optional[Callable] = None           # dR/ds when available

    @staticmethod
    def none() -> "RebateSpec":
        return RebateSpec("none")

    @staticmethod
    def deterministic(fn, dfn=None) -> "RebateSpec":
        return RebateSpec("deterministic", fn, dfn)

    @staticmethod
    def constant(level: float) -> "RebateSpec":
        level = float(level)
        return RebateSpec("deterministic", lambda s: level, lambda s: 0.0)

    @staticmethod
    def observation_functional(g) -> "RebateSpec":
        return RebateSpec("obs", g)


@dataclass(frozen=True)
class BondSpec:
    maturity: float
    face: float = 1.0
    rebate: RebateSpec = RebateSpec.none()

    def __post_init__(self):
        if self.maturity <= 0:
            raise ValueError("maturity must be positive")
        if self.face < 0:
            raise ValueError("face must be nonnegative")


@dataclass
class PricingReport:
    t: float
    method: str
    survival_price: float
    rebate_value: float
    total: float
    stderr: float = 0.0
    tag: str = "survival-branch"

    def to_json(self, path=None) -> str:
        payload = {"t": self.t, "method": self.method,
                   "survival_price": self.survival_price,
                   "rebate_value": self.rebate_value, "total": self.total,
                   "stderr": self.stderr, "tag": self.tag}
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _alive(cloud: ParticleCloud):
    if cloud.absorbed:
        raise FilterAbsorbedError("pricing needs at least one alive particle")
    wa = cloud.weights[cloud.alive]
    xa = cloud.positions[cloud.alive]
    return wa / wa.sum(), xa


def survival_price(cloud: ParticleCloud, hitting: HittingModel, t: float,
                   T: float, defaulted: bool = False) -> float:
    """E[survive to T | observations, alive at t]; 0 on the default branch."""
    if t > T:
        raise ValueError("t must not exceed maturity")
    if defaulted:
        return 0.0
    wa, xa = _alive(cloud)
    if T == t:
        return 1.0
    return float((wa * hitting.survival(T - t, xa)).sum())


def _gl_nodes(n: int, a: float, b: float):
    z, w = leggauss(n)
    return 0.5 * (b - a) * z + 0.5 * (a + b), 0.5 * (b - a) * w


def _per_particle_quad(fn, a: float, b: float, n_particles: int,
                       tol: float = 1e-9, n_max: int = 4096) -> np.ndarray:
    """Adaptive (by doubling) Gauss-Legendre integral per particle.

    ``fn(s)`` returns the integrand as an array over particles; nodes are
    shared across particles and chunked to bound memory.
    """
    prev = None
    n = 32
    while True:
        nodes, wts = _gl_nodes(n, a, b)
        acc = np.zeros(n_particles)
        for lo in range(0, n, 64):
            hi = min(lo + 64, n)
            block = np.stack([fn(s) for s in nodes[lo:hi]])
            acc += wts[lo:hi] @ block
        if prev is not None:
            scale = 1.0 + float(np.max(np.abs(acc)))
            if float(np.max(np.abs(acc - prev))) <= tol * scale or n >= n_max:
                return acc
        prev = acc
        n *= 2


def rebate_value(cloud: ParticleCloud, hitting: HittingModel, t: float,
                 spec: RebateSpec, T: float, y_t: Optional[float] = None
                 ) -> float:
    """Value at t of the payment-at-default leg over (t, T].

    Deterministic schedules with a derivative integrate by parts against
    the survival function (smooth, so the shared-node quadrature
    converges fast); without a derivative the hitting density is
    integrated directly.  Observation-functional rebates are valued on a
    forecast frozen at the current observation level; their exact value
    needs nested simulation of future observations.
    """
    if t > T:
        raise ValueError("t must not exceed maturity")
    if spec.kind == "none":
        return 0.0
    if spec.kind == "obs":
        if y_t is None:
            raise ValueError("observation-functional rebate needs the "
                             "current observation level y_t")
        g = spec.fn
        fn = lambda s: g(s, y_t)
        dfn = None
    else:
        fn, dfn = spec.fn, spec.dfn
    horizon = T - t
    if horizon == 0.0:
        return 0.0
    wa, xa = _alive(cloud)
    grid = np.linspace(t, T, 33)
    vals = np.array([float(fn(s)) for s in grid])
    if not np.all(np.isfinite(vals)):
        raise ValueError("rebate schedule non-finite on [t, T]")
    if dfn is not None:
        # int R dP(hit) = R(T) P(hit by T) - int R'(s) P(hit by s) ds
        endpoint = float(fn(T)) * (1.0 - np.asarray(hitting.survival(horizon,
                                                                     xa)))
        integ = _per_particle_quad(
            lambda s: float(dfn(s)) * (1.0 - np.asarray(
                hitting.survival(s - t, xa))),
            t, T, xa.size)
        per_particle = endpoint - integ
    else:
        per_particle = _per_particle_quad(
            lambda s: float(fn(s)) * np.asarray(hitting.ell(s - t, xa))
            if s > t else np.zeros_like(xa),
            t, T, xa.size)
    return float((wa * per_particle).sum())


def bond_price(cloud: ParticleCloud, hitting: HittingModel, t: float,
               spec: BondSpec, defaulted: bool = False,
               y_t: Optional[float] = None) -> PricingReport:
    """Face * survival leg + rebate leg on the survival branch."""
    if defaulted:
        return PricingReport(t, "filter-projection", 0.0, 0.0, 0.0,
                             tag="default-branch")
    sp = survival_price(cloud, hitting, t, spec.maturity)
    rv = rebate_value(cloud, hitting, t, spec.rebate, spec.maturity, y_t)
    return PricingReport(t, "filter-projection", sp, rv,
                         spec.face * sp + rv)


# ---------------------------------------------------------------------------
# nested Monte Carlo routes
# ---------------------------------------------------------------------------

def price_via_intensity_discount(cloud: ParticleCloud, drift: DriftSpec,
                                 obs: ObsSpec, hitting: HittingModel,
                                 t: float, T: float, n_inner: int,
                                 dt: float, eps: Optional[float] = None,
                                 resample_threshold: float = 0.5,
                                 seed: int = 0,
                                 kappa_log_cap: float = 50.0) -> tuple:
    """Survival price as a hazard-discounted expectation under the
    reference measure.

    Future observations are pure noise under the reference measure; each
    inner path continues the filter from the time-t cloud and averages
    exp(-int_t^T lam) times the exponential deflator built from the
    alive-conditioned gain.  Needs a bounded gain for the deflator to be
    well behaved; blow-ups raise instead of averaging silently.

    Returns (estimate, standard error).
    """
    if obs.bounded_by is None:
        raise KappaBlowupError(
            "unbounded observation gain: the deflator route requires a "
            "bounded b (use a clipped gain)")
    wa, xa = _alive(cloud)
    if eps is None:
        eps = 10.0 * dt
    n = int(round((T - t) / dt))
    if n <= 0:
        return 1.0, 0.0
    base = rng.derive(rng.stream_state(seed), 0xD15C)
    drift_arg = drift.kernel_code() or (lambda x: np.asarray(drift.a(x),
                                                             float))
    obs_arg = obs.kernel_code() or (lambda tt, x: np.asarray(obs.b(tt, x),
                                                             float))
    hit_arg = hitting.kernel_code() or (
        lambda e, x: np.asarray(hitting.survival(e, x), float))
    vals = np.empty(n_inner)
    for j in range(n_inner):
        st = rng.derive(base, j)
        ystream = rng.derive(st, 0xD1CE)
        dY = rng.normals(ystream, 0, np.arange(n), rng.CH_OBS) * math.sqrt(dt)
        res = kernels.filter_run(st, dY, dt, t, xa, drift_arg, obs_arg,
                                 hit_arg, eps, resample_threshold,
                                 richardson=True, w0=wa,
                                 alive0=np.ones(xa.size, np.uint8))
        lam, theta = res["lam"], res["bhatG"]
        disc = -np.sum(lam[:-1]) * dt
        logk = float(np.sum(theta[:-1] * dY)
                     - 0.5 * np.sum(theta[:-1] ** 2) * dt)
        if abs(logk) > kappa_log_cap:
            raise KappaBlowupError(
                f"deflator log increment {logk:.2f} beyond cap "
                f"{kappa_log_cap} on inner path {j}")
        vals[j] = math.exp(disc + logk)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_inner))
    return est, se


def _thinned_discount(flt: kernels.NpFilter, t0: float, n_steps: int,
                      dt: float, eps: float, drift_a, obs_b, surv,
                      resample_threshold: float, ystream: int) -> tuple:
    """One forward simulation of (observations, default) from the
    observer's standpoint: observations gain the alive-conditioned
    estimate, default arrives by thinning the current hazard.

    Returns (discount exp(-int lam up to default-or-horizon),
    defaulted flag, steps consumed, filter at stopping time)."""
    acc = 0.0
    for k in range(n_steps):
        t_k = t0 + k * dt
        st = flt.stats(t_k, obs_b, surv=surv, eps=eps, richardson=True)
        lam, theta = st["lam"], st["bhatG"]
        u = float(rng.u01(ystream, 1, k, rng.CH_OBS))
        if u < -math.expm1(-lam * dt):
            return math.exp(-(acc + 0.5 * lam * dt)), True, k, flt
        acc += lam * dt
        z = float(rng.ndtri(rng.u01(ystream, 0, k, rng.CH_OBS)))
        dy = math.sqrt(dt) * z + theta * dt
        flt.advance(dy, dt, t_k, drift_a, obs_b, resample_threshold)
    return math.exp(-acc), False, n_steps, flt


def duffie_diagnostic(cloud: ParticleCloud, drift: DriftSpec, obs: ObsSpec,
                      hitting: HittingModel, t: float, T: float,
                      n_inner: int, dt: float,
                      eps: Optional[float] = None,
                      n_jump_inner: int = 32,
                      resample_threshold: float = 0.5,
                      seed: int = 0) -> dict:
    """Toy-scale check of the stochastic-discount bond formula.

    Estimates J_t = E[exp(-int_t^{T ^ tau} lam)] by simulating default
    through hazard thinning along filtered observation paths, estimates
    the default-jump compensation term E[1_{t < tau <= T} (1 - J_{tau-})]
    with a second nested layer, and reports both together with their
    difference, which should match the survival price.  Deliberately
    capped at diagnostic scale: the jump term needs nested-in-nested
    simulation, which is the practical obstacle to using this formula as
    a production pricer.
    """
    if n_inner > 1000:
        raise ValueError("diagnostic is capped at 1000 inner paths")
    wa, xa = _alive(cloud)
    if eps is None:
        eps = 10.0 * dt
    n = int(round((T - t) / dt))
    drift_a = kernels._as_drift_callable(drift.kernel_code()
                                         or (lambda x: np.asarray(
                                             drift.a(x), float)))
    obs_b = kernels._as_obs_callable(obs.kernel_code()
                                     or (lambda tt, x: np.asarray(
                                         obs.b(tt, x), float)))
    surv = kernels._as_surv_callable(hitting.kernel_code()) \
        if hitting.kernel_code() is not None \
        else (lambda e, x: np.asarray(hitting.survival(e, x), float))
    base = rng.derive(rng.stream_state(seed), 0xDFF1)
    discounts = np.empty(n_inner)
    jumps = np.zeros(n_inner)
    n_defaults = 0
    for j in range(n_inner):
        st = rng.derive(base, j)
        flt = kernels.NpFilter(st, xa, t0=t, w0=wa,
                               alive0=np.ones(xa.size, bool))
        disc, defaulted, k_stop, flt = _thinned_discount(
            flt, t, n, dt, eps, drift_a, obs_b, surv, resample_threshold,
            rng.derive(st, 0xD1CE))
        discounts[j] = disc
        if defaulted:
            n_defaults += 1
            # J just before default: fresh continuations from the stopped
            # filter state to the horizon
            t_stop = t + k_stop * dt
            n_rem = n - k_stop
            sub = np.empty(n_jump_inner)
            for i in range(n_jump_inner):
                st2 = rng.derive(st, 0x5B, i)
                f2 = kernels.NpFilter(st2, flt.x, t0=t_stop, w0=flt.w,
                                      alive0=flt.alive)
                d2, _, _, _ = _thinned_discount(
                    f2, t_stop, n_rem, dt, eps, drift_a, obs_b, surv,
                    resample_threshold, rng.derive(st2, 0xD1CE))
                sub[i] = d2
            jumps[j] = 1.0 - float(sub.mean())
    J = float(discounts.mean())
    J_se = float(discounts.std(ddof=1) / math.sqrt(n_inner))
    jump_term = float(jumps.mean())
    jump_se = float(jumps.std(ddof=1) / math.sqrt(n_inner))
    return {"J": J, "J_stderr": J_se,
            "jump_term": jump_term, "jump_stderr": jump_se,
            "difference": J - jump_term,
            "difference_stderr": math.hypot(J_se, jump_se),
            "n_defaults": n_defaults, "n_inner": n_inner}
