"""Particle filter for the conditional law of the stopped signal.

The cloud lives under a reference measure where the observation is pure
noise and the signal moves independently; each particle carries the
likelihood weight exp(int b dY - 1/2 int b^2 ds) accumulated with
pre-step positions, and is killed at the barrier with the in-step
bridge crossing probability.  Killed particles stay in the cloud at 0
with frozen weights; the alive fraction of total weight is the
conditional survival probability Z given the observations, alive- and
all-particle weighted means give the two gain estimates, and the
hazard rate comes from the short-horizon hitting mass of the alive
cloud.

A filter trajectory additionally records the integrated quantities the
pricing layer needs: innovations, the exponential factors of the
multiplicative survival decomposition, the accumulated hazard, and the
compensated default indicator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels, rng
from .coeffs import DriftSpec, InitialLaw, ObsSpec
from .hitting import HittingModel
from .simulate import Scenario

__all__ = ["ParticleCloud", "FilterState", "FilterTrajectory", "BumpFunction",
           "FilterAbsorbedError", "init_cloud", "step", "pi_f", "intensity",
           "default_conditional_cloud", "run_filter", "multiplicative_factors",
           "ks_residual"]

MIN_PARTICLES = 100


class FilterAbsorbedError(RuntimeError):
    """Every particle is dead; survival-branch quantities are undefined."""


@dataclass
class ParticleCloud:
    """Weighted, killable ensemble approximating the conditional law."""

    positions: np.ndarray
    weights: np.ndarray
    alive: np.ndarray
    time: float = 0.0
    step_index: int = 0
    log_normalizer: float = 0.0
    stream: int = 0

    @property
    def n_particles(self) -> int:
        return self.positions.size

    @property
    def absorbed(self) -> bool:
        return not bool(self.alive.any())

    def total_weight(self) -> float:
        return float(self.weights.sum())

    def alive_weight(self) -> float:
        return float(self.weights[self.alive].sum())

    def survival(self) -> float:
        """Z: alive fraction of the unnormalised mass."""
        return self.alive_weight() / self.total_weight()

    def ess(self) -> float:
        w = self.weights
        return float(w.sum() ** 2 / (w * w).sum())

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(self.positions.copy(), self.weights.copy(),
                             self.alive.copy(), self.time, self.step_index,
                             self.log_normalizer, self.stream)


@dataclass
class FilterState:
    """Per-step summary of the cloud."""

    time: float
    Z: float
    lam: float
    bhat: float          # all-particle gain estimate (dead contribute 0)
    bhat_G: float        # alive-conditioned gain estimate
    dBY: float           # innovation increment of the observation filtration
    dbeta: float         # innovation increment of the full filtration
    ess: float


@dataclass
class FilterTrajectory:
    """Filter output along one observation path, on the scenario grid."""

    t: np.ndarray
    dt: float
    Z: np.ndarray
    lam: np.ndarray
    bhat: np.ndarray
    bhat_G: np.ndarray
    ess: np.ndarray
    dY: np.ndarray
    dBY: np.ndarray
    dbeta: np.ndarray
    xi: np.ndarray
    kappa: np.ndarray
    C: np.ndarray              # int lam Z ds
    Lambda: np.ndarray         # int_0^{t^tau} lam ds
    D: np.ndarray
    L: np.ndarray              # D - 1 + Lambda
    tau: float = math.inf
    default_index: int = -1
    absorbed_step: int = -1
    bumps: Optional[np.ndarray] = None       # (m, 2) centre/radius
    pi_f: Optional[np.ndarray] = None        # (m, n+1)
    pi_Af: Optional[np.ndarray] = None
    pi_fb: Optional[np.ndarray] = None
    snapshots: dict = field(default_factory=dict)

    def index_at(self, t: float) -> int:
        k = int(round(t / self.dt))
        if not math.isclose(k * self.dt, t, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"t = {t} is not on the filter grid")
        return k

    def cloud_at(self, t: float) -> ParticleCloud:
        k = self.index_at(t)
        if k not in self.snapshots:
            raise KeyError(f"no cloud snapshot stored at t = {t}")
        return self.snapshots[k].copy()

    def to_csv(self, path) -> None:
        cols = ("t", "Z", "lambda", "bhat", "bhat_G", "ESS", "xi", "kappa",
                "C", "Lambda", "D")
        arrs = (self.t, self.Z, self.lam, self.bhat, self.bhat_G, self.ess,
                self.xi, self.kappa, self.C, self.Lambda, self.D)
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(self.t.size):
                fh.write(",".join(repr(float(a[k])) for a in arrs) + "\n")


@dataclass(frozen=True)
class BumpFunction:
    """Twice-differentiable bump with compact support in (0, inf)."""

    center: float
    radius: float

    def __post_init__(self):
        if not (self.radius > 0 and self.center - self.radius > 0.0):
            raise ValueError(
                "bump support must be a compact subset of (0, inf); need "
                f"center - radius > 0, got {self.center} +- {self.radius}")

    @property
    def support(self) -> tuple:
        return (self.center - self.radius, self.center + self.radius)

    def __call__(self, x):
        return kernels._np_bump_fdq(np.asarray(x, float), self.center,
                                    self.radius)[0]

    def derivative(self, x):
        return kernels._np_bump_fdq(np.asarray(x, float), self.center,
                                    self.radius)[1]

    def second_derivative(self, x):
        return kernels._np_bump_fdq(np.asarray(x, float), self.center,
                                    self.radius)[2]


# ---------------------------------------------------------------------------
# cloud construction and stepping
# ---------------------------------------------------------------------------

def init_cloud(init: InitialLaw, n_particles: int, seed: int,
               stream: Optional[int] = None) -> ParticleCloud:
    """Fresh equally-weighted cloud of i.i.d. draws from the initial law."""
    if n_particles < MIN_PARTICLES:
        raise ValueError(f"n_particles = {n_particles} is below the floor "
                         f"of {MIN_PARTICLES}")
    if stream is None:
        stream = rng.derive(rng.stream_state(seed), 0xF117E7)
    x0 = init.sample(n_particles, stream)
    if np.any(x0 <= 0):
        raise ValueError("initial law produced a nonpositive position")
    return ParticleCloud(
        positions=np.asarray(x0, float),
        weights=np.full(n_particles, 1.0 / n_particles),
        alive=np.ones(n_particles, bool),
        stream=stream)


def _np_filter_from_cloud(cloud: ParticleCloud) -> kernels.NpFilter:
    flt = kernels.NpFilter(cloud.stream, cloud.positions, t0=0.0)
    flt.x = cloud.positions
    flt.w = cloud.weights
    flt.alive = cloud.alive
    flt.log_norm = cloud.log_normalizer
    flt.k = cloud.step_index
    return flt


def step(cloud: ParticleCloud, dY: float, dt: float, drift: DriftSpec,
         obs: ObsSpec, hitting: Optional[HittingModel] = None,
         eps: Optional[float] = None, resample_threshold: float = 0.5
         ) -> FilterState:
    """Advance the cloud one observation increment, in place.

    Reference-lane (numpy) arithmetic regardless of the active kernel
    lane; batch runs go through ``run_filter`` instead.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if cloud.absorbed:
        raise FilterAbsorbedError("all particles are dead")
    flt = _np_filter_from_cloud(cloud)
    t_k = cloud.time
    surv = (lambda e, x: np.asarray(hitting.survival(e, x))) \
        if hitting is not None else None
    st = flt.stats(t_k, lambda t, x: np.asarray(obs.b(t, x), float),
                   surv=surv, eps=eps)
    flt.advance(dY, dt, t_k, lambda x: np.asarray(drift.a(x), float),
                lambda t, x: np.asarray(obs.b(t, x), float),
                resample_threshold)
    cloud.positions = flt.x
    cloud.weights = flt.w
    cloud.alive = flt.alive
    cloud.log_normalizer = flt.log_norm
    cloud.step_index = flt.k
    cloud.time = t_k + dt
    bhat_G = st["bhatG"]
    return FilterState(time=t_k, Z=st["Z"], lam=st["lam"], bhat=st["bhat"],
                       bhat_G=bhat_G, dBY=dY - st["bhat"] * dt,
                       dbeta=dY - bhat_G * dt, ess=st["ess"])


def pi_f(cloud: ParticleCloud, f: Callable, alive_conditioned: bool = False
         ) -> float:
    """Weighted mean of f over the stopped cloud (dead particles at 0).

    With ``alive_conditioned`` the mean runs over alive particles only,
    matching conditioning on survival.
    """
    x_eff = np.where(cloud.alive, cloud.positions, 0.0)
    vals = np.asarray(f(x_eff), float)
    if not np.all(np.isfinite(vals)):
        i = int(np.argmin(np.isfinite(vals)))
        raise ValueError(f"f non-finite at particle {i}, x = {x_eff[i]}")
    if alive_conditioned:
        wa = cloud.weights[cloud.alive]
        if wa.size == 0:
            raise FilterAbsorbedError("no alive particles to condition on")
        return float((wa * vals[cloud.alive]).sum() / wa.sum())
    return float((cloud.weights * vals).sum() / cloud.weights.sum())


def intensity(cloud: ParticleCloud, hitting: HittingModel, eps: float,
              richardson: bool = False) -> float:
    """Hazard rate of the alive cloud from its short-horizon hitting mass.

    lam_eps = E[1 - survival(eps, x) | alive] / eps; the optional
    extrapolation over (eps, eps/2) removes the O(eps) horizon bias.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if hitting.table is not None and eps < hitting.table.t_grid[0]:
        raise ValueError(
            f"eps = {eps} is below the density-table resolution "
            f"{hitting.table.t_grid[0]}")
    wa = cloud.weights[cloud.alive]
    if wa.size == 0:
        raise FilterAbsorbedError("no alive particles")
    xa = cloud.positions[cloud.alive]
    wsum = wa.sum()
    lam_e = float((wa * (1.0 - hitting.survival(eps, xa))).sum() / wsum / eps)
    if not richardson:
        return lam_e
    lam_h = float((wa * (1.0 - hitting.survival(0.5 * eps, xa))).sum()
                  / wsum / (0.5 * eps))
    return max(0.0, 2.0 * lam_h - lam_e)


def default_conditional_cloud(cloud: ParticleCloud, hitting: HittingModel,
                              eps: float) -> ParticleCloud:
    """Reweight the alive cloud by the probability of dying within eps.

    Approximates the conditional law of the position just before an
    imminent default; mass concentrates at the barrier as eps shrinks.
    """
    out = cloud.copy()
    xa = out.positions[out.alive]
    reweight = 1.0 - np.asarray(hitting.survival(eps, xa), float)
    total = (out.weights[out.alive] * reweight).sum()
    if not (total > 0.0) or not np.isfinite(total):
        raise FloatingPointError(
            f"default-conditioning weights degenerate at eps = {eps}; "
            "use a larger eps")
    w = out.weights.copy()
    w[out.alive] = out.weights[out.alive] * reweight
    w[~out.alive] = 0.0
    out.weights = w / w.sum()
    return out


# ---------------------------------------------------------------------------
# whole-path runs
# ---------------------------------------------------------------------------

def run_filter(scenario_or_dY, drift: DriftSpec, obs: ObsSpec,
               init: InitialLaw, hitting: Optional[HittingModel],
               n_particles: int, dt: Optional[float] = None,
               eps: Optional[float] = None, resample_threshold: float = 0.5,
               seed: int = 0, stream: Optional[int] = None,
               richardson: bool = True,
               bumps: Optional[Sequence[BumpFunction]] = None,
               snapshot_times: Optional[Sequence[float]] = None,
               tau: float = math.inf, default_index: int = -1
               ) -> FilterTrajectory:
    """Run the filter along one observation path and assemble outputs.

    Accepts a Scenario (using its observation increments and default
    time) or a raw increment array plus explicit ``dt``/``tau``.
    """
    if isinstance(scenario_or_dY, Scenario):
        scen = scenario_or_dY
        dY = scen.dY()
        dt = float(scen.t[1] - scen.t[0])
        tau = scen.tau
        default_index = scen.default_index
    else:
        dY = np.asarray(scenario_or_dY, float)
        if dt is None:
            raise ValueError("dt is required with a raw increment path")
    n = dY.size
    if n_particles < MIN_PARTICLES:
        raise ValueError(f"n_particles = {n_particles} is below the floor "
                         f"of {MIN_PARTICLES}")
    if eps is None:
        eps = 10.0 * dt
    if stream is None:
        stream = rng.derive(rng.stream_state(seed), 0xF117E7)
    x0 = init.sample(n_particles, stream)

    drift_arg = drift.kernel_code()
    obs_arg = obs.kernel_code()
    hit_arg = hitting.kernel_code() if hitting is not None else None
    if drift_arg is None:
        drift_arg = lambda x: np.asarray(drift.a(x), float)
    if obs_arg is None:
        obs_arg = lambda t, x: np.asarray(obs.b(t, x), float)
    if hitting is not None and hit_arg is None:
        hit_arg = lambda e, x: np.asarray(hitting.survival(e, x), float)

    bump_params = np.array([[b.center, b.radius] for b in bumps], float) \
        if bumps else None
    snap_steps = None
    if snapshot_times is not None:
        snap_steps = np.array(sorted({int(round(s / dt))
                                      for s in snapshot_times}), np.int64)
        if np.any(snap_steps < 0) or np.any(snap_steps > n):
            raise ValueError("snapshot time outside the filter horizon")

    res = kernels.filter_run(stream, dY, dt, 0.0, x0, drift_arg, obs_arg,
                             hit_arg, eps, resample_threshold,
                             compute_lambda=hitting is not None,
                             richardson=richardson, bumps=bump_params,
                             snap_steps=snap_steps)
    return _assemble_trajectory(res, dY, dt, tau, default_index, bump_params,
                                snap_steps, stream)


def _assemble_trajectory(res: dict, dY: np.ndarray, dt: float, tau: float,
                         default_index: int, bump_params, snap_steps, stream
                         ) -> FilterTrajectory:
    n = dY.size
    t = np.arange(n + 1) * dt
    Z, lam = res["Z"], res["lam"]
    bhat, bhatG = res["bhat"], res["bhatG"]

    dBY = dY - bhat[:-1] * dt
    D = (t < tau).astype(float) if math.isfinite(tau) else np.ones(n + 1)
    dbeta = dY - D[:-1] * bhatG[:-1] * dt

    # left-point exponential factors of the multiplicative decomposition
    inc_xi = bhat[:-1] * dY - 0.5 * bhat[:-1] ** 2 * dt
    inc_ka = bhatG[:-1] * dY - 0.5 * bhatG[:-1] ** 2 * dt
    xi = np.exp(np.concatenate([[0.0], np.cumsum(inc_xi)]))
    kappa = np.exp(np.concatenate([[0.0], np.cumsum(inc_ka)]))

    C = np.concatenate([[0.0], np.cumsum(lam[:-1] * Z[:-1] * dt)])
    lam_stopped = lam[:-1] * D[:-1]
    Lambda = np.concatenate([[0.0], np.cumsum(lam_stopped * dt)])
    if 0 <= default_index <= n - 1:
        # tau sits mid-step: the straddling step contributes half a step
        Lambda[default_index + 1:] -= 0.5 * lam[default_index] * dt
    L = D - 1.0 + Lambda

    snapshots = {}
    if snap_steps is not None:
        for j, k in enumerate(snap_steps):
            snapshots[int(k)] = ParticleCloud(
                positions=res["snap_x"][j].copy(),
                weights=res["snap_w"][j].copy(),
                alive=res["snap_alive"][j].astype(bool),
                time=float(k * dt), step_index=int(k),
                log_normalizer=float(res["snap_lognorm"][j]),
                stream=stream)

    return FilterTrajectory(
        t=t, dt=dt, Z=Z, lam=lam, bhat=bhat, bhat_G=bhatG, ess=res["ess"],
        dY=dY, dBY=dBY, dbeta=dbeta, xi=xi, kappa=kappa, C=C, Lambda=Lambda,
        D=D, L=L, tau=tau, default_index=default_index,
        absorbed_step=int(res["absorbed_step"]),
        bumps=bump_params,
        pi_f=res["pif"] if bump_params is not None else None,
        pi_Af=res["piaf"] if bump_params is not None else None,
        pi_fb=res["pifb"] if bump_params is not None else None,
        snapshots=snapshots)


def multiplicative_factors(traj: FilterTrajectory) -> tuple:
    """Exponential local-martingale factors (xi, kappa) of the survival
    decomposition Z = exp(-int lam) * xi^{-1} * kappa."""
    if traj.absorbed_step >= 0:
        raise FilterAbsorbedError(
            f"filter absorbed at step {traj.absorbed_step}")
    return traj.xi, traj.kappa


def decomposition_gap(traj: FilterTrajectory) -> np.ndarray:
    """Pathwise relative gap |Z - exp(-int lam) xi^{-1} kappa| / Z."""
    xi, kappa = multiplicative_factors(traj)
    cum_lam = np.concatenate([[0.0], np.cumsum(traj.lam[:-1] * traj.dt)])
    recon = np.exp(-cum_lam) / xi * kappa
    return np.abs(traj.Z - recon) / traj.Z


def ks_residual(traj: FilterTrajectory, bump_index: int = 0) -> np.ndarray:
    """Residual path of the projected test-function evolution.

    R_t = pi_t f - pi_0 f - int pi(Af) ds - int (pi(fb) - pi f pi b) dbeta
          - int pi f dL, with every projection taken from the cloud;
    a vanishing mean over observation paths is the filter-consistency
    certificate for the dynamics of E[f(X_{t ^ tau}) | observations].
    """
    if traj.pi_f is None:
        raise ValueError("trajectory was run without bump projections")
    m = traj.pi_f.shape[0]
    if not (0 <= bump_index < m):
        raise IndexError(f"bump index {bump_index} out of range ({m} stored)")
    n = traj.dY.size
    pif = traj.pi_f[bump_index]
    piaf = traj.pi_Af[bump_index]
    pifb = traj.pi_fb[bump_index]
    D = traj.D
    # projections under the full filtration vanish after default
    pif_G = pif * D
    piaf_G = piaf * D
    pifb_G = pifb * D
    pib_G = traj.bhat_G * D

    drift_int = np.concatenate([[0.0], np.cumsum(piaf_G[:-1] * traj.dt)])
    gain = pifb_G[:-1] - pif_G[:-1] * pib_G[:-1]
    beta_int = np.concatenate([[0.0], np.cumsum(gain * traj.dbeta)])
    # dL = dD + 1_{s <= tau} lam ds; the jump removes pi f at default
    comp = np.concatenate(
        [[0.0], np.cumsum(pif_G[:-1] * traj.lam[:-1] * D[:-1] * traj.dt)])
    k_def = traj.default_index
    if 0 <= k_def <= n - 1:
        comp[k_def + 1:] -= 0.5 * pif_G[k_def] * traj.lam[k_def] * traj.dt
        jump = np.zeros(n + 1)
        jump[k_def + 1:] = -pif_G[k_def]
    else:
        jump = np.zeros(n + 1)
    return pif_G - pif_G[0] - drift_int - beta_int - comp - jump
