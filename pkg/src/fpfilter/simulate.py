"""Joint simulation of the firm value, the noisy observation and default.

Euler-Maruyama on a uniform grid with an in-step barrier-crossing
correction: after each step a uniform decides a hit with the Brownian
bridge crossing probability, which removes most of the discretisation
bias in the default time.  The signal is stopped at the barrier; the
observation keeps evolving with gain b(t, 0) = 0 afterwards, so Y is
pure noise once the firm is gone.

Paths are reproducible by construction: scenario i of a batch depends
only on (seed, i), never on worker count or batch layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels, rng
from .coeffs import DriftSpec, InitialLaw, ObsSpec

__all__ = ["SimConfig", "Scenario", "ScenarioSet", "bridge_hit_prob",
           "simulate_scenario", "simulate_batch", "simulate_default_times"]

# refuse batches whose grid would not fit comfortably in memory
CELL_BUDGET = 2 * 10 ** 9


def bridge_hit_prob(x0: float, x1: float, dt: float) -> float:
    """Probability that a Brownian bridge from x0 to x1 over dt hits 0."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if x0 <= 0:
        raise ValueError("x0 must be positive (a hit was already declared)")
    if x1 <= 0:
        return 1.0
    return math.exp(-2.0 * x0 * x1 / dt)


@dataclass(frozen=True)
class SimConfig:
    """One reproducible scenario-generation setup."""

    horizon: float
    dt: float
    n_paths: int
    seed: int
    drift: DriftSpec
    obs: ObsSpec
    init: InitialLaw
    bridge_correction: bool = True

    def __post_init__(self):
        if not (self.horizon > 0):
            raise ValueError("scenario.horizon must be positive")
        if not (0 < self.dt <= self.horizon):
            raise ValueError("scenario.dt must lie in (0, horizon]")
        if self.n_paths < 1:
            raise ValueError("scenario.n_paths must be at least 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def stream(self) -> int:
        return rng.derive(rng.stream_state(self.seed), 0x51A1)


@dataclass
class Scenario:
    """One simulated path bundle."""

    t: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    tau: float                  # +inf when no default before the horizon
    default_index: int          # step k with tau in (t_k, t_{k+1}], else -1
    path_id: int = 0

    @property
    def defaulted(self) -> bool:
        return np.isfinite(self.tau)

    def default_indicator(self) -> np.ndarray:
        """D_k = 1 while tau > t_k, on the scenario grid."""
        return (self.t < self.tau).astype(float) if self.defaulted \
            else np.ones_like(self.t)

    def dY(self) -> np.ndarray:
        return np.diff(self.Y)

    def to_csv(self, path) -> None:
        D = self.default_indicator()
        with open(path, "w") as fh:
            fh.write("t,X,Y,D\n")
            for k in range(self.t.size):
                fh.write(f"{float(self.t[k])!r},{float(self.X[k])!r},"
                         f"{float(self.Y[k])!r},{int(D[k])}\n")


@dataclass
class ScenarioSet:
    """A batch of scenarios plus summary statistics."""

    cfg: SimConfig
    t: np.ndarray
    X: np.ndarray               # (n_paths, n_steps + 1)
    Y: np.ndarray
    tau: np.ndarray
    default_index: np.ndarray

    def __getitem__(self, i: int) -> Scenario:
        return Scenario(self.t, self.X[i], self.Y[i], float(self.tau[i]),
                        int(self.default_index[i]), path_id=i)

    def __len__(self) -> int:
        return self.cfg.n_paths

    @property
    def default_frequency(self) -> float:
        return float(np.isfinite(self.tau).mean())

    def summary(self) -> dict:
        fin = self.tau[np.isfinite(self.tau)]
        qs = (np.quantile(fin, [0.1, 0.25, 0.5, 0.75, 0.9]).tolist()
              if fin.size else [])
        return {"n_paths": int(self.cfg.n_paths),
                "default_freq": self.default_frequency,
                "tau_quantiles": qs,
                "x_mean_final": float(self.X[:, -1].mean()),
                "x_second_moment_final": float((self.X[:, -1] ** 2).mean())}

    def summary_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _coef_args(cfg: SimConfig):
    drift = cfg.drift.kernel_code()
    obs = cfg.obs.kernel_code()
    if drift is None:
        drift = lambda x: np.asarray(cfg.drift.a(x), float)
    if obs is None:
        obs = lambda t, x: np.asarray(cfg.obs.b(t, x), float)
    return drift, obs


def simulate_scenario(cfg: SimConfig, path_id: int = 0) -> Scenario:
    """Simulate the single scenario with the given path id."""
    if not (0 <= path_id < rng.MAX_INDEX):
        raise ValueError("path_id out of range")
    state = cfg.stream()
    x0 = cfg.init.sample(1, state, index0=path_id)
    drift, obs = _coef_args(cfg)
    X, Y, tau, tidx = kernels.simulate_paths(
        state, 1, path_id, cfg.n_steps, cfg.dt, x0, drift, obs,
        cfg.bridge_correction)
    t = np.arange(cfg.n_steps + 1) * cfg.dt
    return Scenario(t, X[0], Y[0], float(tau[0]), int(tidx[0]), path_id)


def simulate_batch(cfg: SimConfig, path0: int = 0) -> ScenarioSet:
    """Simulate cfg.n_paths scenarios with ids path0 .. path0+n-1."""
    cells = cfg.n_paths * (cfg.n_steps + 1)
    if cells > CELL_BUDGET:
        raise MemoryError(
            f"batch would allocate {cells:.2e} grid cells "
            f"(> budget {CELL_BUDGET:.0e}); split it or raise the budget")
    state = cfg.stream()
    x0 = cfg.init.sample(cfg.n_paths, state, index0=path0)
    drift, obs = _coef_args(cfg)
    X, Y, tau, tidx = kernels.simulate_paths(
        state, cfg.n_paths, path0, cfg.n_steps, cfg.dt, x0, drift, obs,
        cfg.bridge_correction)
    t = np.arange(cfg.n_steps + 1) * cfg.dt
    return ScenarioSet(cfg, t, X, Y, tau, tidx)


def simulate_default_times(cfg: SimConfig, n_paths: Optional[int] = None,
                           path0: int = 0) -> np.ndarray:
    """Default times only (no stored paths), for large-sample statistics."""
    n = cfg.n_paths if n_paths is None else int(n_paths)
    state = cfg.stream()
    x0 = cfg.init.sample(n, state, index0=path0)
    drift, obs = _coef_args(cfg)
    _, _, tau, _ = kernels.simulate_paths(
        state, n, path0, cfg.n_steps, cfg.dt, x0, drift, obs,
        cfg.bridge_correction, store_paths=False)
    return tau
