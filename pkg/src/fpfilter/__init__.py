"""fpfilter: particle filtering and pricing for barrier-default models
observed through an additive-noise channel.

Layout: ``coeffs`` declares the model coefficients, ``hitting`` the
first-passage densities, ``simulate`` the scenario generator,
``filtering`` the particle filter, ``pricing`` the bond/rebate
valuations and ``harness`` the config-driven verification CLI.  The hot
loops live in ``kernels`` with a jit lane and a pure-numpy lane.
"""

from . import coeffs, filtering, harness, hitting, kernels, pricing, rng, simulate
from .coeffs import DriftSpec, InitialLaw, ObsSpec
from .filtering import init_cloud, run_filter
from .hitting import HittingModel
from .simulate import SimConfig, simulate_batch

__version__ = "0.1.0"

__all__ = [
    "coeffs", "filtering", "harness", "hitting", "kernels", "pricing",
    "rng", "simulate", "DriftSpec", "InitialLaw", "ObsSpec", "HittingModel",
    "SimConfig", "simulate_batch", "init_cloud", "run_filter", "__version__",
]
