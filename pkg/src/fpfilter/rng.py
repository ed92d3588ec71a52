"""Counter-based random streams.

Every random number in the package is a pure function of
(stream state, path index, step index, channel).  Nothing is drawn from a
shared mutable generator, so results never depend on scheduling, chunking
or worker count, and any single draw can be reproduced in isolation.

The construction is the splitmix64 finalizer applied to a stream state
plus a packed counter.  Uniforms are mapped to normals with the AS241
rational approximation of the inverse normal CDF (double precision,
relative error below 1e-15), so a uniform stream fully determines the
Gaussian stream.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_SEED_SALT = 0x243F6A8885A308D3
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

# channel ids; a counter packs (path, step, channel) into 64 bits
CH_SIGNAL = 0    # Brownian increment driving X
CH_OBS = 1       # Brownian increment driving Y
CH_KILL = 2      # uniform deciding an in-step barrier crossing
CH_INIT = 3      # uniform feeding the initial-law inverse CDF

MAX_INDEX = 1 << 31  # paths/particles and steps must stay below this


def mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def stream_state(seed: int) -> int:
    """Map a user seed to the 64-bit base state of the root stream."""
    return _mix64_int((int(seed) & MASK64) ^ _SEED_SALT)


def derive(state: int, *tags: int) -> int:
    """Derive an independent substream state from integer tags.

    Used to give simulation batches, filter runs and nested Monte Carlo
    layers their own streams from one user seed.
    """
    h = int(state) & MASK64
    for tag in tags:
        h = _mix64_int((h + ((int(tag) & MASK64) * GOLDEN & MASK64)) & MASK64)
    return h


def counter(path, step, channel) -> np.ndarray:
    """Pack (path, step, channel) into a uint64 counter. Broadcasts."""
    p = np.asarray(path, dtype=np.uint64)
    s = np.asarray(step, dtype=np.uint64)
    c = np.asarray(channel, dtype=np.uint64)
    return (p << np.uint64(33)) | (s << np.uint64(2)) | c


def raw_u64(state: int, ctr) -> np.ndarray:
    ctr = np.asarray(ctr, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state & MASK64) + ctr * np.uint64(GOLDEN)
    return mix64(z)


def u01(state: int, path, step, channel) -> np.ndarray:
    """Uniforms on the open interval (0, 1). Broadcasts over the indices."""
    bits = raw_u64(state, counter(path, step, channel))
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def normals(state: int, path, step, channel) -> np.ndarray:
    return ndtri(u01(state, path, step, channel))


# --- inverse normal CDF (algorithm AS241, PPND16) ---

A_CENT = (3.3871328727963666080e0, 1.3314166789178437745e2,
          1.9715909503065514427e3, 1.3731693765509461125e4,
          4.5921953931549871457e4, 6.7265770927008700853e4,
          3.3430575583588128105e4, 2.5090809287301226727e3)
B_CENT = (4.2313330701600911252e1, 6.8718700749205790830e2,
          5.3941960214247511077e3, 2.1213794301586595867e4,
          3.9307895800092710610e4, 2.8729085735721942674e4,
          5.2264952788528545610e3)
C_MID = (1.42343711074968357734e0, 4.63033784615654529590e0,
         5.76949722146069140550e0, 3.64784832476320460504e0,
         1.27045825245236838258e0, 2.41780725177450611770e-1,
         2.27238449892691845833e-2, 7.74545014278341407640e-4)
D_MID = (2.05319162663775882187e0, 1.67638483018380384940e0,
         6.89767334985100004550e-1, 1.48103976427480074590e-1,
         1.51986665636164571966e-2, 5.47593808499534494600e-4,
         1.05075007164441684324e-9)
E_FAR = (6.65790464350110377720e0, 5.46378491116411436990e0,
         1.78482653991729133580e0, 2.96560571828504891230e-1,
         2.65321895265761230930e-2, 1.24266094738807843860e-3,
         2.71155556874348757815e-5, 2.01033439929228813265e-7)
F_FAR = (5.99832206555887937690e-1, 1.36929880922735805310e-1,
         1.48753612908506148525e-2, 7.86869131145613259100e-4,
         1.84631831751005468180e-5, 1.42151175831644588870e-7,
         2.04426310338993978564e-15)


def _poly8(c, r):
    return (((((((c[7] * r + c[6]) * r + c[5]) * r + c[4]) * r + c[3]) * r
              + c[2]) * r + c[1]) * r + c[0])


def _poly7_1(c, r):
    # degree-7 denominator with unit constant term
    return (((((((c[6] * r + c[5]) * r + c[4]) * r + c[3]) * r + c[2]) * r
              + c[1]) * r + c[0]) * r + 1.0)


def ndtri(p) -> np.ndarray:
    """Inverse standard normal CDF, vectorized, AS241 double precision."""
    p = np.asarray(p, dtype=np.float64)
    q = p - 0.5
    out = np.empty_like(q)

    central = np.abs(q) <= 0.425
    r = 0.180625 - q[central] * q[central]
    out[central] = q[central] * _poly8(A_CENT, r) / _poly7_1(B_CENT, r)

    tail = ~central
    if np.any(tail):
        pt = p[tail]
        pl = np.minimum(pt, 1.0 - pt)
        r = np.sqrt(-np.log(pl))
        mid = r <= 5.0
        rt = np.where(mid, r - 1.6, r - 5.0)
        num = np.where(mid, _poly8(C_MID, rt), _poly8(E_FAR, rt))
        den = np.where(mid, _poly7_1(D_MID, rt), _poly7_1(F_FAR, rt))
        val = num / den
        out[tail] = np.where(pt < 0.5, -val, val)
    return out
