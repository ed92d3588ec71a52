"""Hot numerical kernels in two interchangeable lanes.

Everything that iterates over particles, paths or bridges lives here, in
two implementations with identical contracts:

* a numba ``@njit`` lane (default when numba imports cleanly), threaded
  over independent paths/bridges with ``prange``;
* a pure-numpy lane, selected by setting ``FPFILTER_DISABLE_NUMBA=1`` or
  used automatically for coefficient kinds the jit lane cannot encode
  (tabulated drifts, custom callables).

Both lanes draw from the same counter-based streams (see ``rng``), so a
given (seed, path, step, channel) produces the same uniform bits in
either lane.  Results are schedule-independent: parallel loops write to
disjoint slots and every cross-path reduction happens outside the
parallel region in a fixed order (``np.sum`` pairwise).

``FPFILTER_THREADS`` caps the jit lane's thread count.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import rng
from .coeffs import (DRIFT_ZERO, DRIFT_CONSTANT, DRIFT_AFFINE,
                     OBS_ZERO, OBS_LINEAR, OBS_LINEAR_CLIPPED)

HIT_NONE, HIT_BM, HIT_DRIFTED, HIT_OU = -1, 0, 1, 2

_ENV_DISABLE = "FPFILTER_DISABLE_NUMBA"
_ENV_THREADS = "FPFILTER_THREADS"


def _env_disabled() -> bool:
    return os.environ.get(_ENV_DISABLE, "").strip().lower() in ("1", "true", "yes")


HAVE_NUMBA = False
if not _env_disabled():
    try:
        import numba
        from numba import njit, prange
        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - depends on environment
        HAVE_NUMBA = False

if not HAVE_NUMBA:
    def njit(*args, **kwargs):  # type: ignore
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap

    prange = range  # type: ignore


def active_lane() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


def configure_threads() -> int:
    """Apply the FPFILTER_THREADS cap; returns the thread count in use."""
    if not HAVE_NUMBA:
        return 1
    want = os.environ.get(_ENV_THREADS, "").strip()
    if want:
        numba.set_num_threads(max(1, min(int(want),
                                         numba.config.NUMBA_NUM_THREADS)))
    return numba.get_num_threads()


# ---------------------------------------------------------------------------
# scalar RNG / special-function helpers (jit lane)
# ---------------------------------------------------------------------------

_U64_GOLDEN = np.uint64(rng.GOLDEN)
_U64_M1 = np.uint64(0xBF58476D1CE4E5B9)
_U64_M2 = np.uint64(0x94D049BB133111EB)
_U2 = np.uint64(2)
_U11 = np.uint64(11)
_U27 = np.uint64(27)
_U30 = np.uint64(30)
_U31 = np.uint64(31)
_U33 = np.uint64(33)
_TWO_M53 = 2.0 ** -53

A0, A1, A2, A3, A4, A5, A6, A7 = rng.A_CENT
B1, B2, B3, B4, B5, B6, B7 = rng.B_CENT
C0, C1, C2, C3, C4, C5, C6, C7 = rng.C_MID
D1, D2, D3, D4, D5, D6, D7 = rng.D_MID
E0, E1, E2, E3, E4, E5, E6, E7 = rng.E_FAR
F1, F2, F3, F4, F5, F6, F7 = rng.F_FAR

# channels (same values as rng module)
CH_SIGNAL = np.uint64(rng.CH_SIGNAL)
CH_OBS = np.uint64(rng.CH_OBS)
CH_KILL = np.uint64(rng.CH_KILL)
CH_INIT = np.uint64(rng.CH_INIT)


@njit(cache=True, inline="always")
def _u01(state, particle, step, channel):
    c = ((np.uint64(particle) << _U33) | (np.uint64(step) << _U2) | channel)
    z = np.uint64(state) + c * _U64_GOLDEN
    z = (z ^ (z >> _U30)) * _U64_M1
    z = (z ^ (z >> _U27)) * _U64_M2
    z = z ^ (z >> _U31)
    return (np.float64(z >> _U11) + 0.5) * _TWO_M53


@njit(cache=True, inline="always")
def _ndtri(p):
    q = p - 0.5
    if q <= 0.425 and q >= -0.425:
        r = 0.180625 - q * q
        num = (((((((A7 * r + A6) * r + A5) * r + A4) * r + A3) * r
                 + A2) * r + A1) * r + A0)
        den = (((((((B7 * r + B6) * r + B5) * r + B4) * r + B3) * r
                 + B2) * r + B1) * r + 1.0)
        return q * num / den
    pl = p if p < 0.5 else 1.0 - p
    r = math.sqrt(-math.log(pl))
    if r <= 5.0:
        r = r - 1.6
        num = (((((((C7 * r + C6) * r + C5) * r + C4) * r + C3) * r
                 + C2) * r + C1) * r + C0)
        den = (((((((D7 * r + D6) * r + D5) * r + D4) * r + D3) * r
                 + D2) * r + D1) * r + 1.0)
    else:
        r = r - 5.0
        num = (((((((E7 * r + E6) * r + E5) * r + E4) * r + E3) * r
                 + E2) * r + E1) * r + E0)
        den = (((((((F7 * r + F6) * r + F5) * r + F4) * r + F3) * r
                 + F2) * r + F1) * r + 1.0)
    val = num / den
    return -val if p < 0.5 else val


@njit(cache=True, inline="always")
def _drift_a(code, p0, p1, x):
    if code == DRIFT_ZERO:
        return 0.0
    if code == DRIFT_CONSTANT:
        return p0
    return p0 + p1 * x


@njit(cache=True, inline="always")
def _drift_phi(code, p0, p1, x):
    # a(x)^2 + a'(x), the bridge-weight integrand
    if code == DRIFT_ZERO:
        return 0.0
    if code == DRIFT_CONSTANT:
        return p0 * p0
    a = p0 + p1 * x
    return a * a + p1


@njit(cache=True, inline="always")
def _obs_b(code, q0, q1, t, x):
    if code == OBS_ZERO:
        return 0.0
    v = q0 * x
    if code == OBS_LINEAR_CLIPPED:
        if v > q1:
            return q1
        if v < -q1:
            return -q1
    return v


@njit(cache=True, inline="always")
def _phi_cdf(z):
    return 0.5 * math.erfc(-z * 0.7071067811865476)


@njit(cache=True, inline="always")
def _survival(code, h0, t, x):
    # P_x[no hit of 0 before t] for the coded closed-form family.
    # erf(z) rounds to 1.0 in double for z >= 6, so the cutoffs below
    # change nothing in the returned values.
    if x <= 0.0:
        return 0.0
    if code == HIT_BM:
        z = x / math.sqrt(2.0 * t)
        return 1.0 if z >= 6.0 else math.erf(z)
    if code == HIT_DRIFTED:
        c = h0
        st = math.sqrt(t)
        arg = -2.0 * c * x
        if arg > 700.0:
            arg = 700.0
        return (_phi_cdf((x + c * t) / st)
                - math.exp(arg) * _phi_cdf((c * t - x) / st))
    u = math.expm1(2.0 * h0 * t) / (2.0 * h0)
    z = x / math.sqrt(2.0 * u)
    return 1.0 if z >= 6.0 else math.erf(z)


# ---------------------------------------------------------------------------
# path simulation
# ---------------------------------------------------------------------------

def simulate_paths(state, n_paths, path0, n_steps, dt, x0, drift, obs,
                   bridge_correction, store_paths=True):
    """Joint (X, Y, default time) paths on a uniform grid.

    ``drift``/``obs`` are (code, p0, p1) tuples or None together with
    callables in kwargs-free numpy fallback; call sites pass the spec's
    kernel codes when available.  Returns (X, Y, tau, tau_idx); X and Y
    are None when store_paths is False.
    """
    dcode = drift if isinstance(drift, tuple) else None
    ocode = obs if isinstance(obs, tuple) else None
    if HAVE_NUMBA and dcode is not None and ocode is not None:
        configure_threads()
        if store_paths:
            return _nb_simulate_paths(
                np.uint64(state), int(n_paths), int(path0), int(n_steps),
                float(dt), np.asarray(x0, np.float64),
                dcode[0], dcode[1], dcode[2], ocode[0], ocode[1], ocode[2],
                bool(bridge_correction))
        tau, tau_idx = _nb_simulate_taus(
            np.uint64(state), int(n_paths), int(path0), int(n_steps),
            float(dt), np.asarray(x0, np.float64),
            dcode[0], dcode[1], dcode[2], bool(bridge_correction))
        return None, None, tau, tau_idx
    return _np_simulate_paths(state, n_paths, path0, n_steps, dt, x0,
                              drift, obs, bridge_correction, store_paths)


@njit(cache=True, parallel=True)
def _nb_simulate_paths(state, n_paths, path0, n_steps, dt, x0,
                       dc, dp0, dp1, oc, oq0, oq1, bridge):
    X = np.zeros((n_paths, n_steps + 1))
    Y = np.zeros((n_paths, n_steps + 1))
    tau = np.full(n_paths, np.inf)
    tau_idx = np.full(n_paths, -1, np.int64)
    sdt = math.sqrt(dt)
    for i in prange(n_paths):
        pid = np.uint64(path0 + i)
        x = x0[i]
        y = 0.0
        X[i, 0] = x
        alive = True
        for k in range(n_steps):
            t_k = k * dt
            zw = _ndtri(_u01(state, pid, np.uint64(k), CH_SIGNAL))
            zb = _ndtri(_u01(state, pid, np.uint64(k), CH_OBS))
            if alive:
                bv = _obs_b(oc, oq0, oq1, t_k, x)
                y = y + bv * dt + sdt * zb
                xn = x + _drift_a(dc, dp0, dp1, x) * dt + sdt * zw
                hit = False
                if bridge:
                    if xn <= 0.0:
                        hit = True
                    else:
                        arg = -2.0 * x * xn / dt
                        if arg > -45.0:
                            u = _u01(state, pid, np.uint64(k), CH_KILL)
                            hit = u < math.exp(arg)
                else:
                    hit = xn <= 0.0
                if hit:
                    alive = False
                    x = 0.0
                    tau[i] = (t_k + 0.5 * dt) if bridge else (t_k + dt)
                    tau_idx[i] = k
                else:
                    x = xn
            else:
                y = y + sdt * zb
            X[i, k + 1] = x
            Y[i, k + 1] = y
    return X, Y, tau, tau_idx


@njit(cache=True, parallel=True)
def _nb_simulate_taus(state, n_paths, path0, n_steps, dt, x0,
                      dc, dp0, dp1, bridge):
    tau = np.full(n_paths, np.inf)
    tau_idx = np.full(n_paths, -1, np.int64)
    sdt = math.sqrt(dt)
    for i in prange(n_paths):
        pid = np.uint64(path0 + i)
        x = x0[i]
        for k in range(n_steps):
            zw = _ndtri(_u01(state, pid, np.uint64(k), CH_SIGNAL))
            xn = x + _drift_a(dc, dp0, dp1, x) * dt + sdt * zw
            hit = False
            if bridge:
                if xn <= 0.0:
                    hit = True
                else:
                    arg = -2.0 * x * xn / dt
                    if arg > -45.0:
                        u = _u01(state, pid, np.uint64(k), CH_KILL)
                        hit = u < math.exp(arg)
            else:
                hit = xn <= 0.0
            if hit:
                tau[i] = (k * dt + 0.5 * dt) if bridge else ((k + 1) * dt)
                tau_idx[i] = k
                break
            x = xn
    return tau, tau_idx


def _np_simulate_paths(state, n_paths, path0, n_steps, dt, x0, drift, obs,
                       bridge, store_paths):
    a_fn = drift if callable(drift) else None
    b_fn = obs if callable(obs) else None
    if a_fn is None:
        dc, dp0, dp1 = drift
        a_fn = lambda x: (np.zeros_like(x) if dc == DRIFT_ZERO
                          else (np.full_like(x, dp0) if dc == DRIFT_CONSTANT
                                else dp0 + dp1 * x))
    if b_fn is None:
        oc, oq0, oq1 = obs
        if oc == OBS_ZERO:
            b_fn = lambda t, x: np.zeros_like(x)
        elif oc == OBS_LINEAR:
            b_fn = lambda t, x: oq0 * x
        else:
            b_fn = lambda t, x: np.clip(oq0 * x, -oq1, oq1)

    ids = np.arange(path0, path0 + n_paths, dtype=np.uint64)
    x = np.asarray(x0, np.float64).copy()
    y = np.zeros(n_paths)
    alive = np.ones(n_paths, bool)
    tau = np.full(n_paths, np.inf)
    tau_idx = np.full(n_paths, -1, np.int64)
    if store_paths:
        X = np.zeros((n_paths, n_steps + 1))
        Y = np.zeros((n_paths, n_steps + 1))
        X[:, 0] = x
    sdt = math.sqrt(dt)
    for k in range(n_steps):
        t_k = k * dt
        zw = rng.ndtri(rng.u01(state, ids, k, rng.CH_SIGNAL))
        zb = rng.ndtri(rng.u01(state, ids, k, rng.CH_OBS))
        bv = np.where(alive, b_fn(t_k, x), 0.0)
        y = y + bv * dt + sdt * zb
        xn = np.where(alive, x + a_fn(x) * dt + sdt * zw, 0.0)
        if bridge:
            arg = np.where(alive & (xn > 0),
                           -2.0 * x * np.maximum(xn, 0.0) / dt, 0.0)
            p = np.where(xn > 0, np.exp(np.maximum(arg, -745.0)), 1.0)
            u = rng.u01(state, ids, k, rng.CH_KILL)
            hit = alive & ((xn <= 0) | ((arg > -45.0) & (u < p)))
            tnew = t_k + 0.5 * dt
        else:
            hit = alive & (xn <= 0)
            tnew = t_k + dt
        tau[hit] = tnew
        tau_idx[hit] = k
        alive = alive & ~hit
        x = np.where(alive, xn, 0.0)
        if store_paths:
            X[:, k + 1] = x
            Y[:, k + 1] = y
    if store_paths:
        return X, Y, tau, tau_idx
    return None, None, tau, tau_idx


# ---------------------------------------------------------------------------
# Bessel-bridge weights
# ---------------------------------------------------------------------------

def bridge_weights(state, t, x, n_bridges, steps, drift, drift_phi_fn=None):
    """Per-bridge weights exp(-0.5 int (a^2 + a')(R_s) ds) along 3-d
    Bessel bridges from x to 0 over [0, t].

    The bridge is the Euclidean norm of three Brownian bridges with
    endpoint offsets (x,0,0) -> (0,0,0); the time integral is a
    trapezoid on ``steps`` uniform intervals.  Returns (weights, bad)
    where bad[i] is the first step with a non-finite integrand on
    bridge i, or -1.
    """
    dcode = drift if isinstance(drift, tuple) else None
    if HAVE_NUMBA and dcode is not None and drift_phi_fn is None:
        configure_threads()
        return _nb_bridge_weights(np.uint64(state), float(t), float(x),
                                  int(n_bridges), int(steps),
                                  dcode[0], dcode[1], dcode[2])
    return _np_bridge_weights(state, t, x, n_bridges, steps, dcode,
                              drift_phi_fn)


@njit(cache=True, parallel=True)
def _nb_bridge_weights(state, t, x, n_bridges, steps, dc, dp0, dp1):
    w = np.empty(n_bridges)
    bad = np.full(n_bridges, -1, np.int64)
    dtb = t / steps
    sdtb = math.sqrt(dtb)
    for i in prange(n_bridges):
        bid = np.uint64(i)
        # pass 1: endpoints of the three driving Brownian paths
        e0 = 0.0
        e1 = 0.0
        e2 = 0.0
        for k in range(steps):
            e0 += _ndtri(_u01(state, bid, np.uint64(k), CH_SIGNAL))
            e1 += _ndtri(_u01(state, bid, np.uint64(k), CH_OBS))
            e2 += _ndtri(_u01(state, bid, np.uint64(k), CH_KILL))
        e0 *= sdtb
        e1 *= sdtb
        e2 *= sdtb
        # pass 2: bridge points and trapezoid accumulation
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        acc = 0.5 * _drift_phi(dc, dp0, dp1, x)
        ok = True
        for k in range(steps):
            s0 += sdtb * _ndtri(_u01(state, bid, np.uint64(k), CH_SIGNAL))
            s1 += sdtb * _ndtri(_u01(state, bid, np.uint64(k), CH_OBS))
            s2 += sdtb * _ndtri(_u01(state, bid, np.uint64(k), CH_KILL))
            if k == steps - 1:
                r = 0.0  # pinned at the barrier
            else:
                frac = (k + 1.0) / steps
                g0 = s0 - frac * e0 + x * (1.0 - frac)
                g1 = s1 - frac * e1
                g2 = s2 - frac * e2
                r = math.sqrt(g0 * g0 + g1 * g1 + g2 * g2)
            phi = _drift_phi(dc, dp0, dp1, r)
            if not math.isfinite(phi):
                bad[i] = k
                ok = False
                break
            acc += 0.5 * phi if k == steps - 1 else phi
        w[i] = math.exp(-0.5 * acc * dtb) if ok else np.nan
    return w, bad


def _np_bridge_weights(state, t, x, n_bridges, steps, dcode, phi_fn):
    if phi_fn is None:
        dc, dp0, dp1 = dcode
        if dc == DRIFT_ZERO:
            phi_fn = lambda r: np.zeros_like(r)
        elif dc == DRIFT_CONSTANT:
            phi_fn = lambda r: np.full_like(r, dp0 * dp0)
        else:
            phi_fn = lambda r: (dp0 + dp1 * r) ** 2 + dp1
    dtb = t / steps
    sdtb = math.sqrt(dtb)
    frac = np.arange(1, steps + 1) / steps
    out = np.empty(n_bridges)
    bad = np.full(n_bridges, -1, np.int64)
    chunk = max(1, int(2_000_000 // max(steps, 1)))
    phi_x = float(np.asarray(phi_fn(np.array([x])))[0])
    for lo in range(0, n_bridges, chunk):
        hi = min(lo + chunk, n_bridges)
        ids = np.arange(lo, hi, dtype=np.uint64)[:, None]
        ks = np.arange(steps, dtype=np.uint64)[None, :]
        g = np.empty((hi - lo, steps, 3))
        for ch, channel in enumerate((rng.CH_SIGNAL, rng.CH_OBS, rng.CH_KILL)):
            z = rng.ndtri(rng.u01(state, ids, ks, channel))
            wpath = np.cumsum(z, axis=1) * sdtb
            g[:, :, ch] = wpath - frac[None, :] * wpath[:, -1:]
        g[:, :, 0] += x * (1.0 - frac)[None, :]
        g[:, -1, :] = 0.0
        r = np.sqrt(np.sum(g * g, axis=2))
        phi = phi_fn(r)
        finite = np.isfinite(phi)
        if not np.all(finite):
            rows = ~finite.all(axis=1)
            firsts = np.argmax(~finite[rows], axis=1)
            bad[np.nonzero(rows)[0] + lo] = firsts
            out[lo:hi] = np.nan
            continue
        acc = 0.5 * phi_x + phi[:, :-1].sum(axis=1) + 0.5 * phi[:, -1]
        out[lo:hi] = np.exp(-0.5 * acc * dtb)
    return out, bad


# ---------------------------------------------------------------------------
# particle filter
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _bump_fdq(x, c, r):
    """Smooth bump with support (c-r, c+r): value, 1st and 2nd derivative."""
    u = (x - c) / r
    if u <= -1.0 or u >= 1.0:
        return 0.0, 0.0, 0.0
    v = 1.0 - u * u
    e = math.exp(1.0 - 1.0 / v)
    fp = e * (-2.0 * u / (v * v)) / r
    fpp = e * (4.0 * u * u / (v * v * v * v) - 2.0 / (v * v)
               - 8.0 * u * u / (v * v * v)) / (r * r)
    return e, fp, fpp


@njit(cache=True)
def _nb_filter_run(state, dY, dt, t0, x_init, w_init, alive_init,
                   dc, dp0, dp1, oc, oq0, oq1,
                   hc, h0, eps, resample_threshold, compute_lambda,
                   richardson, bumps, snap_steps):
    n = dY.shape[0]
    n_p = x_init.shape[0]
    m = bumps.shape[0]
    n_snap = snap_steps.shape[0]

    x = x_init.copy()
    w = w_init.copy()
    alive = alive_init.copy()
    log_norm = 0.0

    Z = np.empty(n + 1)
    lam = np.zeros(n + 1)
    bhat = np.empty(n + 1)
    bhatG = np.empty(n + 1)
    ess = np.empty(n + 1)
    pif = np.zeros((m, n + 1))
    piaf = np.zeros((m, n + 1))
    pifb = np.zeros((m, n + 1))
    snap_x = np.empty((n_snap, n_p))
    snap_w = np.empty((n_snap, n_p))
    snap_alive = np.empty((n_snap, n_p), np.uint8)
    snap_lognorm = np.empty(n_snap)

    xn_buf = np.empty(n_p)
    an_buf = np.empty(n_p, np.uint8)
    cum = np.empty(n_p)

    absorbed_step = np.int64(-1)
    z_last = 1.0
    lam_last = 0.0
    bg_last = 0.0
    sdt = math.sqrt(dt)
    snap_ptr = 0

    for k in range(n + 1):
        t_k = t0 + k * dt
        # ---- statistics at t_k (before any update with dY[k]) ----
        sw_all = 0.0
        sw2 = 0.0
        sw_alive = 0.0
        swb = 0.0
        sws = 0.0
        sws2 = 0.0
        for i in range(n_p):
            wi = w[i]
            sw_all += wi
            sw2 += wi * wi
            if alive[i] == 1:
                sw_alive += wi
                swb += wi * _obs_b(oc, oq0, oq1, t_k, x[i])
                if compute_lambda and hc >= 0:
                    sws += wi * (1.0 - _survival(hc, h0, eps, x[i]))
                    if richardson:
                        sws2 += wi * (1.0 - _survival(hc, h0, 0.5 * eps, x[i]))
        ess[k] = sw_all * sw_all / sw2 if sw2 > 0.0 else 0.0
        bhat[k] = swb / sw_all
        if sw_alive > 0.0:
            z_last = sw_alive / sw_all
            bg_last = swb / sw_alive
            if compute_lambda and hc >= 0:
                lam_last = sws / sw_alive / eps
                if richardson:
                    # eliminate the O(eps) horizon bias; hazard stays >= 0
                    lam_last = 2.0 * (sws2 / sw_alive / (0.5 * eps)) - lam_last
                    if lam_last < 0.0:
                        lam_last = 0.0
            Z[k] = z_last
            bhatG[k] = bg_last
            lam[k] = lam_last
        else:
            if absorbed_step < 0:
                absorbed_step = k
            Z[k] = z_last
            bhatG[k] = bg_last
            lam[k] = lam_last
        for j in range(m):
            if sw_alive > 0.0:
                c_j = bumps[j, 0]
                r_j = bumps[j, 1]
                sf = 0.0
                saf = 0.0
                sfb = 0.0
                for i in range(n_p):
                    if alive[i] == 1:
                        f, fp, fpp = _bump_fdq(x[i], c_j, r_j)
                        if f != 0.0:
                            wi = w[i]
                            sf += wi * f
                            saf += wi * (_drift_a(dc, dp0, dp1, x[i]) * fp
                                         + 0.5 * fpp)
                            sfb += wi * f * _obs_b(oc, oq0, oq1, t_k, x[i])
                pif[j, k] = sf / sw_alive
                piaf[j, k] = saf / sw_alive
                pifb[j, k] = sfb / sw_alive
        if snap_ptr < n_snap and snap_steps[snap_ptr] == k:
            for i in range(n_p):
                snap_x[snap_ptr, i] = x[i]
                snap_w[snap_ptr, i] = w[i]
                snap_alive[snap_ptr, i] = alive[i]
            snap_lognorm[snap_ptr] = log_norm
            snap_ptr += 1
        if k == n:
            break

        # ---- weight update (pre-step positions), propagate, kill ----
        dy = dY[k]
        sw_new = 0.0
        sw2_new = 0.0
        for i in range(n_p):
            if alive[i] == 1:
                g = _obs_b(oc, oq0, oq1, t_k, x[i])
                if g != 0.0:
                    w[i] = w[i] * math.exp(g * dy - 0.5 * g * g * dt)
                xi = x[i]
                zz = _ndtri(_u01(state, np.uint64(i), np.uint64(k), CH_SIGNAL))
                xn = xi + _drift_a(dc, dp0, dp1, xi) * dt + sdt * zz
                hit = False
                if xn <= 0.0:
                    hit = True
                else:
                    arg = -2.0 * xi * xn / dt
                    if arg > -45.0:
                        u = _u01(state, np.uint64(i), np.uint64(k), CH_KILL)
                        hit = u < math.exp(arg)
                if hit:
                    x[i] = 0.0
                    alive[i] = 0
                else:
                    x[i] = xn
            sw_new += w[i]
            sw2_new += w[i] * w[i]

        # ---- renormalise / resample ----
        if sw_new > 1e100 or sw_new < 1e-100:
            log_norm += math.log(sw_new)
            for i in range(n_p):
                w[i] /= sw_new
            sw2_new /= sw_new * sw_new
            sw_new = 1.0
        ess_now = sw_new * sw_new / sw2_new if sw2_new > 0.0 else 0.0
        if ess_now < resample_threshold * n_p:
            acc = 0.0
            for i in range(n_p):
                acc += w[i]
                cum[i] = acc
            total = acc
            u0 = _u01(state, np.uint64(0), np.uint64(k), CH_OBS)
            j = 0
            for i in range(n_p):
                pos = (u0 + i) / n_p * total
                while j < n_p - 1 and cum[j] <= pos:
                    j += 1
                xn_buf[i] = x[j]
                an_buf[i] = alive[j]
            wq = total / n_p
            for i in range(n_p):
                x[i] = xn_buf[i]
                alive[i] = an_buf[i]
                w[i] = wq

    return (Z, lam, bhat, bhatG, ess, pif, piaf, pifb,
            snap_x, snap_w, snap_alive, snap_lognorm,
            absorbed_step, log_norm, x, w, alive)


@njit(cache=True, parallel=True)
def _nb_filter_batch(states, dYs, dt, t0, x_inits, w_inits, alive_inits,
                     dc, dp0, dp1, oc, oq0, oq1,
                     hc, h0, eps, resample_threshold, compute_lambda,
                     richardson, bumps):
    n_paths = dYs.shape[0]
    n = dYs.shape[1]
    m = bumps.shape[0]
    Z = np.empty((n_paths, n + 1))
    lam = np.empty((n_paths, n + 1))
    bhat = np.empty((n_paths, n + 1))
    bhatG = np.empty((n_paths, n + 1))
    ess = np.empty((n_paths, n + 1))
    pif = np.empty((n_paths, m, n + 1))
    piaf = np.empty((n_paths, m, n + 1))
    pifb = np.empty((n_paths, m, n + 1))
    absorbed = np.empty(n_paths, np.int64)
    no_snap = np.empty(0, np.int64)
    for p in prange(n_paths):
        res = _nb_filter_run(states[p], dYs[p], dt, t0, x_inits[p],
                             w_inits[p], alive_inits[p],
                             dc, dp0, dp1, oc, oq0, oq1, hc, h0, eps,
                             resample_threshold, compute_lambda, richardson,
                             bumps, no_snap)
        Z[p] = res[0]
        lam[p] = res[1]
        bhat[p] = res[2]
        bhatG[p] = res[3]
        ess[p] = res[4]
        for j in range(m):
            pif[p, j] = res[5][j]
            piaf[p, j] = res[6][j]
            pifb[p, j] = res[7][j]
        absorbed[p] = res[12]
    return Z, lam, bhat, bhatG, ess, pif, piaf, pifb, absorbed


def _np_bump_fdq(x, c, r):
    u = (x - c) / r
    inside = np.abs(u) < 1.0
    u = np.where(inside, u, 0.0)
    v = 1.0 - u * u
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        e = np.where(inside, np.exp(1.0 - 1.0 / np.where(inside, v, 1.0)), 0.0)
    fp = e * (-2.0 * u / (v * v)) / r
    fpp = e * (4.0 * u * u / v ** 4 - 2.0 / (v * v)
               - 8.0 * u * u / v ** 3) / (r * r)
    return e, fp, fpp


class NpFilter:
    """Pure-numpy particle filter state for one observation path.

    Mirrors the jit kernel step for step; used as the fallback lane and
    as the reference implementation behind the per-step API.
    """

    def __init__(self, state, x0, t0=0.0, w0=None, alive0=None):
        self.state = int(state)
        self.x = np.asarray(x0, np.float64).copy()
        self.n_p = self.x.size
        self.w = (np.full(self.n_p, 1.0 / self.n_p) if w0 is None
                  else np.asarray(w0, np.float64).copy())
        self.alive = (np.ones(self.n_p, bool) if alive0 is None
                      else np.asarray(alive0, bool).copy())
        self.log_norm = 0.0
        self.k = 0
        self.t0 = float(t0)
        self.absorbed_step = -1
        self._ids = np.arange(self.n_p, dtype=np.uint64)
        self._z_last, self._lam_last, self._bg_last = 1.0, 0.0, 0.0

    def stats(self, t_k, obs_b, surv=None, eps=None, drift_a=None,
              bumps=None, richardson=False):
        w, x, alive = self.w, self.x, self.alive
        sw_all = w.sum()
        sw2 = (w * w).sum()
        wb = np.where(alive, w * obs_b(t_k, x), 0.0)
        swb = wb.sum()
        sw_alive = w[alive].sum()
        out = {"ess": sw_all * sw_all / sw2 if sw2 > 0 else 0.0,
               "bhat": swb / sw_all}
        if sw_alive > 0:
            self._z_last = sw_alive / sw_all
            self._bg_last = swb / sw_alive
            if surv is not None and eps is not None:
                # survival evaluators may reject the barrier itself, so
                # only alive positions are passed in
                dying = np.zeros_like(x)
                dying[alive] = 1.0 - surv(eps, x[alive])
                lam_e = np.where(alive, w * dying, 0.0).sum() / sw_alive / eps
                if richardson:
                    dying[alive] = 1.0 - surv(0.5 * eps, x[alive])
                    lam_h = np.where(alive, w * dying,
                                     0.0).sum() / sw_alive / (0.5 * eps)
                    lam_e = max(0.0, 2.0 * lam_h - lam_e)
                self._lam_last = lam_e
        elif self.absorbed_step < 0:
            self.absorbed_step = self.k
        out["Z"] = self._z_last
        out["bhatG"] = self._bg_last
        out["lam"] = self._lam_last
        if bumps is not None and len(bumps):
            pif = np.empty(len(bumps))
            piaf = np.empty(len(bumps))
            pifb = np.empty(len(bumps))
            ax = drift_a(x)
            bx = obs_b(t_k, x)
            for j, (c, r) in enumerate(bumps):
                f, fp, fpp = _np_bump_fdq(x, c, r)
                live = alive & (f != 0.0)
                wl = np.where(live, w, 0.0)
                if sw_alive > 0:
                    pif[j] = (wl * f).sum() / sw_alive
                    piaf[j] = (wl * (ax * fp + 0.5 * fpp)).sum() / sw_alive
                    pifb[j] = (wl * f * bx).sum() / sw_alive
                else:
                    pif[j] = piaf[j] = pifb[j] = 0.0
            out["pif"], out["piaf"], out["pifb"] = pif, piaf, pifb
        return out

    def advance(self, dy, dt, t_k, drift_a, obs_b, resample_threshold):
        x, w, alive = self.x, self.w, self.alive
        k = self.k
        g = np.where(alive, obs_b(t_k, x), 0.0)
        np.multiply(w, np.exp(g * dy - 0.5 * g * g * dt), out=w,
                    where=alive)
        z = rng.ndtri(rng.u01(self.state, self._ids, k, rng.CH_SIGNAL))
        xn = x + drift_a(x) * dt + math.sqrt(dt) * z
        with np.errstate(over="ignore"):
            arg = np.where(alive & (xn > 0),
                           -2.0 * x * np.maximum(xn, 0.0) / dt, 1.0)
        u = rng.u01(self.state, self._ids, k, rng.CH_KILL)
        hit = alive & ((xn <= 0)
                       | ((arg > -45.0) & (u < np.exp(np.minimum(arg, 0.0)))))
        stay = alive & ~hit
        x[:] = np.where(stay, xn, np.where(alive, 0.0, x))
        x[~alive] = 0.0
        alive &= ~hit
        sw = w.sum()
        if sw > 1e100 or sw < 1e-100:
            self.log_norm += math.log(sw)
            w /= sw
            sw = 1.0
        sw2 = (w * w).sum()
        ess_now = sw * sw / sw2 if sw2 > 0 else 0.0
        if ess_now < resample_threshold * self.n_p:
            self._resample(k)
        self.k = k + 1

    def _resample(self, k):
        w, n_p = self.w, self.n_p
        cum = np.cumsum(w)
        total = cum[-1]
        u0 = float(rng.u01(self.state, 0, k, rng.CH_OBS))
        pos = (u0 + np.arange(n_p)) / n_p * total
        idx = np.minimum(np.searchsorted(cum, pos, side="right"), n_p - 1)
        self.x = self.x[idx].copy()
        self.alive = self.alive[idx].copy()
        self.w = np.full(n_p, total / n_p)


def _np_filter_run(state, dY, dt, t0, x0, w0, alive0, drift_a, obs_b, surv,
                   eps, resample_threshold, compute_lambda, richardson, bumps,
                   snap_steps):
    n = len(dY)
    m = len(bumps)
    flt = NpFilter(state, x0, t0, w0, alive0)
    Z = np.empty(n + 1)
    lam = np.zeros(n + 1)
    bhat = np.empty(n + 1)
    bhatG = np.empty(n + 1)
    ess = np.empty(n + 1)
    pif = np.zeros((m, n + 1))
    piaf = np.zeros((m, n + 1))
    pifb = np.zeros((m, n + 1))
    n_snap = len(snap_steps)
    snap_x = np.empty((n_snap, flt.n_p))
    snap_w = np.empty((n_snap, flt.n_p))
    snap_alive = np.empty((n_snap, flt.n_p), np.uint8)
    snap_lognorm = np.empty(n_snap)
    snap_ptr = 0
    blist = [tuple(b) for b in np.atleast_2d(np.asarray(bumps, float))] \
        if m else None
    for k in range(n + 1):
        t_k = t0 + k * dt
        st = flt.stats(t_k, obs_b,
                       surv=surv if compute_lambda else None,
                       eps=eps, drift_a=drift_a, bumps=blist,
                       richardson=richardson)
        Z[k] = st["Z"]
        lam[k] = st["lam"]
        bhat[k] = st["bhat"]
        bhatG[k] = st["bhatG"]
        ess[k] = st["ess"]
        if m:
            pif[:, k] = st["pif"]
            piaf[:, k] = st["piaf"]
            pifb[:, k] = st["pifb"]
        if snap_ptr < n_snap and snap_steps[snap_ptr] == k:
            snap_x[snap_ptr] = flt.x
            snap_w[snap_ptr] = flt.w
            snap_alive[snap_ptr] = flt.alive
            snap_lognorm[snap_ptr] = flt.log_norm
            snap_ptr += 1
        if k == n:
            break
        flt.advance(dY[k], dt, t_k, drift_a, obs_b, resample_threshold)
    return (Z, lam, bhat, bhatG, ess, pif, piaf, pifb,
            snap_x, snap_w, snap_alive, snap_lognorm,
            np.int64(flt.absorbed_step), flt.log_norm,
            flt.x, flt.w, flt.alive.astype(np.uint8))


def _as_drift_callable(drift):
    if callable(drift):
        return drift
    dc, dp0, dp1 = drift
    if dc == DRIFT_ZERO:
        return lambda x: np.zeros_like(x)
    if dc == DRIFT_CONSTANT:
        return lambda x: np.full_like(x, dp0)
    return lambda x: dp0 + dp1 * x


def _as_obs_callable(obs):
    if callable(obs):
        return obs
    oc, oq0, oq1 = obs
    if oc == OBS_ZERO:
        return lambda t, x: np.zeros_like(x)
    if oc == OBS_LINEAR:
        return lambda t, x: oq0 * x
    return lambda t, x: np.clip(oq0 * x, -oq1, oq1)


def _as_surv_callable(hit):
    if hit is None:
        return None
    if callable(hit):
        return hit
    hc, h0 = hit

    def surv(eps, x, _hc=hc, _h0=h0):
        x = np.asarray(x, float)
        out = np.empty_like(x)
        for i in range(x.size):
            out.flat[i] = _py_survival(_hc, _h0, eps, float(x.flat[i]))
        return out
    return surv


def _py_survival(code, h0, t, x):
    if x <= 0.0:
        return 0.0
    if code == HIT_BM:
        return math.erf(x / math.sqrt(2.0 * t))
    if code == HIT_DRIFTED:
        c = h0
        st = math.sqrt(t)
        arg = min(-2.0 * c * x, 700.0)
        ph1 = 0.5 * math.erfc(-(x + c * t) / st * 0.7071067811865476)
        ph2 = 0.5 * math.erfc(-(c * t - x) / st * 0.7071067811865476)
        return ph1 - math.exp(arg) * ph2
    u = math.expm1(2.0 * h0 * t) / (2.0 * h0)
    return math.erf(x / math.sqrt(2.0 * u))


def filter_run(state, dY, dt, t0, x0, drift, obs, hit, eps,
               resample_threshold, compute_lambda=True, richardson=False,
               bumps=None, snap_steps=None, w0=None, alive0=None):
    """Run the particle filter along one observation-increment path.

    ``drift``/``obs``/``hit`` are kernel code tuples or plain callables
    (a(x); b(t, x); survival(eps, x)).  Returns a dict of stat arrays of
    length n+1 (values at grid times t0 + k dt, recorded before the
    update with dY[k]), optional bump projections, snapshots of the
    cloud at requested steps, and the final cloud.
    """
    bumps = np.zeros((0, 2)) if bumps is None else np.asarray(bumps, float)
    bumps = bumps.reshape(-1, 2)
    snap_steps = (np.zeros(0, np.int64) if snap_steps is None
                  else np.asarray(snap_steps, np.int64))
    dY = np.asarray(dY, np.float64)
    x0 = np.asarray(x0, np.float64)
    w0a = (np.full(x0.size, 1.0 / x0.size) if w0 is None
           else np.asarray(w0, np.float64))
    alive0a = (np.ones(x0.size, np.uint8) if alive0 is None
               else np.asarray(alive0).astype(np.uint8))
    jit_ok = (HAVE_NUMBA and isinstance(drift, tuple)
              and isinstance(obs, tuple)
              and (hit is None or isinstance(hit, tuple)))
    if jit_ok:
        hc, h0 = (HIT_NONE, 0.0) if hit is None else hit
        res = _nb_filter_run(np.uint64(state), dY, float(dt), float(t0), x0,
                             w0a, alive0a,
                             drift[0], drift[1], drift[2],
                             obs[0], obs[1], obs[2], hc, h0, float(eps),
                             float(resample_threshold), bool(compute_lambda),
                             bool(richardson), bumps, snap_steps)
    else:
        res = _np_filter_run(state, dY, dt, t0, x0, w0a, alive0a.astype(bool),
                             _as_drift_callable(drift), _as_obs_callable(obs),
                             _as_surv_callable(hit), eps, resample_threshold,
                             compute_lambda, richardson, bumps, snap_steps)
    keys = ("Z", "lam", "bhat", "bhatG", "ess", "pif", "piaf", "pifb",
            "snap_x", "snap_w", "snap_alive", "snap_lognorm",
            "absorbed_step", "log_norm", "x", "w", "alive")
    return dict(zip(keys, res))


def filter_run_batch(states, dYs, dt, t0, x_inits, drift, obs, hit, eps,
                     resample_threshold, compute_lambda=True,
                     richardson=False, bumps=None):
    """Vector of independent filter runs (one per observation path)."""
    bumps = np.zeros((0, 2)) if bumps is None else np.asarray(bumps, float)
    bumps = bumps.reshape(-1, 2)
    dYs = np.asarray(dYs, np.float64)
    x_inits = np.asarray(x_inits, np.float64)
    states = np.asarray(states, np.uint64)
    jit_ok = (HAVE_NUMBA and isinstance(drift, tuple)
              and isinstance(obs, tuple)
              and (hit is None or isinstance(hit, tuple)))
    if jit_ok:
        configure_threads()
        hc, h0 = (HIT_NONE, 0.0) if hit is None else hit
        n_paths_b, n_p_b = x_inits.shape
        w_inits = np.full((n_paths_b, n_p_b), 1.0 / n_p_b)
        alive_inits = np.ones((n_paths_b, n_p_b), np.uint8)
        Z, lam, bhat, bhatG, ess, pif, piaf, pifb, absorbed = \
            _nb_filter_batch(states, dYs, float(dt), float(t0), x_inits,
                             w_inits, alive_inits,
                             drift[0], drift[1], drift[2],
                             obs[0], obs[1], obs[2], hc, h0, float(eps),
                             float(resample_threshold), bool(compute_lambda),
                             bool(richardson), bumps)
        return {"Z": Z, "lam": lam, "bhat": bhat, "bhatG": bhatG, "ess": ess,
                "pif": pif, "piaf": piaf, "pifb": pifb, "absorbed": absorbed}
    n_paths, n = dYs.shape
    m = bumps.shape[0]
    out = {"Z": np.empty((n_paths, n + 1)), "lam": np.empty((n_paths, n + 1)),
           "bhat": np.empty((n_paths, n + 1)),
           "bhatG": np.empty((n_paths, n + 1)),
           "ess": np.empty((n_paths, n + 1)),
           "pif": np.empty((n_paths, m, n + 1)),
           "piaf": np.empty((n_paths, m, n + 1)),
           "pifb": np.empty((n_paths, m, n + 1)),
           "absorbed": np.empty(n_paths, np.int64)}
    for p in range(n_paths):
        res = filter_run(int(states[p]), dYs[p], dt, t0, x_inits[p], drift,
                         obs, hit, eps, resample_threshold, compute_lambda,
                         richardson, bumps, None)
        for key, tgt in (("Z", "Z"), ("lam", "lam"), ("bhat", "bhat"),
                         ("bhatG", "bhatG"), ("ess", "ess")):
            out[tgt][p] = res[key]
        out["pif"][p] = res["pif"]
        out["piaf"][p] = res["piaf"]
        out["pifb"][p] = res["pifb"]
        out["absorbed"][p] = res["absorbed_step"]
    return out
