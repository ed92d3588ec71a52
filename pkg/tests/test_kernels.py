import math
import os
import subprocess
import sys

import numpy as np
import pytest

from fpfilter import coeffs, kernels, rng
from fpfilter.hitting import survival_bm, survival_drifted_bm, survival_ou

DRIFT = (coeffs.DRIFT_AFFINE, 0.0, -1.0)
OBS = (coeffs.OBS_LINEAR_CLIPPED, 0.5, 2.0)
HIT = (kernels.HIT_OU, 1.0)


def _jit_only(reason="jit lane not active"):
    return pytest.mark.skipif(not kernels.HAVE_NUMBA, reason=reason)


class TestScalarHelpers:
    @_jit_only()
    def test_uniform_bits_match_vector_lane(self):
        st = rng.stream_state(99)
        for particle in (0, 1, 17, 2 ** 20):
            for step in (0, 3, 999):
                for ch in range(4):
                    a = float(kernels._u01(np.uint64(st), particle, step,
                                           np.uint64(ch)))
                    b = float(rng.u01(st, particle, step, ch))
                    assert a == b

    @_jit_only()
    def test_scalar_ndtri_matches_vector_lane(self):
        ps = np.concatenate([np.linspace(1e-12, 1 - 1e-12, 20_001),
                             [0.5, 0.075, 0.925]])
        vec = rng.ndtri(ps)
        for p, v in zip(ps[::97], vec[::97]):
            s = kernels._ndtri(float(p))
            assert s == pytest.approx(v, rel=1e-14, abs=1e-300)

    @_jit_only()
    def test_survival_codes_match_closed_forms(self):
        xs = np.linspace(0.05, 8.0, 200)
        for t in (0.01, 0.5, 2.0):
            bm = np.array([kernels._survival(kernels.HIT_BM, 0.0, t, x)
                           for x in xs])
            assert np.allclose(bm, survival_bm(t, xs), rtol=1e-13)
            ou = np.array([kernels._survival(kernels.HIT_OU, 1.3, t, x)
                           for x in xs])
            assert np.allclose(ou, survival_ou(t, xs, 1.3), rtol=1e-13)
            dr = np.array([kernels._survival(kernels.HIT_DRIFTED, 0.7, t, x)
                           for x in xs])
            assert np.allclose(dr, survival_drifted_bm(t, xs, 0.7),
                               rtol=1e-12)


class TestLaneAgreement:
    def test_simulate_lanes(self):
        st = rng.stream_state(42)
        x0 = np.full(64, 1.0)
        a = kernels.simulate_paths(st, 64, 0, 80, 0.01, x0, DRIFT, OBS, True)
        b = kernels._np_simulate_paths(st, 64, 0, 80, 0.01, x0, DRIFT, OBS,
                                       True, True)
        assert np.allclose(a[0], b[0], rtol=0, atol=1e-12)
        assert np.allclose(a[1], b[1], rtol=0, atol=1e-12)
        assert np.array_equal(a[3], b[3])

    def test_bridge_lanes(self):
        st = rng.stream_state(7)
        a, bad_a = kernels.bridge_weights(st, 1.0, 1.0, 3000, 64, DRIFT)
        b, bad_b = kernels._np_bridge_weights(st, 1.0, 1.0, 3000, 64, DRIFT,
                                              None)
        assert np.allclose(a, b, rtol=1e-12)
        assert np.all(bad_a == -1) and np.all(bad_b == -1)

    @pytest.mark.parametrize("threshold", [0.0, 1.0])
    def test_filter_lanes(self, threshold):
        st = rng.stream_state(11)
        dY = rng.normals(st, 0, np.arange(120), rng.CH_OBS) * math.sqrt(5e-3)
        args = (st, dY, 5e-3, 0.0, np.full(400, 1.0))
        a = kernels.filter_run(*args, DRIFT, OBS, HIT, 0.05, threshold,
                               richardson=True, bumps=[[1.0, 0.6]],
                               snap_steps=[60])
        b = kernels._np_filter_run(
            st, dY, 5e-3, 0.0, np.full(400, 1.0),
            np.full(400, 1.0 / 400), np.ones(400, bool),
            kernels._as_drift_callable(DRIFT), kernels._as_obs_callable(OBS),
            kernels._as_surv_callable(HIT), 0.05, threshold, True, True,
            np.array([[1.0, 0.6]]), np.array([60], np.int64))
        for i, key in enumerate(("Z", "lam", "bhat", "bhatG", "ess")):
            assert np.allclose(a[key], b[i], rtol=1e-9, atol=1e-12), key
        assert np.allclose(a["pif"], b[5], rtol=1e-9, atol=1e-12)
        assert np.allclose(a["snap_x"], b[8], rtol=1e-9, atol=1e-12)


class TestDeterminism:
    @_jit_only()
    def test_thread_count_invariance(self):
        import numba
        if numba.config.NUMBA_NUM_THREADS < 2:
            pytest.skip("single-thread runtime")
        st = rng.stream_state(3)
        x0 = np.full(256, 1.0)
        outs = []
        for n in (1, 2):
            numba.set_num_threads(n)
            outs.append(kernels.simulate_paths(st, 256, 0, 100, 0.01, x0,
                                               DRIFT, OBS, True))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][2], outs[1][2])

    def test_rerun_identical(self):
        st = rng.stream_state(5)
        dY = np.full(50, 0.01)
        r1 = kernels.filter_run(st, dY, 2e-3, 0.0, np.full(300, 1.0), DRIFT,
                                OBS, HIT, 0.02, 0.5)
        r2 = kernels.filter_run(st, dY, 2e-3, 0.0, np.full(300, 1.0), DRIFT,
                                OBS, HIT, 0.02, 0.5)
        assert np.array_equal(r1["Z"], r2["Z"])
        assert np.array_equal(r1["lam"], r2["lam"])
        assert np.array_equal(r1["x"], r2["x"])


class TestEnvFallback:
    def test_disable_flag_selects_numpy_lane(self):
        code = ("import fpfilter.kernels as k; "
                "print(k.active_lane(), k.HAVE_NUMBA)")
        env = dict(os.environ, FPFILTER_DISABLE_NUMBA="1")
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True)
        assert out.returncode == 0, out.stderr
        assert out.stdout.split() == ["numpy", "False"]

    def test_threads_cap_applies(self):
        if not kernels.HAVE_NUMBA:
            assert kernels.configure_threads() == 1
            return
        os.environ["FPFILTER_THREADS"] = "1"
        try:
            assert kernels.configure_threads() == 1
        finally:
            os.environ.pop("FPFILTER_THREADS")


class TestBumpDerivatives:
    def test_against_finite_differences(self):
        c, r = 1.0, 0.6
        xs = np.linspace(0.45, 1.55, 41)
        f, fp, fpp = kernels._np_bump_fdq(xs, c, r)
        h = 1e-6
        fph = kernels._np_bump_fdq(xs + h, c, r)[0]
        fmh = kernels._np_bump_fdq(xs - h, c, r)[0]
        assert np.allclose((fph - fmh) / (2 * h), fp, rtol=1e-5, atol=1e-7)
        assert np.allclose((fph - 2 * f + fmh) / h ** 2, fpp, rtol=1e-3,
                           atol=1e-4)

    def test_compact_support(self):
        f, fp, fpp = kernels._np_bump_fdq(np.array([0.39, 1.61, 0.0, 5.0]),
                                          1.0, 0.6)
        assert np.all(f == 0) and np.all(fp == 0) and np.all(fpp == 0)

    @_jit_only()
    def test_scalar_matches_vector(self):
        for x in (0.5, 0.9, 1.0, 1.3, 1.59):
            s = kernels._bump_fdq(x, 1.0, 0.6)
            v = kernels._np_bump_fdq(np.array([x]), 1.0, 0.6)
            assert s[0] == pytest.approx(float(v[0][0]), rel=1e-14)
            assert s[1] == pytest.approx(float(v[1][0]), rel=1e-14)
            assert s[2] == pytest.approx(float(v[2][0]), rel=1e-13)
