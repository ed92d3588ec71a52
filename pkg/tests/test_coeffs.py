import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpfilter import coeffs, rng
from fpfilter.coeffs import (DriftSpec, InitialLaw, ObsSpec, QuadratureError,
                             linear_growth_K, potential_A, validate_drift)


class TestValidateDrift:
    def test_linear_reversion_passes(self):
        rep = validate_drift(DriftSpec.affine(0.0, -1.0))
        assert rep.passed
        assert rep.sup_abs_da == 1.0
        assert rep.a_at_infinity == -np.inf
        assert rep.K_a == 1.0
        assert rep.p_exponent == 0.0  # f_a vanishes identically

    def test_cubic_tabulated_fails_derivative_clause(self):
        xs = np.linspace(0.0, 50.0, 400)
        spec = DriftSpec.tabulated(xs, xs ** 3)
        rep = validate_drift(spec)
        assert not rep.clause_bounded_derivative
        assert not rep.passed

    def test_constant_drift_passes(self):
        rep = validate_drift(DriftSpec.constant(1.0))
        assert rep.passed
        assert rep.a_at_infinity == 1.0
        assert rep.potential_limit == np.inf

    def test_affine_with_negative_offset(self):
        rep = validate_drift(DriftSpec.affine(-0.5, -2.0))
        assert rep.passed
        assert rep.K_a == 2.0
        assert 0.5 <= rep.p_exponent < 1.5   # -int f_a grows linearly

    def test_nonfinite_rejected_with_location(self):
        spec = DriftSpec("custom",
                         lambda x: np.where(np.asarray(x) > 10.0, np.nan,
                                            0.0),
                         lambda x: np.zeros_like(np.asarray(x, float)))
        with pytest.raises(ValueError, match="non-finite at x"):
            validate_drift(spec)

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            validate_drift(DriftSpec.zero(), np.array([]))


class TestPotential:
    def test_zero_drift(self):
        assert potential_A(DriftSpec.zero(), 5.0) == 0.0

    def test_linear_reversion(self):
        assert potential_A(DriftSpec.affine(0.0, -1.0), 2.0) == -2.0

    def test_constant(self):
        assert potential_A(DriftSpec.constant(1.0), 3.0) == 3.0

    def test_tabulated_matches_closed_antiderivative(self):
        # an affine drift fed through the table path exercises quadrature
        xs = np.linspace(0.0, 50.0, 2000)
        spec = DriftSpec.tabulated(xs, 0.3 - 0.7 * xs)
        rng_ = np.random.default_rng(7)
        for x in rng_.uniform(0.5, 40.0, 100):
            closed = 0.3 * x - 0.35 * x * x
            assert abs(potential_A(spec, float(x)) - closed) <= 1e-8 * (
                1.0 + abs(closed))

    def test_affine_random_points_exact(self):
        spec = DriftSpec.affine(1.2, -0.4)
        rng_ = np.random.default_rng(3)
        for x in rng_.uniform(-10, 10, 100):
            closed = 1.2 * x - 0.2 * x * x
            assert abs(potential_A(spec, float(x)) - closed) <= 1e-12 * (
                1.0 + abs(closed))

    def test_nonfinite_x_rejected(self):
        with pytest.raises(ValueError):
            potential_A(DriftSpec.zero(), np.inf)


class TestLinearGrowth:
    def test_zero(self):
        assert linear_growth_K(DriftSpec.zero(), np.linspace(0, 50, 100)) == 0

    def test_linear_reversion_approaches_one(self):
        g1 = np.linspace(0.0, 50.0, 10_000)
        g2 = np.linspace(0.0, 500.0, 100_000)
        k1 = linear_growth_K(DriftSpec.affine(0.0, -1.0), g1)
        k2 = linear_growth_K(DriftSpec.affine(0.0, -1.0), g2)
        assert k1 == pytest.approx(50.0 / 51.0)
        assert k1 < k2 < 1.0

    def test_offset_case_attained_at_origin(self):
        k = linear_growth_K(DriftSpec.affine(2.0, -1.0),
                            np.linspace(0.0, 50.0, 10_000))
        assert k == 2.0

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            linear_growth_K(DriftSpec.zero(), np.array([]))

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(8))))
    def test_permutation_invariance(self, perm):
        grid = np.linspace(0.1, 20.0, 8)
        spec = DriftSpec.affine(0.5, -1.5)
        assert linear_growth_K(spec, grid[perm]) == linear_growth_K(spec,
                                                                    grid)

    def test_nondecreasing_under_refinement(self):
        spec = DriftSpec.affine(0.5, -1.5)
        coarse = np.linspace(0.0, 30.0, 50)
        fine = np.linspace(0.0, 30.0, 500)
        both = np.union1d(coarse, fine)
        k_c = linear_growth_K(spec, coarse)
        k_b = linear_growth_K(spec, both)
        assert k_b >= k_c


class TestObsSpec:
    def test_linear_clipped_grid_check(self):
        obs = ObsSpec.linear_clipped(0.5, 2.0)
        obs.check_on_grid(np.linspace(0, 1, 5), np.linspace(0, 50, 100))
        assert obs.bounded_by == 2.0
        assert obs.K_b() == 0.5

    def test_vanishes_at_origin(self):
        for obs in (ObsSpec.zero(), ObsSpec.linear(0.7),
                    ObsSpec.linear_clipped(0.7, 1.0)):
            assert float(np.asarray(obs.b(0.3, np.zeros(1)))[0]) == 0.0

    def test_growth_violation_detected(self):
        bad = ObsSpec("custom", lambda t, x: 2.0 * np.asarray(x, float),
                      lipschitz=1.0)
        with pytest.raises(ValueError, match="exceeds"):
            bad.check_on_grid(np.array([0.0]), np.linspace(0.1, 10, 50))

    def test_origin_violation_detected(self):
        bad = ObsSpec("custom",
                      lambda t, x: np.asarray(x, float) + 0.1, lipschitz=1.0)
        with pytest.raises(ValueError, match="expected 0"):
            bad.check_on_grid(np.array([0.0]), np.linspace(0.1, 10, 50))


class TestInitialLaw:
    def test_point_mass(self):
        law = InitialLaw.point(1.0)
        x = law.sample(1000, rng.stream_state(1))
        assert np.all(x == 1.0)
        assert law.mean == 1.0 and law.second_moment == 1.0

    def test_point_must_be_positive(self):
        with pytest.raises(ValueError):
            InitialLaw.point(0.0)
        with pytest.raises(ValueError):
            InitialLaw.point(-1.0)

    def test_lognormal_moments(self):
        m, s = 0.1, 0.3
        law = InitialLaw.lognormal(m, s)
        x = law.sample(200_000, rng.stream_state(2))
        assert np.all(x > 0)
        se = x.std(ddof=1) / np.sqrt(x.size)
        assert abs(x.mean() - law.mean) < 3 * se
        assert law.second_moment == pytest.approx(np.exp(2 * m + 2 * s * s))

    def test_tabulated_law(self):
        law = InitialLaw.tabulated([0.5, 1.0, 2.0], [0.2, 0.5, 0.3])
        x = law.sample(200_000, rng.stream_state(3))
        assert set(np.unique(x)) <= {0.5, 1.0, 2.0}
        se = x.std(ddof=1) / np.sqrt(x.size)
        assert abs(x.mean() - law.mean) < 3 * se

    def test_tabulated_validation(self):
        with pytest.raises(ValueError, match="sum"):
            InitialLaw.tabulated([1.0, 2.0], [0.5, 0.6])
        with pytest.raises(ValueError, match="support"):
            InitialLaw.tabulated([-1.0, 2.0], [0.5, 0.5])
        with pytest.raises(ValueError, match="negative"):
            InitialLaw.tabulated([1.0, 2.0], [1.5, -0.5])

    def test_keyed_sampling_offsets(self):
        law = InitialLaw.lognormal(0.0, 0.5)
        st_ = rng.stream_state(9)
        a = law.sample(10, st_, index0=0)
        b = law.sample(5, st_, index0=5)
        assert np.array_equal(a[5:], b)


class TestTabulatedDrift:
    def test_interpolates_nodes_and_extrapolates_affine(self):
        xs = np.linspace(0.0, 20.0, 100)
        vals = 1.0 - 0.5 * xs
        spec = DriftSpec.tabulated(xs, vals)
        assert np.allclose(spec.a(xs), vals, atol=1e-12)
        # beyond the table: fitted affine tail
        far = np.array([30.0, 40.0])
        assert np.allclose(spec.a(far), 1.0 - 0.5 * far, atol=1e-8)
        assert np.allclose(spec.da(far), -0.5, atol=1e-8)
        # below the table: clamped
        assert float(spec.a(np.array([-1.0]))[0]) == vals[0]

    def test_table_file_roundtrip(self, tmp_path):
        xs = np.linspace(0.0, 10.0, 50)
        vals = np.sin(xs / 3.0) - 0.4 * xs
        path = tmp_path / "drift.txt"
        np.savetxt(path, np.column_stack([xs, vals]))
        spec = DriftSpec.from_table_file(path)
        assert np.allclose(spec.a(xs), vals, atol=1e-10)

    def test_rejects_descending_nodes(self):
        with pytest.raises(ValueError, match="ascending"):
            DriftSpec.tabulated([0.0, 2.0, 1.0, 3.0], [0.0, 1.0, 2.0, 3.0])

    def test_kernel_code_absent(self):
        xs = np.linspace(0.0, 10.0, 30)
        spec = DriftSpec.tabulated(xs, -xs)
        assert spec.kernel_code() is None
