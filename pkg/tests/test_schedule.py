import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from evdiffusion.schedule import (
    build_schedule,
    forward_sample,
    posterior_mean_from_eps,
    posterior_mean_from_x0,
    reverse_step,
)


@pytest.fixture(scope="module")
def sched():
    return build_schedule(50, 1e-4, 0.5)


def quadratic_beta_mp(t, T, b1, bT):
    """High-precision reference for the quadratic schedule."""
    mpmath.mp.dps = 40
    t, T = mpmath.mpf(t), mpmath.mpf(T)
    return ((T - t) / (T - 1) * mpmath.sqrt(b1) + (t - 1) / (T - 1) * mpmath.sqrt(bT)) ** 2


class TestBuildSchedule:
    def test_endpoints_exact(self, sched):
        assert sched.beta[0] == 1e-4
        assert sched.beta[-1] == 0.5

    def test_midpoint_value(self, sched):
        ref = quadratic_beta_mp(25, 50, mpmath.mpf("1e-4"), mpmath.mpf("0.5"))
        assert float(ref) == pytest.approx(0.12351, rel=1e-4)
        assert sched.beta[24] == pytest.approx(float(ref), rel=1e-12)

    def test_all_steps_match_reference(self, sched):
        ref = [float(quadratic_beta_mp(t, 50, mpmath.mpf("1e-4"), mpmath.mpf("0.5"))) for t in range(1, 51)]
        np.testing.assert_allclose(sched.beta, ref, rtol=1e-12)

    def test_alpha_bar_and_posterior_variance(self, sched):
        np.testing.assert_allclose(sched.alpha_bar, np.cumprod(1 - sched.beta), rtol=1e-14)
        assert sched.beta_tilde[0] == 0.0
        assert np.all(sched.beta_tilde <= sched.beta)

    @pytest.mark.parametrize("args", [(1, 1e-4, 0.5), (50, 0.0, 0.5), (50, 1e-4, 1.0), (50, 0.5, 0.1), (50, -1e-4, 0.5)])
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(ValueError):
            build_schedule(*args)

    def test_tables_are_read_only(self, sched):
        with pytest.raises(ValueError):
            sched.beta[0] = 1.0

    @pytest.mark.parametrize("T", [2, 3, 10, 50, 200, 1000])
    def test_monotonicity(self, T):
        s = build_schedule(T, 1e-4, 0.5)
        assert np.all(np.diff(s.beta) >= 0)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert np.all((s.beta > 0) & (s.beta < 1))
        assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))

    def test_signal_decay_shape(self, sched):
        signal = np.sqrt(sched.alpha_bar)
        noise = np.sqrt(1 - sched.alpha_bar)
        assert np.all(np.diff(signal) < 0) and np.all(np.diff(noise) > 0)
        assert np.all((signal > 0) & (signal < 1) & (noise > 0) & (noise < 1))
        assert signal[-1] < 0.01


class TestForwardSample:
    def test_zero_noise(self, sched):
        x0 = np.array([1.0, -2.0, 3.5])
        np.testing.assert_allclose(forward_sample(x0, 10, np.zeros(3), sched), np.sqrt(sched.alpha_bar[9]) * x0)

    def test_zero_signal(self, sched):
        eps = np.array([0.3, -1.2])
        np.testing.assert_allclose(forward_sample(np.zeros(2), 7, eps, sched), np.sqrt(1 - sched.alpha_bar[6]) * eps)

    def test_first_step_value(self, sched):
        out = forward_sample([1.0], 1, [0.5], sched)
        assert out[0] == pytest.approx(np.sqrt(0.9999) + 0.01 * 0.5, abs=1e-12)
        assert np.sqrt(0.9999) == pytest.approx(0.99995, abs=1e-8)

    def test_errors(self, sched):
        with pytest.raises(ValueError):
            forward_sample(np.zeros(3), 1, np.zeros(2), sched)
        with pytest.raises(ValueError):
            forward_sample(np.zeros(3), 0, np.zeros(3), sched)
        with pytest.raises(ValueError):
            forward_sample(np.zeros(3), 51, np.zeros(3), sched)

    def test_terminal_step_is_standard_normal(self, sched):
        rng = np.random.default_rng(1)
        x0 = rng.uniform(-1, 1, size=(100, 100))
        xt = forward_sample(x0, 50, rng.standard_normal(x0.shape), sched)
        assert stats.kstest(xt.ravel(), "norm").pvalue > 0.01


def bayes_posterior_moments(x0, xt, t, sched, n_grid=200001):
    """Posterior of x_{t-1} by numerical quadrature of the Bayes rule."""
    b = sched.beta[t - 1]
    a_prev = sched.alpha_bar[t - 2]
    prior = stats.norm(np.sqrt(a_prev) * x0, np.sqrt(1 - a_prev))
    centre, width = prior.mean(), 12 * prior.std()
    grid = np.linspace(centre - width, centre + width, n_grid)
    like = stats.norm.pdf(xt, np.sqrt(1 - b) * grid, np.sqrt(b))
    w = like * prior.pdf(grid)
    w /= np.trapezoid(w, grid)
    mean = np.trapezoid(grid * w, grid)
    var = np.trapezoid((grid - mean) ** 2 * w, grid)
    return mean, var


class TestPosterior:
    def test_identity_between_forms(self, sched):
        rng = np.random.default_rng(0)
        for _ in range(200):
            t = int(rng.integers(2, 51))
            x0 = rng.normal(size=16)
            eps = rng.normal(size=16)
            xt = forward_sample(x0, t, eps, sched)
            np.testing.assert_allclose(
                posterior_mean_from_x0(x0, xt, t, sched), posterior_mean_from_eps(xt, eps, t, sched), atol=1e-10)

    def test_zero_inputs(self, sched):
        assert np.all(posterior_mean_from_x0(np.zeros(4), np.zeros(4), 5, sched) == 0)

    @pytest.mark.parametrize("t", [2, 10, 40])
    def test_against_bayes_quadrature(self, sched, t):
        x0 = 1.0
        xt = forward_sample([x0], t, [0.0], sched)[0]
        mean, var = bayes_posterior_moments(x0, xt, t, sched)
        assert posterior_mean_from_x0([x0], [xt], t, sched)[0] == pytest.approx(mean, rel=1e-6, abs=1e-9)
        assert sched.beta_tilde[t - 1] == pytest.approx(var, rel=1e-4)

    def test_eps_form_numeric(self, sched):
        out = posterior_mean_from_eps([1.0], [1.0], 1, sched)[0]
        assert out == pytest.approx((1 - 0.01) / np.sqrt(0.9999), rel=1e-12)
        assert out == pytest.approx(0.990050, abs=1e-6)

    def test_eps_form_zero_noise(self, sched):
        xt = np.array([0.4, -0.7])
        np.testing.assert_allclose(posterior_mean_from_eps(xt, np.zeros(2), 12, sched), xt / np.sqrt(1 - sched.beta[11]))

    def test_step_range(self, sched):
        with pytest.raises(ValueError):
            posterior_mean_from_x0([0.0], [0.0], 1, sched)
        with pytest.raises(ValueError):
            posterior_mean_from_eps([0.0], [0.0], 51, sched)
        with pytest.raises(ValueError):
            posterior_mean_from_eps([0.0, 1.0], [0.0], 3, sched)

    @settings(max_examples=200, deadline=None)
    @given(t=st.integers(2, 50), x0=st.floats(-5, 5), eps=st.floats(-5, 5))
    def test_identity_property(self, sched, t, x0, eps):
        xt = forward_sample([x0], t, [eps], sched)
        a = posterior_mean_from_x0([x0], xt, t, sched)
        b = posterior_mean_from_eps(xt, [eps], t, sched)
        assert abs(a[0] - b[0]) <= 1e-10


class TestReverseStep:
    def test_last_step_deterministic(self, sched):
        xt, e = np.array([0.3, 0.1]), np.array([0.2, -0.5])
        z = np.array([5.0, -5.0])
        np.testing.assert_array_equal(reverse_step(xt, e, 1, z, sched), posterior_mean_from_eps(xt, e, 1, sched))

    def test_zero_z(self, sched):
        xt, e = np.array([0.3]), np.array([0.2])
        np.testing.assert_array_equal(reverse_step(xt, e, 30, np.zeros(1), sched), posterior_mean_from_eps(xt, e, 30, sched))

    @pytest.mark.parametrize("t", [2, 25, 50])
    def test_monte_carlo_variance(self, sched, t):
        rng = np.random.default_rng(t)
        z = rng.standard_normal(10_000)
        out = reverse_step(np.full(10_000, 0.5), np.full(10_000, 0.1), t, z, sched)
        assert out.var() == pytest.approx(sched.beta_tilde[t - 1], rel=0.05)

    def test_shape_mismatch(self, sched):
        with pytest.raises(ValueError):
            reverse_step(np.zeros(3), np.zeros(3), 5, np.zeros(2), sched)
