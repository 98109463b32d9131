import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdiffusion.evaluation import (
    LN2,
    MetricReport,
    autocorrelation,
    bulk_rate_density,
    cdf_l1_distance,
    discriminative_score,
    duration_pdf,
    export_projection_input,
    marginal_score,
    moving_average,
    read_projection_input,
    read_report,
    recover_valid_length,
    segment_curve,
    silverman_bandwidth,
    tail_features,
    tail_score,
)
from evdiffusion.synthetic import PLATEAU_LEVELS, battery_curves


def plateau_ramp(plateau_min=120, ramp_min=60, level=32.0, length=720):
    c = np.zeros(length)
    c[:plateau_min] = level
    c[plateau_min:plateau_min + ramp_min] = level * (1 - np.arange(1, ramp_min + 1) / ramp_min)
    return c


@pytest.fixture(scope="module")
def toy():
    values, valid = battery_curves(300, np.random.default_rng(5))
    return values, valid


class TestMarginal:
    def test_identical(self):
        x = np.random.default_rng(0).normal(size=(20, 30))
        assert marginal_score(x, x) == 0.0

    def test_disjoint(self):
        assert marginal_score(np.zeros(100), np.ones(100)) == 1.0

    def test_overlapping_uniforms(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 1, 100_000)
        b = rng.uniform(0.5, 1.5, 100_000)
        assert marginal_score(a, b) == pytest.approx(0.5, abs=0.02)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            marginal_score(np.ones(5), np.ones(5))
        with pytest.raises(ValueError):
            marginal_score(np.zeros(0), np.ones(5))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=40), st.lists(st.floats(-100, 100), min_size=2, max_size=40))
    def test_symmetric_and_bounded(self, a, b):
        if max(a + b) == min(a + b):
            return
        s = marginal_score(a, b)
        assert s == pytest.approx(marginal_score(b, a), abs=1e-12)
        assert 0.0 <= s <= 1.0 + 1e-12


class TestDiscriminative:
    def test_separable_offset(self):
        rng = np.random.default_rng(0)
        real = rng.normal(size=(60, 16))
        gen = real + 10 * (real.max() - real.min())
        mean, std = discriminative_score(real, gen, repeats=2, epochs=30)
        assert mean <= 0.1 and std >= 0

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(30, 8)), rng.normal(size=(30, 8))
        assert discriminative_score(a, b, repeats=1, epochs=2) == discriminative_score(a, b, repeats=1, epochs=2)

    def test_needs_samples(self):
        with pytest.raises(ValueError):
            discriminative_score(np.zeros((10, 5)), np.zeros((30, 5)))
        with pytest.raises(ValueError):
            discriminative_score(np.zeros((30, 5)), np.zeros((30, 6)))

    def test_ideal_constant(self):
        assert LN2 == pytest.approx(0.693147, abs=1e-6)


class TestSegmentation:
    def test_known_changepoint(self):
        seg = segment_curve(plateau_ramp(), valid_len=180)
        assert abs(seg.absorption[0] - 120) <= 5
        assert seg.plateau_level == pytest.approx(32.0)

    def test_constant_is_bulk_only(self):
        seg = segment_curve(np.full(200, 16.0))
        assert seg.bulk_only and seg.bulk == (0, 200)

    def test_noisy_plateau(self):
        rng = np.random.default_rng(3)
        c = plateau_ramp(200, 90, 16.0)
        c[:200] += rng.normal(0, 0.4, 200)
        seg = segment_curve(c, valid_len=290)
        assert abs(seg.absorption[0] - 200) <= 5

    def test_five_minute_grid(self):
        c = plateau_ramp(24, 12, 32.0, length=144)
        seg = segment_curve(c, valid_len=36, step_minutes=5)
        assert abs(seg.absorption[0] - 24) <= 1

    def test_too_short(self):
        with pytest.raises(ValueError):
            segment_curve(np.ones(9))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 50), min_size=10, max_size=120))
    def test_partition_contract(self, values):
        c = np.array(values)
        seg = segment_curve(c)
        (b0, b1), (a0, a1) = seg.bulk, seg.absorption
        assert b0 == 0 and b1 == a0 and a1 == len(c)
        assert 0 <= b1 <= len(c)


class TestDurations:
    def test_single_bin(self):
        edges, mass = duration_pdf(np.full(40, 90))
        assert mass.sum() == pytest.approx(1.0, abs=1e-9)
        occupied = np.flatnonzero(mass)
        assert occupied.tolist() == [3] and edges[3] == 1.5
        assert edges[-1] == 12.0 and len(mass) == 24

    def test_capped_support(self):
        _, mass = duration_pdf([720, 800, 10])
        assert mass.sum() == pytest.approx(1.0, abs=1e-9)
        assert mass[-1] == pytest.approx(2 / 3)

    def test_step_minutes(self):
        _, a = duration_pdf([18], step_minutes=5)
        _, b = duration_pdf([90])
        assert np.array_equal(a, b)

    def test_recover_padded_lengths(self):
        curves = np.stack([plateau_ramp(p, 40) for p in (100, 200, 300)])
        rec = recover_valid_length(curves)
        true = np.array([140, 240, 340])
        # the last ramp samples fall below 2 % of the peak and are cut
        assert np.all(np.abs(rec - true) <= 8)

    def test_recover_all_zero(self):
        assert recover_valid_length(np.zeros((2, 50)), reference_max=10.0).tolist() == [0, 0]

    def test_moving_average_edges(self):
        np.testing.assert_allclose(moving_average(np.full(7, 3.0), 5), 3.0)
        assert moving_average([1.0, 2.0], 1).tolist() == [1.0, 2.0]


class TestTailScore:
    def test_self_is_zero(self, toy):
        values, valid = toy
        s = tail_score(values, values, step_minutes=5, real_valid=valid, gen_valid=valid)
        assert s.mean <= 1e-6 and not s.flagged
        assert len(s.per_cluster) == 7 and len(s.medoids) == 7

    def test_scaled_tails_detected(self, toy):
        values, valid = toy
        s = tail_score(values, values, step_minutes=5, real_valid=valid, gen_valid=valid, gen_scale=0.5)
        assert s.mean > 0

    def test_missing_cluster_flagged(self, toy):
        values, valid = toy
        lin = values[::2]  # linear tails only
        s = tail_score(values, lin, step_minutes=5, real_valid=valid, gen_valid=valid[::2])
        assert s.flagged and all(s.per_cluster[j] == 1.0 for j in range(7) if j in s.flagged)

    def test_features_normalized(self):
        feats = tail_features(plateau_ramp()[None], [180])
        assert feats.features.shape == (1, 64)
        assert feats.features[0, 0] <= 1.0 + 1e-9 and feats.features[0, -1] == pytest.approx(0.0)

    def test_cdf_distance(self):
        assert cdf_l1_distance([1, 2, 3], [1, 2, 3]) == 0.0
        # the two CDFs agree only at the right end of the 100-point grid
        assert cdf_l1_distance([0.0], [1.0]) == pytest.approx(0.99)

    def test_needs_tails(self):
        with pytest.raises(ValueError):
            tail_score(np.full((5, 50), 3.0), np.full((5, 50), 3.0))


class TestAutocorrelation:
    def test_lag_zero(self):
        acf = autocorrelation(np.random.default_rng(0).normal(size=200))
        assert acf[0] == pytest.approx(1.0) and len(acf) == 49

    def test_white_noise(self):
        acf = autocorrelation(np.random.default_rng(1).normal(size=10_000))
        assert np.all(np.abs(acf[1:]) < 0.05)

    def test_sinusoid(self):
        x = np.sin(2 * np.pi * np.arange(1000) / 10)
        assert autocorrelation(x)[10] >= 0.95

    def test_valid_segment_only(self):
        x = np.concatenate([np.sin(np.arange(100)), np.zeros(600)])
        np.testing.assert_array_equal(autocorrelation(x, valid_len=100), autocorrelation(x[:100]))

    def test_errors(self):
        with pytest.raises(ValueError):
            autocorrelation(np.ones(30))
        with pytest.raises(ValueError):
            autocorrelation(np.ones(100))


class TestBulkDensity:
    def test_constant_corpus(self):
        d = bulk_rate_density(np.full((10, 60), 32.0), valid_lens=[60] * 10)
        width = d.edges[1] - d.edges[0]
        assert abs(d.grid[np.argmax(d.kde)] - 32.0) <= width

    def test_normalized(self, toy):
        values, valid = toy
        d = bulk_rate_density(values, valid, step_minutes=5)
        assert np.trapezoid(d.kde, d.grid) == pytest.approx(1.0, abs=1e-3)
        assert (d.hist * np.diff(d.edges)).sum() == pytest.approx(1.0, abs=1e-9)

    def test_trimodal(self, toy):
        values, valid = toy
        modes = bulk_rate_density(values, valid, step_minutes=5).modes()
        assert len(modes) == 3
        for m, level in zip(sorted(modes), PLATEAU_LEVELS):
            assert abs(m - level) <= 1.0

    def test_silverman(self):
        v = np.random.default_rng(0).normal(size=1000)
        sd = v.std(ddof=1)
        iqr = np.subtract(*np.quantile(v, [0.75, 0.25]))
        assert silverman_bandwidth(v) == pytest.approx(0.9 * min(sd, iqr / 1.34) * 1000 ** -0.2)


class TestExport:
    def test_projection_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        real, gen = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
        path = tmp_path / "p.csv"
        export_projection_input(real, gen, path)
        src, mat = read_projection_input(path)
        assert len(src) == 7 and src.tolist() == ["real"] * 4 + ["gen"] * 3
        assert np.array_equal(mat, np.vstack([real, gen]))

    def test_report(self, tmp_path):
        rep = MetricReport(0.05, 0.66, 0.01, 0.04, 0.02, artifacts={"acf": "acf.csv"})
        path = tmp_path / "m.txt"
        rep.write(path)
        got = read_report(path)
        assert float(got["marginal_score"]) == 0.05
        assert float(got["discriminative_score_ideal"]) == pytest.approx(math.log(2))
        assert got["artifact.acf"] == "acf.csv"
