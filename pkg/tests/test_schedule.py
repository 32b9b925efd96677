import math

import numpy as np
import pytest

from panfusion.schedule import (ALPHA_BAR_FLOOR, BETA_MAX, NoiseSchedule,
                                cosine_schedule, posterior_variance)

# double-precision evaluation of the squared-cosine form at T=500, s=0.008,
# frozen as an independent oracle
ALPHA_BAR_250 = 0.4938435904406378


def _direct_alpha_bar(t, timesteps, offset):
    f = math.cos(((t / timesteps + offset) / (1.0 + offset)) * math.pi / 2.0)
    f0 = math.cos((offset / (1.0 + offset)) * math.pi / 2.0)
    return (f / f0) ** 2


class TestCosineSchedule:
    def test_endpoints(self):
        sch = cosine_schedule(500, 8e-3)
        assert sch.alpha_bar_at(0) == 1.0
        assert sch.alpha_bar_at(500) == ALPHA_BAR_FLOOR

    def test_midpoint_oracle(self):
        sch = cosine_schedule(500, 8e-3)
        assert abs(sch.alpha_bar_at(250) - ALPHA_BAR_250) < 1e-12
        assert abs(sch.alpha_bar_at(250) - _direct_alpha_bar(250, 500, 8e-3)) < 1e-12

    def test_strictly_decreasing(self):
        for timesteps in (10, 100, 500, 1000):
            sch = cosine_schedule(timesteps)
            assert np.all(np.diff(sch.alpha_bar) < 0)

    def test_beta_in_range(self):
        sch = cosine_schedule(500)
        assert np.all(sch.beta > 0)
        assert np.all(sch.beta <= BETA_MAX)

    def test_alpha_consistent_with_alpha_bar_ratio(self):
        """alpha_t must equal the consecutive alpha_bar ratio on unclipped steps."""
        sch = cosine_schedule(500)
        ratio = sch.alpha_bar[1:] / sch.alpha_bar[:-1]
        unclipped = sch.beta < BETA_MAX
        rel = np.abs(sch.alpha[unclipped] - ratio[unclipped]) / ratio[unclipped]
        assert rel.max() < 1e-6

    def test_tables_are_float64(self):
        sch = cosine_schedule(50)
        assert sch.alpha_bar.dtype == np.float64
        assert sch.beta.dtype == np.float64
        assert len(sch.alpha_bar) == 51
        assert len(sch.beta) == 50

    def test_offset_shrinks_early_noise(self):
        # a larger offset keeps more signal at small t
        lo = cosine_schedule(500, 4e-3)
        hi = cosine_schedule(500, 4e-2)
        assert hi.alpha_bar_at(10) < lo.alpha_bar_at(10)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            cosine_schedule(0)
        with pytest.raises(ValueError):
            cosine_schedule(100, 0.0)
        with pytest.raises(ValueError):
            cosine_schedule(100, 1.0)


class TestAccessors:
    def test_one_based_indexing(self):
        sch = cosine_schedule(100)
        assert sch.beta_at(1) == sch.beta[0]
        assert sch.alpha_at(100) == sch.alpha[99]
        assert sch.alpha_bar_at(100) == sch.alpha_bar[100]

    def test_out_of_range(self):
        sch = cosine_schedule(100)
        for t in (0, 101, -3):
            with pytest.raises(ValueError):
                sch.beta_at(t)
        with pytest.raises(ValueError):
            sch.alpha_bar_at(101)


class TestPosteriorVariance:
    def test_zero_at_first_step(self):
        sch = cosine_schedule(500)
        assert posterior_variance(sch, 1) == 0.0

    def test_below_beta(self):
        """The posterior variance is beta damped by (1-ab_prev)/(1-ab) < 1."""
        sch = cosine_schedule(500)
        for t in range(2, 501):
            pv = posterior_variance(sch, t)
            assert 0.0 < pv < sch.beta_at(t)

    def test_matches_direct_formula(self):
        sch = cosine_schedule(200)
        rng = np.random.default_rng(1)
        for t in rng.integers(2, 201, size=20):
            t = int(t)
            ab, ab_prev = sch.alpha_bar_at(t), sch.alpha_bar_at(t - 1)
            want = (1.0 - ab_prev) / (1.0 - ab) * sch.beta_at(t)
            assert abs(posterior_variance(sch, t) - want) < 1e-15
