import math

import numpy as np
import pytest

from panfusion.diffusion import NoisyState, Prediction, q_sample
from panfusion.sampler import SamplerPlan, ddim_step, ddpm_step, make_plan, sample
from panfusion.schedule import cosine_schedule, posterior_variance


@pytest.fixture(scope="module")
def sch():
    return cosine_schedule(500, 8e-3)


class TestMakePlan:
    def test_uniform_stride(self):
        plan = make_plan(500, 25)
        assert len(plan.tau) == 25
        assert plan.tau[-1] == 500
        assert all(b > a for a, b in zip(plan.tau, plan.tau[1:]))
        assert plan.tau == [20 * i for i in range(1, 26)]

    def test_full_length(self):
        plan = make_plan(100, 100)
        assert plan.tau == list(range(1, 101))

    def test_single_step(self):
        assert make_plan(500, 1).tau == [500]

    def test_short_plans_end_at_t(self):
        for steps in (2, 3, 7, 33, 499):
            assert make_plan(500, steps).tau[-1] == 500

    def test_steps_out_of_range(self):
        with pytest.raises(ValueError):
            make_plan(500, 0)
        with pytest.raises(ValueError):
            make_plan(500, 501)


class TestPlanValidation:
    def test_bad_trajectories(self):
        with pytest.raises(ValueError):
            SamplerPlan(tau=[])
        with pytest.raises(ValueError):
            SamplerPlan(tau=[5, 5, 10])
        with pytest.raises(ValueError):
            SamplerPlan(tau=[0, 10])
        with pytest.raises(ValueError):
            SamplerPlan(tau=[1, 10], eta=1.5)
        with pytest.raises(ValueError):
            SamplerPlan(tau=[1, 10], kind="euler")

    def test_check_against(self, sch):
        with pytest.raises(ValueError, match="end at T"):
            SamplerPlan(tau=[1, 250]).check_against(sch)
        with pytest.raises(ValueError, match="full trajectory"):
            SamplerPlan(tau=[250, 500], kind="ddpm").check_against(sch)
        SamplerPlan(tau=list(range(1, 501)), kind="ddpm").check_against(sch)


class TestSingleSteps:
    def test_ddpm_needs_noise_above_t1(self, sch):
        state = NoisyState(x_t=np.zeros(3), t=10)
        pred = Prediction("epsilon", np.zeros(3))
        with pytest.raises(ValueError, match="noise"):
            ddpm_step(state, pred, sch)

    def test_ddpm_mean_only_at_t1(self, sch):
        state = NoisyState(x_t=np.full(3, 0.2), t=1)
        pred = Prediction("epsilon", np.zeros(3))
        out = ddpm_step(state, pred, sch)
        want = 0.2 / math.sqrt(sch.alpha_at(1))
        np.testing.assert_allclose(out, want, rtol=1e-12)

    def test_ddim_rejects_forward_jump(self, sch):
        state = NoisyState(x_t=np.zeros(2), t=10)
        pred = Prediction("x0", np.zeros(2))
        with pytest.raises(ValueError):
            ddim_step(state, pred, 10, sch)
        with pytest.raises(ValueError, match="noise"):
            ddim_step(state, pred, 5, sch, eta=0.5)

    def test_ddim_formula(self, sch):
        """Deterministic update against the respaced posterior-mean expression."""
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal(4)
        eps = rng.standard_normal(4)
        t, t_prev = 300, 260
        state = q_sample(x0, t, eps, sch)
        out = ddim_step(state, Prediction("x0", x0), t_prev, sch, eta=0.0)
        ab_prev = sch.alpha_bar_at(t_prev)
        want = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        np.testing.assert_allclose(out, want, atol=1e-10)

    def test_ddim_eta1_adjacent_matches_ddpm(self, sch):
        """With eta=1 and stride one the respaced step is the ancestral step."""
        rng = np.random.default_rng(1)
        for t in (2, 50, 200, 499):
            x0 = rng.standard_normal(8)
            eps = rng.standard_normal(8)
            noise = rng.standard_normal(8)
            state = q_sample(x0, t, eps, sch)
            pred = Prediction("epsilon", eps * 0.9 + 0.01)
            a = ddpm_step(state, pred, sch, noise=noise)
            b = ddim_step(state, pred, t - 1, sch, eta=1.0, noise=noise)
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-11)

    def test_ddim_eta1_sigma_matches_posterior_std(self, sch):
        for t in (2, 100, 400):
            ab = sch.alpha_bar_at(t)
            ab_prev = sch.alpha_bar_at(t - 1)
            sigma = math.sqrt((1.0 - ab_prev) / (1.0 - ab)) \
                * math.sqrt(1.0 - ab / ab_prev)
            assert abs(sigma - math.sqrt(posterior_variance(sch, t))) < 1e-12


class TestFullTrajectories:
    def test_oracle_x0_endpoint(self, sch):
        """A perfect x0 predictor lands exactly on the target at every respacing."""
        rng = np.random.default_rng(2)
        target = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)

        def oracle(x, t):
            return Prediction("x0", target)

        for steps in (5, 25):
            plan = make_plan(sch.timesteps, steps, eta=0.0)
            out = sample(oracle, target.shape, plan, sch, seed=4)
            assert np.abs(out - target).max() < 1e-5

    def test_ddpm_vs_ddim_eta1_float64(self):
        """Shared noise makes the two steppers agree along the whole chain."""
        sch = cosine_schedule(60, 8e-3)
        rng = np.random.default_rng(3)
        target = rng.standard_normal((4,))

        def denoise(x, t):
            return Prediction("x0", target * 0.7 + 0.05 * x)

        x_a = rng.standard_normal(4)
        x_b = x_a.copy()
        for t in range(60, 0, -1):
            noise = rng.standard_normal(4)
            pred_a = denoise(x_a, t)
            pred_b = denoise(x_b, t)
            x_a = ddpm_step(NoisyState(x_a, t), pred_a, sch,
                            noise if t > 1 else None)
            x_b = ddim_step(NoisyState(x_b, t), pred_b, t - 1, sch, eta=1.0,
                            noise=noise if t > 1 else None)
        # rounding near t=T is amplified by 1/sqrt(alpha_bar); the two
        # orderings of the same algebra stay well inside 1e-5
        assert np.abs(x_a - x_b).max() < 1e-5

    def test_same_seed_reproducible(self, sch):
        def denoise(x, t):
            return Prediction("x0", np.tanh(x))

        plan = make_plan(sch.timesteps, 10)
        a = sample(denoise, (1, 2, 8, 8), plan, sch, seed=9)
        b = sample(denoise, (1, 2, 8, 8), plan, sch, seed=9)
        assert a.tobytes() == b.tobytes()
        c = sample(denoise, (1, 2, 8, 8), plan, sch, seed=10)
        assert a.tobytes() != c.tobytes()

    def test_denoiser_called_once_per_plan_step(self, sch):
        calls = []

        def denoise(x, t):
            calls.append(t)
            return Prediction("x0", np.zeros_like(x))

        plan = make_plan(sch.timesteps, 25, eta=0.0)
        sample(denoise, (1, 1, 4, 4), plan, sch)
        assert calls == plan.tau[::-1]

    def test_seed_may_be_a_list(self, sch):
        def denoise(x, t):
            return Prediction("x0", np.zeros_like(x))

        plan = make_plan(sch.timesteps, 5)
        a = sample(denoise, (1, 1, 4, 4), plan, sch, seed=[3, 1])
        b = sample(denoise, (1, 1, 4, 4), plan, sch, seed=[3, 1])
        assert a.tobytes() == b.tobytes()

    def test_residual_base_and_clipping(self, sch):
        base = np.full((1, 1, 4, 4), 0.9, dtype=np.float32)
        resid = np.full((1, 1, 4, 4), 0.4, dtype=np.float32)

        def denoise(x, t):
            return Prediction("x0", resid)

        plan = make_plan(sch.timesteps, 5, eta=0.0)
        out = sample(denoise, base.shape, plan, sch, base=base,
                     range_hint=(0.0, 1.0))
        # 0.9 + 0.4 clips at the hint ceiling
        np.testing.assert_allclose(out, 1.0, atol=1e-5)
        unclipped = sample(denoise, base.shape, plan, sch, base=base)
        np.testing.assert_allclose(unclipped, 1.3, atol=1e-5)

    def test_ddpm_full_run(self):
        sch = cosine_schedule(30)
        plan = SamplerPlan(tau=list(range(1, 31)), kind="ddpm")

        def denoise(x, t):
            return Prediction("x0", np.zeros_like(x))

        out = sample(denoise, (1, 1, 4, 4), plan, sch, seed=0)
        assert out.shape == (1, 1, 4, 4)
        assert np.isfinite(out).all()
