import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlu import diffusion as df
from ctrlu import tensor as tn


@pytest.fixture(scope="module")
def sched():
    return df.make_schedule(100, 1e-4, 0.02)


class TestSchedule:
    def test_hand_product(self):
        s = df.make_schedule(2, 0.5, 0.5)
        assert s.alpha_bar.tolist() == [1.0, 0.5, 0.25]

    def test_default(self, sched):
        ab = sched.alpha_bar
        assert ab[0] == 1.0
        assert np.all(np.diff(ab) < 0)
        assert 0 < ab[100] < 1
        # scalar-loop product
        prod = 1.0
        for k in range(100):
            prod *= 1.0 - (1e-4 + k * (0.02 - 1e-4) / 99)
        assert ab[100] == pytest.approx(prod, abs=1e-12)
        assert ab[100] == pytest.approx(0.364, abs=1e-3)

    def test_cumulative_invariant(self, sched):
        for t in range(101):
            assert abs(sched.alpha_bar[t] - math.prod(1 - sched.beta[1:t + 1])) < 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            df.make_schedule(1)
        with pytest.raises(ValueError):
            df.make_schedule(10, 0.02, 0.01)
        with pytest.raises(ValueError):
            df.make_schedule(10, 0.0, 0.01)

    def test_immutable(self, sched):
        with pytest.raises(ValueError):
            sched.alpha_bar[3] = 0.5

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 300), st.floats(1e-5, 0.05), st.floats(0.0, 0.3))
    def test_monotone(self, T, start, extra):
        s = df.make_schedule(T, start, min(start + extra, 0.99))
        assert s.alpha_bar[0] == 1.0 and np.all(np.diff(s.alpha_bar) < 0) and np.all(s.alpha_bar > 0)


class TestNoising:
    def test_example(self):
        assert df.noise_at(0.25, np.array([1.0]), np.array([2.0])).data[0] == pytest.approx(
            0.5 + math.sqrt(0.75) * 2.0, abs=1e-12)
        assert df.noise_at(0.25, np.array([1.0]), np.array([2.0])).data[0] == pytest.approx(2.23205, abs=1e-5)

    def test_limits(self, sched):
        z0, eps = np.array([0.3, -0.7]), np.array([1.5, 0.2])
        assert np.array_equal(df.add_noise(sched, z0, 0, eps).data, z0)
        assert np.array_equal(df.noise_at(0.0, z0, eps).data, eps)

    def test_errors(self, sched):
        with pytest.raises(tn.ShapeError):
            df.add_noise(sched, np.zeros(3), 5, np.zeros(4))
        with pytest.raises(ValueError):
            df.add_noise(sched, np.zeros(3), 101, np.zeros(3))

    def test_forward_sample_invariant(self, sched):
        rng = np.random.default_rng(0)
        z0 = rng.uniform(-1, 1, (4, 5))
        fs = df.forward_sample(sched, z0, 37, rng)
        ab = sched.alpha_bar[37]
        assert np.max(np.abs(fs.zt.data - (np.sqrt(ab) * z0 + np.sqrt(1 - ab) * fs.eps.data))) < 1e-12

    @pytest.mark.parametrize("t", [1, 50, 100])
    def test_monte_carlo(self, sched, t):
        n = 100_000
        z0 = 0.7
        eps = np.random.default_rng(t).standard_normal(n)
        zt = df.add_noise(sched, np.full(n, z0), t, eps).data
        ab = sched.alpha_bar[t]
        var = 1 - ab
        assert abs(zt.mean() - np.sqrt(ab) * z0) < 3 * np.sqrt(var / n)
        assert abs(zt.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))


class TestRecover:
    def test_identity_all_t(self, sched):
        rng = np.random.default_rng(1)
        z0 = rng.uniform(-1, 1, (3, 4, 4, 3))
        eps = rng.standard_normal(z0.shape)
        for t in range(1, 101):
            back = df.recover_z0(sched, df.add_noise(sched, z0, t, eps), t, eps).data
            assert np.max(np.abs(back - z0)) < 1e-10

    def test_zero_eps_doubles(self):
        s = df.schedule_from_betas([0.5, 0.5])  # alpha_bar_2 = 0.25
        z = np.array([0.4, -1.2])
        assert np.allclose(df.recover_z0(s, z, 2, np.zeros(2)).data, 2 * z, atol=1e-15)

    def test_t0_error(self, sched):
        with pytest.raises(ValueError):
            df.recover_z0(sched, np.zeros(2), 0, np.zeros(2))

    def test_differentiable(self, sched):
        eps = tn.parameter(np.random.default_rng(2).standard_normal(6))
        w = np.random.default_rng(3).standard_normal(6)
        zt = np.random.default_rng(4).standard_normal(6)
        assert tn.gradcheck(lambda: tn.sum(df.recover_z0(sched, zt, 30, eps) * w), [eps]) < 1e-6


class TestDiffusionLoss:
    def test_perfect(self):
        e = np.random.default_rng(0).standard_normal((2, 3))
        assert df.diffusion_loss(e, e, e, e).item() == 0.0

    def test_offset(self):
        rng = np.random.default_rng(1)
        e1, e2 = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        assert df.diffusion_loss(e1 + 1, e1, e2, e2).item() == pytest.approx(1.0, abs=1e-12)

    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        p1, e1, p2, e2 = (rng.standard_normal((3, 4, 2)) for _ in range(4))
        total = 0.0
        for a, b in ((p1, e1), (p2, e2)):
            acc = 0.0
            for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
                acc += (x - y) ** 2
            total += acc / a.size
        assert abs(df.diffusion_loss(p1, e1, p2, e2).item() - total) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(tn.ShapeError):
            df.diffusion_loss(np.zeros(3), np.zeros(4), np.zeros(3), np.zeros(3))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        p1, e1, p2, e2 = (rng.standard_normal(5) for _ in range(4))
        assert df.diffusion_loss(p1, e1, p2, e2).item() == pytest.approx(
            df.diffusion_loss(p2, e2, p1, e1).item(), abs=1e-15)


class TestSampler:
    def test_timesteps(self):
        assert df.sampling_timesteps(100, 20)[:3] == [100, 95, 90]
        assert df.sampling_timesteps(100, 20)[-1] == 0
        with pytest.raises(ValueError):
            df.sampling_timesteps(100, 0)
        with pytest.raises(ValueError):
            df.sampling_timesteps(100, 101)

    def test_one_step_is_recover(self, sched):
        def den(z, t, label, cond):
            return tn.Tensor(0.3 * z.data + 0.1)

        out = df.sample(sched, den, None, 1, np.random.default_rng(5), shape=(2, 4, 4, 3), clip=None)
        zT = np.random.default_rng(5).standard_normal((2, 4, 4, 3))
        expect = df.recover_z0(sched, zT, 100, 0.3 * zT + 0.1).data
        assert np.array_equal(out, expect)

    def test_deterministic(self, sched):
        def den(z, t, label, cond):
            return tn.Tensor(np.tanh(z.data) * t / 100)

        a = df.sample(sched, den, None, 20, np.random.default_rng(9), shape=(3, 4, 4, 1))
        b = df.sample(sched, den, None, 20, np.random.default_rng(9), shape=(3, 4, 4, 1))
        assert a.tobytes() == b.tobytes()

    def test_true_noise_recovers_z0(self, sched):
        z0 = 0.42

        def oracle(z, t, label, cond):
            ab = sched.alpha_bar[t]
            return tn.Tensor((z.data - np.sqrt(ab) * z0) / np.sqrt(1 - ab))

        out = df.sample(sched, oracle, None, 20, np.random.default_rng(0), shape=(500, 1, 1, 1), clip=None)
        assert np.max(np.abs(out - z0)) < 1e-9

    def test_chain_matches_scalar_oracle(self, sched):
        """1-cell chain against a scalar loop written from the posterior variance form."""
        const = 0.3

        def den(z, t, label, cond):
            return tn.Tensor(np.full(z.shape, const))

        steps = 4
        out = df.sample(sched, den, None, steps, np.random.default_rng(11), shape=(1, 1, 1, 1), clip=None)
        rng = np.random.default_rng(11)
        z = float(rng.standard_normal())
        ts = [100, 75, 50, 25, 0]
        for t, s in zip(ts[:-1], ts[1:]):
            a_t, a_s = sched.alpha_bar[t], sched.alpha_bar[s]
            x0 = (z - math.sqrt(1 - a_t) * const) / math.sqrt(a_t)
            alpha = a_t / a_s
            mean = (math.sqrt(a_s) * (1 - alpha) * x0 + math.sqrt(alpha) * (1 - a_s) * z) / (1 - a_t)
            z = mean
            if s > 0:
                z += math.sqrt((1 - a_s) / (1 - a_t) * (1 - alpha)) * float(rng.standard_normal((1, 1, 1, 1))[0, 0, 0, 0])
        assert abs(out.item() - z) < 1e-12

    def test_clip_bounds_final(self, sched):
        def den(z, t, label, cond):
            return tn.Tensor(-5 * np.ones(z.shape))

        out = df.sample(sched, den, None, 5, np.random.default_rng(0), shape=(4, 2, 2, 1))
        assert np.all(np.abs(out) <= 1.0 + 1e-12)
