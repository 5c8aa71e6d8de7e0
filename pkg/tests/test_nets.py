import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlu import synthdata
from ctrlu import tensor as tn
from ctrlu.nets import (
    Adam,
    Denoiser,
    DenoiserArch,
    RewardArch,
    RewardModel,
    RewardTrainingError,
    patch_indices,
    pretrain_reward,
)
from ctrlu.uncertainty import dual_forward, total_loss

from conftest import randomize


def small_denoiser(seed=0, **kw):
    arch = DenoiserArch(4, 4, 3, 4, T=10, hidden=8, depth=2, cond_dim=2, cell_hidden=4, **kw)
    return Denoiser(arch, np.random.default_rng(seed))


def inputs(seed=0, B=2, cond_ch=4):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, 4, 4, 3)), np.eye(cond_ch)[rng.integers(0, cond_ch, (B, 4, 4))]


class TestDenoiser:
    def test_zero_init(self):
        z, c = inputs()
        assert np.array_equal(small_denoiser()(z, 5, 0, c).data, np.zeros(z.shape))

    def test_deterministic(self):
        m = randomize(small_denoiser(), 1)
        z, c = inputs()
        assert m(z, 3, 0, c).data.tobytes() == m(z, 3, 0, c).data.tobytes()

    def test_same_seed_same_init(self):
        assert small_denoiser(4).param_hash() == small_denoiser(4).param_hash()
        assert small_denoiser(4).param_hash() != small_denoiser(5).param_hash()

    def test_per_sample_t_and_label(self):
        m = randomize(small_denoiser(num_labels=3), 2)
        z, c = inputs(B=3)
        joint = m(z, np.array([1, 5, 10]), np.array([0, 2, 1]), c).data
        for i, (t, lab) in enumerate(((1, 0), (5, 2), (10, 1))):
            assert np.allclose(joint[i], m(z[i:i + 1], t, lab, c[i:i + 1]).data[0], atol=1e-13)

    def test_errors(self):
        m = small_denoiser()
        z, c = inputs()
        with pytest.raises(tn.ShapeError):
            m(z, 3, 0, c[:, :3])
        with pytest.raises(tn.ShapeError):
            m(z[:, :, :, :2], 3, 0, c)
        with pytest.raises(ValueError):
            m(z, 0, 0, c)
        with pytest.raises(ValueError):
            m(z, 11, 0, c)

    def test_gradcheck_all_params(self):
        m = randomize(small_denoiser(), 3)
        z, c = inputs(3)
        eps = np.random.default_rng(9).standard_normal(z.shape)
        ts = np.array([2, 7])

        def loss():
            return tn.sum(tn.square(m(z, ts, 0, c) - eps))

        assert tn.gradcheck(loss, m.parameters()) < 1e-4

    def test_every_param_gets_gradient(self):
        m = randomize(small_denoiser(), 4)
        z, c = inputs(4)
        tn.sum(tn.square(m(z, 4, 0, c))).backward()
        for name, p in m.params.items():
            assert p.grad is not None and np.any(p.grad != 0), name

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(1, 3))
    def test_output_shape(self, H, W, C, B):
        arch = DenoiserArch(H, W, C, 2, T=5, hidden=4, depth=1, cond_dim=2, cell_hidden=3)
        m = randomize(Denoiser(arch, np.random.default_rng(0)), 0)
        z = np.ones((B, H, W, C))
        assert m(z, 2, 0, np.zeros((B, H, W, 2))).shape == z.shape


def small_reward(head="probability", seed=0, patch=3, hidden=5):
    classes = 4 if head == "probability" else 1
    return RewardModel(RewardArch(4, 4, 3, head, classes, patch, hidden), np.random.default_rng(seed))


class TestReward:
    def test_rows_sum_to_one(self):
        r = small_reward()
        x = np.random.default_rng(0).uniform(-3, 3, (5, 4, 4, 3))
        assert np.max(np.abs(r(x).data.sum(-1) - 1)) < 1e-9

    def test_scalar_shape(self):
        assert small_reward("scalar")(np.zeros((2, 4, 4, 3))).shape == (2, 4, 4, 1)

    def test_grid_mismatch(self):
        with pytest.raises(tn.ShapeError):
            small_reward()(np.zeros((1, 5, 4, 3)))

    def test_bad_arch(self):
        with pytest.raises(ValueError):
            RewardArch(4, 4, head="ranking")
        with pytest.raises(ValueError):
            RewardArch(4, 4, patch=2)

    def test_patch_indices(self):
        idx = patch_indices(3, 3, 3)
        assert idx.shape == (9, 9)
        assert idx[4].tolist() == list(range(9))
        assert idx[0].tolist() == [0, 0, 1, 0, 0, 1, 3, 3, 4]

    @pytest.mark.parametrize("head", ["probability", "scalar"])
    def test_param_gradcheck(self, head):
        r = small_reward(head, 1)
        x = np.random.default_rng(1).standard_normal((2, 4, 4, 3))
        w = np.random.default_rng(2).standard_normal(r(x).shape)
        assert tn.gradcheck(lambda: tn.sum(r(x) * w), r.parameters()) < 1e-4

    def test_input_gradcheck_frozen(self):
        r = small_reward(seed=2).freeze()
        x = tn.parameter(np.random.default_rng(3).standard_normal((2, 4, 4, 3)))
        c = np.eye(4)[np.random.default_rng(4).integers(0, 4, (2, 4, 4))]

        def ce():
            return -tn.sum(c * tn.log(tn.clamp(r(x), tn.PROB_FLOOR, 1.0)))

        assert tn.gradcheck(ce, [x]) < 1e-4
        assert all(p.grad is None for p in r.parameters())

    def test_frozen_through_finetune_step(self, mini):
        before = mini.reward.param_hash()
        opt = Adam(mini.denoiser.params, lr=1e-2)
        pair = dual_forward(mini.schedule, mini.denoiser, mini.z0, mini.cond, mini.labels, 2, 3,
                            mini.eps1, mini.eps2)
        _, loss = total_loss(pair, mini.cond, mini.reward, schedule=mini.schedule, mu=0.1)
        opt.zero_grad()
        loss.backward()
        opt.step()
        assert mini.reward.param_hash() == before


def two_class_splits(n=300):
    ds = synthdata.gen_mask_task(n, 12, 12, K=2, seed=3)
    return synthdata.split(ds, (0.6, 0.2, 0.2), seed=0)


class TestPretrainReward:
    def test_separable_two_class(self):
        train, val, _ = two_class_splits()
        r = RewardModel(RewardArch(12, 12, 3, "probability", 2, 1, 8), np.random.default_rng(0))
        r, rep = pretrain_reward(r, train, val, band=(0.99, 1.0), max_epochs=20, seed=0)
        assert rep.value > 0.95 and rep.in_band and r.frozen

    def test_empty(self):
        train, val, _ = two_class_splits(50)
        r = RewardModel(RewardArch(12, 12, 3, "probability", 2), np.random.default_rng(0))
        with pytest.raises(ValueError):
            pretrain_reward(r, train.subset([]), val, band=(0.9, 1.0), max_epochs=2)

    def test_deterministic(self):
        train, val, _ = two_class_splits(80)
        hashes = []
        for _ in range(2):
            r = RewardModel(RewardArch(12, 12, 3, "probability", 2, 1, 4), np.random.default_rng(7))
            r, _ = pretrain_reward(r, train, val, band=(0.0, 1.0), max_epochs=1, seed=5)
            hashes.append(r.param_hash())
        assert hashes[0] == hashes[1]

    def test_unreachable_band(self):
        train, val, _ = two_class_splits(60)
        r = RewardModel(RewardArch(12, 12, 3, "probability", 2, 1, 0), np.random.default_rng(1))
        with pytest.raises(RewardTrainingError, match="band"):
            pretrain_reward(r, train, val, band=(1.01, 1.0), max_epochs=1)

    def test_scalar_head_rmse(self):
        ds = synthdata.gen_scalar_task(200, 8, 8, seed=1)
        train, val, _ = synthdata.split(ds, (0.6, 0.2, 0.2))
        r = RewardModel(RewardArch(8, 8, 3, "scalar", 1, 1, 8), np.random.default_rng(0))
        r, rep = pretrain_reward(r, train, val, band=(0.0, 0.1), max_epochs=30, seed=0)
        assert rep.metric == "rmse" and rep.value <= 0.1


class TestAdam:
    def test_first_step(self):
        w = tn.parameter(np.array([1.0, -2.0, 0.5]))
        opt = Adam({"w": w}, lr=0.1, weight_decay=0.01)
        tn.sum(w * np.array([3.0, -1.0, 0.0])).backward()
        opt.step()
        # bias-corrected first step moves by lr * g/|g| plus decoupled decay
        expect = np.array([1.0, -2.0, 0.5]) - 0.1 * (np.array([1.0, -1.0, 0.0]) + 0.01 * np.array([1.0, -2.0, 0.5]))
        assert np.allclose(w.data, expect, atol=1e-8)

    def test_state_roundtrip(self):
        w = tn.parameter(np.ones(3))
        opt = Adam({"w": w})
        for _ in range(3):
            opt.zero_grad()
            tn.sum(tn.square(w)).backward()
            opt.step()
        other = Adam({"w": tn.parameter(np.ones(3))})
        other.load_state_arrays(opt.state_arrays())
        assert other.step_count == 3 and np.array_equal(other.v["w"], opt.v["w"])
