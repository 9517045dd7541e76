import math

import numpy as np
import pytest

from synthrad import diffusion as df
from synthrad.autodiff import Tensor
from synthrad.data import ToyDatasetSpec, generate_toy_dataset, split_train_test
from synthrad.diffusion import ConfigError, DenoiserConfig, DenoiserNet, UnknownTokenError
from synthrad.optim import AdamState
from synthrad.rng import Rng

# product of (1 - beta) for the default 1000-step linear schedule, computed in exact
# rational arithmetic before the main build
DEFAULT_FINAL_ALPHA_BAR = 4.0358297653756835e-05

SMALL = DenoiserConfig(resolution=8, channels=(4, 8), time_dim=8, emb_dim=8, groups=2)


@pytest.fixture(scope="module")
def toy_split():
    examples, _ = generate_toy_dataset(ToyDatasetSpec(resolution=16, samples_per_class=6, seed=3))
    return split_train_test(examples, 0.8, 3)


class ZeroNet:
    resolution = 1

    def __call__(self, x, t, prompts):
        return Tensor(np.zeros(x.shape, np.float32))


class TestSchedule:
    def test_single_step(self):
        np.testing.assert_allclose(df.schedule_from_betas([0.1]).alpha_bars, [0.9], atol=1e-12)

    def test_two_steps(self):
        ab = df.schedule_from_betas([0.1, 0.2]).alpha_bars
        np.testing.assert_allclose(ab, [0.9, 0.72], atol=1e-6)

    def test_default_schedule(self):
        s = df.build_schedule()
        assert s.T == 1000
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bars[-1] < 0.01
        assert s.alpha_bars[-1] == pytest.approx(DEFAULT_FINAL_ALPHA_BAR, rel=1e-9)

    def test_linear_endpoints(self):
        s = df.build_schedule(50, 1e-3, 0.05)
        assert s.betas[0] == pytest.approx(1e-3) and s.betas[-1] == pytest.approx(0.05)

    @pytest.mark.parametrize("betas", [[0.0], [1.0], [0.5, -0.1], []])
    def test_bad_betas(self, betas):
        with pytest.raises(ConfigError):
            df.schedule_from_betas(betas)

    @pytest.mark.parametrize("kwargs", [{"T": 0}, {"beta_start": 0.03, "beta_end": 0.02}, {"beta_end": 1.0}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            df.build_schedule(**kwargs)


class TestForwardDiffusion:
    def test_limits(self):
        x0, eps = np.full((2, 2), 0.3), np.full((2, 2), -0.8)
        np.testing.assert_array_equal(df.mix(x0, eps, 1.0), x0.astype(np.float32))
        np.testing.assert_array_equal(df.mix(x0, eps, 0.0), eps.astype(np.float32))

    def test_hand_value(self):
        s = df.schedule_from_betas([0.75])
        out = df.forward_diffuse(np.array([1.0]), 1, np.array([0.5]), s)
        assert out[0] == pytest.approx(0.5 * 1.0 + math.sqrt(0.75) * 0.5, abs=1e-6)
        assert out[0] == pytest.approx(0.93301, abs=1e-5)

    @pytest.mark.parametrize("t", [0, 3])
    def test_step_out_of_range(self, t):
        with pytest.raises(ValueError):
            df.forward_diffuse(np.zeros(2), t, np.zeros(2), df.schedule_from_betas([0.1, 0.2]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            df.forward_diffuse(np.zeros(2), 1, np.zeros(3), df.schedule_from_betas([0.1]))

    @pytest.mark.parametrize("t", [1, 50, 100])
    def test_noising_statistics(self, t):
        s = df.build_schedule(100)
        n = 10_000
        x0 = np.full((n, 2, 2), 0.5)
        xt = df.forward_diffuse(x0, np.full(n, t), Rng(21, t).normal(x0.shape), s).astype(np.float64)
        ab = s.alpha_bars[t - 1]
        se = math.sqrt((1 - ab) / n)
        assert np.all(np.abs(xt.mean(0) - math.sqrt(ab) * 0.5) < 3 * se)
        np.testing.assert_allclose(xt.var(0), 1 - ab, rtol=0.05)

    @pytest.mark.parametrize("t", [10, 50])
    def test_two_step_marginal(self, t):
        s = df.build_schedule(100)
        n = 10_000
        rng = Rng(5, t)
        x0 = np.full((n, 3), 0.5)
        xt = df.forward_diffuse(x0, t, rng.normal(x0.shape), s).astype(np.float64)
        step = xt * math.sqrt(s.alphas[t]) + math.sqrt(s.betas[t]) * rng.normal(x0.shape, dtype=np.float64)
        direct = df.forward_diffuse(x0, t + 1, rng.normal(x0.shape), s).astype(np.float64)
        np.testing.assert_allclose(step.mean(0), direct.mean(0), rtol=0.05)
        np.testing.assert_allclose(step.var(0), direct.var(0), rtol=0.05)


class TestSimpleLoss:
    def test_perfect_prediction(self):
        e = Tensor(np.linspace(-1, 1, 8))
        assert df.simple_loss(e, e).item() == 0.0

    def test_constant_field(self):
        assert df.simple_loss(Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.full((2, 1, 3, 3), 0.5))).item() == 0.25

    def test_symmetric(self, nprng):
        a, b = Tensor(nprng.standard_normal(20)), Tensor(nprng.standard_normal(20))
        assert df.simple_loss(a, b).item() == df.simple_loss(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            df.simple_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestConditioning:
    def test_empty_prompt_is_null(self):
        assert df.token_ids([]) == [df.VOCABULARY.index(df.NULL_TOKEN)]

    def test_counts(self):
        m = df.token_counts([["edema", "top left"], []])
        assert m.shape == (2, len(df.VOCABULARY))
        assert m[0].sum() == 2 and m[0, df.VOCABULARY.index("top left")] == 1
        assert m[1, df.VOCABULARY.index(df.NULL_TOKEN)] == 1

    def test_unknown_token_suggests(self):
        with pytest.raises(UnknownTokenError) as err:
            df.token_ids(["edma"])
        assert "edema" in err.value.suggestions
        assert "Vocabulary:" in str(err.value)

    def test_prompt_changes_output(self):
        net = DenoiserNet(SMALL, seed=1)
        x = Tensor(Rng(0).normal((1, 1, 8, 8)))
        a = net(x, np.array([5]), [("edema",)]).data
        b = net(x, np.array([5]), [("nodule",)]).data
        assert a.shape == (1, 1, 8, 8)
        assert not np.array_equal(a, b)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            DenoiserConfig(resolution=10)
        with pytest.raises(ConfigError):
            DenoiserConfig(channels=(6, 8), groups=4)


class TestTraining:
    def _losses(self, train, steps=3):
        net = DenoiserNet(DenoiserConfig(resolution=16, channels=(4, 8), time_dim=8, emb_dim=8, groups=2), seed=2)
        return df.train_diffusion(train, net, df.build_schedule(20), AdamState(lr=1e-3), steps, 4, seed=9)

    def test_deterministic_losses(self, toy_split):
        train, _ = toy_split
        assert self._losses(train) == self._losses(train)

    def test_rejects_test_partition(self, toy_split):
        _, test = toy_split
        with pytest.raises(ValueError):
            self._losses(test)

    def test_rejects_plain_list(self, toy_split):
        train, _ = toy_split
        with pytest.raises(TypeError):
            self._losses(list(train))

    def test_nan_aborts(self, toy_split):
        train, _ = toy_split
        net = DenoiserNet(DenoiserConfig(resolution=16, channels=(4, 8), time_dim=8, emb_dim=8, groups=2))
        net.out.weight.data[:] = np.nan
        with pytest.raises(FloatingPointError):
            df.train_step(list(train[:2]), net, df.build_schedule(20), AdamState(), Rng(0))

    def test_resume_matches(self, toy_split):
        train, _ = toy_split
        cfg = DenoiserConfig(resolution=16, channels=(4, 8), time_dim=8, emb_dim=8, groups=2)
        sched = df.build_schedule(20)
        full, opt = DenoiserNet(cfg, 2), AdamState()
        df.train_diffusion(train, full, sched, opt, 4, 4, seed=1)
        part, opt2 = DenoiserNet(cfg, 2), AdamState()
        df.train_diffusion(train, part, sched, opt2, 2, 4, seed=1)
        df.train_diffusion(train, part, sched, opt2, 4, 4, seed=1, start_step=2)
        for (_, a), (_, b) in zip(full.named_parameters(), part.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()


class TestSampling:
    def test_zero_net_trajectory(self):
        betas = [0.1, 0.2, 0.3]
        s = df.schedule_from_betas(betas)
        seed = 4
        got = df.sample(ZeroNet(), s, [], seed, n=1)[0][0, 0]
        # scalar oracle drawing the same noise stream
        rng = Rng(seed, 2)
        x = float(rng.normal((1,))[0])
        for t in (3, 2, 1):
            x = x / math.sqrt(1 - betas[t - 1])
            if t > 1:
                x += math.sqrt(betas[t - 1]) * float(rng.normal((1,), dtype=np.float64)[0])
        assert got == pytest.approx(min(1.0, max(-1.0, x)), abs=1e-5)

    def test_deterministic_and_clamped(self):
        net = DenoiserNet(SMALL, seed=3)
        s = df.build_schedule(5, 0.05, 0.3)
        a = df.sample(net, s, ["edema", "top left"], seed=11, n=2)
        b = df.sample(net, s, ["edema", "top left"], seed=11, n=2)
        assert len(a) == 2 and a[0].shape == (8, 8)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
        assert all(np.abs(x).max() <= 1.0 for x in a)

    def test_unknown_token(self):
        with pytest.raises(UnknownTokenError):
            df.sample(ZeroNet(), df.schedule_from_betas([0.1]), ["edma"], 0, 1)
