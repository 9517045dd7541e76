import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from synthrad import autodiff as ad
from synthrad.autodiff import DomainError, ShapeError, Tape, Tensor
from synthrad.optim import AdamState, MissingGradError, adam_step

from conftest import max_grad_error
from gradcases import OP_NAMES, case_inputs


def _grad(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*ts)
    tape.backward(loss, wrt=ts)
    return [t.grad for t in ts]


class TestForward:
    def test_identity_kernel(self, nprng):
        x = nprng.standard_normal((1, 1, 4, 5)).astype(np.float32)
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_matmul_against_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
        np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_leaky_relu(self):
        out = ad.leaky_relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_allclose(out.data, [-0.2, 0.0, 2.0], rtol=0, atol=1e-7)

    def test_conv_matches_direct_loops(self, nprng):
        x = nprng.standard_normal((2, 3, 5, 6)).astype(np.float32)
        w = nprng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = nprng.standard_normal(4).astype(np.float32)
        xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 5, 6))
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(6):
                        ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, ref, rtol=1e-5, atol=1e-5)

    def test_tapwise_and_im2col_paths_agree(self, nprng):
        # out <= in channels takes the tap-wise path; out > in takes im2col
        x = nprng.standard_normal((2, 4, 6, 6)).astype(np.float32)
        w = nprng.standard_normal((3, 4, 3, 3)).astype(np.float32)
        narrow = ad.conv2d(Tensor(x), Tensor(w)).data
        w_wide = np.concatenate([w, np.zeros((3, 4, 3, 3), np.float32)])
        wide = ad.conv2d(Tensor(x), Tensor(w_wide)).data[:, :3]
        np.testing.assert_allclose(narrow, wide, rtol=1e-5, atol=1e-5)

    def test_upsample_and_pool(self):
        x = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
        up = ad.upsample2x(Tensor(x)).data
        np.testing.assert_array_equal(up[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
        np.testing.assert_array_equal(ad.avgpool2(Tensor(up)).data, x)

    def test_group_norm_statistics(self, nprng):
        x = nprng.standard_normal((2, 4, 5, 5)) * 3 + 2
        out = ad.group_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), 2).data
        g = out.reshape(2, 2, -1).astype(np.float64)
        np.testing.assert_allclose(g.mean(-1), 0, atol=1e-5)
        np.testing.assert_allclose(g.var(-1), 1, atol=1e-3)

    def test_storage_is_float32(self):
        assert Tensor([1, 2, 3]).data.dtype == np.float32
        assert ad.matmul(Tensor(np.eye(2)), Tensor(np.eye(2))).data.dtype == np.float32

    def test_cross_entropy_value(self):
        logits = np.array([[2.0, 0.0], [0.0, 1.0]])
        got = ad.cross_entropy(Tensor(logits), np.array([0, 0])).item()
        expected = (np.log1p(np.exp(-2.0)) + np.log1p(np.exp(1.0))) / 2
        assert got == pytest.approx(expected, rel=1e-6)


class TestErrors:
    def test_shape_mismatch_names_op_and_dims(self):
        with pytest.raises(ShapeError, match=r"matmul.*3.*4"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        with pytest.raises(ShapeError, match="add"):
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv2d"):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.5, 1.5])
    def test_bce_domain(self, p):
        with pytest.raises(DomainError):
            ad.bce(Tensor(np.array([p])), 1.0)

    def test_loss_must_be_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.scale(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y, wrt=[x])


class TestBackward:
    def test_square(self):
        (g,) = _grad(lambda x: ad.sum_all(ad.mul(x, x)), np.array([3.0]))
        np.testing.assert_array_equal(g, [6.0])

    def test_independent_input_gets_zeros(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        y = Tensor(np.ones(4), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(y, y))
        tape.backward(loss, wrt=[x, y])
        np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))

    def test_grads_accumulate_across_uses(self):
        (g,) = _grad(lambda x: ad.sum_all(ad.add(x, ad.add(x, x))), np.ones(4))
        np.testing.assert_array_equal(g, np.full(4, 3.0))

    def test_mse_conv_finite_differences(self, nprng):
        y = nprng.standard_normal((1, 1, 4, 4))

        def fn(x, k):
            return ad.mse(ad.conv2d(x, k), Tensor(y, dtype=x.data.dtype))

        arrays = [nprng.standard_normal((1, 1, 4, 4)), nprng.standard_normal((1, 1, 3, 3))]
        assert max_grad_error(fn, arrays, nprng) < 1e-4

    @pytest.mark.parametrize("op", OP_NAMES)
    @pytest.mark.parametrize("case", range(10))
    def test_gradient_check(self, op, case):
        rng = np.random.default_rng([OP_NAMES.index(op), case])
        fn, arrays = case_inputs(op, rng)
        assert max_grad_error(fn, arrays, rng) < 1e-4

    def test_linearity_through_add_and_concat(self, nprng):
        a = nprng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        b = nprng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        w = nprng.standard_normal((1, 4, 3, 3)).astype(np.float32)
        ga, gb = _grad(lambda x, y: ad.sum_all(ad.mul(ad.concat([x, y]), Tensor(w))), a, b)
        np.testing.assert_array_equal(ga, w[:, :2])
        np.testing.assert_array_equal(gb, w[:, 2:])
        w2 = w[:, :2]
        ga, gb = _grad(lambda x, y: ad.sum_all(ad.mul(ad.add(x, y), Tensor(w2))), a, b)
        np.testing.assert_array_equal(ga, w2)
        np.testing.assert_array_equal(gb, w2)

    def test_apply_op_records_on_given_tape(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        tape = Tape()
        y = ad.apply_op("leaky_relu", [x], tape=tape)
        loss = ad.apply_op("sum", [y], tape=tape)
        tape.backward(loss, wrt=[x])
        np.testing.assert_allclose(x.grad, [1.0, 0.2], rtol=1e-7)


class TestDeterminism:
    def _run(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        (gx, gw) = _grad(lambda a, b: ad.mean_all(ad.silu(ad.conv2d(a, b))), x, w)
        return gx.tobytes() + gw.tobytes()

    def test_bit_identical(self):
        assert self._run() == self._run()

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                      elements=st.floats(-10, 10, width=32)))
    def test_sum_gradient_is_ones(self, x):
        (g,) = _grad(ad.sum_all, x)
        np.testing.assert_array_equal(g, np.ones_like(x))


class TestAdam:
    def test_first_step_hand_evaluated(self):
        lr, b1, b2, eps, g = 0.1, 0.9, 0.999, 1e-8, 0.5
        m_hat = ((1 - b1) * g) / (1 - b1)
        v_hat = ((1 - b2) * g * g) / (1 - b2)
        expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert expected == pytest.approx(0.9, abs=1e-6)
        p = Tensor(np.array(1.0), requires_grad=True)
        p.grad = np.array(g, dtype=np.float32)
        adam_step([p], AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps))
        assert p.item() == pytest.approx(expected, abs=1e-6)

    def test_zero_grad_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2, np.float32)
        adam_step([p], AdamState())
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_missing_grad_names_param(self):
        p = Tensor(np.ones(2), requires_grad=True, name="conv.w")
        with pytest.raises(MissingGradError, match="conv.w"):
            adam_step([p], AdamState())

    def test_repeatable(self):
        def run():
            p = Tensor(np.array([0.3, -0.7]), requires_grad=True)
            st_ = AdamState(lr=0.01)
            for _ in range(2):
                p.grad = np.array([0.25, -1.5], np.float32)
                adam_step([p], st_)
            return p.data.tobytes()

        assert run() == run()
