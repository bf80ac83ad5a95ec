import numpy as np
import pytest

from zinbvae.autodiff import Tape, Tensor, parameter
from zinbvae.errors import NumericalError, ShapeError

from fdcheck import finite_difference, max_rel_err


def test_affine_identity():
    t = Tape()
    x = Tensor([[1.0, 2.0]])
    out = t.affine(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_affine_sum_case():
    t = Tape()
    out = t.affine(Tensor([[1.0, 1.0]]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [[3.0]])


def test_affine_bias_gradient_is_ones():
    t = Tape()
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3)))
    w = parameter(np.random.default_rng(1).normal(size=(3, 2)))
    b = parameter(np.zeros(2))
    grads = t.backward(t.sum(t.affine(x, w, b)))
    np.testing.assert_array_equal(grads[b.tid], np.ones(2))


def test_affine_bias_gradient_sums_over_batch():
    t = Tape()
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    w = parameter(np.random.default_rng(1).normal(size=(3, 2)))
    b = parameter(np.zeros(2))
    grads = t.backward(t.sum(t.affine(x, w, b)))
    np.testing.assert_array_equal(grads[b.tid], np.full(2, 4.0))


def test_affine_shape_mismatch():
    t = Tape()
    with pytest.raises(ShapeError):
        t.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))


def test_activation_values():
    t = Tape()
    np.testing.assert_array_equal(t.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert t.sigmoid(Tensor(0.0)).data == pytest.approx(0.5)
    # softplus(0) = ln 2
    assert t.softplus(Tensor(0.0)).data == pytest.approx(0.6931471805599453, abs=1e-15)


def test_exp_clamp():
    t = Tape()
    x = parameter([40.0, 1.0])
    y = t.exp(x)
    assert y.data[0] == pytest.approx(np.exp(30.0))
    grads = t.backward(t.sum(y))
    assert grads[x.tid][0] == 0.0
    assert grads[x.tid][1] == pytest.approx(np.e)


def test_backward_square():
    t = Tape()
    x = parameter(3.0)
    loss = t.mul(x, x)
    grads = t.backward(loss)
    assert grads[x.tid] == pytest.approx(6.0)


def test_backward_relu_sum():
    t = Tape()
    x = parameter([-1.0, 2.0])
    grads = t.backward(t.sum(t.relu(x)))
    np.testing.assert_array_equal(grads[x.tid], [0.0, 1.0])


def test_fanout_gradients_sum():
    # y = x*x + x  =>  dy/dx = 2x + 1
    t = Tape()
    x = parameter([1.5, -0.5])
    loss = t.sum(t.add(t.mul(x, x), x))
    grads = t.backward(loss)
    np.testing.assert_allclose(grads[x.tid], 2.0 * x.data + 1.0, rtol=1e-12)


def test_backward_requires_scalar_loss():
    t = Tape()
    x = parameter([1.0, 2.0])
    y = t.mul(x, x)
    with pytest.raises(ShapeError):
        t.backward(y)


def test_backward_fills_zero_for_unused_leaf():
    t = Tape()
    x = parameter([1.0])
    unused = parameter([5.0, 6.0])
    grads = t.backward(t.sum(t.mul(x, x)), leaves=[x, unused])
    np.testing.assert_array_equal(grads[unused.tid], [0.0, 0.0])


def test_nan_is_an_error():
    t = Tape()
    with pytest.raises(NumericalError):
        t.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(NumericalError):
        t.log(Tensor([-1.0]))


def _random_net_loss(tape, x, w1, b1, w2, b2, gamma, beta, rm, rv, drop_rng, mode):
    h = tape.affine(x, w1, b1)
    h = tape.batch_norm(h, gamma, beta, rm, rv, mode=mode, update_stats=False)
    h = tape.relu(h)
    h = tape.dropout(h, 0.25, mode, drop_rng)
    h = tape.affine(h, w2, b2)
    a = tape.softplus(h)
    b = tape.sigmoid(h)
    c = tape.exp(tape.clip(h, -3.0, 3.0))
    d = tape.lgamma(tape.add(a, Tensor(0.5)))
    e = tape.logaddexp(a, b)
    mix = tape.add(tape.mul(a, b), tape.sub(tape.div(c, Tensor(2.0)), d))
    mix = tape.add(mix, tape.select(h.data > 0, e, tape.neg(e)))
    return tape.mean(mix)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_finite_difference_random_networks(mode):
    # every op composed into one graph, checked against central differences
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(5, 4)))
        w1 = parameter(rng.normal(size=(4, 3)) * 0.7)
        b1 = parameter(rng.normal(size=3) * 0.1)
        w2 = parameter(rng.normal(size=(3, 3)) * 0.7)
        b2 = parameter(rng.normal(size=3) * 0.1)
        gamma = parameter(rng.uniform(0.5, 1.5, size=3))
        beta = parameter(rng.normal(size=3) * 0.1)
        rm = rng.normal(size=3) * 0.1
        rv = rng.uniform(0.5, 2.0, size=3)

        def run():
            tape = Tape()
            loss = _random_net_loss(
                tape,
                x,
                w1,
                b1,
                w2,
                b2,
                gamma,
                beta,
                rm.copy(),
                rv.copy(),
                np.random.default_rng(seed + 1),
                mode,
            )
            return tape, loss

        tape, loss = run()
        grads = tape.backward(loss, leaves=[w1, b1, w2, b2, gamma, beta])
        fd = finite_difference(
            lambda: float(run()[1].data),
            [w1.data, b1.data, w2.data, b2.data, gamma.data, beta.data],
        )
        for analytic_key, numeric in zip([w1, b1, w2, b2, gamma, beta], fd):
            assert max_rel_err(grads[analytic_key.tid], numeric) < 1e-4, f"seed={seed}"


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(7)
        tape = Tape()
        x = Tensor(np.random.default_rng(3).normal(size=(6, 4)))
        w = parameter(np.random.default_rng(4).normal(size=(4, 2)))
        b = parameter(np.zeros(2))
        h = tape.dropout(t_relu := tape.relu(tape.affine(x, w, b)), 0.5, "train", rng)
        loss = tape.sum(t_sig := tape.sigmoid(h))
        grads = tape.backward(loss, leaves=[w, b])
        return loss.data.copy(), grads[w.tid].copy(), grads[b.tid].copy()

    l1, gw1, gb1 = run()
    l2, gw2, gb2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(gw1, gw2)
    assert np.array_equal(gb1, gb2)


class TestBatchNorm:
    def test_train_mode_normalizes_to_shift_and_scale(self):
        rng = np.random.default_rng(0)
        t = Tape()
        x = Tensor(rng.normal(loc=5.0, scale=3.0, size=(64, 4)))
        gamma = Tensor(np.array([1.0, 2.0, 0.5, 1.5]))
        beta = Tensor(np.array([0.0, -1.0, 2.0, 0.3]))
        out = t.batch_norm(x, gamma, beta, np.zeros(4), np.ones(4), "train")
        np.testing.assert_allclose(out.data.mean(axis=0), beta.data, atol=1e-10)
        np.testing.assert_allclose(out.data.std(axis=0), gamma.data, rtol=1e-3)

    def test_zero_variance_column_yields_shift(self):
        t = Tape()
        x = Tensor(np.full((8, 2), 3.0))
        out = t.batch_norm(x, Tensor(np.ones(2)), Tensor(np.array([0.7, -0.2])), np.zeros(2), np.ones(2), "train")
        np.testing.assert_allclose(out.data, np.broadcast_to([0.7, -0.2], (8, 2)), atol=1e-12)

    def test_eval_identity_with_unit_stats(self):
        t = Tape()
        x = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
        out = t.batch_norm(
            x, Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), "eval", eps=0.0
        )
        np.testing.assert_allclose(out.data, x.data, rtol=1e-12)

    def test_batch_of_one_in_train_mode_is_error(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.batch_norm(
                Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), "train"
            )

    def test_running_stats_update(self):
        t = Tape()
        rm, rv = np.zeros(2), np.ones(2)
        x = Tensor(np.array([[0.0, 10.0], [2.0, 14.0]]))
        t.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, "train", momentum=0.9)
        np.testing.assert_allclose(rm, 0.9 * 0.0 + 0.1 * np.array([1.0, 12.0]))
        np.testing.assert_allclose(rv, 0.9 * 1.0 + 0.1 * np.array([1.0, 4.0]))


class TestDropout:
    def test_rate_zero_is_identity(self):
        t = Tape()
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.dropout(x, 0.0, "train", np.random.default_rng(0)) is x

    def test_eval_mode_is_identity(self):
        t = Tape()
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.dropout(x, 0.9, "eval", np.random.default_rng(0)) is x

    def test_rate_one_rejected(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.dropout(Tensor(np.ones(3)), 1.0, "train", np.random.default_rng(0))

    def test_inverted_scaling_preserves_mean(self):
        # Monte-Carlo: mean over 1e5 entries stays within 1% of the input mean
        t = Tape()
        x = Tensor(np.ones((100, 1000)))
        out = t.dropout(x, 0.5, "train", np.random.default_rng(42))
        assert abs(out.data.mean() - 1.0) < 0.01
