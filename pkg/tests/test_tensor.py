import numpy as np
import pytest

from pit import oracles
from pit import tensor as T

from conftest import assert_grad_close


def t64(arr, grad=True):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# forward values


def test_conv1d_hand_example_pad():
    # one channel, K=2 box filter: causal pad contributes a leading zero
    x = T.Tensor([[1.0, 2.0, 3.0, 4.0]])
    w = T.Tensor([[[1.0, 1.0]]])
    y = T.conv1d(x, w)
    assert np.allclose(y.data, [[1.0, 3.0, 5.0, 7.0]])


def test_conv1d_identity_single_tap():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(size=(2, 3, 7)))
    w = np.zeros((3, 3, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0] = 1.0
    for d in (1, 2, 5):
        y = T.conv1d(x, T.Tensor(w), dilation=d)
        assert np.array_equal(y.data, x.data)


def test_conv1d_dilated_taps():
    x = T.Tensor([[1.0, 0.0, 0.0, 0.0, 1.0]])
    w = T.Tensor([[[1.0, 1.0]]])
    y = T.conv1d(x, w, dilation=4)
    assert np.allclose(y.data, [[1.0, 0.0, 0.0, 0.0, 2.0]])


@pytest.mark.parametrize("t_in,stride", [(1, 1), (5, 2), (6, 2), (7, 3), (9, 4), (10, 1)])
def test_conv1d_output_length(t_in, stride):
    x = T.Tensor(np.ones((1, 2, t_in)))
    w = T.Tensor(np.ones((3, 2, 2)))
    y = T.conv1d(x, w, stride=stride)
    assert y.shape == (1, 3, -(-t_in // stride))


def test_conv1d_matches_reference_fuzz(rng):
    for _ in range(500):
        b = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        t_in = int(rng.integers(1, 12))
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 4))
        dilation = int(rng.integers(1, 4))
        x = rng.normal(size=(b, c_in, t_in))
        w = rng.normal(size=(c_out, c_in, k))
        bias = rng.normal(size=c_out)
        got = T.conv1d(t64(x), t64(w), t64(bias), stride=stride, dilation=dilation)
        want = oracles.reference_conv(x, w, bias, stride=stride, dilation=dilation)
        assert np.max(np.abs(got.data - want)) < 1e-6


def test_conv1d_channel_mismatch_rejected():
    with pytest.raises(ValueError):
        T.conv1d(T.Tensor(np.ones((1, 2, 4))), T.Tensor(np.ones((3, 5, 2))))


def test_conv1d_zero_input_channels_is_bias_generator():
    x = T.Tensor(np.zeros((2, 0, 6)))
    w = T.Tensor(np.zeros((3, 0, 1)))
    b = T.Tensor([1.0, -2.0, 0.5])
    y = T.conv1d(x, w, b)
    assert y.shape == (2, 3, 6)
    assert np.allclose(y.data[0, :, 0], [1.0, -2.0, 0.5])


def test_linear_examples():
    assert np.allclose(T.linear(T.Tensor([1.0, 2.0]), T.Tensor(np.eye(2))).data, [1.0, 2.0])
    y = T.linear(T.Tensor([1.0, 1.0]), T.Tensor([[2.0, 3.0]]), T.Tensor([1.0]))
    assert np.allclose(y.data, [6.0])
    with pytest.raises(ValueError):
        T.linear(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 5))))


def test_relu_and_abs():
    assert np.allclose(T.relu(T.Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert np.allclose(T.abs_(T.Tensor([-1.5, 0.0, 2.0])).data, [1.5, 0.0, 2.0])


def test_avgpool_example_and_window_check():
    x = T.Tensor(np.array([[[2.0, 4.0, 6.0, 8.0]]]))
    y = T.avgpool1d(x, window=2, stride=2)
    assert np.allclose(y.data, [[[3.0, 7.0]]])
    with pytest.raises(ValueError):
        T.avgpool1d(x, window=5)


def test_batchnorm_identity_params(rng):
    x = rng.normal(size=(4, 3, 10))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    state = T.BatchNormState(3, eps=1e-9)
    y = T.batchnorm1d(T.Tensor(x), state, train_mode=True)
    assert np.max(np.abs(y.data - x)) < 1e-4


def test_batchnorm_eval_uses_running_stats(rng):
    state = T.BatchNormState(2)
    x1 = T.Tensor(rng.normal(size=(8, 2, 5)))
    T.batchnorm1d(x1, state, train_mode=True)
    rm = state.running_mean.copy()
    x2 = T.Tensor(rng.normal(loc=3.0, size=(8, 2, 5)))
    T.batchnorm1d(x2, state, train_mode=False)
    assert np.array_equal(state.running_mean, rm)  # eval mode leaves stats alone


def test_heaviside_forward_and_idempotence():
    v = T.Tensor([0.2, 0.5, 0.9])
    h = T.heaviside_ste(v, 0.5)
    assert np.array_equal(h.data, [0.0, 1.0, 1.0])
    assert np.array_equal(T.heaviside_ste(h, 0.5).data, h.data)
    ones = T.heaviside_ste(T.Tensor(np.ones(5)), 0.5)
    assert np.array_equal(ones.data, np.ones(5))


def test_heaviside_backward_is_identity():
    v = t64([0.2, 0.7, 0.5])
    with T.Tape() as tape:
        h = T.heaviside_ste(v, 0.5)
        loss = T.sum_(T.cmul(h, np.array([2.0, 3.0, 5.0])))
    tape.backward(loss)
    assert np.array_equal(v.grad, [2.0, 3.0, 5.0])


def test_dropout_scaling_and_determinism():
    x = T.Tensor(np.ones((2, 3, 50)))
    a = T.dropout(x, 0.5, np.random.Generator(np.random.Philox(seed=[1, 2, 3, 0])))
    b = T.dropout(x, 0.5, np.random.Generator(np.random.Philox(seed=[1, 2, 3, 0])))
    assert np.array_equal(a.data, b.data)
    kept = a.data[a.data != 0]
    assert np.allclose(kept, 2.0)  # inverted scaling by 1/keep
    assert T.dropout(x, 0.0, np.random.default_rng(0)) is x


def test_softmax_ce_value():
    logits = T.Tensor([[0.0, 0.0], [0.0, 0.0]])
    loss = T.softmax_cross_entropy(logits, np.array([0, 1]))
    assert abs(loss.item() - np.log(2.0)) < 1e-6


def test_mse_value():
    loss = T.mse_loss(T.Tensor([1.0, 3.0]), [0.0, 0.0])
    assert abs(loss.item() - 5.0) < 1e-6


# ---------------------------------------------------------------------------
# backward plumbing


def test_backward_analytic_square():
    w = t64([1.0, 2.0])
    with T.Tape() as tape:
        loss = T.sum_(T.mul(w, w))
    tape.backward(loss)
    assert np.allclose(w.grad, [2.0, 4.0])


def test_backward_unreached_tensor_gets_zero_grad():
    w = t64([1.0, 2.0])
    other = t64([3.0])
    with T.Tape() as tape:
        loss = T.sum_(T.mul(w, w))
        _ = T.cmul(other, 2.0)  # on tape, but not feeding the loss
    tape.backward(loss)
    assert np.array_equal(other.grad, [0.0])


def test_backward_rejects_non_scalar():
    w = t64([1.0, 2.0])
    with T.Tape() as tape:
        y = T.mul(w, w)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_linear_grad_w_hand_case():
    x = t64([1.0, 2.0], grad=False)
    w = t64([[0.5, 0.5]])
    with T.Tape() as tape:
        loss = T.sum_(T.linear(x, w))
    tape.backward(loss)
    assert np.allclose(w.grad, [[1.0, 2.0]])


def test_grad_accumulates_across_reuse():
    w = t64([2.0])
    with T.Tape() as tape:
        loss = T.sum_(T.add(T.mul(w, w), T.mul(w, w)))
    tape.backward(loss)
    assert np.allclose(w.grad, [8.0])


# ---------------------------------------------------------------------------
# the finite-difference gradient suite (oracle: oracles.finite_diff)


def _check_op_grads(build, params, n_checked=None, rel=1e-4, abs_tol=1e-6):
    """build() -> scalar loss Tensor from the given float64 param Tensors."""
    for p in params:
        p.grad = None
    with T.Tape() as tape:
        loss = build()
    tape.backward(loss)
    for p in params[:n_checked]:
        analytic = p.grad

        def f(x, p=p):
            old = p.data
            p.data = x
            out = float(build().data)
            p.data = old
            return out

        numeric = oracles.finite_diff(f, p.data.copy())
        assert_grad_close(analytic, numeric, rel=rel, abs_tol=abs_tol)


def test_gradcheck_conv1d(rng):
    for _ in range(12):
        b = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 4))
        t_in = int(rng.integers(2, 9))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 3))
        x = t64(rng.normal(size=(b, c_in, t_in)))
        w = t64(rng.normal(size=(c_out, c_in, k)))
        bias = t64(rng.normal(size=c_out))
        coeff = rng.normal(size=(b, c_out, -(-t_in // stride)))
        _check_op_grads(
            lambda: T.sum_(T.cmul(T.conv1d(x, w, bias, stride=stride, dilation=dilation), coeff)),
            [x, w, bias])


def test_gradcheck_linear(rng):
    for _ in range(8):
        b, i, o = (int(rng.integers(1, 5)) for _ in range(3))
        x, w, bias = t64(rng.normal(size=(b, i))), t64(rng.normal(size=(o, i))), t64(rng.normal(size=o))
        coeff = rng.normal(size=(b, o))
        _check_op_grads(lambda: T.sum_(T.cmul(T.linear(x, w, bias), coeff)), [x, w, bias])


def test_gradcheck_batchnorm_train_and_eval(rng):
    for train in (True, False):
        for _ in range(6):
            b, c, t = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 8))
            state = T.BatchNormState(c, dtype=np.float64)
            state.scale = t64(rng.normal(size=c) + 1.5)
            state.shift = t64(rng.normal(size=c))
            state.running_mean = rng.normal(size=c)
            state.running_var = rng.uniform(0.5, 2.0, size=c)
            x = t64(rng.normal(size=(b, c, t)))
            coeff = rng.normal(size=(b, c, t))
            frozen_mean = state.running_mean.copy()
            frozen_var = state.running_var.copy()

            def build():
                # keep running stats fixed so repeated forwards are the same function
                state.running_mean = frozen_mean.copy()
                state.running_var = frozen_var.copy()
                return T.sum_(T.cmul(T.batchnorm1d(x, state, train_mode=train), coeff))

            _check_op_grads(build, [x, state.scale, state.shift])


def test_gradcheck_avgpool(rng):
    for _ in range(6):
        b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        t_in = int(rng.integers(4, 10))
        window = int(rng.integers(1, t_in + 1))
        stride = int(rng.integers(1, 4))
        x = t64(rng.normal(size=(b, c, t_in)))
        t_out = (t_in - window) // stride + 1
        coeff = rng.normal(size=(b, c, t_out))
        _check_op_grads(lambda: T.sum_(T.cmul(T.avgpool1d(x, window, stride), coeff)), [x])


def test_gradcheck_elementwise_suite(rng):
    for _ in range(10):
        n = int(rng.integers(1, 6))
        a = t64(rng.normal(size=n) + 0.3)  # keep away from |.|'s kink
        b = t64(rng.normal(size=n))
        m = rng.normal(size=(n, n))
        coeff = rng.normal(size=n)
        _check_op_grads(lambda: T.sum_(T.cmul(T.mul(a, b), coeff)), [a, b])
        _check_op_grads(lambda: T.sum_(T.cmul(T.abs_(a), coeff)), [a])
        _check_op_grads(lambda: T.sum_(T.cmul(T.add(a, b), coeff)), [a, b])
        _check_op_grads(lambda: T.sum_(T.matvec(m, a)), [a])
        _check_op_grads(lambda: T.sum_(T.cmul(T.relu(b), coeff)), [b])


def test_gradcheck_scaling_ops(rng):
    for _ in range(6):
        b, c, t, k = 2, int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        x = t64(rng.normal(size=(b, c, t)))
        v = t64(rng.normal(size=c) + 1.2)
        w = t64(rng.normal(size=(c, 2, k)))
        vk = t64(rng.normal(size=k) + 1.2)
        coeff_x = rng.normal(size=(b, c, t))
        coeff_w = rng.normal(size=(c, 2, k))
        _check_op_grads(lambda: T.sum_(T.cmul(T.scale_channels(x, v), coeff_x)), [x, v])
        _check_op_grads(lambda: T.sum_(T.cmul(T.scale_out_channels(w, v), coeff_w)), [w, v])
        _check_op_grads(lambda: T.sum_(T.cmul(T.scale_taps(w, vk), coeff_w)), [w, vk])


def test_gradcheck_embed_channels(rng):
    x = t64(rng.normal(size=(2, 2, 5)))
    coeff = rng.normal(size=(2, 4, 5))
    _check_op_grads(lambda: T.sum_(T.cmul(T.embed_channels(x, [1, 3], 4), coeff)), [x])


def test_gradcheck_losses(rng):
    for _ in range(8):
        b, k = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        logits = t64(rng.normal(size=(b, k)))
        labels = rng.integers(0, k, size=b)
        _check_op_grads(lambda: T.softmax_cross_entropy(logits, labels), [logits])
        pred = t64(rng.normal(size=(b, k)))
        target = rng.normal(size=(b, k))
        _check_op_grads(lambda: T.mse_loss(pred, target), [pred])


def test_gradcheck_dropout_fixed_mask(rng):
    x = t64(rng.normal(size=(2, 3, 6)))
    coeff = rng.normal(size=(2, 3, 6))
    seed = [9, 0, 0, 1]

    def build():
        gen = np.random.Generator(np.random.Philox(seed=seed))
        return T.sum_(T.cmul(T.dropout(x, 0.4, gen), coeff))

    _check_op_grads(build, [x])


# ---------------------------------------------------------------------------
# optimizers


def test_adam_first_step_closed_form():
    p = T.Tensor([1.0])
    T.adam_step([p], [np.array([1.0])], {}, lr=0.1)
    # first Adam step moves by ~lr regardless of gradient scale
    assert abs(p.data[0] - 0.9) < 1e-6


def test_adam_zero_grad_keeps_params():
    p = T.Tensor([1.0, 2.0])
    T.adam_step([p], [np.zeros(2)], {}, lr=0.1)
    assert np.allclose(p.data, [1.0, 2.0])


def test_sgd_step():
    p = T.Tensor([3.0])
    T.sgd_step([p], [np.array([2.0])], {}, lr=0.5, momentum=0.0)
    assert abs(p.data[0] - 2.0) < 1e-7


def test_optimizer_classes_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = T.Tensor(rng.normal(size=4).astype(np.float32), requires_grad=True)
        opt = T.Adam([p], lr=1e-2)
        for step in range(20):
            with T.Tape() as tape:
                loss = T.sum_(T.mul(p, p))
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
        return p.data.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)


def test_float32_default_storage():
    t = T.Tensor([1.0, 2.0])
    assert t.dtype == np.float32
    y = T.conv1d(T.Tensor(np.ones((1, 1, 4), dtype=np.float32)),
                 T.Tensor(np.ones((1, 1, 2), dtype=np.float32)))
    assert y.dtype == np.float32
    # float64 ndarrays keep their precision (gradient-check path)
    assert T.Tensor(np.zeros(3)).dtype == np.float64
