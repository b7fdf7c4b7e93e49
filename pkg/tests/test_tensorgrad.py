import itertools

import numpy as np
import pytest

from advspeech import tensorgrad as tg
from advspeech.errors import ContractError, ShapeError

rng = np.random.default_rng(1234)


def _positive(shape):
    return rng.uniform(0.5, 2.0, size=shape)


ELEMENTWISE = [
    ("add", lambda x: tg.sum(tg.add(x, x * x))),
    ("subtract", lambda x: tg.sum(tg.subtract(x * x, x))),
    ("multiply", lambda x: tg.sum(tg.multiply(x, tg.tanh(x)))),
    ("add_scalar", lambda x: tg.sum(tg.add_scalar(x, 3.0) * x)),
    ("mul_scalar", lambda x: tg.sum(tg.mul_scalar(x * x, -2.5))),
    ("leaky_relu", lambda x: tg.sum(tg.leaky_relu(x) * x)),
    ("tanh", lambda x: tg.sum(tg.tanh(x))),
    ("sigmoid", lambda x: tg.sum(tg.sigmoid(x))),
    ("exp", lambda x: tg.sum(tg.exp(x))),
    ("mean", lambda x: tg.mean(x * x)),
    ("l2_norm", lambda x: tg.l2_norm(x)),
]


@pytest.mark.parametrize("name,f", ELEMENTWISE, ids=[name for name, _ in ELEMENTWISE])
def test_elementwise_gradients_match_finite_differences(name, f):
    for _ in range(100):
        # stay away from the leaky_relu kink
        x = rng.normal(size=5)
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
        assert tg.finite_diff_check(f, tg.Tensor(x), h=1e-6) <= 1e-4


def test_positive_domain_gradients():
    for _ in range(100):
        x = tg.Tensor(_positive(4))
        assert tg.finite_diff_check(lambda t: tg.sum(tg.log(t)), x, h=1e-6) <= 1e-4
        assert tg.finite_diff_check(lambda t: tg.sum(tg.power(t, 1.5)), x, h=1e-6) <= 1e-4


def test_sign_has_zero_gradient():
    x = tg.Tensor(rng.normal(size=6), requires_grad=True)
    tg.backward(tg.sum(tg.sign(x) * 3.0 + x))
    assert np.allclose(x.grad, 1.0)


def test_clamp_min_passes_gradient_above_floor_only():
    x = tg.Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    tg.backward(tg.sum(tg.clamp_min(x, 0.0)))
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0])


def _weights(*shape):
    return tg.Tensor(np.linspace(-1.0, 1.0, int(np.prod(shape))).reshape(shape))


STRUCTURAL = [
    ("matmul", (3, 4), lambda x: tg.sum(tg.tanh(tg.matmul(x, _weights(4, 2))))),
    ("transpose", (3, 4), lambda x: tg.sum(tg.transpose(x) * _weights(4, 3))),
    ("reshape", (3, 4), lambda x: tg.sum(tg.tanh(tg.reshape(x, (2, 6))))),
    ("softmax", (2, 5), lambda x: tg.sum(tg.softmax(x, scaled=True) * _weights(2, 5))),
    ("log_softmax", (3, 4), lambda x: tg.sum(tg.log_softmax(x) * _weights(3, 4))),
    ("slice_axis", (3, 8), lambda x: tg.sum(tg.tanh(tg.slice_axis(x, 1, 1, 8, 2)))),
    ("crop", (2, 9), lambda x: tg.sum(tg.tanh(tg.crop(x, 5)))),
    ("pad", (2, 4), lambda x: tg.sum(tg.tanh(tg.pad(x, 2, 3)))),
    ("upsample2", (2, 5), lambda x: tg.sum(tg.tanh(tg.upsample2(x, "linear")) * 1.3)),
    ("frame", (20,), lambda x: tg.sum(tg.tanh(tg.frame(x, 8, 4)))),
    ("overlap_add", (3, 8), lambda x: tg.sum(tg.tanh(tg.overlap_add(x, 4, 16)))),
]


@pytest.mark.parametrize("name,shape,f", STRUCTURAL, ids=[name for name, _, _ in STRUCTURAL])
def test_structural_gradients(name, shape, f):
    for _ in range(20):
        assert tg.finite_diff_check(f, tg.Tensor(rng.normal(size=shape)), h=1e-6) <= 1e-3


def test_concatenate_gradient():
    other = tg.Tensor(rng.normal(size=(2, 3)))

    def f(x):
        return tg.sum(tg.tanh(tg.concatenate([x, other], axis=1)) * 2.0)

    assert tg.finite_diff_check(f, tg.Tensor(rng.normal(size=(2, 4)))) <= 1e-3


def test_conv1d_gradients_for_input_weight_and_bias():
    x0 = rng.normal(size=(3, 12))
    w0 = rng.normal(size=(4, 3, 5))
    b0 = rng.normal(size=4)
    for padding in ("same", 0, (1, 3)):

        def loss(x, w, b):
            return tg.sum(tg.tanh(tg.conv1d(x, w, b, padding=padding)))

        x, w, b = tg.Tensor(x0), tg.Tensor(w0), tg.Tensor(b0)
        assert tg.finite_diff_check(lambda t: loss(t, w, b), x) <= 1e-3
        assert tg.finite_diff_check(lambda t: loss(x, t, b), w) <= 1e-3
        assert tg.finite_diff_check(lambda t: loss(x, w, t), b) <= 1e-3


def test_conv1d_matches_direct_correlation():
    x = rng.normal(size=(2, 10))
    w = rng.normal(size=(3, 2, 3))
    out = tg.conv1d(tg.Tensor(x), tg.Tensor(w), padding=0).data
    expected = np.zeros((3, 8))
    for o in range(3):
        for t in range(8):
            expected[o, t] = np.sum(w[o] * x[:, t : t + 3])
    assert np.allclose(out, expected)


def test_conv1d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        tg.conv1d(tg.Tensor(np.zeros((2, 10))), tg.Tensor(np.zeros((3, 4, 3))))


def test_windowed_attention_gradients():
    q0, k0, v0 = rng.normal(size=(3, 7)), rng.normal(size=(3, 7)), rng.normal(size=(2, 7))
    targets = tg.Tensor(rng.normal(size=(2, 7)))

    def loss(q, k, v):
        return tg.sum(tg.windowed_attention(q, k, v, 3) * targets)

    q, k, v = tg.Tensor(q0), tg.Tensor(k0), tg.Tensor(v0)
    assert tg.finite_diff_check(lambda t: loss(t, k, v), q) <= 1e-3
    assert tg.finite_diff_check(lambda t: loss(q, t, v), k) <= 1e-3
    assert tg.finite_diff_check(lambda t: loss(q, k, t), v) <= 1e-3


def test_attention_is_causal():
    q, k, v = rng.normal(size=(4, 20)), rng.normal(size=(4, 20)), rng.normal(size=(3, 20))
    base = tg.windowed_attention(tg.Tensor(q), tg.Tensor(k), tg.Tensor(v), 5).data
    k2, v2 = k.copy(), v.copy()
    k2[:, 12:] = rng.normal(size=(4, 8))
    v2[:, 12:] = rng.normal(size=(3, 8))
    changed = tg.windowed_attention(tg.Tensor(q), tg.Tensor(k2), tg.Tensor(v2), 5).data
    assert np.array_equal(base[:, :12], changed[:, :12])


def test_attention_rows_are_normalized():
    q, k = rng.normal(size=(4, 30)), rng.normal(size=(4, 30))
    weights = tg.attention_weights(q, k, 8)
    assert weights.shape == (30, 8)
    assert np.max(np.abs(weights.sum(axis=1) - 1.0)) <= 1e-9
    # the first query sees only itself
    assert weights[0, -1] == pytest.approx(1.0)


def test_attention_rejects_query_key_mismatch():
    with pytest.raises(ShapeError):
        tg.windowed_attention(
            tg.Tensor(np.zeros((3, 5))), tg.Tensor(np.zeros((4, 5))), tg.Tensor(np.zeros((2, 5))), 2
        )


def _ctc_oracle(log_probs, target, blank):
    """log P(target) by summing every alignment path explicitly."""
    n_frames, n_labels = log_probs.shape
    total = -np.inf
    for path in itertools.product(range(n_labels), repeat=n_frames):
        collapsed = [label for i, label in enumerate(path) if i == 0 or label != path[i - 1]]
        if [label for label in collapsed if label != blank] == list(target):
            total = np.logaddexp(total, sum(log_probs[t, s] for t, s in enumerate(path)))
    return total


def test_ctc_matches_exhaustive_enumeration():
    trials = 0
    for n_frames in range(1, 7):
        for n_labels in (2, 3):
            for target_len in range(0, 4):
                for _ in range(3):
                    target = list(rng.integers(1, n_labels, size=target_len))
                    if tg.ctc_min_frames(target) > n_frames:
                        continue
                    log_probs = tg.log_softmax(tg.Tensor(rng.normal(size=(n_frames, n_labels))))
                    expected = _ctc_oracle(log_probs.data, target, 0)
                    loss = tg.ctc_nll(log_probs, target, 0)
                    assert -loss.item() == pytest.approx(expected, abs=1e-9)
                    trials += 1
    assert trials > 50


def test_ctc_gradient_matches_finite_differences():
    target = [1, 2, 2]

    def f(z):
        return tg.ctc_nll(tg.log_softmax(z), target, 0)

    for _ in range(10):
        logits = tg.Tensor(rng.normal(size=(7, 3)))
        assert tg.finite_diff_check(f, logits, h=1e-6) <= 1e-3


def test_ctc_min_frames_counts_repeats():
    assert tg.ctc_min_frames([1, 2, 3]) == 3
    assert tg.ctc_min_frames([1, 1, 2, 2]) == 6
    assert tg.ctc_min_frames([]) == 0


def test_non_finite_forward_is_a_contract_error():
    with pytest.raises(ContractError):
        tg.log(tg.Tensor(np.array([0.0, 1.0])))


def test_no_grad_records_nothing():
    x = tg.Tensor(np.ones(3), requires_grad=True)
    with tg.no_grad():
        y = tg.sum(x * 2.0)
    assert not y.requires_grad
    assert tg.sum(x * 2.0).requires_grad


def test_finite_diff_check_requires_scalar_output():
    with pytest.raises(ContractError):
        tg.finite_diff_check(lambda x: x * 2.0, tg.Tensor(np.ones(3)))


def test_backward_accumulates_over_shared_subgraphs():
    x = tg.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    tg.backward(tg.sum(y + y))
    assert x.grad[0] == pytest.approx(8.0)


def test_parameter_set_copy_is_independent():
    params = tg.ParameterSet({"w": np.ones(3)})
    clone = params.copy()
    clone["w"].data[0] = 5.0
    assert params["w"].data[0] == 1.0
    assert params.names() == ["w"]
    assert params.count() == 3


def test_adam_minimizes_a_quadratic():
    params = tg.ParameterSet({"w": np.array([3.0, -2.0])})
    state = tg.AdamState(params, lr=0.1)
    for _ in range(300):
        params.zero_grad()
        w = params["w"]
        tg.backward(tg.sum(w * w))
        tg.adam_step(params, state)
    assert np.max(np.abs(params["w"].data)) < 1e-2


def test_adam_step_needs_gradients():
    params = tg.ParameterSet({"w": np.ones(2)})
    with pytest.raises(ContractError):
        tg.adam_step(params, tg.AdamState(params))


def test_softmax_sum_has_zero_gradient():
    for scaled in (False, True):
        x = tg.Tensor(rng.normal(size=(3, 6)) * 4.0, requires_grad=True)
        tg.backward(tg.sum(tg.softmax(x, scale=2.0, scaled=scaled)))
        assert np.max(np.abs(x.grad)) <= 1e-12


def test_nearest_upsample_gradient():
    def f(x):
        return tg.sum(tg.tanh(tg.upsample2(x, "nearest")) * _weights(2, 10))

    for _ in range(20):
        assert tg.finite_diff_check(f, tg.Tensor(rng.normal(size=(2, 5))), h=1e-6) <= 1e-3
    out = tg.upsample2(tg.Tensor(np.array([[1.0, 2.0, 3.0]])), "nearest").data
    assert np.array_equal(out, [[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]])


def test_strided_conv1d_gradients():
    x0 = rng.normal(size=(2, 17))
    w0 = rng.normal(size=(3, 2, 4))
    b0 = rng.normal(size=3)
    for stride, padding in ((2, 0), (2, (1, 2)), (3, 1)):

        def loss(x, w, b):
            return tg.sum(tg.tanh(tg.conv1d(x, w, b, stride=stride, padding=padding)))

        x, w, b = tg.Tensor(x0), tg.Tensor(w0), tg.Tensor(b0)
        assert tg.finite_diff_check(lambda t: loss(t, w, b), x) <= 1e-3
        assert tg.finite_diff_check(lambda t: loss(x, t, b), w) <= 1e-3
        assert tg.finite_diff_check(lambda t: loss(x, w, t), b) <= 1e-3


def test_strided_conv1d_keeps_every_other_output():
    x = tg.Tensor(rng.normal(size=(2, 16)))
    w = tg.Tensor(rng.normal(size=(3, 2, 5)))
    dense = tg.conv1d(x, w, padding=(2, 2)).data
    strided = tg.conv1d(x, w, stride=2, padding=(2, 2)).data
    assert strided.shape == (3, 8)
    assert np.allclose(strided, dense[:, ::2])


def test_adam_first_step_moves_by_lr_against_the_gradient_sign():
    g = np.array([0.3, -2.0, 5.0, -0.1])
    params = tg.ParameterSet({"w": np.array([1.0, 1.0, -1.0, 0.0])})
    before = params["w"].data.copy()
    state = tg.AdamState(params, lr=0.01)
    params["w"].grad = g
    tg.adam_step(params, state)
    assert np.allclose(params["w"].data - before, -0.01 * np.sign(g), rtol=0.0, atol=1e-8)
    assert state.step == 1


def test_adam_leaves_parameters_with_zero_gradient_unchanged():
    params = tg.ParameterSet({"w": np.array([0.5, -1.5]), "b": np.array([2.0])})
    state = tg.AdamState(params, lr=0.1)
    for _ in range(3):
        params["w"].grad = np.array([1.0, -1.0])
        params["b"].grad = np.zeros(1)
        tg.adam_step(params, state)
    assert np.array_equal(params["b"].data, [2.0])
    assert not np.array_equal(params["w"].data, [0.5, -1.5])


def _adam_run():
    params = tg.ParameterSet({"w": np.linspace(-1.0, 1.0, 6).reshape(2, 3)})
    state = tg.AdamState(params, lr=0.05)
    target = tg.Tensor(np.arange(6.0).reshape(2, 3))
    for _ in range(25):
        params.zero_grad()
        w = params["w"]
        tg.backward(tg.sum(tg.tanh(w - target) * (w - target)))
        tg.adam_step(params, state)
    return params["w"].data


def test_adam_is_bit_deterministic():
    assert np.array_equal(_adam_run(), _adam_run())
