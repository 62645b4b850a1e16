import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgetprobe import nncore
from forgetprobe.errors import DimensionError, InputError, StructuralError
from forgetprobe.gradcheck import finite_difference, max_violation
from forgetprobe.nncore import IDENTITY, RELU, Adam, LayerSpec, Network


def small_net(widths, seed, acts=None, dtype=np.float64):
    acts = acts or [RELU] * (len(widths) - 2) + [IDENTITY]
    layers = [LayerSpec(a, b, act) for a, b, act in zip(widths[:-1], widths[1:], acts)]
    net = nncore.init_weights(layers, seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    for i in range(1, len(net.weights), 2):
        net.weights[i][...] = rng.normal(0, 0.3, net.weights[i].shape)
    return net


# ---------------------------------------------------------------- forward

def test_identity_network_passes_batch_through():
    net = Network([LayerSpec(4, 4, IDENTITY)], [np.eye(4, dtype=np.float32), np.zeros((1, 4), np.float32)])
    batch = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(batch)[-1], batch)


def test_relu_kills_negative_preactivations():
    net = Network([LayerSpec(3, 2, RELU)], [-np.ones((3, 2), np.float32), -np.ones((1, 2), np.float32)])
    out = net.forward(np.abs(np.random.default_rng(1).normal(size=(5, 3))).astype(np.float32))
    assert np.all(out[-1] == 0)


def test_two_layer_forward_matches_straight_line_reference():
    net = small_net([5, 4, 3], seed=3)
    x = np.random.default_rng(4).normal(size=(3, 5))
    w0, b0, w1, b1 = net.weights
    hidden = np.zeros((3, 4))
    for r in range(3):
        for j in range(4):
            hidden[r, j] = max(0.0, sum(x[r, i] * w0[i, j] for i in range(5)) + b0[0, j])
    expected = np.zeros((3, 3))
    for r in range(3):
        for j in range(3):
            expected[r, j] = sum(hidden[r, i] * w1[i, j] for i in range(4)) + b1[0, j]
    acts = net.forward(x)
    np.testing.assert_allclose(acts[0], hidden, rtol=1e-12)
    np.testing.assert_allclose(acts[1], expected, rtol=1e-12)


def test_forward_names_offending_layer():
    net = small_net([4, 3, 2], seed=0)
    with pytest.raises(DimensionError, match="layer 0"):
        net.forward(np.zeros((2, 5)))


def test_forward_is_bit_deterministic():
    net = small_net([6, 5, 4], seed=7, dtype=np.float32)
    x = np.random.default_rng(0).normal(size=(9, 6)).astype(np.float32)
    assert net.forward(x)[-1].tobytes() == net.forward(x)[-1].tobytes()


def test_unchained_layers_rejected():
    with pytest.raises(StructuralError):
        Network([LayerSpec(3, 4), LayerSpec(5, 2)], [np.zeros((3, 4)), np.zeros((1, 4)), np.zeros((5, 2)), np.zeros((1, 2))])
    with pytest.raises(StructuralError):
        LayerSpec(0, 3)


# ---------------------------------------------------------------- backward

def test_zero_output_grad_gives_zero_gradients():
    net = small_net([4, 3, 2], seed=1)
    x = np.random.default_rng(2).normal(size=(3, 4))
    acts = net.forward(x)
    grads = net.backward(x, acts, np.zeros_like(acts[-1]))
    assert all(np.all(g == 0) for g in grads)


def test_single_linear_layer_mse_closed_form():
    rng = np.random.default_rng(5)
    x, t = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    net = Network([LayerSpec(3, 2, IDENTITY)], [rng.normal(size=(3, 2)), np.zeros((1, 2))])
    acts = net.forward(x)
    _, g_out = nncore.mse(acts[-1], t)
    grads = net.backward(x, acts, g_out)
    w = net.weights[0]
    np.testing.assert_allclose(grads[0], (2 / t.size) * x.T @ (x @ w - t), rtol=1e-12)


def test_backward_does_not_mutate_network():
    net = small_net([4, 3, 2], seed=2)
    before = [w.copy() for w in net.weights]
    x = np.random.default_rng(0).normal(size=(2, 4))
    acts = net.forward(x)
    net.backward(x, acts, np.ones_like(acts[-1]))
    for a, b in zip(before, net.weights):
        np.testing.assert_array_equal(a, b)


def test_backward_rejects_inconsistent_activations():
    net = small_net([4, 3, 2], seed=2)
    x = np.zeros((2, 4))
    acts = net.forward(x)
    with pytest.raises(StructuralError):
        net.backward(x, acts[:1], np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        net.backward(x, acts, np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = [int(w) for w in rng.integers(1, 9, size=depth + 1)]
    acts = [str(a) for a in rng.choice([RELU, IDENTITY], size=depth)]
    net = small_net(widths, seed, acts)
    x = rng.normal(size=(int(rng.integers(1, 5)), widths[0]))
    target = rng.normal(size=(x.shape[0], widths[-1]))

    def loss():
        return nncore.mse(net.forward(x)[-1], target)[0]

    a = net.forward(x)
    grads, g_in = net.backward(x, a, nncore.mse(a[-1], target)[1], input_grad=True)
    for w, g in zip(net.weights, grads):
        assert max_violation(g, finite_difference(loss, w)) <= 0
    assert max_violation(g_in, finite_difference(loss, x)) <= 0


# ---------------------------------------------------------------- losses

def test_cross_entropy_uniform_logits():
    loss, _ = nncore.cross_entropy(np.zeros((4, 2)), np.array([0, 1, 1, 0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_saturates():
    logits = np.array([[20.0, 0.0], [0.0, 20.0]])
    loss, _ = nncore.cross_entropy(logits, np.array([0, 1]))
    assert loss < 1e-3


def test_cross_entropy_matches_brute_force():
    rng = np.random.default_rng(11)
    logits, labels = rng.normal(size=(4, 3)) * 3, np.array([2, 0, 1, 1])
    per_row = []
    for r in range(4):
        exps = [math.exp(v) for v in logits[r]]
        per_row.append(-math.log(exps[labels[r]] / sum(exps)))
    loss, grad = nncore.cross_entropy(logits, labels)
    assert loss == pytest.approx(sum(per_row) / 4, rel=1e-12)
    assert max_violation(grad, finite_difference(lambda: nncore.cross_entropy(logits, labels)[0], logits)) <= 0


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(InputError):
        nncore.cross_entropy(np.zeros((2, 2)), np.array([0, 2]))
    with pytest.raises(InputError):
        nncore.cross_entropy(np.zeros((2, 2)), np.array([0, -1]))


def test_softmax_extreme_logits_stay_finite():
    p = nncore.softmax(np.array([[1000.0, -1000.0, 0.0]]))
    assert np.all(np.isfinite(p))
    assert p.sum() == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2 ** 31 - 1), st.floats(0.1, 50))
def test_cross_entropy_properties(n, c, seed, scale):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, c)) * scale
    loss, _ = nncore.cross_entropy(logits, rng.integers(0, c, size=n))
    assert loss >= 0
    np.testing.assert_allclose(nncore.softmax(logits).sum(axis=1), 1.0, atol=1e-6)


def test_mse_cases():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 4))
    loss, grad = nncore.mse(a, a.copy())
    assert loss == 0 and np.all(grad == 0)
    loss, _ = nncore.mse(a + 0.7, a)
    assert loss == pytest.approx(0.49, rel=1e-12)
    b = rng.normal(size=(3, 4))
    brute = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(4)) / 12
    loss, grad = nncore.mse(a, b)
    assert loss == pytest.approx(brute, rel=1e-12)
    np.testing.assert_allclose(grad, 2 * (a - b) / 12)
    with pytest.raises(DimensionError):
        nncore.mse(a, b[:, :2])


def test_elbo_kl_closed_forms():
    z = np.zeros((1, 1))
    assert nncore.elbo(z, z, z, z)[0] == 0.0
    loss, _ = nncore.elbo(z, z, np.ones((1, 1)), z)
    assert loss == pytest.approx(0.5)


def test_elbo_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    recon, target = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    mu, logvar = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))

    def loss():
        return nncore.elbo(recon, target, mu, logvar)[0]

    _, (g_r, g_m, g_l) = nncore.elbo(recon, target, mu, logvar)
    for g, arr in ((g_r, recon), (g_m, mu), (g_l, logvar)):
        assert max_violation(g, finite_difference(loss, arr)) <= 0


def test_elbo_shape_checks():
    with pytest.raises(DimensionError):
        nncore.elbo(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 1)), np.zeros((2, 1)))
    with pytest.raises(DimensionError):
        nncore.elbo(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((2, 2)))


def test_kl_nonnegative_on_1000_random_pairs():
    rng = np.random.default_rng(0)
    mu = rng.normal(0, 3, size=(1000, 4))
    logvar = rng.normal(0, 3, size=(1000, 4))
    assert np.all(nncore.kl_divergence(mu, logvar) >= 0)


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_is_noop():
    w = np.random.default_rng(0).normal(size=(3, 2)).astype(np.float32)
    before = w.copy()
    opt = Adam([w])
    opt.step([np.zeros_like(w)])
    np.testing.assert_array_equal(w, before)
    assert opt.step_count == 1


def test_adam_constant_gradient_moves_by_learning_rate():
    w = np.zeros((1, 2))
    opt = Adam([w], learning_rate=1e-3)
    g = np.array([[0.3, -5.0]])
    prev = w.copy()
    for _ in range(500):
        opt.step([g])
        step = w - prev
        prev = w.copy()
    np.testing.assert_allclose(step, -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_three_step_trace_matches_hand_recursion():
    w = np.array([[1.0, -2.0]])
    opt = Adam([w], learning_rate=0.1, beta1=0.9, beta2=0.999, epsilon=1e-8)
    grads = [np.array([[0.5, -1.0]]), np.array([[0.2, 0.4]]), np.array([[-0.3, 0.1]])]
    ref = [1.0, -2.0]
    m = [0.0, 0.0]
    v = [0.0, 0.0]
    for t, g in enumerate(grads, start=1):
        opt.step([g])
        for i in range(2):
            m[i] = 0.9 * m[i] + 0.1 * g[0, i]
            v[i] = 0.999 * v[i] + 0.001 * g[0, i] ** 2
            m_hat = m[i] / (1 - 0.9 ** t)
            v_hat = v[i] / (1 - 0.999 ** t)
            ref[i] -= 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(w[0], ref, rtol=1e-12)
    assert opt.step_count == 3


def test_adam_rejects_shape_mismatch():
    opt = Adam([np.zeros((2, 2))])
    with pytest.raises(StructuralError):
        opt.step([np.zeros((2, 3))])
    with pytest.raises(StructuralError):
        opt.step([])


# ---------------------------------------------------------------- init

def test_init_is_reproducible_with_zero_biases():
    layers = nncore.chain([10, 8, 3])
    a, b = nncore.init_weights(layers, 42), nncore.init_weights(layers, 42)
    for wa, wb in zip(a.weights, b.weights):
        assert wa.tobytes() == wb.tobytes()
    assert all(np.all(bias == 0) for bias in a.weights[1::2])
    assert a.weights[0].dtype == np.float32


def test_he_init_std_for_512_wide_relu_layer():
    net = nncore.init_weights([LayerSpec(512, 512, RELU)], 0)
    target = math.sqrt(2 / 512)
    assert abs(net.weights[0].std() - target) < 0.2 * target


def test_xavier_init_for_identity_layer():
    net = nncore.init_weights([LayerSpec(300, 100, IDENTITY)], 0)
    target = math.sqrt(2 / 400)
    assert abs(net.weights[0].std() - target) < 0.2 * target
