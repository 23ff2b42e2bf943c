import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab.nnkit import (
    GradBundle,
    Model,
    ParamMask,
    backward,
    cross_entropy,
    forward,
    init_model,
    kl_divergence,
    load_model,
    model_from_bytes,
    model_to_bytes,
    per_sample_cross_entropy,
    save_model,
    sgd_step,
    softmax,
)


def test_init_is_deterministic():
    a, b = init_model(4, [8], 3, seed=7), init_model(4, [8], 3, seed=7)
    assert a.equals(b)


def test_init_biases_zero_and_within_scale():
    m = init_model(4, [8], 3, seed=123)
    for w, b in m.layers:
        assert np.all(b == 0.0)
        s = math.sqrt(6.0 / sum(w.shape))
        assert np.all(np.abs(w) <= s)


def test_different_seeds_differ():
    assert not init_model(4, [8], 3, seed=7).equals(init_model(4, [8], 3, seed=8))


@pytest.mark.parametrize("dims", [(0, [8], 3), (4, [0], 3), (4, [8], 0)])
def test_init_rejects_zero_dims(dims):
    with pytest.raises(ValueError):
        init_model(*dims, seed=0)


def test_layer_shapes_chain():
    m = init_model(5, [7, 6], 4, seed=0)
    dims = [5, 7, 6, 4]
    assert [w.shape for w, _ in m.layers] == list(zip(dims[:-1], dims[1:]))
    assert m.hidden_dims == [7, 6]
    assert m.num_params == 5 * 7 + 7 + 7 * 6 + 6 + 6 * 4 + 4


def test_zero_weights_give_uniform_logits():
    m = init_model(3, [4], 5, seed=0)
    m = Model([(np.zeros_like(w), np.zeros_like(b)) for w, b in m.layers], "relu", 3, 5)
    logits, _ = forward(m, np.random.default_rng(0).normal(size=(6, 3)))
    assert np.all(logits == logits[:, :1])


def test_identity_linear_layer():
    m = Model([(np.eye(3), np.zeros(3))], "relu", 3, 3)
    x = np.array([[1.5, -2.0, 0.25]])
    logits, emb = forward(m, x)
    np.testing.assert_array_equal(logits, x)
    np.testing.assert_array_equal(emb, x)


def test_two_layer_hand_computed():
    W0 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b0 = np.array([0.5, 0.0])
    W1 = np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 1.0]])
    b1 = np.array([0.0, 0.1, 0.2])
    m = Model([(W0, b0), (W1, b1)], "relu", 2, 3)
    x = np.array([[1.0, 2.0]])
    # h = relu([1+4+0.5, -1+1+0]) = [5.5, 0]
    logits, emb = forward(m, x)
    np.testing.assert_allclose(emb, [[5.5, 0.0]])
    np.testing.assert_allclose(logits, [[5.5, 0.1, -5.3]])


def test_forward_rejects_bad_width(tiny_model):
    with pytest.raises(ValueError):
        forward(tiny_model, np.zeros((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, rtol=0, atol=1e-16)
    mpmath.mp.dps = 30
    e = [mpmath.exp(v) for v in (1, 2, 3)]
    ref = [float(v / sum(e)) for v in e]
    np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), ref, rtol=1e-15)


@given(st.lists(st.floats(min_value=-700, max_value=700), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_properties(z, c):
    z = np.asarray(z)
    p = softmax(z)
    assert np.all(p > 0) or len(z) > 1 and np.ptp(z) > 700  # underflow only at extreme spreads
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(softmax(z + c), p, atol=1e-12)


def test_cross_entropy_examples():
    loss, _ = cross_entropy(np.array([[0.0, 800.0, 0.0]]), np.array([1]))
    assert loss == 0.0
    loss, _ = cross_entropy(np.zeros((4, 12)), np.array([0, 3, 5, 11]))
    assert loss == pytest.approx(math.log(12), abs=1e-14)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), np.array([3]))


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def test_cross_entropy_logit_gradient_fixed_case():
    logits = np.array([[0.2, -1.0, 0.5], [1.5, 0.3, -0.7]])
    labels = np.array([2, 0])
    _, grad = cross_entropy(logits, labels)
    num = _fd(lambda: cross_entropy(logits, labels)[0], logits)
    np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-10)


def test_kl_examples():
    z = np.random.default_rng(0).normal(size=(3, 4))
    assert kl_divergence(z, z)[0] == 0.0
    assert kl_divergence(z, z + 5.0)[0] == pytest.approx(0.0, abs=1e-15)
    p = np.zeros((1, 3))
    q = np.log(np.array([[0.7, 0.2, 0.1]])) + 3.0
    mpmath.mp.dps = 30
    ref = sum(mpmath.mpf(1) / 3 * mpmath.log((mpmath.mpf(1) / 3) / mpmath.mpf(v)) for v in ("0.7", "0.2", "0.1"))
    assert kl_divergence(p, q)[0] == pytest.approx(float(ref), rel=1e-13)
    with pytest.raises(ValueError):
        kl_divergence(np.zeros((2, 3)), np.zeros((2, 4)))


@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    r = np.random.default_rng(seed)
    p, q = r.normal(scale=3, size=(4, 5)), r.normal(scale=3, size=(4, 5))
    assert kl_divergence(p, q)[0] >= 0.0


def _param_fd(model, loss_fn, h=1e-5):
    out = []
    for w, b in model.layers:
        out.append((_fd(loss_fn, w, h), _fd(loss_fn, b, h)))
    return out


def _jitter_biases(m, r):
    # random biases keep ReLU pre-activations away from the kink at 0
    return Model([(w, r.normal(scale=0.3, size=b.shape)) for w, b in m.layers], m.activation, m.input_dim, m.num_classes, m.seed)


def _rel_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    for (ga, gb), (na, nb) in zip(analytic, numeric):
        for a, n in ((ga, na), (gb, nb)):
            err = np.abs(a - n)
            assert np.all(err <= atol + rtol * np.maximum(np.abs(a), np.abs(n))), err.max()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["relu", "tanh"]))
def test_ce_parameter_gradients_match_finite_differences(seed, act):
    r = np.random.default_rng(seed)
    m = _jitter_biases(init_model(4, [5, 3], 3, seed=seed, activation=act), r)
    X, y = r.normal(size=(6, 4)), r.integers(0, 3, 6)
    loss, dlogits = cross_entropy(forward(m, X)[0], y)
    g = backward(m, X, dlogits, loss=loss)
    _rel_close(g.grads, _param_fd(m, lambda: cross_entropy(forward(m, X)[0], y)[0]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kl_parameter_gradients_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    m = init_model(3, [4, 4], 4, seed=seed, activation="tanh")
    X, target = r.normal(size=(5, 3)), r.normal(size=(5, 4))
    loss, dlogits = kl_divergence(forward(m, X)[0], target)
    g = backward(m, X, dlogits, loss=loss)
    _rel_close(g.grads, _param_fd(m, lambda: kl_divergence(forward(m, X)[0], target)[0]))


def test_embedding_gradient_path():
    # d/dtheta of sum(emb * c) through the dembed hook
    r = np.random.default_rng(5)
    m = init_model(3, [4, 5], 2, seed=5, activation="tanh")
    X, c = r.normal(size=(4, 3)), r.normal(size=(4, 5))
    g = backward(m, X, np.zeros((4, 2)), dembed=c)
    _rel_close(g.grads, _param_fd(m, lambda: float((forward(m, X)[1] * c).sum())))


def test_weighted_ce_gradient():
    r = np.random.default_rng(2)
    logits, y, w = r.normal(size=(5, 4)), r.integers(0, 4, 5), r.uniform(0.2, 2.0, 5)
    _, grad = cross_entropy(logits, y, w)
    num = _fd(lambda: cross_entropy(logits, y, w)[0], logits)
    np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-10)


def test_floored_rows_get_zero_gradient():
    logits = np.array([[0.0, 100.0], [0.0, 0.0]])
    loss, grad = cross_entropy(logits, np.array([0, 0]))
    assert np.all(grad[0] == 0.0)
    assert np.all(np.isfinite(grad)) and math.isfinite(loss)


def test_constant_loss_has_zero_gradient(tiny_model):
    X = np.ones((3, 5))
    g = backward(tiny_model, X, np.zeros((3, 4)))
    assert np.all(g.flat() == 0.0)


def _scalar_model(theta):
    return Model([(np.array([[theta]]), np.zeros(1))], "relu", 1, 1)


def _scalar_grad(g):
    return GradBundle([(np.array([[g]]), np.zeros(1))])


def test_sgd_scalar_arithmetic():
    down = sgd_step(_scalar_model(1.0), _scalar_grad(2.0), 0.1)
    up = sgd_step(_scalar_model(1.0), _scalar_grad(2.0), 0.1, direction="ascend")
    assert down.layers[0][0][0, 0] == pytest.approx(0.8, abs=1e-15)
    assert up.layers[0][0][0, 0] == pytest.approx(1.2, abs=1e-15)


def test_sgd_zero_grad_and_zero_mask(tiny_model, rng):
    zero = GradBundle([(np.zeros_like(w), np.zeros_like(b)) for w, b in tiny_model.layers])
    assert sgd_step(tiny_model, zero, 0.5).equals(tiny_model)
    g = GradBundle([(rng.normal(size=w.shape), rng.normal(size=b.shape)) for w, b in tiny_model.layers])
    assert sgd_step(tiny_model, g, 0.5, mask=ParamMask.full(tiny_model, False)).equals(tiny_model)


def test_sgd_rejects_bad_lr(tiny_model):
    zero = GradBundle([(np.zeros_like(w), np.zeros_like(b)) for w, b in tiny_model.layers])
    for lr in (0.0, -1.0):
        with pytest.raises(ValueError):
            sgd_step(tiny_model, zero, lr)


def test_ascend_undoes_descend_on_dyadic_values():
    # exact in binary floating point: dyadic params, grads and lr
    m = Model([(np.array([[0.5, -1.25], [2.0, 0.75]]), np.array([0.125, -0.5]))], "relu", 2, 2)
    g = GradBundle([(np.array([[1.0, -0.5], [0.25, 2.0]]), np.array([-1.0, 0.5]))])
    back = sgd_step(sgd_step(m, g, 0.0625), g, 0.0625, direction="ascend")
    assert back.equals(m)


@given(st.integers(0, 10_000), st.floats(min_value=1e-4, max_value=1.0))
def test_ascend_undoes_descend_within_rounding(seed, lr):
    r = np.random.default_rng(seed)
    m = init_model(3, [4], 2, seed=seed)
    g = GradBundle([(r.normal(size=w.shape), r.normal(size=b.shape)) for w, b in m.layers])
    back = sgd_step(sgd_step(m, g, lr), g, lr, direction="ascend")
    np.testing.assert_allclose(back.flat(), m.flat(), rtol=0, atol=4 * np.finfo(float).eps * (1 + np.abs(m.flat()).max() + lr * np.abs(g.flat()).max()))


def test_mask_semantics(tiny_model, rng):
    g = GradBundle([(rng.normal(size=w.shape), rng.normal(size=b.shape)) for w, b in tiny_model.layers])
    ones = ParamMask.full(tiny_model, True)
    assert ones.selected_count == tiny_model.num_params
    np.testing.assert_array_equal(ones.apply(g).flat(), g.flat())
    zeros = ParamMask.full(tiny_model, False)
    assert zeros.selected_count == 0
    assert np.all(zeros.apply(g).flat() == 0.0)


def test_checkpoint_round_trip(tmp_path):
    m = init_model(6, [5, 4], 3, seed=99, activation="tanh")
    m = Model([(w * 1.0000001, b + 1e-300) for w, b in m.layers], m.activation, m.input_dim, m.num_classes, m.seed)
    back = model_from_bytes(model_to_bytes(m))
    assert back.equals(m)
    assert (back.activation, back.input_dim, back.num_classes, back.seed) == ("tanh", 6, 3, 99)
    save_model(m, tmp_path / "m.ckpt")
    assert load_model(tmp_path / "m.ckpt").equals(m)
    assert model_to_bytes(back) == model_to_bytes(m)


def test_checkpoint_header_layout():
    m = init_model(2, [3], 2, seed=4)
    raw = model_to_bytes(m)
    assert raw[:4] == b"ULCK"
    assert len(raw) == 4 + 4 + 4 + 8 * (1 + 1 + 1 + 1 + 1) + 8 * m.num_params


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        model_from_bytes(b"NOPE" + bytes(40))
    raw = model_to_bytes(init_model(2, [3], 2, seed=4))
    with pytest.raises(ValueError):
        model_from_bytes(raw + b"\x00" * 8)


def test_per_sample_ce_matches_mean(rng):
    logits, y = rng.normal(size=(7, 3)), rng.integers(0, 3, 7)
    assert per_sample_cross_entropy(logits, y).mean() == pytest.approx(cross_entropy(logits, y)[0], rel=1e-15)
