"""MLP forward/backward, Adam, Gaussian utilities, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionprior.errors import ShapeError, ValidationError
from motionprior.nn import (LOG_2PI, LOG_STD_MAX, LOG_STD_MIN, Adam, Mlp,
                            adam_step, clamp_log_std, gaussian_entropy,
                            gaussian_logprob, gaussian_sample, load_checkpoint,
                            save_checkpoint)


def _zero_net(sizes, activation="tanh", bias_out=None):
    net = Mlp(sizes, activation=activation)
    for w in net.weights:
        w[...] = 0.0
    for b in net.biases:
        b[...] = 0.0
    if bias_out is not None:
        net.biases[-1][...] = bias_out
    return net


def _loss_and_grads(net, x, seed=0):
    """Scalar projection loss sum(out * R) and its exact parameter grads."""
    r = np.random.default_rng(seed)
    out, tape = net.forward(x)
    proj = r.standard_normal(out.shape)
    grads, _ = net.backward(tape, proj)
    return float((out * proj).sum()), grads, proj


def _fd_check(net, x, h=1e-5, tol=1e-4, seed=0):
    """Central finite differences over every parameter of the net."""
    _, grads, proj = _loss_and_grads(net, x, seed)
    worst = 0.0
    for li in range(net.n_layers):
        for arr, g in ((net.weights[li], grads[li][0]),
                       (net.biases[li], grads[li][1])):
            flat = arr.reshape(-1)
            gflat = np.asarray(g).reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = float((net.forward(x)[0] * proj).sum())
                flat[i] = old - h
                dn = float((net.forward(x)[0] * proj).sum())
                flat[i] = old
                fd = (up - dn) / (2 * h)
                denom = max(abs(fd), abs(gflat[i]), 1e-8)
                worst = max(worst, abs(fd - gflat[i]) / denom)
    assert worst < tol, f"worst relative error {worst}"
    return worst


# ---------------------------------------------------------------------------
# forward


def test_zero_net_outputs_bias():
    net = _zero_net([3, 8, 2], bias_out=np.array([0.5, -1.5]))
    out, _ = net.forward(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out, [0.5, -1.5])


def test_single_affine_layer_is_exact():
    net = Mlp([2, 2])
    net.weights[0][...] = [[1.0, 0.0], [0.0, 2.0]]
    net.biases[0][...] = [0.5, -0.5]
    out, _ = net.forward(np.array([1.0, 1.0]))
    np.testing.assert_allclose(out, [1.5, 1.5], atol=1e-15)


def test_two_layer_tanh_hand_computed():
    net = Mlp([1, 2, 1])
    net.weights[0][...] = [[1.0, -1.0]]
    net.biases[0][...] = [0.0, 0.5]
    net.weights[1][...] = [[2.0], [3.0]]
    net.biases[1][...] = [0.25]
    x = 0.7
    h = np.tanh([x, -x + 0.5])
    expect = 2.0 * h[0] + 3.0 * h[1] + 0.25
    out, _ = net.forward(np.array([x]))
    assert out[0] == pytest.approx(expect, abs=1e-15)


def test_forward_batched_matches_rows(rng):
    net = Mlp([4, 16, 3], rng=rng)
    x = rng.standard_normal((6, 4))
    batch, _ = net.forward(x)
    for i in range(6):
        row, _ = net.forward(x[i])
        # BLAS may take different code paths for matrix vs single-row
        np.testing.assert_allclose(batch[i], row, rtol=1e-12, atol=1e-14)


def test_forward_rejects_wrong_width(rng):
    net = Mlp([4, 8, 2], rng=rng)
    with pytest.raises(ShapeError):
        net.forward(np.zeros(5))


def test_mlp_rejects_single_size():
    with pytest.raises(ValidationError):
        Mlp([4])


def test_unknown_activation_rejected():
    net = Mlp([2, 3, 1], activation="sigmoid")
    with pytest.raises(ValidationError):
        net.forward(np.zeros(2))


# ---------------------------------------------------------------------------
# backward


def test_backward_linear_gradient_is_input():
    net = _zero_net([3, 1])
    x = np.array([1.0, -2.0, 3.0])
    _, tape = net.forward(x)
    grads, dx = net.backward(tape, np.array([1.0]))
    np.testing.assert_allclose(grads[0][0][:, 0], x, atol=1e-15)
    assert grads[0][1][0] == 1.0


@pytest.mark.parametrize("activation", ["tanh", "relu", "elu"])
def test_fd_small_net(activation, rng):
    net = Mlp([3, 5, 4, 2], activation=activation, rng=rng)
    x = rng.standard_normal((4, 3))
    if activation == "relu":
        # keep pre-activations away from the kink
        x = x + 0.05
    _fd_check(net, x)


def test_fd_batch_accumulation(rng):
    net = Mlp([2, 6, 1], rng=rng)
    x = rng.standard_normal((7, 2))
    _fd_check(net, x)


def test_input_gradient_matches_fd(rng):
    net = Mlp([3, 8, 1], rng=rng)
    x = rng.standard_normal((2, 3))
    g = net.input_gradient(x)
    h = 1e-6
    for i in range(2):
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd = (net.forward(xp)[0][i, 0] - net.forward(xm)[0][i, 0]) / (2 * h)
            assert g[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_oracle():
    # t=1, g=1: m_hat = v_hat = 1, delta = -lr / (1 + eps)
    p, _, _ = adam_step(np.array([0.0]), np.array([1.0]),
                        np.zeros(1), np.zeros(1), lr=1e-3, t=1)
    assert p[0] == pytest.approx(-9.99999e-4, abs=1e-9)


def test_adam_zero_gradient_no_move():
    p, _, _ = adam_step(np.array([1.5]), np.zeros(1), np.zeros(1),
                        np.zeros(1), lr=1e-2, t=1)
    assert p[0] == 1.5


def test_adam_rejects_bad_step_index():
    with pytest.raises(ValidationError):
        adam_step(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1),
                  lr=1e-3, t=0)


def test_adam_class_updates_in_place():
    params = {"w": np.array([0.0, 0.0])}
    opt = Adam(params, lr=1e-3)
    opt.step({"w": np.array([1.0, -1.0])})
    assert params["w"][0] == pytest.approx(-9.99999e-4, abs=1e-9)
    assert params["w"][1] == pytest.approx(9.99999e-4, abs=1e-9)
    assert opt.t == 1


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_adam_steps_stay_finite(seed):
    r = np.random.default_rng(seed)
    params = {"w": r.standard_normal(5)}
    opt = Adam(params, lr=1e-2)
    for _ in range(10):
        opt.step({"w": r.standard_normal(5) * 10.0 ** r.integers(-3, 4)})
    assert np.all(np.isfinite(params["w"]))


# ---------------------------------------------------------------------------
# Gaussian utilities


def test_standard_normal_logprob_at_zero():
    lp = gaussian_logprob(np.zeros(1), np.zeros(1), np.zeros(1))
    assert lp == pytest.approx(-0.9189385, abs=1e-7)


def test_logprob_at_mean_general():
    log_std = np.log(np.array([0.5, 2.0]))
    lp = gaussian_logprob(np.array([1.0, -3.0]), log_std,
                          np.array([1.0, -3.0]))
    expect = (-0.5 * LOG_2PI - log_std).sum()
    assert lp == pytest.approx(expect, abs=1e-12)


def test_logprob_batched_last_axis():
    lp = gaussian_logprob(np.zeros((3, 2)), np.zeros(2), np.zeros((3, 2)))
    assert lp.shape == (3,)
    np.testing.assert_allclose(lp, -LOG_2PI, atol=1e-12)


def test_sample_seeded_repeatable():
    a, ea = gaussian_sample(np.zeros(4), np.ones(4), np.random.default_rng(5))
    b, eb = gaussian_sample(np.zeros(4), np.ones(4), np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ea, eb)
    np.testing.assert_array_equal(a, ea)  # mean 0, std 1


@given(st.floats(-3, 3), st.floats(-2, 1))
def test_logprob_maximized_at_mean(mean, log_std):
    at_mean = gaussian_logprob(np.array([mean]), np.array([log_std]),
                               np.array([mean]))
    off = gaussian_logprob(np.array([mean]), np.array([log_std]),
                           np.array([mean + 0.1]))
    assert at_mean > off


def test_entropy_monotone_in_log_std():
    assert gaussian_entropy(np.zeros(2)) < gaussian_entropy(np.ones(2))


def test_clamp_log_std_bounds():
    out = clamp_log_std(np.array([-10.0, 0.0, 10.0]))
    np.testing.assert_array_equal(out, [LOG_STD_MIN, 0.0, LOG_STD_MAX])


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"a.w0": rng.standard_normal((3, 4)), "b": rng.standard_normal(2)}
    moments = {"m.a.w0": np.zeros((3, 4)), "v.a.w0": np.ones((3, 4))}
    meta = {"mode": "vim", "seed": 3}
    path = str(tmp_path / "ckpt.npz")
    save_checkpoint(path, params, moments, rng_state=None, meta=meta)
    p, m, rs, mt = load_checkpoint(path)
    assert set(p) == set(params)
    for k in params:
        np.testing.assert_array_equal(p[k], params[k])
    np.testing.assert_array_equal(m["v.a.w0"], moments["v.a.w0"])
    assert mt == meta
    assert rs is None


def test_checkpoint_rejects_unknown_version(tmp_path, rng):
    import json

    path = str(tmp_path / "ckpt.npz")
    header = json.dumps({"version": 99, "param_names": [], "moment_names": []})
    np.savez(path, __header__=np.frombuffer(header.encode(), dtype=np.uint8))
    with pytest.raises(ValidationError):
        load_checkpoint(path)
