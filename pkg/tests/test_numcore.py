import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liquidbench import numcore as nc


def make_param(rng, shape, scale=0.5, dtype=np.float64):
    return nc.Tensor(rng.uniform(-scale, scale, shape).astype(dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_linear_map_gradient_is_input():
    rng = np.random.default_rng(0)
    w = make_param(rng, (3, 4))
    x = nc.Tensor(rng.normal(size=(4,)))
    loss = nc.sum_(nc.matmul(w, nc.reshape(x, (4, 1))))
    nc.backward(loss, params=[w])
    np.testing.assert_allclose(w.grad, np.broadcast_to(x.data, (3, 4)))


def test_backward_unused_param_gets_zero_grad():
    rng = np.random.default_rng(1)
    w = make_param(rng, (3, 3))
    x = nc.Tensor(rng.normal(size=(3,)), requires_grad=True)
    loss = nc.sum_(nc.square(x))
    nc.backward(loss, params=[w, x])
    np.testing.assert_array_equal(w.grad, np.zeros((3, 3)))
    assert np.abs(x.grad).sum() > 0


def test_backward_rejects_nonscalar_and_nonfinite():
    t = nc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        nc.backward(nc.square(t))
    bad = nc.log(nc.Tensor(np.array(0.0), requires_grad=True))
    with pytest.raises(FloatingPointError):
        nc.backward(bad)


def test_backward_two_layer_network_matches_finite_differences():
    # central-difference oracle, eps=1e-4 at 64-bit, per the gradient contract
    rng = np.random.default_rng(2)
    w1 = make_param(rng, (5, 4))
    b1 = make_param(rng, (5,))
    w2 = make_param(rng, (1, 5))
    x = nc.Tensor(rng.normal(size=(3, 4)))
    y = nc.Tensor(rng.normal(size=(3, 1)))

    def forward():
        hidden = nc.tanh(nc.linear(x, w1, b1))
        return nc.mse(nc.linear(hidden, w2), y)

    err = nc.grad_check(forward, [w1, b1, w2], eps=1e-4)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------

def test_grad_check_quadratic():
    theta = nc.Tensor(np.array([3.0]), requires_grad=True)
    err = nc.grad_check(lambda: nc.sum_(nc.square(theta)), [theta], eps=1e-5)
    assert err < 1e-9


def test_grad_check_rejects_bad_eps_and_nondeterminism():
    theta = nc.Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ValueError):
        nc.grad_check(lambda: nc.sum_(theta), [theta], eps=0.5)
    state = {"n": 0}

    def noisy():
        state["n"] += 1
        return nc.sum_(theta * float(state["n"]))

    with pytest.raises(RuntimeError):
        nc.grad_check(noisy, [theta])


@pytest.mark.parametrize("op", [
    lambda t: nc.sum_(nc.exp(t)),
    lambda t: nc.sum_(nc.log(nc.exp(t))),
    lambda t: nc.sum_(nc.sqrt(nc.exp(t))),
    lambda t: nc.sum_(nc.sigmoid(t) * nc.tanh(t)),
    lambda t: nc.sum_(nc.softmax_last(t) * nc.Tensor(np.array([1.0, -2.0, 0.5, 3.0]))),
    lambda t: nc.sum_(nc.log_softmax_last(t) * nc.Tensor(np.array([1.0, -2.0, 0.5, 3.0]))),
    lambda t: nc.sum_(nc.logsumexp_last(t)),
    lambda t: nc.sum_(nc.square(nc.slice_last(t, 1, 3))),
    lambda t: nc.mean_(nc.square(t), axis=0),
    lambda t: nc.sum_(nc.div(t, 2.0 + nc.square(t))),
])
def test_elementwise_ops_grad(op):
    rng = np.random.default_rng(3)
    t = make_param(rng, (2, 4))
    err = nc.grad_check(lambda: nc.sum_(op(t)) if op(t).data.ndim else op(t), [t])
    assert err < 1e-7


def test_layer_norm_grad_and_normalization():
    rng = np.random.default_rng(4)
    x = make_param(rng, (3, 8), scale=2.0)
    gain = make_param(rng, (8,))
    bias = make_param(rng, (8,))
    err = nc.grad_check(lambda: nc.sum_(nc.square(nc.layer_norm(x, gain, bias))),
                        [x, gain, bias])
    assert err < 1e-6
    ones = nc.Tensor(np.ones(8))
    zeros = nc.Tensor(np.zeros(8))
    y = nc.layer_norm(x, ones, zeros).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_concat_stack_grads():
    rng = np.random.default_rng(5)
    a = make_param(rng, (3, 2))
    b = make_param(rng, (3, 5))
    err = nc.grad_check(lambda: nc.sum_(nc.square(nc.concat_last([a, b]))), [a, b])
    assert err < 1e-8
    cols = [make_param(rng, (4,)) for _ in range(3)]
    err = nc.grad_check(lambda: nc.sum_(nc.square(nc.stack_cols(cols))), cols)
    assert err < 1e-8


# ---------------------------------------------------------------------------
# fused kernels vs composed references
# ---------------------------------------------------------------------------

def test_gru_cell_zero_weights_halves_state():
    B, E, H = 4, 3, 5
    rng = np.random.default_rng(6)
    x = nc.Tensor(rng.normal(size=(B, E)))
    h = nc.Tensor(rng.normal(size=(B, H)))
    zeros = lambda *s: nc.Tensor(np.zeros(s))
    out = nc.gru_cell(x, h, zeros(3 * H, E), zeros(3 * H), zeros(3 * H, H), zeros(3 * H))
    np.testing.assert_allclose(out.data, 0.5 * h.data, rtol=1e-12)


def test_gru_cell_grad():
    B, E, H = 2, 3, 4
    rng = np.random.default_rng(7)
    x = make_param(rng, (B, E))
    h = make_param(rng, (B, H))
    w_ih = make_param(rng, (3 * H, E))
    b_ih = make_param(rng, (3 * H,))
    w_hh = make_param(rng, (3 * H, H))
    b_hh = make_param(rng, (3 * H,))
    params = [x, h, w_ih, b_ih, w_hh, b_hh]
    target = nc.Tensor(rng.normal(size=(B, H)))
    err = nc.grad_check(
        lambda: nc.mse(nc.gru_cell(x, h, w_ih, b_ih, w_hh, b_hh), target), params)
    assert err < 1e-6


def test_cfc_cell_grad():
    B, U, H = 2, 3, 4
    rng = np.random.default_rng(8)
    h = make_param(rng, (B, H))
    u = make_param(rng, (B, U))
    w_f = make_param(rng, (H, H + U))
    b_f = make_param(rng, (H,))
    w_c = make_param(rng, (H, H + U))
    b_c = make_param(rng, (H,))
    theta = make_param(rng, (H,))
    params = [h, u, w_f, b_f, w_c, b_c, theta]
    target = nc.Tensor(rng.normal(size=(B, H)))
    err = nc.grad_check(
        lambda: nc.mse(nc.cfc_cell(h, u, w_f, b_f, w_c, b_c, theta), target), params)
    assert err < 1e-6


def _mixture_nll_reference(raw, target, K, floor):
    """Direct-density summation at 64-bit: the independent oracle."""
    B, d = target.shape
    logits = raw[:, :K]
    mu = raw[:, K:K + K * d].reshape(B, K, d)
    sig = np.maximum(np.exp(raw[:, K + K * d:].reshape(B, K, d)), floor)
    pi = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    dens = np.zeros(B)
    for j in range(K):
        comp = np.ones(B)
        for k in range(d):
            comp *= np.exp(-0.5 * ((target[:, k] - mu[:, j, k]) / sig[:, j, k]) ** 2) \
                / (sig[:, j, k] * math.sqrt(2 * math.pi))
        dens += pi[:, j] * comp
    return -np.log(dens)


def test_mixture_nll_matches_direct_density():
    rng = np.random.default_rng(9)
    K, d, B = 5, 2, 6
    raw = rng.normal(size=(B, K * (2 * d + 1)))
    target = rng.normal(size=(B, d))
    out = nc.mixture_nll(nc.Tensor(raw), nc.Tensor(target), K)
    ref = _mixture_nll_reference(raw, target, K, 1e-3)
    np.testing.assert_allclose(out.data, ref, atol=1e-9)


def test_mixture_nll_grad():
    rng = np.random.default_rng(10)
    K, d, B = 3, 2, 2
    raw = make_param(rng, (B, K * (2 * d + 1)))
    target = make_param(rng, (B, d))
    err = nc.grad_check(lambda: nc.mean_(nc.mixture_nll(raw, target, K)), [raw, target])
    assert err < 1e-6


def test_component_argmax_mean_selects_and_routes_grad():
    K, d, B = 3, 2, 2
    raw = np.zeros((B, K * (2 * d + 1)))
    raw[0, :K] = [0.1, 0.9, 0.2]
    raw[1, :K] = [0.7, 0.1, 0.2]
    mu = np.arange(B * K * d).reshape(B, K, d).astype(float)
    raw[:, K:K + K * d] = mu.reshape(B, K * d)
    t = nc.Tensor(raw, requires_grad=True)
    out = nc.component_argmax_mean(t, K, d)
    np.testing.assert_array_equal(out.data, np.stack([mu[0, 1], mu[1, 0]]))
    nc.backward(nc.sum_(out), params=[t])
    grad_mu = t.grad[:, K:K + K * d].reshape(B, K, d)
    assert grad_mu[0, 1].sum() == 2 and grad_mu[1, 0].sum() == 2
    assert t.grad.sum() == 4  # nothing leaks into logits or log-stds


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adamw_zero_lr_keeps_params():
    p = nc.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, 0.5])
    state = nc.OptimizerState.for_params([p], weight_decay=0.0)
    nc.adamw_step([p], state, lr=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adamw_first_step_moves_by_lr():
    p = nc.Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    state = nc.OptimizerState.for_params([p], weight_decay=0.0)
    nc.adamw_step([p], state, lr=1e-2)
    np.testing.assert_allclose(p.data, [-1e-2], rtol=1e-6)


def test_adamw_converges_on_quadratic():
    # optimizer-as-oracle: threshold |theta - 2| < 0.1 fixed up front
    theta = nc.Tensor(np.array([0.0]), requires_grad=True)
    state = nc.OptimizerState.for_params([theta], weight_decay=0.0)
    for _ in range(100):
        nc.zero_grads([theta])
        loss = nc.sum_(nc.square(theta - 2.0))
        nc.backward(loss, params=[theta])
        nc.adamw_step([theta], state, lr=0.1)
    assert abs(theta.data[0] - 2.0) < 0.1


def test_adamw_shape_mismatch_raises():
    p = nc.Tensor(np.zeros(3), requires_grad=True)
    q = nc.Tensor(np.zeros(2), requires_grad=True)
    state = nc.OptimizerState.for_params([p])
    with pytest.raises(ValueError):
        nc.adamw_step([q], state, lr=1e-3)


# ---------------------------------------------------------------------------
# gradient clipping
# ---------------------------------------------------------------------------

def _with_grads(arrays):
    out = []
    for a in arrays:
        t = nc.Tensor(np.zeros_like(np.asarray(a, dtype=float)), requires_grad=True)
        t.grad = np.asarray(a, dtype=float)
        out.append(t)
    return out


def test_clip_below_threshold_unchanged():
    params = _with_grads([[0.3, 0.4]])
    nc.clip_global_norm(params, 1.0)
    np.testing.assert_array_equal(params[0].grad, [0.3, 0.4])


def test_clip_scales_norm_five_vector():
    params = _with_grads([[3.0, 4.0]])
    nc.clip_global_norm(params, 1.0)
    np.testing.assert_allclose(params[0].grad, [0.6, 0.8], rtol=1e-12)


def test_clip_zero_grads_stay_zero():
    params = _with_grads([[0.0, 0.0]])
    nc.clip_global_norm(params, 1.0)
    np.testing.assert_array_equal(params[0].grad, [0.0, 0.0])


def test_clip_rejects_nonfinite():
    params = _with_grads([[np.inf, 1.0]])
    with pytest.raises(FloatingPointError):
        nc.clip_global_norm(params, 1.0)


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8),
       st.floats(0.1, 5.0))
@settings(max_examples=200, deadline=None)
def test_clip_postnorm_never_exceeds_bound(values, max_norm):
    params = _with_grads([values])
    nc.clip_global_norm(params, max_norm)
    assert nc.global_grad_norm(params) <= max_norm + 1e-6


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def test_lr_schedule_anchor_points():
    sched = nc.LrSchedule(peak_lr=3e-4)
    assert nc.lr_at(sched, 3.0) == pytest.approx(3e-4)
    assert nc.lr_at(sched, 120.0) == pytest.approx(3e-7)
    assert nc.lr_at(sched, 1.5) == pytest.approx(0.5 * 3e-4)
    assert nc.lr_at(sched, 0.0) == 0.0


def test_lr_schedule_continuous_at_junction():
    sched = nc.LrSchedule(peak_lr=1e-3, warmup_epochs=3, total_epochs=50)
    below = nc.lr_at(sched, 3.0 - 1e-9)
    above = nc.lr_at(sched, 3.0 + 1e-9)
    assert abs(below - above) < 1e-9


def test_lr_schedule_out_of_range():
    sched = nc.LrSchedule()
    with pytest.raises(ValueError):
        nc.lr_at(sched, -0.1)
    with pytest.raises(ValueError):
        nc.lr_at(sched, 121.0)


@given(st.floats(0.0, 120.0), st.floats(0.0, 120.0))
@settings(max_examples=200, deadline=None)
def test_lr_schedule_monotone_shape(p1, p2):
    sched = nc.LrSchedule(peak_lr=3e-4)
    lo, hi = sorted((p1, p2))
    if hi <= sched.warmup_epochs:
        assert nc.lr_at(sched, lo) <= nc.lr_at(sched, hi) + 1e-15
    elif lo >= sched.warmup_epochs:
        assert nc.lr_at(sched, lo) >= nc.lr_at(sched, hi) - 1e-15
    assert nc.lr_at(sched, hi) >= sched.floor_lr - 1e-18 or hi < sched.warmup_epochs


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------

def test_forward_and_grads_bit_identical_across_repeats():
    def run():
        rng = np.random.default_rng(42)
        w = nc.Tensor(rng.normal(size=(6, 6)).astype(np.float32), requires_grad=True)
        x = nc.Tensor(rng.normal(size=(4, 6)).astype(np.float32))
        loss = nc.mse(nc.tanh(nc.linear(x, w)), nc.Tensor(np.zeros((4, 6), np.float32)))
        nc.backward(loss, params=[w])
        return loss.item(), w.grad.tobytes()

    assert run() == run()


def test_no_grad_skips_recording():
    w = nc.Tensor(np.ones(3), requires_grad=True)
    with nc.no_grad():
        out = nc.sum_(nc.square(w))
    assert out._backward is None and not out.requires_grad
