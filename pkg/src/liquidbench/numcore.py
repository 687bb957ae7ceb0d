"""Dense-tensor core with reverse-mode autodiff, AdamW, LR schedule and clipping.

Tensors wrap numpy arrays (float32 for training, float64 for gradient-check
suites) and record a computation graph when gradients are enabled. The hot
recurrent kernels (GRU cell, CfC cell, mixture NLL) are fused primitives with
hand-derived backwards; everything is verified against central finite
differences via `grad_check`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "backward", "zero_grads",
    "grad_check", "global_grad_norm", "clip_global_norm",
    "OptimizerState", "adamw_step", "LrSchedule", "lr_at",
]

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording (evaluation / sampling paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional array with optional gradient tracking.

    Invariants: data.size == prod(shape); grad, when present, matches data's
    shape; non-finite values in a loss or gradient are treated as errors at
    the backward/clip boundaries.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # convenience operator sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn):
    """Wrap an op result; records the closure only when a grad path exists."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(a.data / b.data, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    def bw(g):
        _accum(a, -g)
    return _make(-a.data, (a,), bw)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    def bw(g):
        _accum(a, g * out_data)
    return _make(out_data, (a,), bw)


def log(a):
    a = as_tensor(a)
    def bw(g):
        _accum(a, g / a.data)
    return _make(np.log(a.data), (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    def bw(g):
        _accum(a, g * 0.5 / out_data)
    return _make(out_data, (a,), bw)


def square(a):
    a = as_tensor(a)
    def bw(g):
        _accum(a, g * 2.0 * a.data)
    return _make(a.data * a.data, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)
    def bw(g):
        _accum(a, g * (1.0 - out_data * out_data))
    return _make(out_data, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data))
    return _make(out_data, (a,), bw)


def maximum_scalar(a, floor):
    """Elementwise max(a, floor); gradient is zero where the floor binds."""
    a = as_tensor(a)
    mask = a.data >= floor
    def bw(g):
        _accum(a, g * mask)
    return _make(np.maximum(a.data, floor), (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    def bw(g):
        _accum(a, g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), bw)


def concat_last(tensors):
    ts = [as_tensor(t) for t in tensors]
    widths = [t.shape[-1] for t in ts]
    def bw(g):
        offset = 0
        for t, w in zip(ts, widths):
            _accum(t, g[..., offset:offset + w])
            offset += w
    return _make(np.concatenate([t.data for t in ts], axis=-1), ts, bw)


def slice_last(a, start, stop):
    a = as_tensor(a)
    def bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _accum(a, full)
    return _make(np.ascontiguousarray(a.data[..., start:stop]), (a,), bw)


def stack_cols(tensors):
    """Stack a list of (B,) tensors into (B, n)."""
    ts = [as_tensor(t) for t in tensors]
    def bw(g):
        for i, t in enumerate(ts):
            _accum(t, g[:, i])
    return _make(np.stack([t.data for t in ts], axis=1), ts, bw)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape) / count)
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None):
    """y = x @ w.T (+ b); w has shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data
    def bw(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        if b is not None:
            _accum(b, g.sum(axis=tuple(range(g.ndim - 1))))
    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, bw)


# ---------------------------------------------------------------------------
# softmax family (stable, over the last axis)
# ---------------------------------------------------------------------------

def logsumexp_last(a):
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=-1, keepdims=True)
    out_data = (m + np.log(total)).squeeze(-1)
    soft = shifted / total
    def bw(g):
        _accum(a, np.expand_dims(g, -1) * soft)
    return _make(out_data, (a,), bw)


def log_softmax_last(a):
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)
    def bw(g):
        _accum(a, g - soft * g.sum(axis=-1, keepdims=True))
    return _make(out_data, (a,), bw)


def softmax_last(a):
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out_data = e / e.sum(axis=-1, keepdims=True)
    def bw(g):
        _accum(a, out_data * (g - (g * out_data).sum(axis=-1, keepdims=True)))
    return _make(out_data, (a,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then rescale."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    out_data = y * gain.data + bias.data
    def bw(g):
        dy = g * gain.data
        _accum(gain, (g * y).sum(axis=tuple(range(g.ndim - 1))))
        _accum(bias, g.sum(axis=tuple(range(g.ndim - 1))))
        m1 = dy.mean(axis=-1, keepdims=True)
        m2 = (dy * y).mean(axis=-1, keepdims=True)
        _accum(x, (dy - m1 - y * m2) * inv)
    return _make(out_data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# fused recurrent / mixture kernels
# ---------------------------------------------------------------------------

def gru_cell(x, h, w_ih, b_ih, w_hh, b_hh):
    """Standard GRU cell step. Gate order in the packed 3H weights: r, z, n.

    h' = (1 - z) * n + z * h with z the update gate, so zero weights give
    h' = 0.5 * h.
    """
    x, h = as_tensor(x), as_tensor(h)
    w_ih, b_ih, w_hh, b_hh = map(as_tensor, (w_ih, b_ih, w_hh, b_hh))
    H = h.shape[-1]
    gi = x.data @ w_ih.data.T + b_ih.data
    gh = h.data @ w_hh.data.T + b_hh.data
    r = 1.0 / (1.0 + np.exp(-(gi[:, :H] + gh[:, :H])))
    z = 1.0 / (1.0 + np.exp(-(gi[:, H:2 * H] + gh[:, H:2 * H])))
    ghn = gh[:, 2 * H:]
    n = np.tanh(gi[:, 2 * H:] + r * ghn)
    out_data = (1.0 - z) * n + z * h.data

    def bw(g):
        dn = g * (1.0 - z)
        dz = g * (h.data - n)
        dnpre = dn * (1.0 - n * n)
        dzpre = dz * z * (1.0 - z)
        dr = dnpre * ghn
        drpre = dr * r * (1.0 - r)
        dgi = np.concatenate([drpre, dzpre, dnpre], axis=1)
        dgh = np.concatenate([drpre, dzpre, dnpre * r], axis=1)
        _accum(x, dgi @ w_ih.data)
        _accum(w_ih, dgi.T @ x.data)
        _accum(b_ih, dgi.sum(axis=0))
        _accum(h, dgh @ w_hh.data + g * z)
        _accum(w_hh, dgh.T @ h.data)
        _accum(b_hh, dgh.sum(axis=0))

    return _make(out_data, (x, h, w_ih, b_ih, w_hh, b_hh), bw)


def cfc_cell(h_prev, u, w_f, b_f, w_c, b_c, theta_tau, eps_guard=1e-6):
    """Closed-form continuous-time cell step.

    gate = sigmoid(W_f [h;u] + b_f) / (exp(theta_tau) + sigmoid(.) + eps_guard)
    h'   = gate * tanh(W_c [h;u] + b_c) + (1 - gate) * h_prev
    """
    h_prev, u = as_tensor(h_prev), as_tensor(u)
    w_f, b_f, w_c, b_c, theta_tau = map(as_tensor, (w_f, b_f, w_c, b_c, theta_tau))
    H = h_prev.shape[-1]
    z = np.concatenate([h_prev.data, u.data], axis=-1)
    f = 1.0 / (1.0 + np.exp(-(z @ w_f.data.T + b_f.data)))
    tau = np.exp(theta_tau.data)
    denom = tau + f + eps_guard
    gate = f / denom
    cand = np.tanh(z @ w_c.data.T + b_c.data)
    out_data = gate * cand + (1.0 - gate) * h_prev.data

    def bw(g):
        dgate = g * (cand - h_prev.data)
        dcand = g * gate
        dcpre = dcand * (1.0 - cand * cand)
        df = dgate * (denom - f) / (denom * denom)
        dtau = dgate * (-f / (denom * denom))
        dfpre = df * f * (1.0 - f)
        dz = dfpre @ w_f.data + dcpre @ w_c.data
        _accum(w_f, dfpre.T @ z)
        _accum(b_f, dfpre.sum(axis=0))
        _accum(w_c, dcpre.T @ z)
        _accum(b_c, dcpre.sum(axis=0))
        _accum(theta_tau, (dtau * tau).sum(axis=0))
        _accum(h_prev, dz[:, :H] + g * (1.0 - gate))
        _accum(u, dz[:, H:])

    return _make(out_data, (h_prev, u, w_f, b_f, w_c, b_c, theta_tau), bw)


def mixture_nll(raw, target, n_components, sigma_floor=1e-3):
    """Exact diagonal-Gaussian-mixture NLL from a raw head output.

    raw layout along the last axis: [K logits | K*d means | K*d log-stds];
    target has shape (B, d). Returns per-sample NLL of shape (B,), computed
    through log-sum-exp so finite inputs with floored sigma never overflow.
    """
    raw, target = as_tensor(raw), as_tensor(target)
    K = n_components
    B, d = target.shape
    logits = raw.data[:, :K]
    mu = raw.data[:, K:K + K * d].reshape(B, K, d)
    logsig = raw.data[:, K + K * d:].reshape(B, K, d)
    sig_exp = np.exp(logsig)
    sig = np.maximum(sig_exp, sigma_floor)

    lse_logits = logits.max(axis=1, keepdims=True)
    log_pi = logits - (lse_logits + np.log(np.exp(logits - lse_logits).sum(axis=1, keepdims=True)))
    zscore = (target.data[:, None, :] - mu) / sig
    comp_ll = (-0.5 * math.log(2.0 * math.pi) - np.log(sig) - 0.5 * zscore * zscore).sum(axis=2)
    joint = log_pi + comp_ll
    m = joint.max(axis=1, keepdims=True)
    total = m.squeeze(1) + np.log(np.exp(joint - m).sum(axis=1))
    out_data = -total

    def bw(g):
        resp = np.exp(joint - total[:, None])          # posterior over components
        pis = np.exp(log_pi)
        dtot = -g[:, None]
        dlogits = dtot * (resp - pis)
        dmu = dtot[:, :, None] * resp[:, :, None] * (zscore / sig)
        dsig = dtot[:, :, None] * resp[:, :, None] * ((zscore * zscore - 1.0) / sig)
        dlogsig = dsig * np.where(sig_exp >= sigma_floor, sig_exp, 0.0)
        draw = np.concatenate(
            [dlogits, dmu.reshape(B, K * d), dlogsig.reshape(B, K * d)], axis=1)
        _accum(raw, draw)
        _accum(target, (dtot[:, :, None] * resp[:, :, None] * (-zscore / sig)).sum(axis=1))

    return _make(out_data, (raw, target), bw)


def component_argmax_mean(raw, n_components, d_action):
    """Mean of the highest-weight mixture component; gradient flows through
    the selected means only (the argmax index is treated as constant)."""
    raw = as_tensor(raw)
    K = n_components
    B = raw.shape[0]
    idx = raw.data[:, :K].argmax(axis=1)
    mu = raw.data[:, K:K + K * d_action].reshape(B, K, d_action)
    out_data = mu[np.arange(B), idx]

    def bw(g):
        full = np.zeros_like(raw.data)
        dmu = full[:, K:K + K * d_action].reshape(B, K, d_action)
        dmu[np.arange(B), idx] = g
        _accum(raw, full)

    return _make(out_data, (raw,), bw)


def mse(pred, target):
    """Mean squared error over all entries (scalar)."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    def bw(g):
        scale = g * 2.0 / diff.size
        _accum(pred, scale * diff)
        _accum(target, -scale * diff)
    return _make(np.asarray((diff * diff).mean()), (pred, target), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None or p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Populate .grad on every tensor that contributed to `loss`.

    If `params` is given, any listed parameter that did not contribute ends
    up with an explicit zero gradient.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad.reshape(node.shape))
            if node._parents:
                node.grad = None  # free intermediate grads
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(params):
    for p in params:
        p.grad = None


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_global_norm(params, max_norm=1.0):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm. Raises on non-finite gradients.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradients")
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(forward_fn, params, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    forward_fn must be deterministic (checked by evaluating the baseline
    twice) and return a scalar Tensor. Error per entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError("eps must be in (0, 1e-2]")
    base = forward_fn().item()
    if forward_fn().item() != base:
        raise RuntimeError("forward_fn is not deterministic")
    zero_grads(params)
    loss = forward_fn()
    backward(loss, params=params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = forward_fn().item()
            flat[i] = orig - eps
            down = forward_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(an_flat[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(an_flat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# optimizer + learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """AdamW accumulators; one slot per parameter, matched by position."""

    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        return cls(betas=betas, eps=eps, weight_decay=weight_decay,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adamw_step(params, state, lr):
    """One decoupled-weight-decay Adam update; increments state.step."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise ValueError("optimizer slot shape mismatch")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * state.weight_decay * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to peak over warmup_epochs, then cosine to floor_lr."""

    peak_lr: float = 3e-4
    warmup_epochs: float = 3.0
    total_epochs: float = 120.0
    floor_lr: float = 3e-7


def lr_at(schedule, epoch_progress):
    """Learning rate at fractional epoch progress in [0, total_epochs]."""
    s = schedule
    if not (0.0 <= epoch_progress <= s.total_epochs):
        raise ValueError(f"progress {epoch_progress} outside [0, {s.total_epochs}]")
    if epoch_progress < s.warmup_epochs:
        return s.peak_lr * epoch_progress / s.warmup_epochs
    span = s.total_epochs - s.warmup_epochs
    if span <= 0:
        return s.floor_lr
    frac = (epoch_progress - s.warmup_epochs) / span
    return s.floor_lr + 0.5 * (s.peak_lr - s.floor_lr) * (1.0 + math.cos(math.pi * frac))
