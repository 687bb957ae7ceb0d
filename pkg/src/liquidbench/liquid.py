"""Liquid policy head: stacked CfC recurrent encoder feeding an autoregressive
GRU decoder with a K-component Gaussian mixture output.

The decoder runs in two modes: teacher-forced (ground-truth feedback) and
free-running (the model feeds back its own argmax-component mean, or a sample
in stochastic mode). Mixture NLL is exact, computed through log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Tensor

LIQUID_SEED_TAG = 202
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LiquidConfig:
    d_model: int = 64
    d_action: int = 2
    n_cfc_layers: int = 5
    hidden_ratio: float = 1.875     # CfC hidden size relative to d_model
    n_components: int = 5
    horizon: int = 16
    embed_dim: int = 32
    sigma_floor: float = 1e-3
    eps_guard: float = 1e-6

    @property
    def hidden_size(self):
        return int(round(self.hidden_ratio * self.d_model))

    @property
    def head_width(self):
        # one logit plus per-dimension mean and log-std for each component
        return self.n_components * (2 * self.d_action + 1)


@dataclass
class MixtureParams:
    """Per-step mixture: weights on the simplex, means and floored stds."""

    weights: np.ndarray   # (..., K)
    means: np.ndarray     # (..., K, d)
    stds: np.ndarray      # (..., K, d)


@dataclass
class DecoderState:
    s: Tensor             # (B, H) GRU hidden
    k: int = 0            # decode step index


def sigma_floor_nll(d_action, sigma_floor):
    """NLL of a point mass under a floored near-delta Gaussian: the analytic
    lower bound d*(0.5*ln(2*pi) + ln(sigma_floor))."""
    return d_action * (0.5 * LOG_2PI + float(np.log(sigma_floor)))


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


class LiquidHead:
    def __init__(self, config: LiquidConfig, seed=42, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        c = config
        H, E, S = c.hidden_size, c.embed_dim, c.hidden_size
        rng = np.random.default_rng(np.random.SeedSequence([seed, LIQUID_SEED_TAG]))
        p = {}
        for layer in range(c.n_cfc_layers):
            d_in = c.d_model if layer == 0 else H
            z_dim = H + d_in
            p[f"cfc{layer}.w_f"] = _uniform(rng, (H, z_dim), z_dim, dtype)
            p[f"cfc{layer}.b_f"] = Tensor(np.zeros(H, dtype), requires_grad=True)
            p[f"cfc{layer}.w_c"] = _uniform(rng, (H, z_dim), z_dim, dtype)
            p[f"cfc{layer}.b_c"] = Tensor(np.zeros(H, dtype), requires_grad=True)
            p[f"cfc{layer}.theta_tau"] = Tensor(np.zeros(H, dtype), requires_grad=True)
        p["init.w"] = _uniform(rng, (S, H), H, dtype)
        p["init.b"] = Tensor(np.zeros(S, dtype), requires_grad=True)
        p["embed.w"] = _uniform(rng, (E, c.d_action), c.d_action, dtype)
        p["embed.b"] = Tensor(np.zeros(E, dtype), requires_grad=True)
        p["gru.w_ih"] = _uniform(rng, (3 * S, E), S, dtype)
        p["gru.b_ih"] = Tensor(np.zeros(3 * S, dtype), requires_grad=True)
        p["gru.w_hh"] = _uniform(rng, (3 * S, S), S, dtype)
        p["gru.b_hh"] = Tensor(np.zeros(3 * S, dtype), requires_grad=True)
        p["head.w"] = _uniform(rng, (c.head_width, S), S, dtype)
        p["head.b"] = Tensor(np.zeros(c.head_width, dtype), requires_grad=True)
        p["start_token"] = Tensor(np.zeros(c.d_action, dtype), requires_grad=True)
        self.params = p

    def n_params(self):
        return sum(t.size for t in self.params.values())

    # -- CfC encoder --------------------------------------------------------

    def cfc_layer_params(self, layer):
        p = self.params
        return (p[f"cfc{layer}.w_f"], p[f"cfc{layer}.b_f"],
                p[f"cfc{layer}.w_c"], p[f"cfc{layer}.b_c"],
                p[f"cfc{layer}.theta_tau"])

    def cfc_cell_step(self, h_prev, u, layer):
        w_f, b_f, w_c, b_c, theta = self.cfc_layer_params(layer)
        return nc.cfc_cell(h_prev, u, w_f, b_f, w_c, b_c, theta, self.config.eps_guard)

    def cfc_encode(self, context_seq):
        """Run the stacked CfC encoder over a sequence of (B, d_in) inputs.

        Layer l consumes layer l-1's full hidden sequence; returns the final
        top-layer hidden state. In the policy path the sequence is the single
        shared context latent.
        """
        seq = [t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=self.dtype))
               for t in context_seq]
        if not seq:
            raise ValueError("empty context sequence")
        H = self.config.hidden_size
        batch = seq[0].shape[0]
        hidden = None
        for layer in range(self.config.n_cfc_layers):
            h = Tensor(np.zeros((batch, H), self.dtype))
            outputs = []
            for u in seq:
                h = self.cfc_cell_step(h, u, layer)
                outputs.append(h)
            seq = outputs
            hidden = h
        return hidden

    # -- decoder ------------------------------------------------------------

    def decoder_init(self, summary):
        return DecoderState(s=nc.linear(summary, self.params["init.w"], self.params["init.b"]), k=0)

    def gru_step(self, prev_action, state: DecoderState):
        if state.k >= self.config.horizon:
            raise ValueError(f"decode step {state.k} beyond horizon {self.config.horizon}")
        p = self.params
        e = nc.tanh(nc.linear(prev_action, p["embed.w"], p["embed.b"]))
        s = nc.gru_cell(e, state.s, p["gru.w_ih"], p["gru.b_ih"], p["gru.w_hh"], p["gru.b_hh"])
        return DecoderState(s=s, k=state.k + 1)

    def head_raw(self, state: DecoderState):
        return nc.linear(state.s, self.params["head.w"], self.params["head.b"])

    def mdn_params(self, state: DecoderState):
        """Mixture parameters from the decoder state (composed-op path)."""
        c = self.config
        raw = self.head_raw(state)
        if not np.isfinite(raw.data).all():
            raise FloatingPointError("non-finite mixture head output")
        K, d = c.n_components, c.d_action
        pi = nc.softmax_last(nc.slice_last(raw, 0, K))
        mu = nc.reshape(nc.slice_last(raw, K, K + K * d), (-1, K, d))
        sigma = nc.maximum_scalar(nc.exp(nc.reshape(nc.slice_last(raw, K + K * d, c.head_width),
                                                    (-1, K, d))), c.sigma_floor)
        return MixtureParams(weights=pi, means=mu, stds=sigma)

    def mdn_nll(self, mix: MixtureParams, action):
        """Exact mixture NLL via log-sum-exp (composed-op reference path)."""
        action = action if isinstance(action, Tensor) else Tensor(np.asarray(action, self.dtype))
        a = nc.reshape(action, (-1, 1, self.config.d_action))
        z = nc.div(nc.sub(a, mix.means), mix.stds)
        comp_ll = nc.sum_(nc.sub(nc.sub(Tensor(np.array(-0.5 * LOG_2PI)), nc.log(mix.stds)),
                                 nc.mul(0.5, nc.square(z))), axis=2)
        joint = nc.add(nc.log(mix.weights), comp_ll)
        return nc.neg(nc.logsumexp_last(joint))

    # -- windowed decodes ---------------------------------------------------

    def _decode_nll(self, ctx, gt_actions, free_running):
        c = self.config
        ctx_t = ctx if isinstance(ctx, Tensor) else Tensor(np.asarray(ctx, self.dtype))
        gt = np.asarray(gt_actions, self.dtype)
        if gt.ndim == 2:
            gt = gt[None]
        B = gt.shape[0]
        if gt.shape[1] != c.horizon or gt.shape[2] != c.d_action:
            raise ValueError(f"expected actions of shape (B, {c.horizon}, {c.d_action}), got {gt.shape}")
        summary = self.cfc_encode([ctx_t])
        state = self.decoder_init(summary)
        prev = nc.add(Tensor(np.zeros((B, c.d_action), self.dtype)), self.params["start_token"])
        step_nlls = []
        for k in range(c.horizon):
            state = self.gru_step(prev, state)
            raw = self.head_raw(state)
            step_nlls.append(nc.mixture_nll(raw, Tensor(gt[:, k]), c.n_components, c.sigma_floor))
            if free_running:
                prev = nc.component_argmax_mean(raw, c.n_components, c.d_action)
            else:
                prev = Tensor(gt[:, k])
        per_step = nc.stack_cols(step_nlls)     # (B, horizon)
        return per_step, nc.mean_(per_step)

    def decode_teacher_forced(self, ctx, gt_actions):
        """Per-step NLL (B, horizon) and its mean under ground-truth feedback."""
        return self._decode_nll(ctx, gt_actions, free_running=False)

    def decode_free_running_nll(self, ctx, gt_actions):
        """Ground truth scored under the mixtures along the self-fed path
        (deterministic argmax-component-mean feedback)."""
        return self._decode_nll(ctx, gt_actions, free_running=True)

    def decode_free_running(self, ctx, mode="deterministic", seed=0):
        """Generate one window per context row; returns (B, horizon, d_action)
        actions plus the per-step MixtureParams along the self-fed path."""
        if mode not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown decode mode {mode!r}")
        c = self.config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed)])) if mode == "stochastic" else None
        with nc.no_grad():
            ctx_t = ctx if isinstance(ctx, Tensor) else Tensor(np.asarray(ctx, self.dtype))
            if ctx_t.data.ndim == 1:
                ctx_t = Tensor(ctx_t.data[None])
            B = ctx_t.shape[0]
            summary = self.cfc_encode([ctx_t])
            state = self.decoder_init(summary)
            prev = np.broadcast_to(self.params["start_token"].data, (B, c.d_action)).copy()
            actions = np.zeros((B, c.horizon, c.d_action), self.dtype)
            mixtures = []
            for k in range(c.horizon):
                state = self.gru_step(Tensor(prev), state)
                mix = self.mdn_params(state)
                pi, mu, sig = mix.weights.data, mix.means.data, mix.stds.data
                mixtures.append(MixtureParams(pi, mu, sig))
                if mode == "deterministic":
                    step = mu[np.arange(B), pi.argmax(axis=1)]
                else:
                    cum = pi.cumsum(axis=1)
                    cum[:, -1] = 1.0
                    comp = (rng.random((B, 1)) < cum).argmax(axis=1)
                    sel = np.arange(B)
                    step = mu[sel, comp] + sig[sel, comp] * rng.standard_normal((B, c.d_action))
                actions[:, k] = step.astype(self.dtype)
                prev = actions[:, k]
        return actions, mixtures

    def sample_trajectories(self, ctx, n_samples, seed):
        """n_samples independent stochastic decodes; sub-seed i is derived as
        SeedSequence([seed, i]) so sample sets are prefix-stable in K."""
        if n_samples < 1:
            raise ValueError("need at least one sample")
        out = []
        for i in range(n_samples):
            sub = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
            actions, _ = self.decode_free_running(ctx, mode="stochastic", seed=sub)
            out.append(actions)
        return np.stack(out)     # (n_samples, B, horizon, d_action)
