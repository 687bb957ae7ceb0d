"""DDPM baseline head: conditional noise-prediction MLP over the flattened
action window, trained with the standard denoising objective and sampled by
ancestral reversal with a fixed number of steps (default 50).

The denoiser width is solved at construction so the diffusion head carries
about twice the parameters of the liquid head, keeping the half-parameter
comparison honest. A call counter on the denoiser exposes the structural
sequential cost (exactly T evaluations per sampled trajectory).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

DIFFUSION_SEED_TAG = 303


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self):
        return len(self.betas)


def make_schedule(n_steps=50, beta_start=1e-4, beta_end=2e-2):
    """Linear beta schedule; alpha_bar is the running product of (1 - beta)."""
    if n_steps < 1:
        raise ValueError("need at least one denoising step")
    betas = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(x0, t, eps, schedule):
    """Forward-noising draw x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t is a 1-based step index (scalar or per-row array).
    """
    t_idx = np.asarray(t) - 1
    if np.any(t_idx < 0) or np.any(t_idx >= schedule.n_steps):
        raise ValueError("t out of schedule range")
    abar = schedule.alpha_bars[t_idx]
    while abar.ndim < np.ndim(x0):
        abar = np.expand_dims(abar, -1)
    return np.sqrt(abar) * np.asarray(x0) + np.sqrt(1.0 - abar) * np.asarray(eps)


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def solve_denoiser_width(target_params, in_dim, out_dim):
    """Width of a 2-hidden-layer MLP whose parameter count best matches
    target_params: count(w) = w^2 + (in+out+2) w + out."""
    b = in_dim + out_dim + 2
    c = out_dim - target_params
    w = int(round((-b + math.sqrt(b * b - 4.0 * c)) / 2.0))
    return max(w, 8)


@dataclass(frozen=True)
class DiffusionConfig:
    d_model: int = 64
    d_action: int = 2
    horizon: int = 16
    n_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    t_embed_dim: int = 32
    width: int = 256

    @property
    def window_dim(self):
        return self.horizon * self.d_action

    @property
    def in_dim(self):
        return self.window_dim + self.t_embed_dim + self.d_model


class DiffusionHead:
    def __init__(self, config: DiffusionConfig, seed=42, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.schedule = make_schedule(config.n_steps, config.beta_start, config.beta_end)
        self.denoiser_calls = 0
        rng = np.random.default_rng(np.random.SeedSequence([seed, DIFFUSION_SEED_TAG]))
        w = config.width

        def lin(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)

        self.params = {
            "fc1.w": lin((w, config.in_dim), config.in_dim),
            "fc1.b": Tensor(np.zeros(w, dtype), requires_grad=True),
            "fc2.w": lin((w, w), w),
            "fc2.b": Tensor(np.zeros(w, dtype), requires_grad=True),
            "out.w": lin((config.window_dim, w), w),
            "out.b": Tensor(np.zeros(config.window_dim, dtype), requires_grad=True),
        }

    def n_params(self):
        return sum(t.size for t in self.params.values())

    def reset_call_counter(self):
        self.denoiser_calls = 0

    def denoise(self, x_t, t, ctx):
        """Predict the noise in x_t given timestep t and context. x_t may be
        (B, window_dim) flat or (B, horizon, d_action)."""
        c = self.config
        x_arr = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, self.dtype)
        flat = x_arr.reshape(x_arr.shape[0], -1)
        emb = timestep_embedding(t, c.t_embed_dim).astype(self.dtype)
        if emb.shape[0] == 1 and flat.shape[0] > 1:
            emb = np.broadcast_to(emb, (flat.shape[0], c.t_embed_dim))
        ctx_arr = ctx.data if isinstance(ctx, Tensor) else np.asarray(ctx, self.dtype)
        inp = Tensor(np.concatenate([flat, emb, ctx_arr], axis=1).astype(self.dtype))
        p = self.params
        h = nc.tanh(nc.linear(inp, p["fc1.w"], p["fc1.b"]))
        h = nc.tanh(nc.linear(h, p["fc2.w"], p["fc2.b"]))
        out = nc.linear(h, p["out.w"], p["out.b"])
        self.denoiser_calls += 1
        return out

    def denoise_loss(self, x0, ctx, seed=None, t=None, eps=None):
        """Noise-prediction MSE. Either pass a seed (t uniform in [1, T], eps
        standard normal) or fix (t, eps) explicitly for gradient checks."""
        c = self.config
        x0 = np.asarray(x0, self.dtype).reshape(-1, c.window_dim)
        B = x0.shape[0]
        if t is None or eps is None:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
            t = rng.integers(1, c.n_steps + 1, size=B)
            eps = rng.standard_normal((B, c.window_dim)).astype(self.dtype)
        t = np.atleast_1d(t)
        eps = np.asarray(eps, self.dtype).reshape(B, c.window_dim)
        x_t = q_sample(x0, t, eps, self.schedule).astype(self.dtype)
        pred = self.denoise(x_t, t, ctx)
        return nc.mse(pred, Tensor(eps))

    def sample(self, ctx, seed):
        """Ancestral DDPM sampling: exactly n_steps denoiser calls per batch,
        final output clipped to [-1, 1]. Returns (B, horizon, d_action)."""
        c = self.config
        sched = self.schedule
        ctx_arr = ctx.data if isinstance(ctx, Tensor) else np.asarray(ctx, self.dtype)
        if ctx_arr.ndim == 1:
            ctx_arr = ctx_arr[None]
        B = ctx_arr.shape[0]
        rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
        x = rng.standard_normal((B, c.window_dim)).astype(self.dtype)
        with nc.no_grad():
            for step in range(c.n_steps, 0, -1):
                eps_hat = self.denoise(x, np.full(B, step), ctx_arr).data
                beta = sched.betas[step - 1]
                alpha = sched.alphas[step - 1]
                abar = sched.alpha_bars[step - 1]
                mean = (x - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
                if step > 1:
                    abar_prev = sched.alpha_bars[step - 2]
                    sigma = math.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
                    x = (mean + sigma * rng.standard_normal((B, c.window_dim))).astype(self.dtype)
                else:
                    x = mean.astype(self.dtype)
        return np.clip(x, -1.0, 1.0).reshape(B, c.horizon, c.d_action)

    def sample_trajectories(self, ctx, n_samples, seed):
        """n_samples prefix-stable stochastic samples per context row."""
        if n_samples < 1:
            raise ValueError("need at least one sample")
        out = []
        for i in range(n_samples):
            sub = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
            out.append(self.sample(ctx, sub))
        return np.stack(out)
