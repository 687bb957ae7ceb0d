"""Shared context encoder: maps a normalized observation window to one latent
vector that both policy heads consume.

The backbone is constructed deterministically from the experiment seed and
kept frozen, so separately trained heads are guaranteed to see byte-identical
context for the same sample. Default shape: flatten the (H_o, d_obs) window,
two layer-normalized tanh hidden layers of width d_model, then a linear
projection to d_model. A single self-attention block over the H_o positions
can be switched on for fidelity experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKBONE_SEED_TAG = 101


@dataclass
class ContextLatent:
    """Latent context vector plus a provenance tag naming the sample."""

    vector: np.ndarray
    sample_id: str

    def __post_init__(self):
        if not np.isfinite(self.vector).all():
            raise ValueError("non-finite context latent")


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Backbone:
    def __init__(self, d_obs, h_obs=2, d_model=64, attention=False, seed=42,
                 dtype=np.float32):
        self.d_obs = d_obs
        self.h_obs = h_obs
        self.d_model = d_model
        self.attention = attention
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, BACKBONE_SEED_TAG]))
        p = {}
        if attention:
            p["attn_in_w"] = _uniform_init(rng, (d_model, d_obs), d_obs, dtype)
            for name in ("q", "k", "v"):
                p[f"attn_{name}_w"] = _uniform_init(rng, (d_model, d_model), d_model, dtype)
            p["attn_ln_g"] = np.ones(d_model, dtype)
            p["attn_ln_b"] = np.zeros(d_model, dtype)
            flat_in = h_obs * d_model
        else:
            flat_in = h_obs * d_obs
        p["fc1_w"] = _uniform_init(rng, (d_model, flat_in), flat_in, dtype)
        p["fc1_b"] = np.zeros(d_model, dtype)
        p["ln1_g"] = np.ones(d_model, dtype)
        p["ln1_b"] = np.zeros(d_model, dtype)
        p["fc2_w"] = _uniform_init(rng, (d_model, d_model), d_model, dtype)
        p["fc2_b"] = np.zeros(d_model, dtype)
        p["ln2_g"] = np.ones(d_model, dtype)
        p["ln2_b"] = np.zeros(d_model, dtype)
        p["proj_w"] = _uniform_init(rng, (d_model, d_model), d_model, dtype)
        p["proj_b"] = np.zeros(d_model, dtype)
        self.params = p

    def n_params(self):
        return sum(v.size for v in self.params.values())

    @staticmethod
    def _layer_norm(x, gain, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normalized = centered / np.sqrt(var + eps)
        return normalized * gain + bias, normalized

    def forward(self, windows, return_hidden=False):
        """Encode a batch of (H_o, d_obs) windows into (B, d_model) latents."""
        x = np.asarray(windows, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.h_obs, self.d_obs):
            raise ValueError(f"expected windows of shape (B, {self.h_obs}, {self.d_obs}), got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("non-finite observation window")
        p = self.params
        hidden = {}
        if self.attention:
            tok = x @ p["attn_in_w"].T                      # (B, H_o, d_model)
            q, k, v = (tok @ p[f"attn_{n}_w"].T for n in ("q", "k", "v"))
            scores = q @ k.transpose(0, 2, 1) / np.sqrt(self.d_model)
            scores -= scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=-1, keepdims=True)
            tok, _ = self._layer_norm(tok + attn @ v, p["attn_ln_g"], p["attn_ln_b"])
            flat = tok.reshape(x.shape[0], -1)
        else:
            flat = x.reshape(x.shape[0], -1)
        h1 = flat @ p["fc1_w"].T + p["fc1_b"]
        h1, hidden["ln1_pre_affine"] = self._layer_norm(h1, p["ln1_g"], p["ln1_b"])
        h1 = np.tanh(h1)
        h2 = h1 @ p["fc2_w"].T + p["fc2_b"]
        h2, hidden["ln2_pre_affine"] = self._layer_norm(h2, p["ln2_g"], p["ln2_b"])
        h2 = np.tanh(h2)
        latent = h2 @ p["proj_w"].T + p["proj_b"]
        if return_hidden:
            return latent, hidden
        return latent

    def encode_window(self, obs_window, sample_id=""):
        """Encode one window into a ContextLatent (computed once, shared by
        both heads per the fair-comparison contract)."""
        latent = self.forward(np.asarray(obs_window)[None])[0]
        return ContextLatent(vector=latent, sample_id=sample_id)
