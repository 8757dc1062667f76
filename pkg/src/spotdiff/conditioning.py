"""Condition pathway retrofitted onto the frozen backbone.

The condition embedding c_t is built from the histology-like vector v and a
sinusoidal timestep embedding, shared across layers. Before every frozen
sub-layer the token stream is modulated by

    SoftNorm(h) = (1 - eta) * h + eta * (h - mean(h)) / (std(h) + eps)
    premod(h)   = SoftNorm(h) * (1 + scale(c)) + shift(c)

and the sub-layer output u is merged back through a gated residual followed
by the frozen layer norm:

    h_out = LN(gate(c) * u + lam * h_in),   gate = sigmoid(affine(c))

At identity initialization (eta = 0, scale and shift maps all-zero, gate map
zero weights with a large positive bias) the retrofitted model reproduces the
frozen backbone. An ungated instance (no gate) sits immediately before the
decoder head.

Variants:
  - softadaln            full pathway, identity-initialized
  - softadaln_nosoftnorm premod applied to raw h (SoftNorm skipped)
  - softadaln_noidinit   affine maps initialized N(0, 0.02) instead of zeros
  - hist_affine_ln       no premod/gate; the frozen post-LN scale/shift are
                         replaced by condition-predicted affine parameters
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ToyBackbone

CONDITIONING_VARIANTS = (
    "softadaln",
    "softadaln_nosoftnorm",
    "softadaln_noidinit",
    "hist_affine_ln",
)

DEFAULT_GATE_BIAS = 10.0  # sigmoid(10) = 1 - 4.54e-5
SOFTNORM_EPS = 1e-5
TIME_EMBED_DIM = 64
NOIDINIT_STD = 0.02


def soft_norm(h: torch.Tensor, eta: torch.Tensor | float, eps: float = SOFTNORM_EPS) -> torch.Tensor:
    """Convex blend of identity and normalization over the last dimension.

    Uses the population standard deviation; eps guards constant vectors.
    """
    mu = h.mean(dim=-1, keepdim=True)
    sigma = h.std(dim=-1, keepdim=True, correction=0)
    return (1.0 - eta) * h + eta * (h - mu) / (sigma + eps)


def timestep_embedding(t: torch.Tensor, dim: int = TIME_EMBED_DIM) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _fill(param: nn.Parameter, values: np.ndarray) -> None:
    with torch.no_grad():
        param.copy_(torch.from_numpy(np.ascontiguousarray(values)).to(param.dtype))


def _init_linear(mod: nn.Linear, rng: np.random.Generator) -> None:
    std = (2.0 / (mod.in_features + mod.out_features)) ** 0.5
    _fill(mod.weight, rng.normal(0.0, std, size=(mod.out_features, mod.in_features)))
    _fill(mod.bias, np.zeros(mod.out_features))


class ConditionEncoder(nn.Module):
    """c_t = mlp([v; e_t]): two-layer map into R^D, shared across layers."""

    def __init__(self, cond_dim: int, D: int, rng: np.random.Generator):
        super().__init__()
        self.cond_dim = cond_dim
        self.fc1 = nn.Linear(cond_dim + TIME_EMBED_DIM, 2 * D)
        self.fc2 = nn.Linear(2 * D, D)
        _init_linear(self.fc1, rng)
        _init_linear(self.fc2, rng)

    def forward(self, v: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(v).all():
            raise ValueError("condition vector must be finite")
        e_t = timestep_embedding(t.to(v.dtype))
        z = torch.cat([v, e_t], dim=-1)
        return self.fc2(F.silu(self.fc1(z)))


class SublayerModulator(nn.Module):
    """Per-sub-layer modulation maps: scale, shift and (optionally) gate.

    use_softnorm=False skips SoftNorm (and owns no eta parameter).
    gated=False is the ungated decoder pre-modulator.
    """

    def __init__(self, D: int, gated: bool = True, use_softnorm: bool = True,
                 gate_bias: float = DEFAULT_GATE_BIAS):
        super().__init__()
        self.use_softnorm = use_softnorm
        if use_softnorm:
            self.eta = nn.Parameter(torch.zeros(()))
        self.scale = nn.Linear(D, D)
        self.shift = nn.Linear(D, D)
        self.gate = nn.Linear(D, D) if gated else None
        self.gate_bias = gate_bias
        self.init_identity()

    def init_identity(self) -> None:
        with torch.no_grad():
            if self.use_softnorm:
                self.eta.zero_()
            for mod in (self.scale, self.shift):
                mod.weight.zero_()
                mod.bias.zero_()
            if self.gate is not None:
                self.gate.weight.zero_()
                self.gate.bias.fill_(self.gate_bias)

    def init_random(self, rng: np.random.Generator, std: float = NOIDINIT_STD) -> None:
        """Non-identity initialization (the NoIdInit ablation)."""
        mods = [self.scale, self.shift] + ([self.gate] if self.gate is not None else [])
        for mod in mods:
            _fill(mod.weight, rng.normal(0.0, std, size=tuple(mod.weight.shape)))
            _fill(mod.bias, rng.normal(0.0, std, size=tuple(mod.bias.shape)))

    def modulate(self, h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Scale-and-shift of (SoftNorm-ed) h; c broadcasts over tokens."""
        base = soft_norm(h, self.eta) if self.use_softnorm else h
        while c.dim() < h.dim():
            c = c.unsqueeze(-2)
        return base * (1.0 + self.scale(c)) + self.shift(c)

    def gate_values(self, c: torch.Tensor) -> torch.Tensor:
        if self.gate is None:
            raise RuntimeError("ungated modulator has no gate")
        return torch.sigmoid(self.gate(c))


def gated_residual(
    u: torch.Tensor,
    h_in: torch.Tensor,
    c: torch.Tensor,
    residual_scale: float,
    modulator: SublayerModulator,
    ln: nn.LayerNorm,
    force_unit_gate: bool = False,
) -> torch.Tensor:
    """LN(gate(c) * u + lam * h_in) with the frozen ln of the sub-layer."""
    if force_unit_gate:
        gate = torch.ones_like(u)
    else:
        gate = modulator.gate_values(c)
        while gate.dim() < u.dim():
            gate = gate.unsqueeze(-2)
    return ln(gate * u + residual_scale * h_in)


class CondAffineLN(nn.Module):
    """Normalization whose scale and shift are predicted from the condition.

    Deliberately not identity-initialized; replaces the frozen post-LN in the
    hist_affine_ln ablation.
    """

    def __init__(self, D: int, rng: np.random.Generator, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Linear(D, D)
        self.beta = nn.Linear(D, D)
        _fill(self.gamma.weight, rng.normal(0.0, NOIDINIT_STD, size=(D, D)))
        _fill(self.gamma.bias, np.ones(D))
        _fill(self.beta.weight, rng.normal(0.0, NOIDINIT_STD, size=(D, D)))
        _fill(self.beta.bias, np.zeros(D))

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        mu = z.mean(dim=-1, keepdim=True)
        sigma = z.std(dim=-1, keepdim=True, correction=0)
        zhat = (z - mu) / (sigma + self.eps)
        g, b = self.gamma(c), self.beta(c)
        while g.dim() < z.dim():
            g, b = g.unsqueeze(-2), b.unsqueeze(-2)
        return g * zhat + b


class Modulators(nn.Module):
    """All trainable conditioning parameters for one retrofitted model."""

    def __init__(self, cond_dim: int, cfg, variant: str, rng: np.random.Generator,
                 gate_bias: float = DEFAULT_GATE_BIAS):
        super().__init__()
        if variant not in CONDITIONING_VARIANTS:
            raise ValueError(f"unknown conditioning variant {variant!r}")
        self.variant = variant
        self.cond_encoder = ConditionEncoder(cond_dim, cfg.D, rng)
        if variant == "hist_affine_ln":
            self.cond_lns = nn.ModuleList(CondAffineLN(cfg.D, rng) for _ in range(2 * cfg.L))
        else:
            use_sn = variant != "softadaln_nosoftnorm"
            self.sublayer_mods = nn.ModuleList(
                SublayerModulator(cfg.D, gated=True, use_softnorm=use_sn, gate_bias=gate_bias)
                for _ in range(2 * cfg.L)
            )
            self.decoder_premod = SublayerModulator(cfg.D, gated=False, use_softnorm=use_sn)
            if variant == "softadaln_noidinit":
                for mod in self.sublayer_mods:
                    mod.init_random(rng)
                self.decoder_premod.init_random(rng)


class ConditionedModel(nn.Module):
    """Frozen backbone plus conditioning pathway: predicts x0 from (x_t, m_t, v, t).

    value_embed_all=True value-embeds every coordinate (no mask token); used
    by the random-fill and Gaussian corruption variants. For the Gaussian
    variant, normalization holds the per-gene (mean, std) of the training
    split so predictions can be mapped back to expression scale.
    """

    def __init__(self, backbone: ToyBackbone, modulators: Modulators,
                 value_embed_all: bool = False):
        super().__init__()
        self.backbone = backbone
        self.modulators = modulators
        self.value_embed_all = value_embed_all
        self.normalization: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def dtype(self) -> torch.dtype:
        return self.backbone.dtype

    @property
    def variant(self) -> str:
        return self.modulators.variant

    def predict_x0(self, x: torch.Tensor, m: torch.Tensor, v: torch.Tensor,
                   t: torch.Tensor, force_unit_gate: bool = False) -> torch.Tensor:
        """Conditional reconstruction, all args batched: (B, G) / (B, C) / (B,)."""
        bb = self.backbone
        c = self.modulators.cond_encoder(v, t)
        m_embed = torch.ones_like(m) if self.value_embed_all else m
        h = bb.embed(x, m_embed)
        lam = bb.cfg.residual_scale
        for li, layer in enumerate(bb.layers):
            for si, (sub, ln) in enumerate(((layer.attn, layer.ln_attn), (layer.ff, layer.ln_ff))):
                k = 2 * li + si
                if self.variant == "hist_affine_ln":
                    u = sub(h)
                    h = self.modulators.cond_lns[k](u + lam * h, c)
                else:
                    mod = self.modulators.sublayer_mods[k]
                    u = sub(mod.modulate(h, c))
                    h = gated_residual(u, h, c, lam, mod, ln, force_unit_gate=force_unit_gate)
        if self.variant != "hist_affine_ln":
            h = self.modulators.decoder_premod.modulate(h, c)
        return bb.decode(h)


def encode_condition(v: np.ndarray, t: int, encoder: ConditionEncoder) -> np.ndarray:
    """Single-vector condition embedding (numpy in, numpy out)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    dtype = encoder.fc1.weight.dtype
    vt = torch.as_tensor(np.asarray(v, dtype=np.float64), dtype=dtype).unsqueeze(0)
    tt = torch.as_tensor([t], dtype=dtype)
    with torch.no_grad():
        return encoder(vt, tt).squeeze(0).cpu().numpy()
