"""Toy transformer masked autoencoder over gene tokens.

Stands in for a large pre-trained expression model: each gene is one token in
R^D built from a scalar value lift (visible entries) or a learned mask token
(masked entries), plus a per-gene identity embedding. Layers are post-LN with
a residual scaling factor: h_out = LN(u + lam * h_in) for each of the two
sub-layers (multi-head attention, gated feed-forward). A per-token affine
head decodes the final tokens back to an expression vector.

All parameters are initialized from an explicit numpy Generator; no torch
global RNG is consumed anywhere, so construction is reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture of the toy backbone."""

    G: int = 100
    D: int = 64
    L: int = 2
    H: int = 4
    ff_dim: int = 128
    residual_scale: float = 1.0  # lam

    def __post_init__(self) -> None:
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.D % self.H != 0:
            raise ValueError("D must be divisible by H")
        if not (self.residual_scale > 0.0):
            raise ValueError("residual_scale must be > 0")


@dataclass
class TokenSequence:
    """One token per gene plus the origin of each token."""

    tokens: torch.Tensor  # (G, D)
    origin_is_value: np.ndarray  # (G,) bool; False = mask token


class MultiHeadAttention(nn.Module):
    """Standard bidirectional multi-head attention, no positional encoding."""

    def __init__(self, D: int, H: int):
        super().__init__()
        self.H = H
        self.head_dim = D // H
        self.q = nn.Linear(D, D)
        self.k = nn.Linear(D, D)
        self.v = nn.Linear(D, D)
        self.o = nn.Linear(D, D)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        B, G, D = h.shape
        q = self.q(h).view(B, G, self.H, self.head_dim).transpose(1, 2)
        k = self.k(h).view(B, G, self.H, self.head_dim).transpose(1, 2)
        v = self.v(h).view(B, G, self.H, self.head_dim).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.o(out.transpose(1, 2).reshape(B, G, D))


class GatedFeedForward(nn.Module):
    """Gated feed-forward: out = W2(silu(Wg h) * (Wv h))."""

    def __init__(self, D: int, F_dim: int):
        super().__init__()
        self.gate = nn.Linear(D, F_dim)
        self.value = nn.Linear(D, F_dim)
        self.out = nn.Linear(F_dim, D)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.out(F.silu(self.gate(h)) * self.value(h))


class TransformerLayer(nn.Module):
    """One post-LN layer: two sub-layers, each LN(u + lam * h_in)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.D, cfg.H)
        self.ff = GatedFeedForward(cfg.D, cfg.ff_dim)
        self.ln_attn = nn.LayerNorm(cfg.D)
        self.ln_ff = nn.LayerNorm(cfg.D)
        self.residual_scale = cfg.residual_scale

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        u = self.attn(h)
        h = self.ln_attn(u + self.residual_scale * h)
        u = self.ff(h)
        h = self.ln_ff(u + self.residual_scale * h)
        return h


class ToyBackbone(nn.Module):
    """Masked-autoencoder transformer over G gene tokens."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.gene_embeddings = nn.Parameter(torch.empty(cfg.G, cfg.D))
        self.value_weight = nn.Parameter(torch.empty(cfg.D))
        self.value_bias = nn.Parameter(torch.empty(cfg.D))
        self.mask_token = nn.Parameter(torch.empty(cfg.D))
        self.layers = nn.ModuleList(TransformerLayer(cfg) for _ in range(cfg.L))
        self.decoder = nn.Linear(cfg.D, 1)
        self.to(dtype)
        self._init_parameters(rng)

    def _init_parameters(self, rng: np.random.Generator) -> None:
        def fill(param: nn.Parameter, values: np.ndarray) -> None:
            with torch.no_grad():
                param.copy_(torch.from_numpy(np.ascontiguousarray(values)).to(param.dtype))

        def linear(mod: nn.Linear) -> None:
            fan_in, fan_out = mod.in_features, mod.out_features
            std = (2.0 / (fan_in + fan_out)) ** 0.5
            fill(mod.weight, rng.normal(0.0, std, size=(fan_out, fan_in)))
            fill(mod.bias, np.zeros(fan_out))

        fill(self.gene_embeddings, rng.normal(0.0, 0.02, size=(self.cfg.G, self.cfg.D)))
        fill(self.value_weight, rng.normal(0.0, (2.0 / (1 + self.cfg.D)) ** 0.5, size=self.cfg.D))
        fill(self.value_bias, np.zeros(self.cfg.D))
        fill(self.mask_token, rng.normal(0.0, 0.02, size=self.cfg.D))
        for layer in self.layers:
            for mod in (layer.attn.q, layer.attn.k, layer.attn.v, layer.attn.o,
                        layer.ff.gate, layer.ff.value, layer.ff.out):
                linear(mod)
            for ln in (layer.ln_attn, layer.ln_ff):
                fill(ln.weight, np.ones(self.cfg.D))
                fill(ln.bias, np.zeros(self.cfg.D))
        linear(self.decoder)

    @property
    def dtype(self) -> torch.dtype:
        return self.gene_embeddings.dtype

    def embed(self, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        """Token embedding for (B, G) expression and mask batches -> (B, G, D).

        Masked positions get the mask token; their expression values never
        reach the output.
        """
        if not torch.isfinite(x).all():
            raise ValueError("expression input must be finite")
        visible = m.bool().unsqueeze(-1)
        lifted = x.unsqueeze(-1) * self.value_weight + self.value_bias
        tokens = torch.where(visible, lifted, self.mask_token.expand_as(lifted))
        return tokens + self.gene_embeddings

    def forward_tokens(self, h: torch.Tensor) -> torch.Tensor:
        """Run the frozen (unmodulated) layer stack on (B, G, D) tokens."""
        for layer in self.layers:
            h = layer(h)
        return h

    def decode(self, h: torch.Tensor) -> torch.Tensor:
        """Per-token affine readout, (B, G, D) -> (B, G)."""
        return self.decoder(h).squeeze(-1)

    def reconstruct(self, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        """Full masked-autoencoder pass: embed, transform, decode."""
        return self.decode(self.forward_tokens(self.embed(x, m)))


def embed_tokens(me, backbone: ToyBackbone) -> TokenSequence:
    """Single-vector token embedding returning a TokenSequence.

    Accepts a MaskedExpression-like object with .x and .m numpy vectors.
    """
    x = torch.as_tensor(np.asarray(me.x, dtype=np.float64), dtype=backbone.dtype)
    m = torch.as_tensor(np.asarray(me.m), dtype=backbone.dtype)
    if x.shape != m.shape or x.ndim != 1:
        raise ValueError("expected equal-length 1-D x and m")
    tokens = backbone.embed(x.unsqueeze(0), m.unsqueeze(0)).squeeze(0)
    return TokenSequence(tokens=tokens, origin_is_value=np.asarray(me.m).astype(bool))


def backbone_forward(seq: TokenSequence, backbone: ToyBackbone) -> TokenSequence:
    """Single-sequence frozen forward pass."""
    out = backbone.forward_tokens(seq.tokens.unsqueeze(0)).squeeze(0)
    return TokenSequence(tokens=out, origin_is_value=seq.origin_is_value)


def decode(seq: TokenSequence, backbone: ToyBackbone) -> np.ndarray:
    """Single-sequence decode to an expression vector."""
    return backbone.decode(seq.tokens.unsqueeze(0)).squeeze(0).detach().cpu().numpy()
