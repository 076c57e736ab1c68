"""SpatioTemporalTransformer block.

Operates on channels-last cubes ``[B, D, H, W, C_in]``: project to ``d_model``
channels, add an interpolated learnable 3-D positional encoding, run
multi-head self-attention over pixels (per band) and over bands (after
spatial mean pooling), blend the two branches with a learned sigmoid gate,
then a post-norm gated feed-forward network and a projection back to
``C_in`` added onto the block input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, Optional, Tuple

import numpy as np

from . import engine as E
from .engine import Tensor


@dataclass(frozen=True)
class SttConfig:
    d_model: int
    heads: int
    pe_init: Tuple[int, int, int] = (8, 16, 16)
    ffn_hidden: Optional[int] = None
    compression_ratio: int = 16
    gate_factor: float = 0.25
    dropout: float = 0.0
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model < 1 or self.heads < 1:
            raise ValueError(f"d_model and heads must be positive, got {self.d_model}, {self.heads}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 < self.gate_factor < 1.0:
            raise ValueError(f"gate_factor must lie in (0, 1), got {self.gate_factor}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if len(self.pe_init) != 3 or min(self.pe_init) < 1:
            raise ValueError(f"pe_init must be three positive extents, got {self.pe_init}")

    @property
    def gate_hidden(self) -> int:
        return max(1, (2 * self.d_model) // self.compression_ratio)

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 2 * self.d_model


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return E.linear(x, self.weight, self.bias)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, std: float, dtype,
             zero: bool = False) -> "Linear":
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, std, size=(n_in, n_out))
        return cls(Tensor(w.astype(dtype), requires_grad=True),
                   Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True))


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, c: int, dtype) -> "Norm":
        return cls(Tensor(np.ones(c, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(c, dtype=dtype), requires_grad=True))


@dataclass
class Attention:
    q: Linear
    k: Linear
    v: Linear
    o: Linear


@dataclass
class SttParams:
    in_proj: Linear
    out_proj: Linear
    spatial: Attention
    spectral: Attention
    gate_g1: Linear
    gate_g2: Linear
    pos_embed: Tensor  # P_learn, [1, C, D0, H0, W0]
    ln1: Norm
    ln2: Norm
    ffn1: Linear
    ffn2: Linear
    gate_ffn: Linear

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        def walk(prefix, obj):
            if isinstance(obj, Tensor):
                yield prefix, obj
                return
            for f in fields(obj):
                yield from walk(f"{prefix}.{f.name}" if prefix else f.name, getattr(obj, f.name))
        yield from walk("", self)

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def init_stt_params(cfg: SttConfig, c_in: int, rng: np.random.Generator, dtype=np.float32,
                    zero_out: bool = False) -> SttParams:
    """Draw block weights. ``zero_out`` zeroes every output projection, making the block an identity."""
    c, std = cfg.d_model, cfg.init_std

    def lin(n_in, n_out, zero=False):
        return Linear.init(n_in, n_out, rng, std, dtype, zero=zero)

    def attn():
        return Attention(lin(c, c), lin(c, c), lin(c, c), lin(c, c, zero=zero_out))

    in_proj = lin(c_in, c)
    spatial, spectral = attn(), attn()
    g1 = lin(2 * c, cfg.gate_hidden)
    # keep the (often single) hidden ReLU unit of the gate alive at start
    g1.bias.data[:] = 0.1
    g2 = lin(cfg.gate_hidden, 1)
    # the fusion gate starts at gate_factor
    g2.bias.data[:] = math.log(cfg.gate_factor / (1.0 - cfg.gate_factor))
    pe = rng.normal(0.0, std, size=(1, c) + tuple(cfg.pe_init)).astype(dtype)
    return SttParams(
        in_proj=in_proj,
        out_proj=lin(c, c_in, zero=zero_out),
        spatial=spatial,
        spectral=spectral,
        gate_g1=g1,
        gate_g2=g2,
        pos_embed=Tensor(pe, requires_grad=True),
        ln1=Norm.init(c, dtype),
        ln2=Norm.init(c, dtype),
        ffn1=lin(c, cfg.ffn_width),
        ffn2=lin(cfg.ffn_width, c, zero=zero_out),
        gate_ffn=lin(c, c),
    )


def in_project(x: Tensor, p: SttParams) -> Tensor:
    if x.shape[-1] != p.in_proj.weight.shape[0]:
        raise ValueError(f"in_project: input has {x.shape[-1]} channels, "
                         f"in_proj expects {p.in_proj.weight.shape[0]}")
    return p.in_proj(x)


def positional_encoding(p: SttParams, size: Tuple[int, int, int]) -> Tensor:
    """Interpolated encoding in channels-last layout ``[1, D, H, W, C]``."""
    pe = E.trilinear_interpolate(p.pos_embed, size)
    return E.transpose(pe, (0, 2, 3, 4, 1))


def apply_positional_encoding(x: Tensor, p: SttParams) -> Tensor:
    return x + positional_encoding(p, x.shape[1:4])


def mhsa(x: Tensor, attn: Attention, heads: int, return_weights: bool = False):
    """Multi-head self-attention over axis 1 of ``[N, L, C]``, independently per slot N."""
    n, length, c = x.shape
    dh = c // heads

    def split(t):
        return E.transpose(E.reshape(t, (n, length, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(attn.q(x)), split(attn.k(x)), split(attn.v(x))
    scores = E.matmul(q, E.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = E.softmax(scores, axis=-1)
    ctx = E.transpose(E.matmul(weights, v), (0, 2, 1, 3))
    out = attn.o(E.reshape(ctx, (n, length, c)))
    if return_weights:
        return out, weights.data
    return out


def spatial_attention(x: Tensor, p: SttParams, heads: int, return_weights: bool = False):
    """Attention across the H*W pixels of every (batch, band) slot."""
    b, d, h, w, c = x.shape
    xs = E.reshape(x, (b * d, h * w, c))
    res = mhsa(xs, p.spatial, heads, return_weights)
    out, weights = res if return_weights else (res, None)
    out = E.reshape(out, (b, d, h, w, c))
    return (out, weights) if return_weights else out


def spectral_attention(x: Tensor, p: SttParams, heads: int, return_weights: bool = False):
    """Attention across bands of the spatially pooled cube; returns ``[D, B, C]``."""
    b, d, _, _, c = x.shape
    pooled = E.reshape(E.mean_pool_spatial(x), (b, d, c))
    res = mhsa(pooled, p.spectral, heads, return_weights)
    out, weights = res if return_weights else (res, None)
    out = E.transpose(out, (1, 0, 2))
    return (out, weights) if return_weights else out


def fusion_gate_weight(attn_s: Tensor, attn_t: Tensor, p: SttParams) -> Tensor:
    """Per-sample blend weight ``g`` in (0, 1), shape ``[B, 1]``."""
    h_s = E.mean(attn_s, axis=(1, 2, 3))
    h_t = E.mean(attn_t, axis=0)
    gate_in = E.concat([h_s, h_t], axis=-1)
    return E.sigmoid(p.gate_g2(E.relu(p.gate_g1(gate_in))))


def fuse_attention(attn_s: Tensor, attn_t: Tensor, g) -> Tensor:
    """``g * attn_s + (1 - g) * attn_t`` with the spectral branch broadcast over space."""
    b, d, _, _, c = attn_s.shape
    t = E.reshape(E.transpose(attn_t, (1, 0, 2)), (b, d, 1, 1, c))
    if not isinstance(g, Tensor):
        g = Tensor(np.full((b, 1), g, dtype=attn_s.dtype))
    g = E.reshape(g, (b, 1, 1, 1, 1))
    return g * attn_s + (1.0 - g) * t


def gffn(y: Tensor, p: SttParams, dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Gated feed-forward: ``ffn2(gelu(ffn1(y))) * sigmoid(gate_ffn(y))``."""
    main = p.ffn2(E.dropout(E.gelu(p.ffn1(y)), dropout, rng, training))
    return main * E.sigmoid(p.gate_ffn(y))


def stt_forward(x: Tensor, p: SttParams, cfg: SttConfig, training: bool = False,
                rng: Optional[np.random.Generator] = None, gate_override=None) -> Tensor:
    """Full block on ``[B, D, H, W, C_in]``; output has the input's shape.

    ``gate_override`` replaces the learned fusion weight with a constant
    (used to probe the gate endpoints).
    """
    if x.ndim != 5:
        raise ValueError(f"stt_forward expects [B,D,H,W,C_in], got {x.shape}")
    xp = apply_positional_encoding(in_project(x, p), p)
    attn_s = spatial_attention(xp, p, cfg.heads)
    attn_t = spectral_attention(xp, p, cfg.heads)
    g = fusion_gate_weight(attn_s, attn_t, p) if gate_override is None else gate_override
    fused = E.dropout(fuse_attention(attn_s, attn_t, g), cfg.dropout, rng, training)
    y = E.layer_norm(xp + fused, p.ln1.gamma, p.ln1.beta, cfg.ln_eps)
    z = E.layer_norm(y + gffn(y, p, cfg.dropout, rng, training), p.ln2.gamma, p.ln2.beta, cfg.ln_eps)
    return x + p.out_proj(z)
