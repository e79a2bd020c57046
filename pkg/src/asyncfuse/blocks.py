"""Attention building blocks: unimodal encoder, fusion trunk block, refinement block.

All attention is pre-norm: the query (and, for cross-attention, the key/value
source) passes through its own LayerNorm before projection, and the block
adds the attention output back onto the un-normalised input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import LayerNorm, Linear, Module, Tensor, attention, dropout, gelu, parameter, sigmoid


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int = 4
    ffn_mult: int = 4
    pre_norm: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ShapeError(f"width {self.d_model} not divisible by {self.n_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionTrace:
    """Collects attention maps (b, h, t_q, t_k) and named feature tensors."""

    maps: dict[str, np.ndarray] = field(default_factory=dict)
    features: dict[str, np.ndarray] = field(default_factory=dict)
    wiring: list[tuple] = field(default_factory=list)

    def record(self, key: str | None, attn: np.ndarray) -> None:
        if key is not None:
            self.maps[key] = attn

    def write_csv(self, directory) -> list[Path]:
        """One ``{key}.csv`` per map, averaged over batch rows and heads."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for key, attn in self.maps.items():
            path = directory / f"{key}.csv"
            np.savetxt(path, attn.mean(axis=(0, 1)), delimiter=",", fmt="%.10g")
            paths.append(path)
        return paths

    def fusion_calls(self) -> int:
        return sum(1 for w in self.wiring if w[0] == "fusion")


class MultiHeadAttention(Module):
    """Scaled dot-product attention; self-attention when ``kv`` is omitted."""

    def __init__(self, d_query: int, n_heads: int, rng: np.random.Generator, d_kv: int | None = None,
                 d_attn: int | None = None, d_out: int | None = None, pre_norm: bool = True,
                 cross: bool = False):
        d_kv = d_kv or d_query
        d_attn = d_attn or d_query
        d_out = d_out or d_query
        if d_attn % n_heads:
            raise ShapeError(f"attention width {d_attn} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_query, self.d_kv, self.d_attn = d_query, d_kv, d_attn
        self.cross = cross
        self.norm_q = LayerNorm(d_query) if pre_norm else None
        self.norm_kv = LayerNorm(d_kv) if pre_norm and cross else None
        self.q_proj = Linear(d_query, d_attn, rng)
        # a key bias shifts every logit of a query row equally, so it is omitted
        self.k_proj = Linear(d_kv, d_attn, rng, bias=False)
        self.v_proj = Linear(d_kv, d_attn, rng)
        self.out_proj = Linear(d_attn, d_out, rng)

    def __call__(self, q: Tensor, kv: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
        if q.shape[-1] != self.d_query:
            raise ShapeError(f"query width {q.shape[-1]} != {self.d_query}")
        if kv is not None and kv.shape[-1] != self.d_kv:
            raise ShapeError(f"key/value width {kv.shape[-1]} != {self.d_kv}")
        if kv is not None and kv.shape[0] != q.shape[0]:
            raise ShapeError(f"batch rows differ: query {q.shape} vs key/value {kv.shape}")
        qn = self.norm_q(q) if self.norm_q is not None else q
        if kv is None:
            kvn = qn
        else:
            kvn = self.norm_kv(kv) if self.norm_kv is not None else kv
        mixed, attn = attention(self.q_proj(qn), self.k_proj(kvn), self.v_proj(kvn), self.n_heads)
        return self.out_proj(mixed), attn


def multihead_attn(q: Tensor, kv: Tensor | None, attn: MultiHeadAttention) -> tuple[Tensor, np.ndarray]:
    return attn(q, kv)


class FeedForward(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, mult: int = 4, pre_norm: bool = True,
                 rate: float = 0.0):
        self.norm = LayerNorm(d_model) if pre_norm else None
        self.fc1 = Linear(d_model, mult * d_model, rng)
        self.fc2 = Linear(mult * d_model, d_model, rng)
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm(x) if self.norm is not None else x
        h = dropout(gelu(self.fc1(h)), self.rate, self.rng, self.training)
        return self.fc2(h)


class UnimodalBlock(Module):
    """U = H + SelfAttn(H); out = U + FFN(U)."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, pre_norm=cfg.pre_norm)
        self.ffn = FeedForward(cfg.d_model, rng, cfg.ffn_mult, cfg.pre_norm, cfg.dropout)

    def __call__(self, h: Tensor, trace: AttentionTrace | None = None, key: str | None = None) -> Tensor:
        a, amap = self.attn(h)
        if trace is not None:
            trace.record(key, amap)
        u = h + a
        return u + self.ffn(u)


def unimodal_block(h: Tensor, block: UnimodalBlock) -> Tensor:
    return block(h)


class FusionBlock(Module):
    """One trunk stage: query self-attention, then time and text cross-attention, then FFN."""

    def __init__(self, cfg: AttentionConfig, d_time: int, d_text: int, rng: np.random.Generator):
        d_f, h = cfg.d_model, cfg.n_heads
        self.self_attn = MultiHeadAttention(d_f, h, rng, pre_norm=cfg.pre_norm)
        self.cross_time = MultiHeadAttention(d_f, h, rng, d_kv=d_time, pre_norm=cfg.pre_norm, cross=True)
        self.cross_text = MultiHeadAttention(d_f, h, rng, d_kv=d_text, pre_norm=cfg.pre_norm, cross=True)
        self.ffn = FeedForward(d_f, rng, cfg.ffn_mult, cfg.pre_norm, cfg.dropout)

    def __call__(self, q_init: Tensor, h_time: Tensor, h_text: Tensor,
                 trace: AttentionTrace | None = None, stage: int | None = None) -> Tensor:
        if not (q_init.shape[0] == h_time.shape[0] == h_text.shape[0]):
            raise ShapeError(f"fusion inputs misaligned: queries {q_init.shape}, "
                             f"time {h_time.shape}, text {h_text.shape}")
        a, m_self = self.self_attn(q_init)
        f = q_init + a
        a, m_time = self.cross_time(f, h_time)
        f = f + a
        a, m_text = self.cross_text(f, h_text)
        f = f + a
        if trace is not None and stage is not None:
            trace.record(f"stage{stage}_queryself", m_self)
            trace.record(f"stage{stage}_query2time", m_time)
            trace.record(f"stage{stage}_query2text", m_text)
        return f + self.ffn(f)


def fusion_block(q_init: Tensor, h_time: Tensor, h_text: Tensor, block: FusionBlock) -> Tensor:
    return block(q_init, h_time, h_text)


@dataclass
class FusionMemory:
    value: Tensor  # (B*N, P_f, D_f)
    stage: int


class GatedAdapter(Module):
    """Per-modality projection of refined context, scaled by one shared sigmoid gate.

    ``fixed_gate`` replaces sigmoid(g) by a constant (1.0 removes gating).
    """

    def __init__(self, d_fusion: int, widths: dict[str, int], rng: np.random.Generator,
                 fixed_gate: float | None = None):
        self.proj = {m: Linear(d_fusion, d, rng) for m, d in widths.items()}
        self.gate = parameter(np.zeros(1))
        self.fixed_gate = fixed_gate
        if fixed_gate is not None:
            self.gate.requires_grad = False

    def scale(self):
        return self.fixed_gate if self.fixed_gate is not None else sigmoid(self.gate)

    def __call__(self, z: Tensor, modality: str) -> Tensor:
        return self.scale() * self.proj[modality](z)


def make_refine_cross(d_model: int, d_fusion: int, n_heads: int, rng: np.random.Generator,
                      pre_norm: bool = True) -> MultiHeadAttention:
    """Cross-attention from backbone tokens (width D) into a fusion memory (width D_f)."""
    return MultiHeadAttention(d_model, n_heads, rng, d_kv=d_fusion, d_attn=d_fusion, d_out=d_fusion,
                              pre_norm=pre_norm, cross=True)


def refine_block(h: Tensor, memory: FusionMemory | Tensor | None, base: UnimodalBlock,
                 cross: MultiHeadAttention, adapter: GatedAdapter, modality: str,
                 trace: AttentionTrace | None = None, key: str | None = None) -> Tensor:
    """Refinement layer reusing ``base``'s self-attention and FFN weights.

    U = H + SelfAttn(H); Z = CrossAttn(U, F); R = gate * W_ad(Z);
    H' = U + R; out = H' + FFN(H').
    """
    if memory is None:
        raise ContractError("refine_block needs a fusion memory; use the unimodal block instead")
    mem = memory.value if isinstance(memory, FusionMemory) else memory
    a, m_self = base.attn(h)
    u = h + a
    z, m_cross = cross(u, mem)
    if trace is not None and key is not None:
        trace.record(f"{key}self", m_self)
        trace.record(f"{key}2memory", m_cross)
    hh = u + adapter(z, modality)
    return hh + base.ffn(hh)
