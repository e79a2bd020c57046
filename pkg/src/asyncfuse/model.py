"""End-to-end forecaster: dual backbones, stage-wise fusion trunk, gated refinement, head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .blocks import (
    AttentionConfig,
    AttentionTrace,
    FusionBlock,
    FusionMemory,
    GatedAdapter,
    UnimodalBlock,
    make_refine_cross,
    refine_block,
)
from .errors import ConfigError, ShapeError
from .numerics import Linear, Module, Tensor, config_hash, expand, parameter, trunc_normal
from .preprocess import PatchConfig, RevIN, embed_patches, make_patches, revin_normalize
from .prompts import DEFAULT_D_LLM, adapt_semantics

VARIANTS = ("full", "no_trunk", "no_query", "no_gate", "sync_refine", "trunk_decoder")
PLACEMENTS = ("shallow", "middle", "deep")


@dataclass(frozen=True)
class ModelConfig:
    n_vars: int = 7
    lookback: int = 96
    patch_len: int = 16
    stride: int = 8
    horizon: int = 96
    d_model: int = 64
    d_fusion: int | None = None
    n_queries: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    depth: int = 2
    stages: int = 1
    fusion_layers: tuple[int, ...] | None = None
    refine_layers: tuple[int, ...] | None = None
    variant: str = "full"
    d_llm: int = DEFAULT_D_LLM
    seed: int = 2024
    dropout: float = 0.0
    pre_norm: bool = True
    revin_affine: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("fusion_layers", "refine_layers"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(int(v) for v in value))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")

    @property
    def fusion_width(self) -> int:
        return self.d_fusion or self.d_model

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(self.lookback, self.patch_len, self.stride, self.d_model)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("fusion_layers", "refine_layers"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def auto_fusion_layers(depth: int, stages: int) -> tuple[int, ...]:
    """kappa_s = s * (depth / stages) for s < S, and kappa_S = depth - 1.

    The last stage sits one layer early so its memory still refines the final
    layer.  When that would collide with the previous stage (stages == depth)
    the last index is pushed to ``depth`` instead.
    """
    if stages < 1 or stages > depth:
        raise ConfigError(f"stage count {stages} must lie in [1, depth={depth}]")
    if depth % stages:
        raise ConfigError(f"depth {depth} not divisible by {stages} stages")
    span = depth // stages
    fusion_at = [s * span for s in range(1, stages)]
    last = max(depth - 1, 1)
    if fusion_at and last <= fusion_at[-1]:
        last = fusion_at[-1] + 1
    fusion_at.append(last)
    return tuple(fusion_at)


def placement_layers(depth: int, stages: int, preset: str) -> tuple[int, ...]:
    """Fusion indices for the stage-placement sweep.

    Stages occupy consecutive layers drawn from 1..depth-1 (1..depth when there
    are not enough of those): ``shallow`` takes the first ones, ``deep`` the
    last ones, ``middle`` a centred run (ties resolved towards deeper layers).
    """
    if preset not in PLACEMENTS:
        raise ConfigError(f"unknown placement {preset!r}")
    if depth % stages:
        raise ConfigError(f"depth {depth} not divisible by {stages} stages")
    top = depth - 1 if stages <= depth - 1 else depth
    free = top - stages
    if free < 0:
        raise ConfigError(f"{stages} stages do not fit in depth {depth}")
    first = {"shallow": 1, "deep": 1 + free, "middle": 1 + (free + 1) // 2}[preset]
    return tuple(range(first, first + stages))


def resolve_schedule(cfg: ModelConfig) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(fusion layer indices, refinement layer set) for ``cfg``; raises on inconsistency."""
    depth = cfg.depth
    if cfg.variant == "no_trunk":
        return (), ()
    if cfg.variant == "sync_refine":
        fusion_at = tuple(range(1, depth + 1))
    elif cfg.fusion_layers is not None:
        fusion_at = cfg.fusion_layers
        if len(fusion_at) != cfg.stages:
            raise ConfigError(f"{len(fusion_at)} fusion layers given for {cfg.stages} stages")
        if any(b <= a for a, b in zip(fusion_at, fusion_at[1:])):
            raise ConfigError(f"fusion layers {fusion_at} must be strictly increasing")
        if fusion_at[0] < 1 or fusion_at[-1] > depth:
            raise ConfigError(f"fusion layers {fusion_at} outside 1..{depth}")
    else:
        fusion_at = auto_fusion_layers(depth, cfg.stages)
    if cfg.refine_layers is not None:
        refine = tuple(sorted(set(cfg.refine_layers)))
        if refine and (refine[0] < 1 or refine[-1] > depth):
            raise ConfigError(f"refinement layers {refine} outside 1..{depth}")
    else:
        refine = tuple(range(fusion_at[0] + 1, depth + 1))
    if cfg.variant == "no_query" and cfg.fusion_width != cfg.d_model:
        raise ConfigError("no_query feeds backbone states as queries, so d_fusion must equal d_model")
    return fusion_at, refine


def wiring_plan(cfg: ModelConfig) -> list[tuple]:
    """Ordered block invocations of one forward pass, derived without computing anything."""
    fusion_at, refine = resolve_schedule(cfg)
    plan: list[tuple] = []
    stage = 0
    for layer in range(1, cfg.depth + 1):
        kind = "refine" if layer in refine and stage > 0 else "unimodal"
        plan.append((kind, "time", layer))
        plan.append((kind, "text", layer))
        if stage < len(fusion_at) and layer == fusion_at[stage]:
            stage += 1
            plan.append(("fusion", "trunk", layer, stage))
    plan.append(("decoder" if cfg.variant == "trunk_decoder" else "head", "time", cfg.depth))
    return plan


def make_variant(cfg: ModelConfig) -> dict:
    """Describe how ``cfg.variant`` wires the trunk, gate, queries and head."""
    fusion_at, refine = resolve_schedule(cfg)
    plan = wiring_plan(cfg)
    return {
        "variant": cfg.variant,
        "fusion_layers": list(fusion_at),
        "refine_layers": list(refine),
        "fusion_calls": sum(1 for p in plan if p[0] == "fusion"),
        "refine_calls": sum(1 for p in plan if p[0] == "refine"),
        "gate": "fixed=1" if cfg.variant == "no_gate" else ("none" if not fusion_at else "sigmoid(g)"),
        "queries": "time_hidden" if cfg.variant == "no_query" else ("none" if not fusion_at else "learned"),
        "head": "trunk_decoder" if cfg.variant == "trunk_decoder" else "temporal",
        "plan": plan,
    }


class Forecaster(Module):
    """Maps (history, prompt embeddings) to a denormalised forecast of shape (B, H, N)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.fusion_at, self.refine_set = resolve_schedule(cfg)
        rng = np.random.default_rng(cfg.seed)
        pc = cfg.patch
        d, d_f, std = cfg.d_model, cfg.fusion_width, cfg.init_std
        att = AttentionConfig(d, cfg.n_heads, cfg.ffn_mult, cfg.pre_norm, cfg.dropout)

        # shared by every variant; built first so equal seeds give equal weights
        self.revin = RevIN(cfg.n_vars, affine=cfg.revin_affine)
        self.patch_proj = Linear(cfg.patch_len, d, rng, std=std)
        self.pos_time = parameter(trunc_normal(rng, (pc.num_patches, d), std))
        self.text_proj = Linear(cfg.d_llm, d, rng, std=std)
        self.pos_text = parameter(trunc_normal(rng, (cfg.n_vars, d), std))
        self.time_layers = [UnimodalBlock(att, rng) for _ in range(cfg.depth)]
        self.text_layers = [UnimodalBlock(att, rng) for _ in range(cfg.depth)]
        self.head = Linear(pc.num_patches * d, cfg.horizon, rng, std=std)

        if self.fusion_at:
            fatt = AttentionConfig(d_f, cfg.n_heads, cfg.ffn_mult, cfg.pre_norm, cfg.dropout)
            if cfg.variant != "no_query":
                self.queries = [parameter(trunc_normal(rng, (cfg.n_queries, d_f), std))
                                for _ in self.fusion_at]
            self.fusion = [FusionBlock(fatt, d, d, rng) for _ in self.fusion_at]
            self.refine_time = {str(l): make_refine_cross(d, d_f, cfg.n_heads, rng, cfg.pre_norm)
                                for l in self.refine_set}
            self.refine_text = {str(l): make_refine_cross(d, d_f, cfg.n_heads, rng, cfg.pre_norm)
                                for l in self.refine_set}
            fixed = 1.0 if cfg.variant == "no_gate" else None
            self.adapter = GatedAdapter(d_f, {"time": d, "text": d}, rng, fixed_gate=fixed)
            if cfg.variant == "trunk_decoder":
                self.decoder = UnimodalBlock(fatt, rng)
                self.decoder_head = Linear(cfg.n_queries * d_f, cfg.horizon, rng, std=std)

    def __call__(self, x, emb, trace: AttentionTrace | None = None) -> Tensor:
        return self.forward(x, emb, trace)

    def forward(self, x, emb, trace: AttentionTrace | None = None) -> Tensor:
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        emb = emb if isinstance(emb, Tensor) else Tensor(np.asarray(emb))
        b, length, n = x.shape
        if n != cfg.n_vars or length != cfg.lookback:
            raise ShapeError(f"input {x.shape} does not match lookback {cfg.lookback}, {cfg.n_vars} vars")
        if emb.shape[-2:] != (cfg.d_llm, n):
            raise ShapeError(f"prompt embeddings {emb.shape} do not match ({cfg.d_llm}, {n})")
        wiring = trace.wiring if trace is not None else None

        state = self.revin.new_state()
        xn = revin_normalize(x, state, "norm")
        h_time = embed_patches(make_patches(xn, cfg.patch), self.patch_proj, self.pos_time)
        h_text = adapt_semantics(emb, self.text_proj, self.pos_text, batch=b)

        memory: FusionMemory | None = None
        stage = 0
        for layer in range(1, cfg.depth + 1):
            t_block, x_block = self.time_layers[layer - 1], self.text_layers[layer - 1]
            if layer in self.refine_set and memory is not None:
                if trace is not None:
                    trace.features[f"layer{layer}_time_before"] = h_time.data
                key = str(layer)
                h_time = refine_block(h_time, memory, t_block, self.refine_time[key], self.adapter, "time",
                                      trace, f"layer{layer}_time")
                h_text = refine_block(h_text, memory, x_block, self.refine_text[key], self.adapter, "text",
                                      trace, f"layer{layer}_text")
                if trace is not None:
                    trace.features[f"layer{layer}_time_after"] = h_time.data
                    wiring += [("refine", "time", layer), ("refine", "text", layer)]
            else:
                h_time = t_block(h_time, trace, f"layer{layer}_timeself")
                h_text = x_block(h_text, trace, f"layer{layer}_textself")
                if wiring is not None:
                    wiring += [("unimodal", "time", layer), ("unimodal", "text", layer)]
            if stage < len(self.fusion_at) and layer == self.fusion_at[stage]:
                if cfg.variant == "no_query":
                    q_init = h_time
                else:
                    q = self.queries[stage]
                    q_init = expand(q, (b * n,) + q.shape)
                stage += 1
                memory = FusionMemory(self.fusion[stage - 1](q_init, h_time, h_text, trace, stage), stage)
                if trace is not None:
                    trace.features[f"stage{stage}_memory"] = memory.value.data
                    wiring.append(("fusion", "trunk", layer, stage))

        if cfg.variant == "trunk_decoder":
            z = self.decoder(memory.value)
            y = self.decoder_head(z.reshape(b * n, -1))
            if wiring is not None:
                wiring.append(("decoder", "time", cfg.depth))
        else:
            y = self.head(h_time.reshape(b * n, -1))
            if wiring is not None:
                wiring.append(("head", "time", cfg.depth))
        y = y.reshape(b, n, cfg.horizon).transpose(0, 2, 1)
        return revin_normalize(y, state, "denorm")


class LinearBaseline(Module):
    """RevIN + one lookback->horizon linear map shared by all channels."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.revin = RevIN(cfg.n_vars, affine=cfg.revin_affine)
        self.proj = Linear(cfg.lookback, cfg.horizon, rng, std=cfg.init_std)

    def __call__(self, x, emb=None, trace=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        state = self.revin.new_state()
        xn = revin_normalize(x, state, "norm")
        y = self.proj(xn.transpose(0, 2, 1)).transpose(0, 2, 1)
        return revin_normalize(y, state, "denorm")


def build_model(cfg: ModelConfig, kind: str = "fusion") -> Module:
    if kind == "fusion":
        return Forecaster(cfg)
    if kind == "linear":
        return LinearBaseline(cfg)
    raise ConfigError(f"unknown model kind {kind!r}")


def forecast_loss(pred: Tensor, target, params=None, decay: float = 0.0) -> Tensor:
    """(1/B) * sum_b ||pred_b - target_b||^2 + decay * sum(theta^2).

    Only the prediction term is differentiated here; the decay gradient is
    applied by the optimiser, so the returned value reports both terms while
    backpropagating the first.
    """
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = (diff * diff).sum() * (1.0 / pred.shape[0])
    if decay and params is not None:
        loss = loss + decay * float(sum(np.sum(p.data * p.data) for p in _as_params(params)))
    return loss


def _as_params(params):
    if hasattr(params, "params"):
        return params.params.values()
    if hasattr(params, "parameters"):
        return params.parameters()
    return params


def metrics(pred, target) -> tuple[float, float]:
    """(MSE, MAE) averaged over horizon, channels and batch."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    err = p - y
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))
