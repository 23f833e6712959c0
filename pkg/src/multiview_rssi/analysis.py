"""Closed-form parameter and FLOP counts for a :class:`ModelSpec`.

FLOP convention: 2 FLOPs per multiply-accumulate. Counted: the patch
projection, qkv and output projections, QK^T and attention-times-V (at full
width D summed over heads), FFN matmuls in encoder and fusion blocks, and the
token-wise DNN maps. Excluded: LayerNorm, softmax, GELU, bias adds and the
MLP head. The head term is still reported in the breakdown so an instrumented
forward pass can be reconciled with the total.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .encoder import EncoderConfig
from .models import ModelSpec, preset

CONVENTION = (
    "FLOPs: 2 per multiply-accumulate; patch embed, qkv, attn proj, QK^T, attn.V, FFN and "
    "token-wise DNN matmuls; LN/softmax/GELU/bias/MLP head excluded"
)


@dataclass
class CostReport:
    params: int
    flops: int
    params_breakdown: dict[str, int] = field(default_factory=dict)
    flops_breakdown: dict[str, int] = field(default_factory=dict)
    head_flops: int = 0
    convention: str = CONVENTION

    @property
    def gflops(self) -> float:
        return round(self.flops / 1e7) / 100

    @property
    def mparams(self) -> float:
        return round(self.params / 1e4) / 100

    def summary(self) -> str:
        return f"{self.gflops:.2f} G / {self.mparams:.2f} M"

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "flops": self.flops,
            "params_M": self.mparams,
            "flops_G": self.gflops,
            "params_breakdown": dict(self.params_breakdown),
            "flops_breakdown": dict(self.flops_breakdown),
            "head_flops_excluded": self.head_flops,
            "convention": self.convention,
        }


def block_params(dim: int, ffn_ratio: int) -> int:
    h = ffn_ratio * dim
    ln = 2 * dim
    attn = dim * 3 * dim + 3 * dim + dim * dim + dim
    ffn = dim * h + h + h * dim + dim
    return 2 * ln + attn + ffn


def block_flops(tokens: int, dim: int, ffn_ratio: int) -> dict[str, int]:
    t, d = tokens, dim
    return {
        "attn_proj": 2 * t * d * 3 * d + 2 * t * d * d,
        "attn_scores": 2 * t * t * d + 2 * t * t * d,
        "ffn": 2 * 2 * t * d * ffn_ratio * d,
    }


def _encoder_params(cfg: EncoderConfig) -> dict[str, int]:
    d = cfg.embed_dim
    return {
        "patch_embed": cfg.patch_dim * d + d,
        "pos_embed": cfg.tokens * d,
        "cls": d,
        "blocks": cfg.depth * block_params(d, cfg.ffn_ratio),
    }


def _encoder_flops(cfg: EncoderConfig) -> dict[str, int]:
    per_block = block_flops(cfg.tokens, cfg.embed_dim, cfg.ffn_ratio)
    out = {"patch_embed": 2 * cfg.num_patches * cfg.patch_dim * cfg.embed_dim}
    for k, v in per_block.items():
        out[f"blocks.{k}"] = cfg.depth * v
    return out


def _twdnn_block_params(dim: int, hidden: int) -> int:
    return 2 * dim + (dim * hidden + hidden) + (hidden * hidden + hidden) + (hidden * dim + dim)


def cost_report(spec: ModelSpec) -> CostReport:
    pb: dict[str, int] = {}
    fb: dict[str, int] = {}
    for m, cfg in enumerate(spec.encoders):
        for k, v in _encoder_params(cfg).items():
            pb[f"enc{m}.{k}"] = v
        for k, v in _encoder_flops(cfg).items():
            fb[f"enc{m}.{k}"] = v
    d = spec.embed_dim
    fused_tokens = sum(cfg.tokens for cfg in spec.encoders)
    if spec.variant == "mulvit_tf":
        pb["fusion.blocks"] = spec.fusion_depth * block_params(d, spec.fusion_ffn_ratio)
        for k, v in block_flops(fused_tokens, d, spec.fusion_ffn_ratio).items():
            fb[f"fusion.{k}"] = spec.fusion_depth * v
    elif spec.variant == "mulvit_twdnn":
        hid = spec.twdnn_hidden
        pb["twdnn.segment"] = spec.cameras * d
        pb["twdnn.blocks"] = spec.twdnn_blocks * _twdnn_block_params(d, hid)
        fb["twdnn.blocks"] = spec.twdnn_blocks * 2 * fused_tokens * (d * hid + hid * hid + hid * d)
    k, h = spec.head_in, spec.head_hidden
    pb["head"] = k * h + h + h + 1
    head_flops = 2 * (k * h + h)
    return CostReport(params=sum(pb.values()), flops=sum(fb.values()), params_breakdown=pb,
                      flops_breakdown=fb, head_flops=head_flops)


def count_params(spec: ModelSpec) -> int:
    return cost_report(spec).params


def count_flops(spec: ModelSpec, include_head: bool = False) -> int:
    r = cost_report(spec)
    return r.flops + (r.head_flops if include_head else 0)


def table1() -> dict[str, CostReport]:
    """Cost reports for the four named presets at full resolution."""
    return {name: cost_report(preset(name)) for name in ("sinvit_d", "sinvit_w", "mulvit_tf", "mulvit_twdnn")}
