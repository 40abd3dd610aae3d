"""Two-token fusion of the intrinsic and visual modalities.

Four mechanisms share one interface: ``msa`` (self-attention over the two
tokens), ``mca`` (per-token cross-attention streams), ``mixer`` (token-mixing
2x2 map plus channel FFN) and ``concatenation`` (no blocks; heads see both
tokens side by side).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .encoders import LN_EPS, Attention, Block, FeedForward, init_weights
from .errors import ConfigError, ShapeError

MECHANISMS = ("concatenation", "msa", "mca", "mixer")


@dataclass
class FusionConfig:
    K: int = 3
    heads: int = 6
    token_dim: int = 96
    mechanism: str = "msa"
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown fusion mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if self.K < 0:
            raise ConfigError(f"fusion.K must be >= 0, got {self.K}")
        if self.heads < 1 or self.token_dim % self.heads:
            raise ConfigError(f"fusion.token_dim {self.token_dim} not divisible by fusion.heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class CrossStream(nn.Module):
    """One token's cross-attention stream: its query against keys/values of both tokens."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mca = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.ffn = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, pair: torch.Tensor):
        # x: (B, 1, d) query token, pair: (B, 2, d) both tokens in (M, V) order
        a, attn = self.mca(self.ln1(x), self.ln1(pair))
        o = x + a
        return o + self.ffn(self.ln2(o)), attn


class MCABlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.stream_m = CrossStream(dim, heads, mlp_ratio)
        self.stream_v = CrossStream(dim, heads, mlp_ratio)

    def forward(self, x: torch.Tensor):
        xm, am = self.stream_m(x[:, :1], x)
        xv, av = self.stream_v(x[:, 1:], x)
        return torch.cat([xm, xv], dim=1), torch.cat([am, av], dim=2)


class MixerBlock(nn.Module):
    def __init__(self, dim: int, mlp_ratio: int = 4, tokens: int = 2):
        super().__init__()
        self.token_norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.token_mix = nn.Linear(tokens, tokens)
        self.channel_norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.ffn = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor):
        y = x + self.token_mix(self.token_norm(x).transpose(1, 2)).transpose(1, 2)
        return y + self.ffn(self.channel_norm(y)), None


class FusionModule(nn.Module):
    """Projections w^M, w^V followed by K fusion blocks over the token pair."""

    def __init__(self, config: FusionConfig, intrinsic_dim: int, visual_dim: int):
        super().__init__()
        self.config = config
        d = config.token_dim
        self.w_M = nn.Linear(intrinsic_dim, d)
        self.w_V = nn.Linear(visual_dim, d)
        K = 0 if config.mechanism == "concatenation" else config.K
        if config.mechanism == "msa":
            blocks = [Block(d, config.heads, config.mlp_ratio) for _ in range(K)]
        elif config.mechanism == "mca":
            blocks = [MCABlock(d, config.heads, config.mlp_ratio) for _ in range(K)]
        elif config.mechanism == "mixer":
            blocks = [MixerBlock(d, config.mlp_ratio) for _ in range(K)]
        else:
            blocks = []
        self.blocks = nn.ModuleList(blocks)
        self.apply(init_weights)

    @property
    def out_dim(self) -> int:
        """Input width of the downstream heads."""
        d = self.config.token_dim
        return 2 * d if self.config.mechanism == "concatenation" else d

    def project(self, intrinsic: torch.Tensor, visual: torch.Tensor):
        if intrinsic.shape[-1] != self.w_M.in_features or visual.shape[-1] != self.w_V.in_features:
            raise ShapeError(f"fusion expects ({self.w_M.in_features}, {self.w_V.in_features}) inputs, "
                             f"got ({intrinsic.shape[-1]}, {visual.shape[-1]})")
        return self.w_M(intrinsic), self.w_V(visual)

    def fuse(self, x0_m: torch.Tensor, x0_v: torch.Tensor):
        x = torch.stack([x0_m, x0_v], dim=-2)
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
        maps = []
        for blk in self.blocks:
            x, attn = blk(x)
            if attn is not None:
                maps.append(attn[0] if single else attn)
        if single:
            x = x[0]
        return x[..., 0, :], x[..., 1, :], maps

    def head_inputs(self, xk_m: torch.Tensor, xk_v: torch.Tensor):
        """Concatenation feeds both heads the joined pair; other mechanisms one token each."""
        if self.config.mechanism == "concatenation":
            joined = torch.cat([xk_m, xk_v], dim=-1)
            return joined, joined
        return xk_m, xk_v

    def forward(self, intrinsic: torch.Tensor, visual: torch.Tensor):
        return self.fuse(*self.project(intrinsic, visual))


def project_modalities(intrinsic: torch.Tensor, visual: torch.Tensor, params: FusionModule):
    return params.project(intrinsic, visual)


def fusion_forward(x0_m: torch.Tensor, x0_v: torch.Tensor, params: FusionModule,
                   config: Optional[FusionConfig] = None):
    """Returns (xK_M, xK_V, attention maps); each map is (B, heads, 2, 2) or (heads, 2, 2)."""
    if config is not None and config.mechanism != params.config.mechanism:
        raise ConfigError(f"config mechanism {config.mechanism!r} does not match parameters "
                          f"built for {params.config.mechanism!r}")
    return params.fuse(x0_m, x0_v)


def extract_attention(attn_maps, index: Optional[int] = 0, **meta) -> dict:
    """Serializable record keyed ``"layer.head"``.

    Maps with a batch axis are reduced to sample ``index``; ``meta`` is copied
    into the record (mechanism, K, heads, ...).
    """
    maps = {}
    for layer, m in enumerate(attn_maps):
        m = m.detach().double()
        if m.dim() == 4:
            m = m[index]
        for head in range(m.shape[0]):
            maps[f"{layer}.{head}"] = m[head].tolist()
    return {"meta": dict(meta, layers=len(attn_maps)), "maps": maps}


def write_attention_export(path: str | Path, record: dict) -> None:
    # repr of a python float round-trips exactly, so the export is lossless
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=True))
