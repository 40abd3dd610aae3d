"""End-to-end pipelines: INDIGO, the fusion baselines and the frozen-MViT baselines.

Every pipeline consumes a :class:`Batch` and returns a dict of outputs; the
training harness only relies on ``loss``, ``probs`` and ``param_groups``.
Frozen bundle features may be precomputed and passed in the batch, which
the pipelines use whenever no bundle parameter is trainable.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .encoders import (LN_EPS, Attention, Block, FeedForward, MViTBundle, ViT, init_weights, intrinsic_embedding,
                       l2_normalize, load_visual_weights)
from .errors import ConfigError, ShapeError
from .fusion import FusionConfig, FusionModule
from .objectives import (ClassifierHeads, LossConfig, SemanticHeads, cross_entropy, soft_distillation_loss,
                         weighted_ce)

PIPELINE_KINDS = ("indigo", "zero_shot", "linear_eval", "attention_eval", "distillation", "early_fusion",
                  "cross_attention", "visual_agg")
LOSS_MODES = ("cls", "prompt")
FINETUNE_MODES = ("frozen", "norm_layers", "last_layer")


@dataclass
class PipelineSpec:
    kind: str = "indigo"
    loss_mode: str = "cls"
    finetune_mvit: str = "frozen"

    def __post_init__(self):
        if self.kind not in PIPELINE_KINDS:
            raise ConfigError(f"unknown pipeline.kind {self.kind!r}; expected one of {PIPELINE_KINDS}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"unknown pipeline.loss_mode {self.loss_mode!r}")
        if self.finetune_mvit not in FINETUNE_MODES:
            raise ConfigError(f"unknown pipeline.finetune_mvit {self.finetune_mvit!r}")
        # the distillation teacher is detached, so a finetune mask there would train nothing
        if self.finetune_mvit != "frozen" and self.kind in ("zero_shot", "visual_agg", "distillation"):
            raise ConfigError(f"pipeline.finetune_mvit={self.finetune_mvit!r} is invalid for {self.kind!r}")
        if self.loss_mode == "prompt" and self.kind != "indigo":
            raise ConfigError("pipeline.loss_mode='prompt' is only defined for the indigo pipeline")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    def build(self, extra_tokens: int = 0) -> ViT:
        return ViT(self.image_size, self.patch_size, self.channels, self.dim, self.depth, self.heads,
                   extra_tokens=extra_tokens, final_norm=True)


@dataclass
class Batch:
    images: torch.Tensor
    labels: Optional[torch.Tensor] = None
    intrinsic: Optional[torch.Tensor] = None
    mvit_tokens: Optional[torch.Tensor] = None


def finetune_parameter_names(bundle: MViTBundle, mode: str) -> set[str]:
    """Bundle parameter names (relative to the bundle) unfrozen by ``mode``."""
    if mode == "frozen":
        return set()
    names = set()
    last = len(bundle.image_encoder.blocks) - 1
    for name, _ in bundle.named_parameters():
        parts = name.split(".")
        if mode == "norm_layers":
            if (name.startswith("image_encoder.blocks.") and parts[3] in ("ln1", "ln2")) \
                    or name.startswith("img_norm."):
                names.add(name)
        elif mode == "last_layer":
            if name.startswith((f"image_encoder.blocks.{last}.", "img_norm.", "img_proj.")):
                names.add(name)
        else:
            raise ConfigError(f"unknown finetune mode {mode!r}")
    return names


def prepare_bundle(bundle: MViTBundle, mode: str) -> MViTBundle:
    """Frozen mode shares ``bundle``; finetuning works on a private copy with the mask applied."""
    if mode == "frozen":
        return bundle
    own = copy.deepcopy(bundle)
    keep = finetune_parameter_names(own, mode)
    for name, p in own.named_parameters():
        p.requires_grad_(name in keep)
    return own


def _frozen(module: nn.Module) -> bool:
    return not any(p.requires_grad for p in module.parameters())


class Pipeline(nn.Module):
    kind = ""
    trainable = True

    def __init__(self, spec: PipelineSpec, bundle: Optional[MViTBundle], num_classes: int, loss_cfg: LossConfig):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.loss_cfg = loss_cfg
        self.bundle = prepare_bundle(bundle, spec.finetune_mvit) if bundle is not None else None

    # bundle features, from the batch cache when the bundle is frozen
    def intrinsic(self, batch: Batch) -> torch.Tensor:
        if batch.intrinsic is not None and _frozen(self.bundle):
            return batch.intrinsic
        return intrinsic_embedding(batch.images, self.bundle)

    def mvit_tokens(self, batch: Batch) -> torch.Tensor:
        if batch.mvit_tokens is not None and _frozen(self.bundle):
            return batch.mvit_tokens
        return self.bundle.image_encoder(batch.images)[1]

    def loss(self, out: dict, target: torch.Tensor) -> torch.Tensor:
        return cross_entropy(out["logits"], target)

    def probs(self, out: dict) -> torch.Tensor:
        return out["logits"].softmax(dim=-1)

    def visual_modules(self) -> list[nn.Module]:
        return []

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        """Trainable parameters split into the visual-branch group and everything else."""
        visual_ids = set()
        visual = []
        for m in self.visual_modules():
            for p in m.parameters():
                if p.requires_grad and id(p) not in visual_ids:
                    visual_ids.add(id(p))
                    visual.append(p)
        if self.bundle is not None:
            for p in self.bundle.parameters():
                if p.requires_grad and id(p) not in visual_ids:
                    visual_ids.add(id(p))
                    visual.append(p)
        rest = [p for p in self.parameters() if p.requires_grad and id(p) not in visual_ids]
        return {"visual": visual, "fusion": rest}


class IndigoPipeline(Pipeline):
    kind = "indigo"

    def __init__(self, spec, bundle, num_classes, loss_cfg, visual_cfg: ViTConfig, fusion_cfg: FusionConfig,
                 prompt_bank: Optional[torch.Tensor] = None):
        super().__init__(spec, bundle, num_classes, loss_cfg)
        self.visual = visual_cfg.build()
        self.fusion = FusionModule(fusion_cfg, bundle.config.embed_dim, visual_cfg.dim)
        if spec.loss_mode == "prompt":
            if prompt_bank is None:
                raise ConfigError("prompt loss mode needs a prompt bank")
            self.heads = SemanticHeads(self.fusion.out_dim, prompt_bank, self.bundle.temperature,
                                       loss_cfg.normalize_prompts)
        else:
            self.heads = ClassifierHeads(self.fusion.out_dim, num_classes)

    def visual_modules(self):
        return [self.visual]

    def forward(self, batch: Batch) -> dict:
        intrinsic = self.intrinsic(batch)
        visual_cls = self.visual(batch.images)[0]
        x0_m, x0_v = self.fusion.project(intrinsic, visual_cls)
        xk_m, xk_v, attn = self.fusion.fuse(x0_m, x0_v)
        logits_m, logits_v = self.heads(*self.fusion.head_inputs(xk_m, xk_v))
        return {"logits_m": logits_m, "logits_v": logits_v, "xk_m": xk_m, "xk_v": xk_v, "attn": attn}

    def loss(self, out, target):
        return weighted_ce(out["logits_m"], out["logits_v"], target, self.loss_cfg.lam)

    def probs(self, out):
        lam = self.loss_cfg.lam
        if lam == 1.0:
            return out["logits_m"].softmax(-1)
        if lam == 0.0:
            return out["logits_v"].softmax(-1)
        return lam * out["logits_m"].softmax(-1) + (1 - lam) * out["logits_v"].softmax(-1)


class VisualAggPipeline(Pipeline):
    """Plain ViT trained with cross-entropy on pooled source domains."""

    kind = "visual_agg"

    def __init__(self, spec, num_classes, loss_cfg, visual_cfg: ViTConfig):
        super().__init__(spec, None, num_classes, loss_cfg)
        self.visual = visual_cfg.build()
        self.head = nn.Linear(visual_cfg.dim, num_classes)
        init_weights(self.head)

    def visual_modules(self):
        return [self.visual]

    def forward(self, batch):
        return {"logits": self.head(self.visual(batch.images)[0])}


def zero_shot_logits(intrinsic: torch.Tensor, prompts: torch.Tensor, logit_scale: float = 1.0) -> torch.Tensor:
    return l2_normalize(intrinsic) @ l2_normalize(prompts).T * logit_scale


class ZeroShotPipeline(Pipeline):
    kind = "zero_shot"
    trainable = False

    def __init__(self, spec, bundle, num_classes, loss_cfg, prompt_bank: torch.Tensor):
        super().__init__(spec, bundle, num_classes, loss_cfg)
        self.register_buffer("prompt_bank", prompt_bank.detach().clone())

    def forward(self, batch):
        scale = float(self.bundle.logit_scale())
        return {"logits": zero_shot_logits(self.intrinsic(batch), self.prompt_bank, scale)}


class LinearEvalPipeline(Pipeline):
    kind = "linear_eval"

    def __init__(self, spec, bundle, num_classes, loss_cfg):
        super().__init__(spec, bundle, num_classes, loss_cfg)
        self.head = nn.Linear(bundle.config.embed_dim, num_classes)
        init_weights(self.head)

    def forward(self, batch):
        return {"logits": self.head(self.intrinsic(batch))}


class AttentionEvalPipeline(Pipeline):
    """The fusion MSA stack run on the intrinsic token alone, then a linear head."""

    kind = "attention_eval"

    def __init__(self, spec, bundle, num_classes, loss_cfg, fusion_cfg: FusionConfig):
        super().__init__(spec, bundle, num_classes, loss_cfg)
        d = fusion_cfg.token_dim
        self.w_M = nn.Linear(bundle.config.embed_dim, d)
        self.blocks = nn.ModuleList(Block(d, fusion_cfg.heads, fusion_cfg.mlp_ratio) for _ in range(fusion_cfg.K))
        self.head = nn.Linear(d, num_classes)
        self.w_M.apply(init_weights)
        self.blocks.apply(init_weights)
        init_weights(self.head)

    def forward(self, batch):
        x = self.w_M(self.intrinsic(batch)).unsqueeze(1)
        maps = []
        for blk in self.blocks:
            x, attn = blk(x)
            maps.append(attn)
        return {"logits": self.head(x[:, 0]), "attn": maps}


class DistillationPipeline(Pipeline):
    """ViT with CLS and DIST tokens; the DIST head matches the bundle's zero-shot logits."""

    kind = "distillation"

    def __init__(self, spec, bundle, num_classes, loss_cfg, visual_cfg: ViTConfig, prompt_bank: torch.Tensor):
        super().__init__(spec, bundle, num_classes, loss_cfg)
        self.visual = visual_cfg.build(extra_tokens=1)
        self.dist_token = nn.Parameter(torch.zeros(visual_cfg.dim))
        nn.init.trunc_normal_(self.dist_token, std=0.02, a=-0.04, b=0.04)
        self.head = nn.Linear(visual_cfg.dim, num_classes)
        self.head_dist = nn.Linear(visual_cfg.dim, num_classes)
        init_weights(self.head)
        init_weights(self.head_dist)
        self.register_buffer("prompt_bank", prompt_bank.detach().clone())

    def visual_modules(self):
        return [self.visual]

    def forward(self, batch):
        B = batch.images.shape[0]
        x = self.visual.embed(batch.images, extra=self.dist_token.expand(B, 1, -1))
        x = self.visual.norm(self.visual.forward_tokens(x)[0])
        with torch.no_grad():
            teacher = zero_shot_logits(self.intrinsic(batch), self.prompt_bank, float(self.bundle.logit_scale()))
        return {"student": self.head(x[:, 0]), "dist": self.head_dist(x[:, 1]), "teacher": teacher.detach()}

    def loss(self, out, target):
        return soft_distillation_loss(out["student"], out["dist"], out["teacher"], target, self.loss_cfg)

    def probs(self, out):
        return (out["student"].softmax(-1) + out["dist"].softmax(-1)) / 2


class EarlyFusionPipeline(Pipeline):
    """Intrinsic embedding enters the visual ViT as a DIST token through a linear adapter."""

    kind = "early_fusion"

    def __init__(self, spec, bundle, num_classes, loss_cfg, visual_cfg: ViTConfig):
        super().__init__(spec, bundle, num_classes, loss_cfg)
        self.visual = visual_cfg.build(extra_tokens=1)
        self.adapter = nn.Linear(bundle.config.embed_dim, visual_cfg.dim)
        self.head = nn.Linear(visual_cfg.dim, num_classes)
        init_weights(self.adapter)
        init_weights(self.head)

    def visual_modules(self):
        return [self.visual]

    def tokens(self, batch, intrinsic=None):
        intrinsic = self.intrinsic(batch) if intrinsic is None else intrinsic
        return self.visual.embed(batch.images, extra=self.adapter(intrinsic).unsqueeze(1))

    def forward(self, batch, intrinsic=None):
        x, attn = self.visual.forward_tokens(self.tokens(batch, intrinsic))
        x = self.visual.norm(x)
        return {"logits": self.head(x[:, 0]), "attn": attn}


class CrossBlock(nn.Module):
    """Visual tokens query the multimodal token sequence; residual, then residual FFN."""

    def __init__(self, dim: int, heads: int, kv_dim: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_q = nn.LayerNorm(dim, eps=LN_EPS)
        self.ln_kv = nn.LayerNorm(kv_dim, eps=LN_EPS)
        self.attn = Attention(dim, heads, kv_dim=kv_dim)
        self.ln2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.ffn = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, context: torch.Tensor):
        a, attn = self.attn(self.ln_q(x), self.ln_kv(context))
        o = x + a
        return o + self.ffn(self.ln2(o)), attn


class CrossAttentionPipeline(Pipeline):
    """Visual ViT with one cross block after every self-attention block."""

    kind = "cross_attention"

    def __init__(self, spec, bundle, num_classes, loss_cfg, visual_cfg: ViTConfig):
        super().__init__(spec, bundle, num_classes, loss_cfg)
        self.visual = visual_cfg.build()
        self.cross = nn.ModuleList(CrossBlock(visual_cfg.dim, visual_cfg.heads, bundle.config.dim)
                                   for _ in range(visual_cfg.depth))
        self.head = nn.Linear(visual_cfg.dim, num_classes)
        self.cross.apply(init_weights)
        init_weights(self.head)

    def visual_modules(self):
        return [self.visual]

    def forward(self, batch, mvit_tokens=None):
        context = self.mvit_tokens(batch) if mvit_tokens is None else mvit_tokens
        x = self.visual.embed(batch.images)
        maps = []
        for blk, cblk in zip(self.visual.blocks, self.cross):
            x, _ = blk(x)
            x, attn = cblk(x, context)
            maps.append(attn)
        x = self.visual.norm(x)
        return {"logits": self.head(x[:, 0]), "cross_attn": maps}


def build_pipeline(spec: PipelineSpec, *, num_classes: int, bundle: Optional[MViTBundle] = None,
                   class_names: Sequence[str] = (), visual_cfg: Optional[ViTConfig] = None,
                   fusion_cfg: Optional[FusionConfig] = None, loss_cfg: Optional[LossConfig] = None,
                   visual_init: Optional[dict[str, torch.Tensor]] = None) -> Pipeline:
    """Construct a pipeline; ``visual_init`` is a pretrained state for the visual branch, if any."""
    pipe = _construct(spec, num_classes, bundle, class_names, visual_cfg, fusion_cfg, loss_cfg)
    visual = getattr(pipe, "visual", None)
    if visual_init is not None and visual is not None:
        load_visual_weights(visual, visual_init)
    return pipe


def _construct(spec, num_classes, bundle, class_names, visual_cfg, fusion_cfg, loss_cfg) -> Pipeline:
    visual_cfg = visual_cfg or ViTConfig()
    fusion_cfg = fusion_cfg or FusionConfig()
    loss_cfg = loss_cfg or LossConfig()
    if spec.kind == "visual_agg":
        return VisualAggPipeline(spec, num_classes, loss_cfg, visual_cfg)
    if bundle is None:
        raise ConfigError(f"pipeline {spec.kind!r} needs an MViT bundle")
    prompt_bank = None
    if spec.kind in ("zero_shot", "distillation") or spec.loss_mode == "prompt":
        if len(class_names) != num_classes:
            raise ConfigError(f"{spec.kind!r} needs {num_classes} class names for prompts")
        with torch.no_grad():
            prompt_bank = bundle.prompt_embeddings(class_names)
    if spec.kind == "indigo":
        return IndigoPipeline(spec, bundle, num_classes, loss_cfg, visual_cfg, fusion_cfg, prompt_bank)
    if spec.kind == "zero_shot":
        return ZeroShotPipeline(spec, bundle, num_classes, loss_cfg, prompt_bank)
    if spec.kind == "linear_eval":
        return LinearEvalPipeline(spec, bundle, num_classes, loss_cfg)
    if spec.kind == "attention_eval":
        return AttentionEvalPipeline(spec, bundle, num_classes, loss_cfg, fusion_cfg)
    if spec.kind == "distillation":
        return DistillationPipeline(spec, bundle, num_classes, loss_cfg, visual_cfg, prompt_bank)
    if spec.kind == "early_fusion":
        return EarlyFusionPipeline(spec, bundle, num_classes, loss_cfg, visual_cfg)
    return CrossAttentionPipeline(spec, bundle, num_classes, loss_cfg, visual_cfg)


def predict(scores: torch.Tensor) -> torch.Tensor | int:
    """Argmax with ties to the lowest index; (C,) -> int, (B, C) -> (B,)."""
    if scores.numel() == 0:
        raise ShapeError("cannot predict from an empty score vector")
    if scores.dim() == 1:
        return int(torch.argmax(scores))
    return scores.argmax(dim=-1)


def zero_shot_predict(image: torch.Tensor, bundle: MViTBundle, prompts: torch.Tensor) -> int:
    """Class whose prompt embedding has the highest cosine with the image's intrinsic embedding."""
    with torch.no_grad():
        emb = intrinsic_embedding(image, bundle)
    return predict(zero_shot_logits(emb, prompts))


# Functional entry points over constructed pipelines.

def indigo_forward(pipe: IndigoPipeline, batch: Batch):
    out = pipe(batch)
    return out["logits_m"], out["logits_v"], out["attn"]


def linear_eval_forward(pipe: LinearEvalPipeline, batch: Batch) -> torch.Tensor:
    return pipe(batch)["logits"]


def attention_eval_forward(pipe: AttentionEvalPipeline, batch: Batch) -> torch.Tensor:
    return pipe(batch)["logits"]


def early_fusion_forward(pipe: EarlyFusionPipeline, batch: Batch) -> torch.Tensor:
    return pipe(batch)["logits"]


def distillation_forward(pipe: DistillationPipeline, batch: Batch):
    out = pipe(batch)
    return out["student"], out["dist"], out["teacher"]


def cross_attention_forward(pipe: CrossAttentionPipeline, batch: Batch) -> torch.Tensor:
    return pipe(batch)["logits"]
