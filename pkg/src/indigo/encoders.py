"""Visual ViT, the stub multimodal encoder pair and its contrastive objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, UnknownTokenError, ZeroNormError
from .optim import NesterovSGD

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x ch, values in [0, 1]
    class_id: int
    domain_id: int
    caption_token_ids: Optional[list[int]] = None


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norm = x.norm(dim=dim, keepdim=True)
    if (norm == 0).any():
        raise ZeroNormError("cannot l2-normalize a zero-norm embedding")
    return x / norm


class Attention(nn.Module):
    """Multi-head attention with separate query/key/value/output maps.

    With ``context`` given, queries come from ``x`` and keys/values from ``context``.
    Returns the output and the softmax weights, shape (B, heads, n_q, n_kv).
    """

    def __init__(self, dim: int, heads: int, kv_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(kv_dim, dim)
        self.wv = nn.Linear(kv_dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None):
        context = x if context is None else context
        B, n, d = x.shape
        m = context.shape[1]
        h = self.heads
        dh = d // h
        q = self.wq(x).view(B, n, h, dh).transpose(1, 2)
        k = self.wk(context).view(B, m, h, dh).transpose(1, 2)
        v = self.wv(context).view(B, m, h, dh).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1) / math.sqrt(dh)).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, n, d)
        return self.wo(out), attn


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then o + FFN(LN(o))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.msa = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.ffn = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor):
        a, attn = self.msa(self.ln1(x))
        o = x + a
        return o + self.ffn(self.ln2(o)), attn


class ViT(nn.Module):
    """Vision transformer; CLS representation is token 0.

    ``extra_tokens`` reserves positional rows for tokens inserted after CLS
    (the DIST token of the distillation and early-fusion baselines).
    ``final_norm`` adds the DeiT-style LayerNorm on the output tokens; the
    stub's image encoder goes without, its projection carries its own norm.
    """

    def __init__(self, image_size: int = 16, patch_size: int = 4, channels: int = 3, dim: int = 64,
                 depth: int = 4, heads: int = 4, mlp_ratio: int = 4, extra_tokens: int = 0,
                 final_norm: bool = False):
        super().__init__()
        if image_size % patch_size:
            raise ShapeError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.dim = dim
        self.heads = heads
        self.extra_tokens = extra_tokens
        self.num_patches = (image_size // patch_size) ** 2
        self.patch_embed = nn.Linear(patch_size * patch_size * channels, dim)
        self.cls_token = nn.Parameter(torch.zeros(dim))
        self.pos_embed = nn.Parameter(torch.zeros(1 + extra_tokens + self.num_patches, dim))
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=LN_EPS) if final_norm else nn.Identity()
        self.apply(init_weights)
        nn.init.trunc_normal_(self.cls_token, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        nn.init.trunc_normal_(self.pos_embed, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)

    def extract_patches(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, ch) -> (B, n_patches, p*p*ch); patches row-major, pixels (row, col, ch)."""
        B, H, W, ch = images.shape
        p = self.patch_size
        if H % p or W % p:
            raise ShapeError(f"image {H}x{W} not divisible by patch size {p}")
        if ch != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {ch}")
        x = images.reshape(B, H // p, p, W // p, p, ch).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, (H // p) * (W // p), p * p * ch)

    def embed(self, images: torch.Tensor, extra: Optional[torch.Tensor] = None) -> torch.Tensor:
        """x_0 = [CLS || extra || patch_embed(patches)] + pos."""
        patches = self.patch_embed(self.extract_patches(images))
        B = patches.shape[0]
        parts = [self.cls_token.expand(B, 1, -1)]
        if extra is not None:
            parts.append(extra.reshape(B, -1, self.dim))
        parts.append(patches)
        x = torch.cat(parts, dim=1)
        if x.shape[1] > self.pos_embed.shape[0]:
            raise ShapeError(f"{x.shape[1]} tokens exceed {self.pos_embed.shape[0]} positional rows")
        return x + self.pos_embed[: x.shape[1]]

    def forward_tokens(self, x: torch.Tensor):
        maps = []
        for blk in self.blocks:
            x, attn = blk(x)
            maps.append(attn)
        return x, maps

    def forward(self, images: torch.Tensor):
        """Returns (cls representation, final tokens, attention maps)."""
        x, maps = self.forward_tokens(self.embed(images))
        x = self.norm(x)
        return x[:, 0], x, maps


def _batched(x: torch.Tensor, ndim: int):
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    return x, False


def patchify(images: torch.Tensor, patch_size: int, params: ViT) -> torch.Tensor:
    """Image(s) (H, W, ch) or (B, H, W, ch) to the input token sequence of ``params``."""
    if patch_size != params.patch_size:
        raise ShapeError(f"patch size {patch_size} != model patch size {params.patch_size}")
    x, single = _batched(images, 4)
    H, W = x.shape[1:3]
    if H % patch_size or W % patch_size:
        raise ShapeError(f"image {H}x{W} not divisible by patch size {patch_size}")
    tokens = params.embed(x)
    return tokens[0] if single else tokens


def vit_forward(tokens: torch.Tensor, params: ViT):
    """Run the transformer blocks; returns (cls representation, all tokens)."""
    x, single = _batched(tokens, 3)
    if x.shape[-1] != params.dim:
        raise ShapeError(f"token dim {x.shape[-1]} != model dim {params.dim}")
    out = params.norm(params.forward_tokens(x)[0])
    return (out[0, 0], out[0]) if single else (out[:, 0], out)


class Vocabulary:
    """Fixed whitespace word-to-id map for prompts and synthetic captions."""

    BASE_WORDS = ("a", "photo", "of", "in")

    def __init__(self, words: Sequence[str]):
        split = [w for name in words for w in name.split()]
        self.words = list(dict.fromkeys([*self.BASE_WORDS, *split]))
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in text.split():
            if w not in self.index:
                raise UnknownTokenError(f"unknown token {w!r}")
            ids.append(self.index[w])
        return ids

    @staticmethod
    def prompt(class_name: str) -> str:
        return f"a photo of {class_name}"

    @staticmethod
    def caption(class_name: str, domain_name: str) -> str:
        return f"a photo of {class_name} in {domain_name}"


class TextEncoder(nn.Module):
    """Token embedding table, masked mean pooling, one linear layer."""

    def __init__(self, vocab_size: int, dim: int = 32):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, dim)
        self.proj = nn.Linear(dim, dim)
        self.apply(init_weights)

    def tokens_to_tensor(self, sequences: Sequence[Sequence[int]]):
        if len(sequences) == 0:
            raise ShapeError("no token sequences given")
        L = max(len(s) for s in sequences)
        if L == 0 or any(len(s) == 0 for s in sequences):
            raise ShapeError("empty token sequence")
        ids = torch.zeros(len(sequences), L, dtype=torch.long)
        mask = torch.zeros(len(sequences), L)
        for i, s in enumerate(sequences):
            for j, t in enumerate(s):
                t = int(t)
                if not 0 <= t < self.vocab_size:
                    raise UnknownTokenError(f"token id {t} outside vocabulary of {self.vocab_size}")
                ids[i, j] = t
            mask[i, : len(s)] = 1.0
        return ids, mask

    def forward(self, sequences: Sequence[Sequence[int]]) -> torch.Tensor:
        ids, mask = self.tokens_to_tensor(sequences)
        mask = mask.to(self.embedding.weight.dtype)
        emb = self.embedding(ids) * mask.unsqueeze(-1)
        pooled = emb.sum(1) / mask.sum(1, keepdim=True)
        return self.proj(pooled)


@dataclass
class BundleConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 2
    heads: int = 4
    text_dim: int = 32
    embed_dim: int = 32
    logit_scale: float = 14.28
    proj_norm: bool = True
    words: list[str] = field(default_factory=list)


class MViTBundle(nn.Module):
    """Stub contrastive vision-language model: f^M, g, h^I, h^T and temperature.

    With ``proj_norm`` each projection head is LayerNorm then linear, as in CLIP;
    without it the heads are plain linear maps.
    """

    LOGIT_SCALE_MIN = 1e-2
    LOGIT_SCALE_MAX = 100.0

    def __init__(self, config: BundleConfig):
        super().__init__()
        self.config = config
        self.vocab = Vocabulary(config.words)
        self.image_encoder = ViT(config.image_size, config.patch_size, config.channels, config.dim,
                                 config.depth, config.heads)
        self.text_encoder = TextEncoder(len(self.vocab), config.text_dim)
        self.img_norm = nn.LayerNorm(config.dim, eps=LN_EPS) if config.proj_norm else nn.Identity()
        self.img_proj = nn.Linear(config.dim, config.embed_dim)
        self.txt_norm = nn.LayerNorm(config.text_dim, eps=LN_EPS) if config.proj_norm else nn.Identity()
        self.txt_proj = nn.Linear(config.text_dim, config.embed_dim)
        init_weights(self.img_proj)
        init_weights(self.txt_proj)
        self.log_logit_scale = nn.Parameter(torch.tensor(math.log(config.logit_scale)))

    def logit_scale(self) -> torch.Tensor:
        return self.log_logit_scale.exp().clamp(self.LOGIT_SCALE_MIN, self.LOGIT_SCALE_MAX)

    @property
    def temperature(self) -> float:
        return float(1.0 / self.logit_scale())

    def freeze(self) -> "MViTBundle":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def project_image(self, cls: torch.Tensor) -> torch.Tensor:
        """h^I applied to image-encoder CLS representations."""
        return self.img_proj(self.img_norm(cls))

    def encode_text(self, sequences: Sequence[Sequence[int]]) -> torch.Tensor:
        """h^T(g(t)) for a list of token sequences."""
        return self.txt_proj(self.txt_norm(self.text_encoder(sequences)))

    def prompt_embeddings(self, class_names: Sequence[str]) -> torch.Tensor:
        """Projected text embeddings of ``a photo of <class>`` for each class, shape (C, d_e)."""
        return self.encode_text([self.vocab.encode(Vocabulary.prompt(c)) for c in class_names])


def intrinsic_embedding(images: torch.Tensor, bundle: MViTBundle) -> torch.Tensor:
    """Unnormalized h^I(f^M_CLS(x)) for image(s) (H, W, ch) or (B, H, W, ch)."""
    x, single = _batched(images, 4)
    cls, _, _ = bundle.image_encoder(x)
    out = bundle.project_image(cls)
    return out[0] if single else out


def text_embedding(token_ids: Sequence[int], bundle: MViTBundle) -> torch.Tensor:
    """g(t) for one token sequence, shape (d_t,)."""
    return bundle.text_encoder([list(token_ids)])[0]


def contrastive_loss(images: torch.Tensor, captions: Sequence[Sequence[int]], bundle: MViTBundle) -> torch.Tensor:
    """Symmetric InfoNCE over N aligned image-caption pairs."""
    if images.shape[0] != len(captions):
        raise ShapeError(f"{images.shape[0]} images but {len(captions)} captions")
    if len(captions) < 1:
        raise ShapeError("contrastive loss needs at least one pair")
    z_img = l2_normalize(intrinsic_embedding(images, bundle))
    z_txt = l2_normalize(bundle.encode_text(captions))
    logits = z_img @ z_txt.T * bundle.logit_scale()
    target = torch.arange(len(captions))
    return (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2


@dataclass
class StubConfig:
    bundle: BundleConfig = field(default_factory=BundleConfig)
    steps: int = 2000
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_stub_mvit(images: np.ndarray | torch.Tensor, captions: Sequence[Sequence[int]],
                       config: StubConfig) -> MViTBundle:
    """Contrastively train a stub bundle on image-caption pairs; returns it frozen.

    Token ids in ``captions`` refer to ``Vocabulary(config.bundle.words)``.
    """
    images = torch.as_tensor(np.asarray(images), dtype=torch.get_default_dtype())
    if len({tuple(c) for c in captions}) < 2:
        raise ValueError("stub pretraining needs at least two distinct captions")
    torch.manual_seed(config.seed)
    bundle = MViTBundle(config.bundle)
    if config.optimizer == "adam":
        # plain SGD stalls on the uniform-similarity plateau (loss = ln N) from this init
        opt = torch.optim.AdamW(bundle.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    elif config.optimizer == "sgd":
        opt = NesterovSGD([{"params": bundle.parameters(), "lr": config.lr}],
                          weight_decay=config.weight_decay, momentum=config.momentum)
    else:
        raise ValueError(f"unknown stub optimizer {config.optimizer!r}")
    rng = np.random.default_rng(config.seed)
    n = images.shape[0]
    bs = min(config.batch_size, n)
    for _ in range(config.steps):
        idx = rng.choice(n, size=bs, replace=False)
        loss = contrastive_loss(images[idx], [captions[i] for i in idx], bundle)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return bundle.freeze()


@dataclass
class VisualPretrainConfig:
    steps: int = 6000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


def pretrain_visual_stub(images: np.ndarray | torch.Tensor, labels: np.ndarray | torch.Tensor, vit: ViT,
                         config: VisualPretrainConfig) -> dict[str, torch.Tensor]:
    """Supervised pretraining of ``vit`` in place (stand-in for an ImageNet checkpoint).

    A linear head sits on the CLS output during pretraining and is dropped
    afterwards. Returns a detached copy of the ViT state.
    """
    images = torch.as_tensor(np.asarray(images), dtype=torch.get_default_dtype())
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    num_classes = int(labels.max()) + 1
    if num_classes < 2:
        raise ValueError("visual pretraining needs at least two classes")
    torch.manual_seed(config.seed)
    head = nn.Linear(vit.dim, num_classes)
    init_weights(head)
    opt = torch.optim.AdamW(list(vit.parameters()) + list(head.parameters()), lr=config.lr, weight_decay=0.0)
    rng = np.random.default_rng(config.seed)
    n = images.shape[0]
    bs = min(config.batch_size, n)
    for _ in range(config.steps):
        idx = torch.as_tensor(rng.choice(n, size=bs, replace=False))
        loss = F.cross_entropy(head(vit(images[idx])[0]), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return {k: v.detach().clone() for k, v in vit.state_dict().items()}


def load_visual_weights(vit: ViT, state: dict[str, torch.Tensor]) -> None:
    """Copy pretrained weights into ``vit``; rows for extra tokens keep their init."""
    own = vit.state_dict()
    for name, value in state.items():
        if name not in own:
            raise KeyError(f"pretrained state has unexpected parameter {name!r}")
        if name == "pos_embed" and value.shape != own[name].shape:
            src_extra = value.shape[0] - 1 - vit.num_patches
            if src_extra < 0 or value.shape[1] != vit.dim:
                raise ShapeError(f"pos_embed {tuple(value.shape)} incompatible with {tuple(own[name].shape)}")
            merged = own[name].clone()
            merged[0] = value[0]
            merged[1 + vit.extra_tokens:] = value[1 + src_extra:]
            value = merged
        elif value.shape != own[name].shape:
            raise ShapeError(f"{name}: pretrained shape {tuple(value.shape)} != {tuple(own[name].shape)}")
        own[name] = value
    vit.load_state_dict(own)
