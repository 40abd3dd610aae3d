"""Synthetic multi-domain images and the on-disk dataset layout.

Class identity is a glyph (stroke pattern) that is the same in every domain;
each domain restyles it with its own colour map, stroke thickness and
background texture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .encoders import ImageSample, Vocabulary
from .errors import ShapeError

CLASS_NAMES = ("bar", "pillar", "cross", "box", "slash", "backslash", "corner", "tee", "ring", "dots",
               "arrow", "gate", "step", "fork", "zigzag", "comb")
DOMAIN_NAMES = ("photo", "sketch", "cartoon", "painting", "neon", "blueprint", "mosaic", "fog")


@dataclass
class DomainDataset:
    """Images (N, H, W, ch) in [0, 1] with class and domain ids."""

    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    class_names: list[str]
    domain_names: list[str]
    captions: list[list[int]] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.domains)):
            raise ShapeError("images, labels and domains differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("class id out of range")
        if len(self.domains) and (self.domains.min() < 0 or self.domains.max() >= len(self.domain_names)):
            raise ValueError("domain id out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def samples(self) -> Iterator[ImageSample]:
        for i in range(len(self)):
            cap = None if self.captions is None else self.captions[i]
            yield ImageSample(self.images[i], int(self.labels[i]), int(self.domains[i]), cap)

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        caps = None if self.captions is None else [self.captions[i] for i in idx]
        return DomainDataset(self.images[idx], self.labels[idx], self.domains[idx], list(self.class_names),
                             list(self.domain_names), caps)

    def filter_domains(self, domain_ids: Sequence[int]) -> "DomainDataset":
        return self.subset(np.flatnonzero(np.isin(self.domains, list(domain_ids))))


def _glyph(class_id: int, size: int) -> np.ndarray:
    """Binary stroke mask for a class on a size x size canvas."""
    m = np.zeros((size, size), dtype=bool)
    s = size
    lo, hi, mid = s // 4, s - s // 4 - 1, s // 2
    r = np.arange(s)
    kind = class_id % 16
    if kind == 0:
        m[mid, lo:hi + 1] = True
    elif kind == 1:
        m[lo:hi + 1, mid] = True
    elif kind == 2:
        m[mid, lo:hi + 1] = True
        m[lo:hi + 1, mid] = True
    elif kind == 3:
        m[lo, lo:hi + 1] = m[hi, lo:hi + 1] = True
        m[lo:hi + 1, lo] = m[lo:hi + 1, hi] = True
    elif kind == 4:
        idx = r[lo:hi + 1]
        m[idx, hi + lo - idx] = True
    elif kind == 5:
        idx = r[lo:hi + 1]
        m[idx, idx] = True
    elif kind == 6:
        m[lo:hi + 1, lo] = True
        m[hi, lo:hi + 1] = True
    elif kind == 7:
        m[lo, lo:hi + 1] = True
        m[lo:hi + 1, mid] = True
    elif kind == 8:
        yy, xx = np.mgrid[:s, :s]
        d = np.hypot(yy - (s - 1) / 2, xx - (s - 1) / 2)
        m = np.abs(d - s / 4) < 0.75
    elif kind == 9:
        for y, x in ((lo, lo), (lo, hi), (hi, lo), (hi, hi)):
            m[y, x] = True
    elif kind == 10:
        m[mid, lo:hi + 1] = True
        for k in range(1, 4):
            m[mid - k, hi - k] = m[mid + k, hi - k] = True
    elif kind == 11:
        m[lo:hi + 1, lo] = m[lo:hi + 1, hi] = True
        m[lo, lo:hi + 1] = True
    elif kind == 12:
        m[hi, lo:mid + 1] = m[lo:hi + 1, mid] = m[lo, mid:hi + 1] = True
    elif kind == 13:
        m[mid:hi + 1, mid] = True
        idx = np.arange(0, mid - lo + 1)
        m[mid - idx, mid - idx] = m[mid - idx, mid + idx] = True
    elif kind == 14:
        for k, x in enumerate(range(lo, hi + 1)):
            m[lo + 2 * (k % 2) + mid // 2, x] = True
    else:
        m[lo, lo:hi + 1] = True
        m[lo:hi + 1, lo:hi + 1:2] = True
    return m


def _dilate(m: np.ndarray, times: int) -> np.ndarray:
    for _ in range(times):
        p = np.pad(m, 1)
        m = p[1:-1, 1:-1] | p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:]
    return m


def _domain_style(domain_id: int, seed: int, channels: int) -> dict:
    rng = np.random.default_rng([seed, 7919, domain_id])
    fg = rng.uniform(0.0, 1.0, channels)
    bg = rng.uniform(0.0, 1.0, channels)
    # keep glyph/background contrast so the class stays visible in every domain
    while np.abs(fg - bg).max() < 0.45:
        bg = rng.uniform(0.0, 1.0, channels)
    return {
        "fg": fg,
        "bg": bg,
        "thickness": int(domain_id % 2),
        "texture": ("stripes", "checker", "noise", "rings")[domain_id % 4],
        "period": int(rng.integers(2, 5)),
        "amplitude": float(rng.uniform(0.15, 0.3)),
        "tint": rng.uniform(-0.2, 0.2, channels),
    }


def _texture(kind: str, size: int, period: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    if kind == "stripes":
        t = ((yy + xx) // period) % 2
    elif kind == "checker":
        t = ((yy // period) + (xx // period)) % 2
    elif kind == "rings":
        t = (np.hypot(yy - size / 2, xx - size / 2) // period) % 2
    else:
        t = rng.uniform(0, 1, (size, size))
    return t.astype(np.float64) - 0.5


def random_style(rng: np.random.Generator, channels: int = 3) -> dict:
    """A style drawn per image rather than per domain, for pretraining sets."""
    fg = rng.uniform(0.0, 1.0, channels)
    bg = rng.uniform(0.0, 1.0, channels)
    while np.abs(fg - bg).max() < 0.45:
        bg = rng.uniform(0.0, 1.0, channels)
    return {
        "fg": fg,
        "bg": bg,
        "thickness": int(rng.integers(0, 2)),
        "texture": ("stripes", "checker", "noise", "rings")[int(rng.integers(0, 4))],
        "period": int(rng.integers(2, 5)),
        "amplitude": float(rng.uniform(0.15, 0.3)),
        "tint": rng.uniform(-0.2, 0.2, channels),
    }


def render_styled(class_id: int, style: dict, image_size: int, rng: np.random.Generator) -> np.ndarray:
    """One glyph drawn in ``style`` and quantized to 8 bits, values in [0, 1]."""
    mask = _dilate(_glyph(class_id, image_size), style["thickness"])
    dy, dx = rng.integers(-1, 2, size=2)
    mask = np.roll(mask, (dy, dx), axis=(0, 1))
    tex = _texture(style["texture"], image_size, style["period"], rng)
    background = style["bg"] + style["amplitude"] * tex[..., None] * (1 + style["tint"])
    img = np.where(mask[..., None], style["fg"], background)
    img = img + rng.normal(0, 0.04, img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255) / 255


def render(class_id: int, domain_id: int, image_size: int, channels: int, style_seed: int,
           rng: np.random.Generator) -> np.ndarray:
    return render_styled(class_id, _domain_style(domain_id, style_seed, channels), image_size, rng)


def pretraining_glyphs(num_task_classes: int, min_classes: int = 4) -> list[int]:
    """Glyph ids for visual pretraining: the ones the task does not use, or all if too few remain."""
    rest = list(range(num_task_classes, len(CLASS_NAMES)))
    return rest if len(rest) >= min_classes else list(range(len(CLASS_NAMES)))


def synth_pretraining_set(glyphs: Sequence[int], n: int, image_size: int = 16, channels: int = 3,
                          seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Glyphs in random per-image styles; labels index into ``glyphs``."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(glyphs), n)
    images = np.stack([render_styled(int(glyphs[c]), random_style(rng, channels), image_size, rng) for c in labels])
    return images, labels


def synth_multidomain_dataset(C: int = 8, D: int = 4, n_per_cell: int = 60, image_size: int = 16, seed: int = 0,
                              channels: int = 3, patch_size: int = 4, captions: bool = False,
                              style_seed: int = 0, class_only_captions: float = 0.0) -> DomainDataset:
    """Seeded glyph-per-class, style-per-domain dataset; ``captions`` adds token ids per sample.

    ``seed`` drives the per-sample jitter, texture and noise; ``style_seed`` fixes
    what each domain looks like, so datasets drawn with different ``seed`` share
    the same domains. A ``class_only_captions`` fraction of captions drops the
    domain phrase and reads like a class prompt.
    """
    if C < 3 or D < 3:
        raise ValueError(f"need C >= 3 and D >= 3, got C={C}, D={D}")
    if C > len(CLASS_NAMES) or D > len(DOMAIN_NAMES):
        raise ValueError(f"at most {len(CLASS_NAMES)} classes and {len(DOMAIN_NAMES)} domains are named")
    if image_size < 2 * patch_size or image_size % patch_size or image_size < 8:
        raise ShapeError(f"image size {image_size} too small or not divisible by patch size {patch_size}")
    rng = np.random.default_rng(seed)
    images, labels, domains = [], [], []
    for d in range(D):
        for c in range(C):
            for _ in range(n_per_cell):
                images.append(render(c, d, image_size, channels, style_seed, rng))
                labels.append(c)
                domains.append(d)
    class_names = list(CLASS_NAMES[:C])
    domain_names = list(DOMAIN_NAMES[:D])
    caps = None
    if captions:
        vocab = Vocabulary(class_names + domain_names)
        short = rng.random(len(labels)) < class_only_captions
        caps = [vocab.encode(Vocabulary.prompt(class_names[c]) if s else Vocabulary.caption(class_names[c], domain_names[d]))
                for c, d, s in zip(labels, domains, short)]
    return DomainDataset(np.stack(images), np.array(labels), np.array(domains), class_names, domain_names, caps)


def write_dataset(dataset: DomainDataset, root: str | Path) -> Path:
    """Write ``root/<domain>/<class>/<index>.png`` plus ``manifest.json``."""
    root = Path(root)
    entries = []
    for i in range(len(dataset)):
        d, c = dataset.domain_names[dataset.domains[i]], dataset.class_names[dataset.labels[i]]
        rel = Path(d) / c / f"{i:06d}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        pix = np.round(dataset.images[i] * 255).astype(np.uint8)
        Image.fromarray(pix[..., 0] if pix.shape[-1] == 1 else pix).save(root / rel)
        entries.append({"path": rel.as_posix(), "class": c, "domain": d})
    manifest = {"class_names": dataset.class_names, "domain_names": dataset.domain_names, "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root / "manifest.json"


def read_dataset(root: str | Path) -> DomainDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cls = {n: i for i, n in enumerate(manifest["class_names"])}
    dom = {n: i for i, n in enumerate(manifest["domain_names"])}
    images, labels, domains = [], [], []
    for e in manifest["samples"]:
        pix = np.asarray(Image.open(root / e["path"]), dtype=np.float64) / 255
        images.append(pix[..., None] if pix.ndim == 2 else pix)
        labels.append(cls[e["class"]])
        domains.append(dom[e["domain"]])
    return DomainDataset(np.stack(images), np.array(labels), np.array(domains), manifest["class_names"],
                         manifest["domain_names"])
