import contextlib
from pathlib import Path

import numpy as np
import pytest
import torch

from indigo.config import config_from_mapping
from indigo.encoders import BundleConfig, MViTBundle

TINY = {
    "data": {"C": 4, "D": 3, "n_per_cell": 6},
    "stub": {"D": 4, "n_per_cell": 4, "steps": 20},
    "visual": {"pretrain_steps": 10, "pretrain_n": 64, "depth": 2},
    "schedule": {"epochs": 2},
    "protocol": {"seeds": [0, 1]},
    "fusion": {"K": 1},
}

TINY_TOML = """\
[data]
C = 4
D = 3
n_per_cell = 6
[stub]
D = 4
n_per_cell = 4
steps = 20
[visual]
pretrain_steps = 10
pretrain_n = 64
depth = 2
[schedule]
epochs = 2
[protocol]
seeds = [0, 1]
[fusion]
K = 1
"""

_ACCEPTANCE: dict[int, str] = {}


@contextlib.contextmanager
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def tiny_config(**overrides):
    tree = {k: dict(v) for k, v in TINY.items()}
    cfg = config_from_mapping(tree)
    return cfg.replace(**overrides) if overrides else cfg


def tiny_bundle(words=("bar", "pillar", "cross", "box"), dim=8, embed_dim=8, image_size=4, patch_size=2,
                channels=1, depth=1, heads=2, seed=0) -> MViTBundle:
    torch.manual_seed(seed)
    return MViTBundle(BundleConfig(image_size=image_size, patch_size=patch_size, channels=channels, dim=dim,
                                   depth=depth, heads=heads, text_dim=dim, embed_dim=embed_dim,
                                   words=list(words)))


def tiny_pipeline(kind="indigo", *, loss_mode="cls", finetune="frozen", mechanism="msa", lam=1.0, C=3, K=1,
                  d=8, seed=0, bundle=None):
    """A float64-ready pipeline on 4x4 single-channel images with an 8-wide stub bundle."""
    from indigo.fusion import FusionConfig
    from indigo.objectives import LossConfig
    from indigo.pipelines import PipelineSpec, ViTConfig, build_pipeline

    names = ["bar", "pillar", "cross", "box"][:C]
    bundle = bundle or tiny_bundle(words=names, seed=seed).freeze()
    torch.manual_seed(seed)
    return build_pipeline(PipelineSpec(kind, loss_mode, finetune), num_classes=C, bundle=bundle, class_names=names,
                          visual_cfg=ViTConfig(image_size=4, patch_size=2, channels=1, dim=8, depth=1, heads=2),
                          fusion_cfg=FusionConfig(K=K, heads=2, token_dim=d, mechanism=mechanism),
                          loss_cfg=LossConfig(lam=lam))


def randomize(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.5) -> None:
    """Replace every parameter with N(0, scale^2) noise (LayerNorm gains around 1)."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale
            p.copy_(noise + 1.0 if name.endswith("weight") and p.dim() == 1 else noise)


def record_acceptance(number: int, passed: bool, text: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {text}"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_toml(tmp_path) -> Path:
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path
