"""Intrinsic multimodality for domain generalization.

A frozen vision-language model supplies an intrinsic embedding of each
image; a trainable ViT supplies a visual one; a small transformer fuses the
two tokens. The package also carries the baselines, a synthetic
multi-domain benchmark and the leave-one-domain-out protocols.
"""

from .config import ExperimentConfig, parse_config
from .data import DomainDataset, synth_multidomain_dataset
from .encoders import (BundleConfig, MViTBundle, StubConfig, ViT, contrastive_loss, intrinsic_embedding,
                       pretrain_stub_mvit, text_embedding)
from .errors import ConfigError, DivergenceError, IndigoError, ShapeError, UnknownTokenError, ZeroNormError
from .fusion import FusionConfig, FusionModule, extract_attention, fusion_forward
from .objectives import LossConfig, classification_loss, prompt_alignment_loss, soft_distillation_loss
from .pipelines import Batch, PipelineSpec, ViTConfig, build_pipeline, predict
from .protocols import aggregate_runs, leave_one_out_splits, make_open_splits, select_model, subsample_fraction

__version__ = "0.1.0"
