"""Mini-batch training with two learning-rate groups and per-epoch checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import trainable_state
from .data import DomainDataset
from .encoders import MViTBundle
from .errors import DivergenceError
from .optim import NesterovSGD
from .pipelines import Batch, Pipeline
from .protocols import accuracy

log = logging.getLogger(__name__)


@dataclass
class TensorData:
    """A dataset as tensors, optionally with frozen-bundle features precomputed."""

    images: torch.Tensor
    labels: torch.Tensor
    domains: np.ndarray
    intrinsic: Optional[torch.Tensor] = None
    mvit_tokens: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> Batch:
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return Batch(self.images[idx], self.labels[idx],
                     None if self.intrinsic is None else self.intrinsic[idx],
                     None if self.mvit_tokens is None else self.mvit_tokens[idx])

    def subset(self, idx) -> "TensorData":
        idx = np.asarray(idx, dtype=np.int64)
        t = torch.as_tensor(idx)
        return TensorData(self.images[t], self.labels[t], self.domains[idx],
                          None if self.intrinsic is None else self.intrinsic[t],
                          None if self.mvit_tokens is None else self.mvit_tokens[t])


@torch.no_grad()
def to_tensor_data(dataset: DomainDataset, bundle: Optional[MViTBundle] = None, tokens: bool = False,
                   chunk: int = 512) -> TensorData:
    images = torch.as_tensor(dataset.images, dtype=torch.get_default_dtype())
    labels = torch.as_tensor(dataset.labels, dtype=torch.long)
    intrinsic = mvit_tokens = None
    if bundle is not None:
        parts, tok_parts = [], []
        for start in range(0, len(images), chunk):
            x = images[start:start + chunk]
            cls, toks, _ = bundle.image_encoder(x)
            parts.append(bundle.project_image(cls))
            if tokens:
                tok_parts.append(toks)
        intrinsic = torch.cat(parts) if parts else torch.zeros(0, bundle.config.embed_dim)
        if tokens:
            mvit_tokens = torch.cat(tok_parts)
    return TensorData(images, labels, np.asarray(dataset.domains), intrinsic, mvit_tokens)


@torch.no_grad()
def predict_data(pipe: Pipeline, data: TensorData, batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(data), batch_size):
        out = pipe(data.batch(np.arange(start, min(start + batch_size, len(data)))))
        preds.append(pipe.probs(out).argmax(dim=-1))
    return torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)


def evaluate(pipe: Pipeline, data: TensorData, open_classes: Optional[Sequence[int]] = None) -> float:
    """Top-1 accuracy on ``data``; open-class samples excluded when given."""
    return accuracy(predict_data(pipe, data), data.labels.numpy(), open_classes)


@dataclass
class TrainResult:
    checkpoints: list[dict[str, torch.Tensor]]
    val_accs: list[float] = field(default_factory=list)
    test_accs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def make_optimizer(pipe: Pipeline, lr_visual: float, lr_fusion: float, weight_decay: float, momentum: float,
                   nesterov: bool = True) -> NesterovSGD:
    groups = pipe.param_groups()
    return NesterovSGD([{"name": "visual", "params": groups["visual"], "lr": lr_visual},
                        {"name": "fusion", "params": groups["fusion"], "lr": lr_fusion}],
                       weight_decay=weight_decay, momentum=momentum, nesterov=nesterov)


def train_step(pipe: Pipeline, opt: NesterovSGD, batch: Batch) -> float:
    out = pipe(batch)
    loss = pipe.loss(out, batch.labels)
    if not torch.isfinite(loss):
        raise DivergenceError(f"loss became {loss.item()}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def train_loop(pipe: Pipeline, train: TensorData, *, epochs: int, batch_size: int, lr_visual: float,
               lr_fusion: float, weight_decay: float, momentum: float, nesterov: bool = True,
               drop_epoch: int = 6, drop_factor: float = 0.1, seed: int = 0, val: Optional[TensorData] = None,
               test: Optional[TensorData] = None, open_classes: Optional[Sequence[int]] = None) -> TrainResult:
    """Train ``pipe`` in place; one checkpoint (and val/test accuracy) per epoch.

    With zero epochs, or for a pipeline that is not trainable, the single
    checkpoint is the initialization.
    """
    result = TrainResult(checkpoints=[])

    def record():
        result.checkpoints.append(trainable_state(pipe))
        if val is not None and len(val):
            result.val_accs.append(evaluate(pipe, val))
        if test is not None and len(test):
            result.test_accs.append(evaluate(pipe, test, open_classes))

    if epochs == 0 or not pipe.trainable:
        record()
        return result
    opt = make_optimizer(pipe, lr_visual, lr_fusion, weight_decay, momentum, nesterov)
    rng = np.random.default_rng(seed)
    n = len(train)
    for epoch in range(1, epochs + 1):
        opt.set_epoch(epoch, drop_epoch, drop_factor)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            try:
                total += train_step(pipe, opt, train.batch(idx)) * len(idx)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, step {start // batch_size}: {exc}") from exc
        result.losses.append(total / n)
        log.debug("epoch %d loss %.4f", epoch, result.losses[-1])
        record()
    return result
