"""SGD with nesterov momentum and the step learning-rate schedule."""

from __future__ import annotations

from typing import Iterable, Sequence

import torch

from .errors import DivergenceError


def lr_schedule(epoch: int, base_lr: float, drop_epoch: int = 6, drop_factor: float = 0.1) -> float:
    """Learning rate for a 1-indexed epoch: ``base_lr`` through ``drop_epoch``, then one drop."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    return base_lr if epoch <= drop_epoch else base_lr * drop_factor


@torch.no_grad()
def sgd_nesterov_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: dict[int, torch.Tensor],
    lr: float,
    weight_decay: float,
    momentum: float,
    nesterov: bool = True,
) -> None:
    """Update ``params`` in place; ``state`` maps param index to its momentum buffer.

    Weight decay is folded into the gradient (g <- g + wd * p). With momentum the
    buffer starts at the first gradient, b <- mu * b + g, and the nesterov step uses
    g + mu * b.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter #{i} (shape {tuple(p.shape)})")
        d = g + weight_decay * p if weight_decay else g.clone()
        if momentum:
            buf = state.get(i)
            if buf is None:
                buf = d.clone()
                state[i] = buf
            else:
                buf.mul_(momentum).add_(d)
            d = d + momentum * buf if nesterov else buf
        p.sub_(lr * d)


class NesterovSGD:
    """Parameter-group wrapper around :func:`sgd_nesterov_step`.

    Each group is a dict with ``params`` and ``lr``; ``weight_decay`` and
    ``momentum`` are shared.
    """

    def __init__(
        self,
        groups: Iterable[dict],
        weight_decay: float = 5e-5,
        momentum: float = 0.9,
        nesterov: bool = True,
    ):
        self.groups = []
        for g in groups:
            params = [p for p in g["params"] if p.requires_grad]
            self.groups.append({"name": g.get("name", f"group{len(self.groups)}"), "params": params,
                                "lr": float(g["lr"]), "base_lr": float(g["lr"]), "state": {}})
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.nesterov = nesterov

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def set_epoch(self, epoch: int, drop_epoch: int = 6, drop_factor: float = 0.1) -> None:
        for g in self.groups:
            g["lr"] = lr_schedule(epoch, g["base_lr"], drop_epoch, drop_factor)

    def step(self) -> None:
        for g in self.groups:
            sgd_nesterov_step(g["params"], [p.grad for p in g["params"]], g["state"], g["lr"],
                              self.weight_decay, self.momentum, self.nesterov)
