"""Classification, prompt-alignment and soft-distillation losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import init_weights, l2_normalize
from .errors import ConfigError, ShapeError


@dataclass
class LossConfig:
    lam: float = 1.0
    distill_temperature: float = 3.0
    distill_alpha: float = 0.5
    normalize_prompts: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"loss.lambda must lie in [0, 1], got {self.lam}")
        if self.distill_temperature <= 0:
            raise ConfigError(f"loss.distill_temperature must be > 0, got {self.distill_temperature}")
        if not 0.0 <= self.distill_alpha <= 1.0:
            raise ConfigError(f"loss.distill_alpha must lie in [0, 1], got {self.distill_alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    shifted = logits - logits.max(dim=-1, keepdim=True).values.detach()
    return shifted - shifted.exp().sum(dim=-1, keepdim=True).log()


def cross_entropy(logits: torch.Tensor, target) -> torch.Tensor:
    """-log softmax(logits)[target]; batched logits (B, C) give the batch mean."""
    C = logits.shape[-1]
    if C < 2:
        raise ShapeError(f"cross entropy needs at least 2 classes, got {C}")
    target = torch.as_tensor(target, dtype=torch.long)
    if ((target < 0) | (target >= C)).any():
        raise ValueError(f"target {target.tolist()} out of range for {C} classes")
    logp = log_softmax(logits)
    if logits.dim() == 1:
        return -logp[target]
    return -logp.gather(-1, target.view(-1, 1)).mean()


class ClassifierHeads(nn.Module):
    """c^M and c^V."""

    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.c_M = nn.Linear(in_dim, num_classes)
        self.c_V = nn.Linear(in_dim, num_classes)
        self.apply(init_weights)

    def forward(self, xk_m: torch.Tensor, xk_v: torch.Tensor):
        return self.c_M(xk_m), self.c_V(xk_v)


class SemanticHeads(nn.Module):
    """p^M, p^V plus the frozen class-prompt bank and temperature."""

    def __init__(self, in_dim: int, prompt_bank: torch.Tensor, temperature: float,
                 normalize_prompts: bool = False):
        super().__init__()
        if (prompt_bank.norm(dim=-1) == 0).any():
            raise ShapeError("prompt bank contains a zero row")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        sem_dim = prompt_bank.shape[1]
        self.p_M = nn.Linear(in_dim, sem_dim)
        self.p_V = nn.Linear(in_dim, sem_dim)
        self.apply(init_weights)
        self.register_buffer("prompt_bank", prompt_bank.detach().clone())
        self.temperature = float(temperature)
        self.normalize_prompts = normalize_prompts

    def prompts(self) -> torch.Tensor:
        return l2_normalize(self.prompt_bank) if self.normalize_prompts else self.prompt_bank

    def forward(self, xk_m: torch.Tensor, xk_v: torch.Tensor):
        """Similarity logits sim(z, g(t_i)) / tau for both tokens."""
        z_m = l2_normalize(self.p_M(xk_m))
        z_v = l2_normalize(self.p_V(xk_v))
        bank = self.prompts()
        return z_m @ bank.T / self.temperature, z_v @ bank.T / self.temperature


def weighted_ce(logits_m: torch.Tensor, logits_v: torch.Tensor, target, lam: float) -> torch.Tensor:
    if lam == 1.0:
        return cross_entropy(logits_m, target)
    if lam == 0.0:
        return cross_entropy(logits_v, target)
    return lam * cross_entropy(logits_m, target) + (1 - lam) * cross_entropy(logits_v, target)


def classification_loss(xk_m, xk_v, target, heads: ClassifierHeads, cfg: LossConfig) -> torch.Tensor:
    """lambda * CE(c^M(xK_M), y) + (1 - lambda) * CE(c^V(xK_V), y)."""
    y_m, y_v = heads(xk_m, xk_v)
    return weighted_ce(y_m, y_v, target, cfg.lam)


def prompt_alignment_loss(xk_m, xk_v, target, heads: SemanticHeads, cfg: LossConfig) -> torch.Tensor:
    """Same weighting as :func:`classification_loss` over prompt-similarity softmaxes."""
    y_m, y_v = heads(xk_m, xk_v)
    return weighted_ce(y_m, y_v, target, cfg.lam)


def kl_divergence(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """KL(softmax(p_logits) || softmax(q_logits)), computed in log space; batch mean."""
    logp = log_softmax(p_logits)
    logq = log_softmax(q_logits)
    kl = (logp.exp() * (logp - logq)).sum(dim=-1)
    return kl.mean() if kl.dim() else kl


def soft_distillation_loss(student_logits, dist_logits, teacher_logits, target, cfg: LossConfig) -> torch.Tensor:
    """(1 - alpha) * CE(student, y) + alpha * T^2 * KL(teacher/T || dist/T); teacher detached."""
    if not (student_logits.shape == dist_logits.shape == teacher_logits.shape):
        raise ShapeError("student, distillation and teacher logits must share a shape")
    T, alpha = cfg.distill_temperature, cfg.distill_alpha
    ce = cross_entropy(student_logits, target)
    if alpha == 0.0:
        return ce
    kl = kl_divergence(teacher_logits.detach() / T, dist_logits / T)
    return (1 - alpha) * ce + alpha * T * T * kl
