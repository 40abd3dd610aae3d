"""Domain-generalization protocol pieces: splits, sampling, selection, metrics, aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import DomainDataset


def leave_one_out_splits(domains: Sequence) -> list[tuple[tuple, object]]:
    """Every domain once as the target, the rest as sources."""
    domains = list(domains)
    if len(domains) < 2:
        raise ValueError(f"leave-one-domain-out needs at least 2 domains, got {len(domains)}")
    return [(tuple(d for d in domains if d != t), t) for t in domains]


@dataclass
class OpenSplitSpec:
    per_domain_labels: dict[int, tuple[int, ...]]
    open_classes: tuple[int, ...]

    @property
    def known_classes(self) -> tuple[int, ...]:
        return tuple(sorted(set().union(*self.per_domain_labels.values())))

    def to_dict(self) -> dict:
        return {"per_domain_labels": {str(k): list(v) for k, v in self.per_domain_labels.items()},
                "open_classes": list(self.open_classes)}


def make_open_splits(C: int, source_domains: Sequence[int], seed: int = 0) -> OpenSplitSpec:
    """Staggered disparate label sets over the source domains.

    Classes are ranked by a seeded permutation. The last ``max(1, (C - S) // 3)``
    ranked classes are open (in no source). Of the rest, a shared head goes to
    every source; the remaining minor classes go round-robin to one source each,
    and the first half of them also to the next source in the cycle.
    """
    sources = list(source_domains)
    S = len(sources)
    if S < 1:
        raise ValueError("need at least one source domain")
    if C < S + 2:
        raise ValueError(f"open splits need C >= number of sources + 2, got C={C}, sources={S}")
    rank = np.random.default_rng(seed).permutation(C).tolist()
    n_open = max(1, (C - S) // 3)
    known, open_classes = rank[: C - n_open], rank[C - n_open:]
    n_shared = max(1, min(len(known) // 4, len(known) - S))
    shared, minor = known[:n_shared], known[n_shared:]
    labels = {d: set(shared) for d in sources}
    half = len(minor) // 2
    for i, c in enumerate(minor):
        labels[sources[i % S]].add(c)
        if i < half and S > 1:
            labels[sources[(i + 1) % S]].add(c)
    return OpenSplitSpec({d: tuple(sorted(v)) for d, v in labels.items()}, tuple(sorted(open_classes)))


def apply_open_split(dataset: DomainDataset, spec: OpenSplitSpec) -> DomainDataset:
    """Keep only the source samples whose class belongs to their domain's label set."""
    keep = [i for i in range(len(dataset))
            if int(dataset.domains[i]) in spec.per_domain_labels
            and int(dataset.labels[i]) in spec.per_domain_labels[int(dataset.domains[i])]]
    return dataset.subset(keep)


def subsample_fraction(dataset: DomainDataset, fraction: float, seed: int) -> DomainDataset:
    """Per domain, ceil(fraction * n_d) samples drawn uniformly without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset
    rng = np.random.default_rng(seed)
    keep = []
    for d in np.unique(dataset.domains):
        idx = np.flatnonzero(dataset.domains == d)
        k = math.ceil(fraction * len(idx))
        keep.extend(rng.choice(idx, size=k, replace=False).tolist())
    if not keep:
        raise ValueError("subsampling produced an empty dataset")
    return dataset.subset(sorted(keep))


def holdout_split(dataset: DomainDataset, fraction: float = 0.2, seed: int = 0):
    """(train, val) with ``fraction`` of every (domain, class) cell held out."""
    rng = np.random.default_rng(seed)
    val = []
    for d in np.unique(dataset.domains):
        for c in np.unique(dataset.labels):
            idx = np.flatnonzero((dataset.domains == d) & (dataset.labels == c))
            k = int(round(fraction * len(idx)))
            if k:
                val.extend(rng.choice(idx, size=k, replace=False).tolist())
    val_set = set(val)
    train = [i for i in range(len(dataset)) if i not in val_set]
    return dataset.subset(train), dataset.subset(sorted(val))


def accuracy(predictions, labels, open_classes: Optional[Sequence[int]] = None) -> float:
    """Top-1 accuracy; samples of ``open_classes`` are dropped from numerator and denominator."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in shape")
    if open_classes is not None and len(open_classes):
        keep = ~np.isin(labels, list(open_classes))
        predictions, labels = predictions[keep], labels[keep]
        if labels.size == 0:
            raise ValueError("no target samples outside the open classes")
    if labels.size == 0:
        raise ValueError("empty target split")
    return float(np.count_nonzero(predictions == labels)) / labels.size


def select_model(criterion: str, val_accs: Sequence[float], test_accs: Sequence[float]) -> int:
    """0-based index of the chosen epoch checkpoint; ties go to the earliest."""
    if criterion == "train_domain_val":
        scores = list(val_accs)
    elif criterion == "test_domain_val":
        scores = list(test_accs)
    else:
        raise ValueError(f"unknown selection criterion {criterion!r}")
    if not scores:
        raise ValueError("no checkpoints to select from")
    return int(np.argmax(scores))


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))


@dataclass
class RunReport:
    config: dict
    per_domain: dict[str, dict]
    avg: float
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"config": self.config, "per_domain": self.per_domain, "avg": self.avg}
        if self.extra:
            out["extra"] = self.extra
        return out

    def to_json(self) -> str:
        """Canonical serialization; wall time is kept out so reruns are byte-identical."""
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "report.json"
        path.write_text(self.to_json())
        (directory / "timing.json").write_text(json.dumps({"wall_time_s": self.wall_time_s}) + "\n")
        return path


def aggregate_runs(per_seed: Mapping[int, Mapping[str, float]], config: Optional[dict] = None,
                   wall_time_s: float = 0.0) -> RunReport:
    """Per-domain mean and sample std over seeds; Avg. is the mean of per-domain means."""
    if not per_seed:
        raise ValueError("need at least one seed")
    seeds = sorted(per_seed)
    domains = sorted({d for s in seeds for d in per_seed[s]})
    per_domain = {}
    for d in domains:
        vals = [float(per_seed[s][d]) for s in seeds if d in per_seed[s]]
        mean, std = _mean_std(vals)
        per_domain[d] = {"mean": mean, "std": std,
                         "seeds": {str(s): float(per_seed[s][d]) for s in seeds if d in per_seed[s]}}
    avg = math.fsum(v["mean"] for v in per_domain.values()) / len(per_domain)
    return RunReport(config=dict(config or {}), per_domain=per_domain, avg=avg, wall_time_s=wall_time_s)
