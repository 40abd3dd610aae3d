"""Experiment engine: datasets, pretrained stand-ins, DG protocols and on-disk reports.

Every protocol run is a set of independent (sources, target, seed) jobs. Jobs
share nothing mutable; results are reduced by :func:`aggregate_runs`, which
does not depend on completion order, so ``jobs > 1`` gives the same reports.

Output layout under ``out_dir``::

    <command>[/<variant>]/<target>/<seed>/report.json   one run
    <command>[/<variant>]/<target>/<seed>/checkpoint.zip
    <command>[/<variant>]/report.json                    seeds aggregated
    <command>/series.json                                 sweeps only
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_into, save_archive, save_checkpoint
from .config import ExperimentConfig
from .data import DomainDataset, pretraining_glyphs, read_dataset, synth_multidomain_dataset, synth_pretraining_set
from .encoders import MViTBundle, Vocabulary, pretrain_stub_mvit, pretrain_visual_stub
from .errors import ConfigError
from .fusion import extract_attention, write_attention_export
from .pipelines import Pipeline, build_pipeline
from .protocols import (OpenSplitSpec, RunReport, aggregate_runs, apply_open_split, holdout_split, make_open_splits,
                        select_model, subsample_fraction)
from .training import TensorData, evaluate, to_tensor_data, train_loop

log = logging.getLogger(__name__)

LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
MECHANISM_GRID = ("concatenation", "msa", "mca", "mixer")
LAYER_GRID = (3, 12)
FRACTION_GRID = (0.5, 0.75, 1.0)


# ---------------------------------------------------------------- assets

@dataclass
class Assets:
    """Everything a job needs besides its config: data and the two pretrained stand-ins."""

    dataset: DomainDataset
    bundle: MViTBundle
    visual_init: Optional[dict[str, torch.Tensor]] = None


def load_dataset(cfg: ExperimentConfig) -> DomainDataset:
    v = cfg.values
    if v["data.root"]:
        return read_dataset(v["data.root"])
    return synth_multidomain_dataset(v["data.C"], v["data.D"], v["data.n_per_cell"], v["data.image_size"],
                                     seed=v["data.seed"], channels=v["data.channels"],
                                     patch_size=v["visual.patch_size"], style_seed=v["data.style_seed"])


def _key(cfg: ExperimentConfig, prefixes: Sequence[str], extra: Sequence[str] = ()) -> str:
    picked = {k: v for k, v in cfg.values.items() if k.startswith(tuple(prefixes)) or k in extra}
    return hashlib.sha256(json.dumps(picked, sort_keys=True).encode()).hexdigest()[:16]


def stub_pairs(cfg: ExperimentConfig, dataset: DomainDataset):
    """Captioned pretraining pairs for the stub: (images, captions, class names, domain names).

    Synthetic runs draw a fresh captioned sample with its own seed over
    ``stub.D`` domain styles, a superset of the benchmark's domains, the way
    web-scale pretraining data is broader than any DG benchmark. An ingested
    dataset is captioned from its own names.
    """
    v = cfg.values
    if not v["data.root"]:
        ds = synth_multidomain_dataset(dataset.num_classes, max(v["stub.D"], dataset.num_domains),
                                       v["stub.n_per_cell"], v["data.image_size"], seed=v["stub.data_seed"],
                                       channels=v["data.channels"], patch_size=v["visual.patch_size"],
                                       captions=True, style_seed=v["data.style_seed"],
                                       class_only_captions=v["stub.class_only_captions"])
        return ds.images, ds.captions, ds.class_names, ds.domain_names
    vocab = Vocabulary(list(dataset.class_names) + list(dataset.domain_names))
    rng = np.random.default_rng(v["stub.data_seed"])
    short = rng.random(len(dataset)) < v["stub.class_only_captions"]
    caps = []
    for c, d, s in zip(dataset.labels, dataset.domains, short):
        text = Vocabulary.prompt(dataset.class_names[c]) if s else \
            Vocabulary.caption(dataset.class_names[c], dataset.domain_names[d])
        caps.append(vocab.encode(text))
    return dataset.images, caps, dataset.class_names, dataset.domain_names


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    dtype = torch.get_default_dtype()
    module.load_state_dict({k: torch.as_tensor(a, dtype=dtype) for k, a in arrays.items()})


def prepare_stub(cfg: ExperimentConfig, dataset: DomainDataset, cache_dir: Optional[Path] = None) -> MViTBundle:
    images, captions, class_names, domain_names = stub_pairs(cfg, dataset)
    stub_cfg = cfg.stub_config(class_names, domain_names)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"stub-{_key(cfg, ('stub.', 'data.'), ('visual.patch_size',))}.zip"
        if path.is_file():
            bundle = MViTBundle(stub_cfg.bundle)
            _load_state(bundle, load_checkpoint(path)[0])
            return bundle.freeze()
    bundle = pretrain_stub_mvit(images, captions, stub_cfg)
    if path is not None:
        save_checkpoint(path, bundle.state_dict(), {"kind": "stub"})
    return bundle


def prepare_visual_init(cfg: ExperimentConfig, num_classes: int,
                        cache_dir: Optional[Path] = None) -> Optional[dict[str, torch.Tensor]]:
    """Supervised visual pretraining on glyphs the task does not use, in random styles."""
    v = cfg.values
    if not v["visual.pretrain"]:
        return None
    torch.manual_seed(v["visual.pretrain_seed"])
    vit = cfg.visual_config().build()
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"visual-{_key(cfg, ('visual.',), ('data.image_size', 'data.channels'))}-{num_classes}.zip"
        if path.is_file():
            _load_state(vit, load_checkpoint(path)[0])
            return {k: t.detach().clone() for k, t in vit.state_dict().items()}
    glyphs = pretraining_glyphs(num_classes)
    images, labels = synth_pretraining_set(glyphs, v["visual.pretrain_n"], v["data.image_size"], v["data.channels"],
                                           seed=v["visual.pretrain_seed"])
    state = pretrain_visual_stub(images, labels, vit, cfg.visual_pretrain_config())
    if path is not None:
        save_checkpoint(path, state, {"kind": "visual", "glyphs": glyphs})
    return state


def prepare_assets(cfg: ExperimentConfig, cache_dir: Optional[Path] = None) -> Assets:
    dataset = load_dataset(cfg)
    bundle = prepare_stub(cfg, dataset, cache_dir)
    return Assets(dataset, bundle, prepare_visual_init(cfg, dataset.num_classes, cache_dir))


# ---------------------------------------------------------------- single runs

@dataclass
class RunResult:
    sources: tuple[str, ...]
    target: str
    seed: int
    accuracy: float
    selected_epoch: int
    val_accs: list[float]
    test_accs: list[float]
    losses: list[float]
    checkpoint: dict[str, torch.Tensor]
    open_classes: list[int] = field(default_factory=list)
    wall_time_s: float = 0.0


def open_spec_for(cfg: ExperimentConfig, num_classes: int, sources: Sequence[int]) -> Optional[OpenSplitSpec]:
    if cfg["protocol.setting"] != "open":
        return None
    return make_open_splits(num_classes, list(sources), cfg["data.seed"])


def job_data(cfg: ExperimentConfig, assets: Assets, sources: Sequence[int], target: int, seed: int):
    """Train/val/test tensors for one job plus the open classes excluded from the metric."""
    ds = assets.dataset
    src = ds.filter_domains(list(sources))
    spec = open_spec_for(cfg, ds.num_classes, sources)
    open_classes = []
    if spec is not None:
        src = apply_open_split(src, spec)
        open_classes = list(spec.open_classes)
    if cfg["protocol.data_fraction"] < 1.0:
        src = subsample_fraction(src, cfg["protocol.data_fraction"], seed)
    train, val = holdout_split(src, cfg["protocol.val_fraction"], seed)
    tokens = cfg["pipeline.kind"] == "cross_attention"
    bundle = assets.bundle
    return (to_tensor_data(train, bundle, tokens), to_tensor_data(val, bundle, tokens),
            to_tensor_data(ds.filter_domains([target]), bundle, tokens), open_classes)


def make_pipeline(cfg: ExperimentConfig, assets: Assets) -> Pipeline:
    return build_pipeline(cfg.pipeline_spec(), num_classes=assets.dataset.num_classes, bundle=assets.bundle,
                          class_names=assets.dataset.class_names, visual_cfg=cfg.visual_config(),
                          fusion_cfg=cfg.fusion_config(), loss_cfg=cfg.loss_config(),
                          visual_init=assets.visual_init)


def run_single(cfg: ExperimentConfig, assets: Assets, sources: Sequence[int], target: int, seed: int,
               return_pipeline: bool = False):
    """Train one model on ``sources``, pick an epoch, report target accuracy."""
    start = time.perf_counter()
    torch.set_num_threads(1)
    train, val, test, open_classes = job_data(cfg, assets, sources, target, seed)
    torch.manual_seed(seed)
    pipe = make_pipeline(cfg, assets)
    v = cfg.values
    res = train_loop(pipe, train, epochs=v["schedule.epochs"], batch_size=v["train.batch_size"],
                     lr_visual=v["optim.lr_visual"], lr_fusion=v["optim.lr_fusion"],
                     weight_decay=v["optim.weight_decay"], momentum=v["optim.momentum"],
                     nesterov=v["optim.nesterov"], drop_epoch=v["schedule.drop_epoch"],
                     drop_factor=v["schedule.drop_factor"], seed=seed, val=val, test=test,
                     open_classes=open_classes or None)
    idx = select_model(v["protocol.selection"], res.val_accs, res.test_accs)
    names = assets.dataset.domain_names
    result = RunResult(tuple(names[s] for s in sources), names[target], seed, res.test_accs[idx], idx + 1,
                       res.val_accs, res.test_accs, res.losses, res.checkpoints[idx], open_classes,
                       time.perf_counter() - start)
    if return_pipeline:
        load_into(pipe, res.checkpoints[idx])
        return result, pipe, test
    return result


_WORKER_ASSETS: Optional[Assets] = None


def _init_worker(assets: Assets) -> None:
    global _WORKER_ASSETS
    _WORKER_ASSETS = assets


def _worker(args) -> RunResult:
    values, preset, sources, target, seed = args
    return run_single(ExperimentConfig(values, preset), _WORKER_ASSETS, sources, target, seed)


def execute(cfg: ExperimentConfig, assets: Assets, jobs: Sequence[tuple[tuple[int, ...], int, int]],
            workers: int = 1) -> list[RunResult]:
    """Run (sources, target, seed) jobs, in isolated worker processes when ``workers > 1``."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_single(cfg, assets, s, t, seed) for s, t, seed in jobs]
    args = [(cfg.values, cfg.preset, s, t, seed) for s, t, seed in jobs]
    with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn"),
                             initializer=_init_worker, initargs=(assets,)) as pool:
        return list(pool.map(_worker, args))


# ---------------------------------------------------------------- protocols

def _domain_ids(names: Sequence[str], wanted: Sequence[str], key: str) -> list[int]:
    out = []
    for n in wanted:
        if n not in names:
            raise ConfigError(f"{key}: unknown domain {n!r}; dataset has {list(names)}")
        out.append(list(names).index(n))
    return out


def protocol_configs(cfg: ExperimentConfig, domain_names: Sequence[str],
                     limited_sources: bool = False) -> list[tuple[tuple[int, ...], int]]:
    """(sources, target) pairs: leave-one-domain-out unless sources/targets are configured.

    With ``limited_sources`` and no configured sources, the first domain is
    the only source and every other domain is a target.
    """
    D = len(domain_names)
    sources = _domain_ids(domain_names, cfg["protocol.sources"], "protocol.sources")
    targets = _domain_ids(domain_names, cfg["protocol.targets"], "protocol.targets")
    if limited_sources and not sources:
        sources = [0]
    if sources:
        if not targets:
            targets = [d for d in range(D) if d not in sources]
        if set(sources) & set(targets):
            raise ConfigError("protocol.sources and protocol.targets overlap")
        if not targets:
            raise ConfigError("no target domain left after choosing sources")
        return [(tuple(sources), t) for t in targets]
    if D < 2:
        raise ConfigError("leave-one-domain-out needs at least two domains")
    targets = targets or list(range(D))
    return [(tuple(d for d in range(D) if d != t), t) for t in targets]


def seeds_of(cfg: ExperimentConfig) -> list[int]:
    return list(cfg["protocol.seeds"])


def _run_dir(base: Path, result: RunResult) -> Path:
    return base / result.target / str(result.seed)


def _run_report(cfg: ExperimentConfig, result: RunResult) -> RunReport:
    report = aggregate_runs({result.seed: {result.target: result.accuracy}}, cfg.echo(), result.wall_time_s)
    report.extra = {"sources": list(result.sources), "target": result.target, "seed": result.seed,
                    "selected_epoch": result.selected_epoch, "val_accs": result.val_accs,
                    "test_accs": result.test_accs, "train_loss": result.losses,
                    "open_classes": result.open_classes}
    return report


def write_run(base: Path, cfg: ExperimentConfig, result: RunResult) -> Path:
    run_dir = _run_dir(base, result)
    _run_report(cfg, result).write(run_dir)
    meta = {"config": cfg.echo(), "target": result.target, "sources": list(result.sources), "seed": result.seed,
            "selected_epoch": result.selected_epoch}
    save_checkpoint(run_dir / "checkpoint.zip", result.checkpoint, meta)
    return run_dir


def run_protocol(cfg: ExperimentConfig, assets: Assets, out_dir: Optional[Path] = None, command: str = "train",
                 variant: Optional[str] = None, workers: int = 1) -> RunReport:
    """All configured (sources, target) pairs times all seeds, aggregated into one report."""
    start = time.perf_counter()
    configs = protocol_configs(cfg, assets.dataset.domain_names, command == "limited-sources")
    jobs = [(s, t, seed) for s, t in configs for seed in seeds_of(cfg)]
    results = execute(cfg, assets, jobs, workers)
    per_seed: dict[int, dict[str, float]] = {}
    for r in results:
        per_seed.setdefault(r.seed, {})[r.target] = r.accuracy
    report = aggregate_runs(per_seed, cfg.echo(), time.perf_counter() - start)
    report.extra = {"command": command, "variant": variant,
                    "configurations": [{"sources": [assets.dataset.domain_names[s] for s in src],
                                        "target": assets.dataset.domain_names[t]} for src, t in configs]}
    if out_dir is not None:
        base = Path(out_dir) / command
        if variant is not None:
            base = base / variant
        for r in results:
            write_run(base, cfg, r)
        report.write(base)
    return report


def _variant_name(key: str, value) -> str:
    return f"{key.split('.')[-1]}={value}"


def run_grid(cfg: ExperimentConfig, assets: Assets, key: str, grid: Sequence, command: str,
             out_dir: Optional[Path] = None, workers: int = 1) -> dict:
    """One protocol run per grid value of ``key``; writes a combined series file."""
    if not grid:
        raise ConfigError(f"empty grid for {key}")
    reports = {}
    for value in grid:
        reports[value] = run_protocol(cfg.replace(**{key: value}), assets, out_dir, command,
                                      _variant_name(key, value), workers)
    domains = sorted({d for r in reports.values() for d in r.per_domain})
    series = {"key": key, "values": list(grid), "avg": [reports[g].avg for g in grid],
              "per_domain": {d: [reports[g].per_domain[d]["mean"] if d in reports[g].per_domain else None
                                 for g in grid] for d in domains}}
    if out_dir is not None:
        path = Path(out_dir) / command / "series.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(series, indent=1, sort_keys=True) + "\n")
    return {"reports": reports, "series": series}


def lambda_sweep(cfg, assets, grid: Sequence[float] = LAMBDA_GRID, out_dir=None, workers=1) -> dict:
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise ConfigError(f"lambda grid must lie in [0, 1], got {list(grid)}")
    return run_grid(cfg, assets, "loss.lambda", [float(g) for g in grid], "sweep-lambda", out_dir, workers)


def ablate_fusion(cfg, assets, grid: Sequence[str] = MECHANISM_GRID, out_dir=None, workers=1) -> dict:
    return run_grid(cfg, assets, "fusion.mechanism", list(grid), "ablate-fusion", out_dir, workers)


def ablate_layers(cfg, assets, grid: Sequence[int] = LAYER_GRID, out_dir=None, workers=1) -> dict:
    return run_grid(cfg, assets, "fusion.K", list(grid), "ablate-layers", out_dir, workers)


def limited_data(cfg, assets, grid: Sequence[float] = FRACTION_GRID, out_dir=None, workers=1) -> dict:
    return run_grid(cfg, assets, "protocol.data_fraction", [float(g) for g in grid], "limited-data", out_dir,
                    workers)


# ---------------------------------------------------------------- eval and exports

def evaluate_saved(cfg: ExperimentConfig, assets: Assets, train_dir: Path, out_dir: Optional[Path] = None) -> RunReport:
    """Re-evaluate the checkpoints a ``train`` run left under ``train_dir`` on their target domains."""
    train_dir = Path(train_dir)
    paths = sorted(train_dir.glob("*/*/checkpoint.zip"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints under {train_dir}")
    names = assets.dataset.domain_names
    per_seed: dict[int, dict[str, float]] = {}
    start = time.perf_counter()
    for path in paths:
        params, meta = load_checkpoint(path)
        if meta.get("config") != cfg.echo():
            raise ConfigError(f"{path} was trained with a different config")
        target = _domain_ids(names, [meta["target"]], "checkpoint target")[0]
        sources = _domain_ids(names, meta["sources"], "checkpoint sources")
        _, _, test, open_classes = job_data(cfg, assets, sources, target, meta["seed"])
        torch.manual_seed(meta["seed"])
        pipe = make_pipeline(cfg, assets)
        load_into(pipe, params)
        acc = evaluate(pipe, test, open_classes or None)
        per_seed.setdefault(meta["seed"], {})[meta["target"]] = acc
        if out_dir is not None:
            r = aggregate_runs({meta["seed"]: {meta["target"]: acc}}, cfg.echo())
            r.extra = {"checkpoint": str(path.relative_to(train_dir)), "sources": meta["sources"]}
            r.write(Path(out_dir) / "eval" / meta["target"] / str(meta["seed"]))
    report = aggregate_runs(per_seed, cfg.echo(), time.perf_counter() - start)
    if out_dir is not None:
        report.write(Path(out_dir) / "eval")
    return report


def _first_job(cfg: ExperimentConfig, assets: Assets) -> tuple[tuple[int, ...], int, int]:
    sources, target = protocol_configs(cfg, assets.dataset.domain_names)[0]
    return sources, target, seeds_of(cfg)[0]


def _require_indigo(cfg: ExperimentConfig) -> None:
    if cfg["pipeline.kind"] != "indigo":
        raise ConfigError(f"exports need pipeline.kind = 'indigo', got {cfg['pipeline.kind']!r}")


@torch.no_grad()
def fused_outputs(pipe: Pipeline, data: TensorData, batch_size: int = 256) -> dict[str, list]:
    outs: dict[str, list] = {"xk_m": [], "xk_v": [], "attn": []}
    for start in range(0, len(data), batch_size):
        out = pipe(data.batch(np.arange(start, min(start + batch_size, len(data)))))
        outs["xk_m"].append(out["xk_m"])
        outs["xk_v"].append(out["xk_v"])
        outs["attn"].append(out["attn"])
    return outs


def export_embeddings(cfg: ExperimentConfig, assets: Assets, out_dir: Path) -> Path:
    """Train on the first configuration, then write x_K^M / x_K^V for every sample with labels."""
    _require_indigo(cfg)
    sources, target, seed = _first_job(cfg, assets)
    result, pipe, _ = run_single(cfg, assets, sources, target, seed, return_pipeline=True)
    data = to_tensor_data(assets.dataset, assets.bundle)
    outs = fused_outputs(pipe.eval(), data)
    arrays = {"xk_m": torch.cat(outs["xk_m"]).double().numpy(), "xk_v": torch.cat(outs["xk_v"]).double().numpy(),
              "labels": np.asarray(assets.dataset.labels, dtype=np.int64),
              "domains": np.asarray(assets.dataset.domains, dtype=np.int64),
              "is_target": (np.asarray(assets.dataset.domains) == target).astype(np.int64)}
    meta = {"config": cfg.echo(), "target": result.target, "sources": list(result.sources), "seed": seed,
            "class_names": list(assets.dataset.class_names), "domain_names": list(assets.dataset.domain_names),
            "target_accuracy": result.accuracy}
    run_dir = Path(out_dir) / "export-emb" / result.target / str(seed)
    return save_archive(run_dir / "embeddings.npz", arrays, meta)


def export_attention(cfg: ExperimentConfig, assets: Assets, out_dir: Path, n_samples: int = 8) -> Path:
    """Train on the first configuration, then write fusion attention maps on the target domain."""
    _require_indigo(cfg)
    if cfg["fusion.mechanism"] not in ("msa", "mca"):
        raise ConfigError(f"fusion.mechanism {cfg['fusion.mechanism']!r} has no attention maps to export")
    sources, target, seed = _first_job(cfg, assets)
    result, pipe, test = run_single(cfg, assets, sources, target, seed, return_pipeline=True)
    outs = fused_outputs(pipe.eval(), test)
    layers = [torch.cat([chunk[k] for chunk in outs["attn"]]) for k in range(len(outs["attn"][0]))]
    meta = {"mechanism": cfg["fusion.mechanism"], "K": cfg["fusion.K"], "heads": cfg["fusion.heads"],
            "target": result.target, "seed": seed, "tokens": ["intrinsic", "visual"]}
    record = {"mean": extract_attention([m.mean(dim=0) for m in layers], None, **meta),
              "samples": [dict(extract_attention(layers, i), label=int(test.labels[i]))
                          for i in range(min(n_samples, len(test)))]}
    run_dir = Path(out_dir) / "export-attn" / result.target / str(seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "attention.json"
    write_attention_export(path, record)
    return path


def stub_report(cfg: ExperimentConfig, assets: Assets) -> dict:
    """Zero-shot accuracy of the stub per domain, a quick sanity check on pretraining."""
    pipe = make_pipeline(cfg.replace(**{"pipeline.kind": "zero_shot", "pipeline.loss_mode": "cls",
                                        "pipeline.finetune_mvit": "frozen"}), assets)
    ds = assets.dataset
    return {name: evaluate(pipe, to_tensor_data(ds.filter_domains([d]), assets.bundle))
            for d, name in enumerate(ds.domain_names)}


def save_assets(assets: Assets, out_dir: Path) -> list[Path]:
    base = Path(out_dir) / "pretrain-stub"
    paths = [save_checkpoint(base / "stub.zip", assets.bundle.state_dict(), {"kind": "stub"})]
    if assets.visual_init is not None:
        paths.append(save_checkpoint(base / "visual.zip", assets.visual_init, {"kind": "visual"}))
    return paths


__all__ = ["Assets", "RunResult", "LAMBDA_GRID", "MECHANISM_GRID", "LAYER_GRID", "FRACTION_GRID", "load_dataset",
           "prepare_stub", "prepare_visual_init", "prepare_assets", "run_single", "execute", "protocol_configs",
           "run_protocol", "run_grid", "lambda_sweep", "ablate_fusion", "ablate_layers", "limited_data",
           "evaluate_saved", "export_embeddings", "export_attention", "stub_report", "save_assets"]
