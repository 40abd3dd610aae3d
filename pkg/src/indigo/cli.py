"""Command-line entry point: ``indigo <command> [options]``.

Exit codes: 0 success, 1 config error or bad usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import PRESETS, ExperimentConfig, parse_config
from .errors import ConfigError

COMMANDS = {
    "gen-data": "write the synthetic dataset as <domain>/<class>/<i>.png plus manifest.json",
    "pretrain-stub": "pretrain the stub MViT and the visual-branch initialization",
    "train": "run the DG protocol for the configured pipeline",
    "eval": "re-evaluate checkpoints written by train",
    "ablate-fusion": "fusion mechanisms concatenation, msa, mca, mixer",
    "ablate-layers": "fusion depth K in {3, 12}",
    "sweep-lambda": "loss weight lambda over 0.1 ... 1.0",
    "limited-data": "source-data fractions 0.5, 0.75, 1.0",
    "limited-sources": "train on protocol.sources (default: first domain) and test on the rest",
    "export-attn": "fusion attention maps on the target domain (JSON)",
    "export-emb": "final x_K^M / x_K^V vectors with labels for offline t-SNE",
}

log = logging.getLogger("indigo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    epilog = "commands:\n" + "\n".join(f"  {k:<16} {v}" for k, v in COMMANDS.items())
    p = _Parser(prog="indigo", description="Intrinsic-multimodality domain generalization experiments.",
                epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", metavar="command", help="one of the commands below")
    p.add_argument("--config", type=Path, default=None, help="TOML config (namespaced keys); defaults if omitted")
    p.add_argument("--output-dir", type=Path, default=Path("runs"), help="all outputs go under here")
    p.add_argument("--seed", type=int, default=None, help="single seed; overrides protocol.seeds and INDIGO_SEED")
    p.add_argument("--preset", choices=PRESETS, default=None, help="default set (wins over the file's preset)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    p.add_argument("--checkpoints", type=Path, default=None, help="eval: train output to read (default <out>/train)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config, args.preset)
    seed = args.seed
    if seed is None and os.environ.get("INDIGO_SEED", "").strip():
        raw = os.environ["INDIGO_SEED"].strip()
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"INDIGO_SEED must be an integer, got {raw!r}") from None
    if seed is not None:
        cfg = cfg.replace(**{"protocol.seeds": [seed]})
    return cfg


def _summary(report) -> dict:
    return {"avg": report.avg, "per_domain": {d: v["mean"] for d, v in report.per_domain.items()}}


def run_command(command: str, cfg: ExperimentConfig, out: Path, jobs: int = 1,
                checkpoints: Optional[Path] = None) -> dict:
    """Dispatch one command; returns a small JSON-able summary."""
    from . import experiments as ex
    from .data import write_dataset

    if command == "gen-data":
        root = write_dataset(ex.load_dataset(cfg), out / "gen-data" / "data")
        return {"dataset": str(root)}
    assets = ex.prepare_assets(cfg, out / "cache")
    if command == "pretrain-stub":
        paths = ex.save_assets(assets, out)
        zero_shot = ex.stub_report(cfg, assets)
        report = out / "pretrain-stub" / "report.json"
        report.write_text(json.dumps({"config": cfg.echo(), "zero_shot": zero_shot}, indent=1, sort_keys=True) + "\n")
        return {"checkpoints": [str(p) for p in paths], "zero_shot": zero_shot}
    if command in ("train", "limited-sources"):
        return _summary(ex.run_protocol(cfg, assets, out, command, workers=jobs))
    if command == "eval":
        return _summary(ex.evaluate_saved(cfg, assets, checkpoints or out / "train", out))
    grids = {"ablate-fusion": ex.ablate_fusion, "ablate-layers": ex.ablate_layers,
             "sweep-lambda": ex.lambda_sweep, "limited-data": ex.limited_data}
    if command in grids:
        series = grids[command](cfg, assets, out_dir=out, workers=jobs)["series"]
        return {"key": series["key"], "values": series["values"], "avg": series["avg"]}
    if command == "export-attn":
        return {"attention": str(ex.export_attention(cfg, assets, out))}
    if command == "export-emb":
        return {"embeddings": str(ex.export_embeddings(cfg, assets, out))}
    raise UsageError(f"unknown command {command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command not in COMMANDS:
            raise UsageError(f"unknown command {args.command!r}")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"indigo: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        summary = run_command(args.command, cfg, args.output_dir, args.jobs, args.checkpoints)
    except ConfigError as exc:
        print(f"indigo: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"indigo: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
