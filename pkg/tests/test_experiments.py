import json

import numpy as np
import pytest
import torch

from conftest import tiny_config
from indigo import experiments as ex
from indigo.checkpoint import load_checkpoint
from indigo.errors import ConfigError


@pytest.fixture(scope="module")
def tiny():
    cfg = tiny_config()
    return cfg, ex.prepare_assets(cfg)


def test_assets_and_cache(tiny, tmp_path):
    cfg, assets = tiny
    assert assets.dataset.num_classes == 4 and assets.dataset.num_domains == 3
    assert not any(p.requires_grad for p in assets.bundle.parameters())
    assert len(assets.bundle.vocab) == 4 + 4 + 4 - 1  # base words, classes, stub domains; "photo" shared
    first = ex.prepare_assets(cfg, tmp_path)
    assert sorted(p.name.split("-")[0] for p in tmp_path.iterdir()) == ["stub", "visual"]
    again = ex.prepare_assets(cfg, tmp_path)
    for a, b in zip(first.bundle.state_dict().values(), again.bundle.state_dict().values()):
        assert torch.equal(a, b)
    for k in first.visual_init:
        assert torch.equal(first.visual_init[k], again.visual_init[k])
        assert torch.equal(first.visual_init[k], assets.visual_init[k])


def test_no_visual_pretraining():
    cfg = tiny_config(**{"visual.pretrain": False})
    assert ex.prepare_visual_init(cfg, 4) is None


def test_protocol_configs():
    names = ["photo", "sketch", "cartoon"]
    cfg = tiny_config()
    assert ex.protocol_configs(cfg, names) == [((1, 2), 0), ((0, 2), 1), ((0, 1), 2)]
    assert ex.protocol_configs(cfg, names, limited_sources=True) == [((0,), 1), ((0,), 2)]
    pinned = cfg.replace(**{"protocol.sources": ["sketch"], "protocol.targets": ["photo"]})
    assert ex.protocol_configs(pinned, names) == [((1,), 0)]
    with pytest.raises(ConfigError):
        ex.protocol_configs(cfg.replace(**{"protocol.sources": ["fog"]}), names)
    with pytest.raises(ConfigError):
        ex.protocol_configs(cfg.replace(**{"protocol.sources": ["photo"], "protocol.targets": ["photo"]}), names)


def test_open_setting_excludes_open_classes(tiny):
    cfg, assets = tiny
    cfg = cfg.replace(**{"protocol.setting": "open"})
    train, val, test, open_classes = ex.job_data(cfg, assets, (1, 2), 0, 0)
    assert open_classes
    assert not set(train.labels.tolist()) & set(open_classes)
    assert set(open_classes) <= set(test.labels.tolist())


def test_run_protocol_layout_and_determinism(tiny, tmp_path):
    cfg, assets = tiny
    a = ex.run_protocol(cfg, assets, tmp_path / "a")
    b = ex.run_protocol(cfg, assets, tmp_path / "b")
    assert a.to_json() == b.to_json()
    assert sorted(a.per_domain) == ["cartoon", "photo", "sketch"]
    for rel in ["train/report.json", "train/photo/0/report.json", "train/photo/0/checkpoint.zip",
                "train/cartoon/1/timing.json"]:
        assert (tmp_path / "a" / rel).is_file(), rel
    for path in (tmp_path / "a").rglob("*"):
        if path.is_file() and path.name != "timing.json":
            assert path.read_bytes() == (tmp_path / "b" / path.relative_to(tmp_path / "a")).read_bytes()
    params, meta = load_checkpoint(tmp_path / "a/train/photo/0/checkpoint.zip")
    assert meta["target"] == "photo" and meta["sources"] == ["sketch", "cartoon"] and meta["config"] == cfg.echo()
    assert all(v.dtype == np.float64 for v in params.values())
    run = json.loads((tmp_path / "a/train/photo/0/report.json").read_text())
    assert 1 <= run["extra"]["selected_epoch"] <= 2


def test_parallel_workers_match_serial(tiny, tmp_path):
    cfg, assets = tiny
    cfg = cfg.replace(**{"protocol.seeds": [0]})
    serial = ex.run_protocol(cfg, assets, tmp_path / "s", workers=1)
    parallel = ex.run_protocol(cfg, assets, tmp_path / "p", workers=2)
    assert serial.to_json() == parallel.to_json()
    assert (tmp_path / "s/train/photo/0/checkpoint.zip").read_bytes() == \
        (tmp_path / "p/train/photo/0/checkpoint.zip").read_bytes()


def test_evaluate_saved_reproduces_selected_accuracy(tiny, tmp_path):
    cfg, assets = tiny
    cfg = cfg.replace(**{"protocol.seeds": [1]})
    trained = ex.run_protocol(cfg, assets, tmp_path)
    again = ex.evaluate_saved(cfg, assets, tmp_path / "train", tmp_path)
    assert again.to_dict()["per_domain"] == trained.to_dict()["per_domain"]
    assert (tmp_path / "eval/report.json").is_file()
    with pytest.raises(ConfigError):
        ex.evaluate_saved(cfg.replace(**{"loss.lambda": 0.5}), assets, tmp_path / "train")


def test_grids_write_series(tiny, tmp_path):
    cfg, assets = tiny
    cfg = cfg.replace(**{"protocol.seeds": [0], "schedule.epochs": 1})
    out = ex.ablate_fusion(cfg, assets, out_dir=tmp_path)
    series = json.loads((tmp_path / "ablate-fusion/series.json").read_text())
    assert series["values"] == ["concatenation", "msa", "mca", "mixer"] and len(series["avg"]) == 4
    assert (tmp_path / "ablate-fusion/mechanism=mca/photo/0/checkpoint.zip").is_file()
    assert out["series"] == series
    with pytest.raises(ConfigError):
        ex.lambda_sweep(cfg, assets, grid=[1.5])


def test_limited_sources_trains_on_first_domain(tiny, tmp_path):
    cfg, assets = tiny
    report = ex.run_protocol(cfg.replace(**{"protocol.seeds": [0]}), assets, tmp_path, "limited-sources")
    assert sorted(report.per_domain) == ["cartoon", "sketch"]
    assert all(c["sources"] == ["photo"] for c in report.extra["configurations"])


def test_exports(tiny, tmp_path):
    cfg, assets = tiny
    path = ex.export_embeddings(cfg, assets, tmp_path)
    arrays, meta = load_checkpoint(path)
    n = len(assets.dataset)
    assert arrays["xk_m"].shape == arrays["xk_v"].shape == (n, cfg["fusion.token_dim"])
    assert arrays["labels"].dtype == np.int64 and arrays["is_target"].sum() == np.sum(assets.dataset.domains == 0)
    attn = json.loads(ex.export_attention(cfg, assets, tmp_path).read_text())
    assert attn["mean"]["meta"]["layers"] == 1
    first = np.array(attn["samples"][0]["maps"]["0.0"])
    np.testing.assert_allclose(first.sum(-1), 1.0, atol=1e-6)
    with pytest.raises(ConfigError):
        ex.export_attention(cfg.replace(**{"fusion.mechanism": "mixer"}), assets, tmp_path)
    with pytest.raises(ConfigError):
        ex.export_embeddings(cfg.replace(**{"pipeline.kind": "linear_eval"}), assets, tmp_path)


def test_stub_report_and_save_assets(tiny, tmp_path):
    cfg, assets = tiny
    report = ex.stub_report(cfg, assets)
    assert sorted(report) == ["cartoon", "photo", "sketch"] and all(0 <= v <= 1 for v in report.values())
    paths = ex.save_assets(assets, tmp_path)
    assert [p.name for p in paths] == ["stub.zip", "visual.zip"]
