import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from indigo.data import synth_multidomain_dataset
from indigo.protocols import (accuracy, aggregate_runs, apply_open_split, holdout_split, leave_one_out_splits,
                              make_open_splits, select_model, subsample_fraction)

GOLDEN = Path(__file__).parent / "golden" / "open_splits_C10_D3.json"


@pytest.mark.parametrize("D", [2, 3, 4, 5, 6])
def test_leave_one_out_partition(D):
    splits = leave_one_out_splits(range(D))
    assert [t for _, t in splits] == list(range(D))
    for sources, target in splits:
        assert target not in sources
        assert set(sources) | {target} == set(range(D))
        assert len(sources) == D - 1


def test_leave_one_out_needs_two_domains():
    with pytest.raises(ValueError):
        leave_one_out_splits(["photo"])


def test_open_splits_golden_file():
    golden = json.loads(GOLDEN.read_text())
    for conf in golden["configurations"]:
        spec = make_open_splits(golden["C"], conf["sources"], golden["seed"])
        assert spec.to_dict() == {"per_domain_labels": conf["per_domain_labels"], "open_classes": conf["open_classes"]}


@settings(max_examples=80, deadline=None)
@given(st.integers(4, 20), st.integers(1, 5), st.integers(0, 10_000))
def test_open_split_properties(C, S, seed):
    if C < S + 2:
        with pytest.raises(ValueError):
            make_open_splits(C, list(range(S)), seed)
        return
    spec = make_open_splits(C, list(range(S)), seed)
    known = set(spec.known_classes)
    opened = set(spec.open_classes)
    assert opened and not known & opened
    assert known | opened == set(range(C))
    assert all(spec.per_domain_labels[d] for d in range(S))
    if S > 1:
        sets = [set(spec.per_domain_labels[d]) for d in range(S)]
        assert len({frozenset(s) for s in sets}) > 1
        assert set.intersection(*sets)


def test_apply_open_split_keeps_domain_label_pairs():
    ds = synth_multidomain_dataset(C=6, D=3, n_per_cell=2, image_size=8, patch_size=4)
    spec = make_open_splits(6, [0, 1], 0)
    out = apply_open_split(ds.filter_domains([0, 1]), spec)
    assert len(out) == 2 * sum(len(v) for v in spec.per_domain_labels.values())
    for c, d in zip(out.labels, out.domains):
        assert c in spec.per_domain_labels[int(d)]


@pytest.mark.parametrize("fraction", [0.5, 0.75, 0.33, 1.0])
def test_subsample_counts(fraction):
    ds = synth_multidomain_dataset(C=3, D=3, n_per_cell=7, image_size=8, patch_size=4)
    ds = ds.subset([i for i in range(len(ds)) if not (ds.domains[i] == 2 and i % 4 == 0)])
    out = subsample_fraction(ds, fraction, seed=1)
    for d in range(3):
        n_d = int(np.sum(ds.domains == d))
        assert int(np.sum(out.domains == d)) == math.ceil(fraction * n_d)
    again = subsample_fraction(ds, fraction, seed=1)
    assert np.array_equal(out.images, again.images)


def test_subsample_rejects_bad_fraction():
    ds = synth_multidomain_dataset(C=3, D=3, n_per_cell=1, image_size=8, patch_size=4)
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            subsample_fraction(ds, bad, 0)


def test_holdout_is_stratified_and_disjoint():
    ds = synth_multidomain_dataset(C=3, D=3, n_per_cell=10, image_size=8, patch_size=4)
    train, val = holdout_split(ds, 0.2, seed=0)
    assert len(train) + len(val) == len(ds)
    for d in range(3):
        for c in range(3):
            assert np.sum((val.domains == d) & (val.labels == c)) == 2
    joined = np.concatenate([train.images, val.images]).reshape(len(ds), -1)
    assert len({row.tobytes() for row in joined}) == len(ds)


def _brute(pred, labels, open_classes):
    hits = total = 0
    for p, y in zip(pred, labels):
        if y in open_classes:
            continue
        total += 1
        hits += p == y
    return hits / total


def test_open_metric_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        C = int(rng.integers(3, 8))
        labels = rng.integers(0, C, 30)
        pred = rng.integers(0, C, 30)
        opened = list(rng.choice(C, size=int(rng.integers(0, C - 1)), replace=False))
        if all(y in opened for y in labels):
            continue
        assert accuracy(pred, labels, opened) == _brute(pred, labels, opened)


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])
    with pytest.raises(ValueError):
        accuracy([1, 1], [1, 1], open_classes=[1])
    with pytest.raises(ValueError):
        accuracy([], [])


def test_select_model():
    val, test = [0.5, 0.7, 0.7, 0.6], [0.9, 0.1, 0.2, 0.95]
    assert select_model("train_domain_val", val, test) == 1
    assert select_model("test_domain_val", val, test) == 3
    with pytest.raises(ValueError):
        select_model("oracle", val, test)
    with pytest.raises(ValueError):
        select_model("train_domain_val", [], [])


def test_aggregate_mean_and_sample_std():
    report = aggregate_runs({0: {"a": 0.5, "b": 0.7}, 1: {"a": 0.7, "b": 0.9}})
    assert report.per_domain["a"]["mean"] == pytest.approx(0.6)
    assert report.per_domain["a"]["std"] == pytest.approx(math.sqrt(0.02))
    assert report.avg == pytest.approx(0.7)
    single = aggregate_runs({3: {"a": 0.25}})
    assert single.per_domain["a"]["std"] == 0.0
    with pytest.raises(ValueError):
        aggregate_runs({})


def test_report_json_excludes_wall_time(tmp_path):
    report = aggregate_runs({0: {"a": 0.5}}, {"k": 1}, wall_time_s=12.5)
    report.write(tmp_path)
    assert "wall_time" not in (tmp_path / "report.json").read_text()
    assert json.loads((tmp_path / "timing.json").read_text())["wall_time_s"] == 12.5
