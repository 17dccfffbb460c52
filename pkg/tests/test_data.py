import json

import numpy as np
import pytest

from phototune.data import (
    DatasetSpec,
    GenerationError,
    atomic_write_text,
    build_dataset,
    generate_scene,
    load_directory,
    load_manifest,
    make_pair,
    split_indices,
    write_dataset,
)
from phototune.image import luminance, write_image
from phototune.pipeline import apply_pipeline


def test_scene_deterministic():
    assert np.array_equal(generate_scene(42), generate_scene(42))


def test_scene_luminance_range():
    means = np.array([luminance(generate_scene(s, 32)).mean() for s in range(1000)])
    assert means.min() >= 0.2 and means.max() <= 0.8


def test_scenes_distinct():
    distinct = sum(not np.array_equal(generate_scene(s, 32), generate_scene(s + 1, 32)) for s in range(200))
    assert distinct >= 198


def test_scene_shape_and_range():
    x = generate_scene(0, 48)
    assert x.shape == (48, 48, 3) and x.dtype == np.float64
    assert x.min() >= 0 and x.max() <= 1
    with pytest.raises(ValueError):
        generate_scene(0, 8)


def test_pair_goal_reproducible_and_in_range():
    x = generate_scene(3)
    lo, hi = np.full(9, -0.2), np.full(9, 0.3)
    p = make_pair(x, np.random.default_rng(0), lo, hi)
    assert np.array_equal(apply_pipeline(x, p.goal_params), p.goal)
    assert np.all(p.goal_params >= lo) and np.all(p.goal_params <= hi)


def test_pair_rejects_white_goal():
    white = np.ones((16, 16, 3))
    low = np.zeros(9)
    low[0] = 0.5
    high = low.copy()
    high[0] = 1.0
    with pytest.raises(GenerationError):
        make_pair(white, 0, low, high)


def test_pair_resamples_after_rejection():
    calls = []

    def flaky(img, p):
        calls.append(1)
        return np.ones_like(img) if len(calls) < 4 else apply_pipeline(img, p)

    p = make_pair(generate_scene(1, 16), 0, pipeline=flaky)
    assert len(calls) == 4
    assert 0.02 < p.goal.mean() < 0.98


def test_dataset_reachable_and_deterministic():
    spec = DatasetSpec(count=6, seed=9, size=32)
    a, b = build_dataset(spec), build_dataset(spec)
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.goal, pb.goal)
        assert np.array_equal(apply_pipeline(pa.input, pa.goal_params), pa.goal)
    # a pair depends only on its index, not on the dataset size
    longer = build_dataset(DatasetSpec(count=8, seed=9, size=32))
    assert np.array_equal(longer[5].goal, a[5].goal)
    subset = build_dataset(spec, [4, 1])
    assert [p.id for p in subset] == ["00004", "00001"]
    assert np.array_equal(subset[0].goal, a[4].goal)


def test_split_deterministic_and_disjoint():
    spec = DatasetSpec(count=50, seed=3, split=(0.8, 0.2))
    tr, ev = split_indices(spec)
    tr2, ev2 = split_indices(DatasetSpec(count=50, seed=3, split=(0.8, 0.2)))
    assert np.array_equal(tr, tr2) and np.array_equal(ev, ev2)
    assert len(tr) == 40 and len(ev) == 10
    assert set(tr) | set(ev) == set(range(50)) and not set(tr) & set(ev)


@pytest.mark.parametrize(
    "kw",
    [
        {"count": -1},
        {"split": (0.5, 0.4)},
        {"param_low": (0.0,) * 8},
        {"param_low": (0.5,) * 9, "param_high": (0.2,) * 9},
        {"size": 4},
    ],
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        DatasetSpec(**kw)


def test_spec_dict_roundtrip():
    spec = DatasetSpec(count=3, seed=1, param_low=(-0.5,) * 9)
    assert DatasetSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_write_and_load_manifest(tmp_path):
    spec = DatasetSpec(count=5, seed=2, size=24, split=(0.6, 0.4))
    manifest = write_dataset(spec, tmp_path)
    assert len(manifest["pairs"]) == 5
    assert len(list(tmp_path.glob("*_input.png"))) == 5
    assert len(list(tmp_path.glob("*_goal.png"))) == 5
    pairs = load_manifest(tmp_path)
    ref = build_dataset(spec)
    for p, r in zip(pairs, ref):
        np.testing.assert_allclose(p.goal, r.goal, atol=1 / 65535)
        np.testing.assert_array_equal(p.goal_params, r.goal_params)
    assert len(load_manifest(tmp_path, "train")) == 3
    assert len(load_manifest(tmp_path / "manifest.json", "eval")) == 2


def test_manifest_byte_identical(tmp_path):
    spec = DatasetSpec(count=3, seed=4, size=16)
    write_dataset(spec, tmp_path / "a")
    write_dataset(spec, tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    assert (tmp_path / "a/00001_goal.png").read_bytes() == (tmp_path / "b/00001_goal.png").read_bytes()


def test_load_directory_empty(tmp_path):
    assert load_directory(tmp_path) == ([], [])


def test_load_directory_pairs_and_orphans(tmp_path):
    img = generate_scene(0, 16)
    write_image(tmp_path / "a_input.png", img)
    write_image(tmp_path / "a_goal.png", img)
    write_image(tmp_path / "b_input.png", img)
    (tmp_path / "notes.txt").write_text("x")
    pairs, skipped = load_directory(tmp_path)
    assert len(pairs) == 1 and pairs[0].id == "a" and pairs[0].goal_params is None
    assert skipped == ["b_input.png"]


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write_text(tmp_path / "f.json", "{}")
    assert [p.name for p in tmp_path.iterdir()] == ["f.json"]
    with pytest.raises(FileNotFoundError):
        atomic_write_text(tmp_path / "missing" / "f.json", "{}")
