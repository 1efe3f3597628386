import os

import pytest
from PIL import Image

from distillcache.manifest import (
    Category,
    SamplingPolicy,
    build_manifest,
    make_samples,
    read_manifest,
    read_samples,
    samples_from_manifest,
    subsample_scene,
    write_manifest,
    write_samples,
)


def walk_oracle(root):
    found = set()
    for dirpath, _, files in os.walk(root):
        for f in files:
            if f.endswith(".png"):
                found.add((os.path.basename(dirpath), f))
    return found


def scene_entries(tmp_path, image_tree, n, scene="s"):
    root = image_tree({scene: n}, name=f"tree{n}")
    return build_manifest([("ds", str(root))])


def test_smallest_scene(image_tree):
    root = image_tree({"s": 2})
    entries = build_manifest([("ds", str(root))])
    assert [e.frame_index for e in entries] == [0, 1]
    assert entries[0].sample_id == "ds/s/000"
    assert (entries[0].width, entries[0].height) == (8, 6)


def test_empty_root(tmp_path):
    (tmp_path / "empty").mkdir()
    assert build_manifest([("ds", str(tmp_path / "empty"))]) == []


def test_missing_root_names_path(tmp_path):
    with pytest.raises(OSError, match="nope"):
        build_manifest([("ds", str(tmp_path / "nope"))])


def test_against_directory_walk(image_tree):
    root = image_tree({"a": 5, "b": 5})
    entries = build_manifest([("ds", str(root))])
    assert len(entries) == 10
    assert len({e.key for e in entries}) == 10
    assert {(e.scene_id, os.path.basename(e.image_path)) for e in entries} == walk_oracle(root)


def test_unreadable_image_skipped(image_tree, caplog):
    root = image_tree({"s": 3})
    (root / "s" / "001.png").write_bytes(b"not an image")
    entries = build_manifest([("ds", str(root))])
    assert [os.path.basename(e.image_path) for e in entries] == ["000.png", "002.png"]
    assert [e.frame_index for e in entries] == [0, 1]
    assert "001.png" in caplog.text


def test_order_file(image_tree):
    root = image_tree({"s": 3})
    (root / "s" / "frames.txt").write_text("002.png\n000.png\n001.png\n")
    entries = build_manifest([("ds", str(root))])
    assert [os.path.basename(e.image_path) for e in entries] == ["002.png", "000.png", "001.png"]


def test_multiple_datasets_parallel(image_tree):
    r1, r2 = image_tree({"s": 3}, name="one"), image_tree({"s": 4}, name="two")
    seq = build_manifest([("a", str(r1)), ("b", str(r2))])
    par = build_manifest([("a", str(r1)), ("b", str(r2))], workers=2)
    assert seq == par and len(seq) == 7


def test_stride_navigation(tmp_path, image_tree):
    entries = scene_entries(tmp_path, image_tree, 100)
    sub = subsample_scene(entries, SamplingPolicy(Category.NAVIGATION, target_count=20))
    assert [e.frame_index for e in sub] == list(range(0, 100, 5))


def test_stride_object_centric(tmp_path, image_tree):
    entries = scene_entries(tmp_path, image_tree, 40)
    sub = subsample_scene(entries, SamplingPolicy(Category.OBJECT_CENTRIC))
    assert [e.frame_index for e in sub] == list(range(0, 40, 2))


def test_stride_rules():
    assert SamplingPolicy(Category.LARGE_OUTDOOR).stride_for(95) == 9
    assert SamplingPolicy(Category.NAVIGATION).stride_for(7) == 1
    assert SamplingPolicy(Category.UNIFORM, stride=3).stride_for(1000) == 3
    with pytest.raises(ValueError):
        SamplingPolicy(stride=0)


def test_short_scene_identity(tmp_path, image_tree):
    entries = scene_entries(tmp_path, image_tree, 7)
    assert subsample_scene(entries, SamplingPolicy(Category.NAVIGATION)) == entries


@pytest.mark.parametrize("n,expected", [(40, 2), (19, 0), (20, 1), (59, 2)])
def test_windows(tmp_path, image_tree, n, expected):
    entries = scene_entries(tmp_path, image_tree, n)
    samples = make_samples(entries, SamplingPolicy())
    assert len(samples) == expected
    for k, s in enumerate(samples):
        idx = [e.frame_index for e in s.entries]
        assert idx == list(range(20 * k, 20 * k + 20))
        assert s.sample_id == f"ds/s/{20 * k}"


def test_overlapping_windows(tmp_path, image_tree):
    entries = scene_entries(tmp_path, image_tree, 40)
    samples = make_samples(entries, SamplingPolicy(overlap=True))
    assert [s.sample_id for s in samples] == ["ds/s/0", "ds/s/10", "ds/s/20"]


def test_window_invariants(image_tree):
    root = image_tree({"a": 45, "b": 61, "c": 12})
    entries = build_manifest([("ds", str(root))])
    for policy in (SamplingPolicy(), SamplingPolicy(Category.NAVIGATION, target_count=30)):
        for s in samples_from_manifest(entries, policy):
            assert len(s.entries) == 20
            assert len({e.scene_id for e in s.entries}) == 1
            idx = [e.frame_index for e in s.entries]
            assert all(b > a for a, b in zip(idx, idx[1:]))


def test_manifest_deterministic_bytes(tmp_path, image_tree):
    root = image_tree({"a": 6, "b": 4})
    write_manifest(tmp_path / "m1.jsonl", build_manifest([("ds", str(root))]))
    write_manifest(tmp_path / "m2.jsonl", build_manifest([("ds", str(root))]))
    assert (tmp_path / "m1.jsonl").read_bytes() == (tmp_path / "m2.jsonl").read_bytes()
    assert read_manifest(tmp_path / "m1.jsonl") == build_manifest([("ds", str(root))])


def test_samples_jsonl(tmp_path, image_tree):
    root = image_tree({"a": 40})
    samples = samples_from_manifest(build_manifest([("ds", str(root))]), SamplingPolicy())
    write_samples(tmp_path / "s.jsonl", samples)
    rows = read_samples(tmp_path / "s.jsonl")
    assert [r["sample_id"] for r in rows] == ["ds/a/0", "ds/a/20"]
    assert rows[1]["image_paths"] == samples[1].image_paths


def test_image_dims_from_header(image_tree, tmp_path):
    root = tmp_path / "big"
    (root / "s").mkdir(parents=True)
    Image.new("RGB", (640, 480)).save(root / "s" / "0.jpg")
    (e,) = build_manifest([("ds", str(root))])
    assert (e.width, e.height) == (640, 480)
