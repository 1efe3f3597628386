import importlib.util
import json
import os
from pathlib import Path

import numpy as np
import pytest

from distillcache.codec import InvalidDataError, f16_decode, f16_encode, unpack_archive
from distillcache.geometry import downsample_bilinear
from distillcache.teacher import (
    DEFAULT_RESOLUTION,
    DEFAULT_TAU,
    PATCH_SIZE,
    CacheJob,
    ConfigError,
    CorruptDumpError,
    MissingDumpError,
    SyntheticScene,
    align_and_filter,
    analytic_masked_fraction,
    archive_name,
    build_cache,
    build_cache_sample,
    check_target_resolution,
    derive_seed,
    read_teacher_dump,
    synth_teacher,
    write_teacher_dump,
)


def test_defaults():
    assert DEFAULT_RESOLUTION == (224, 518)
    assert DEFAULT_TAU == 0.3
    h, w = check_target_resolution(DEFAULT_RESOLUTION)
    assert (h // PATCH_SIZE, w // PATCH_SIZE) == (16, 37)


@pytest.mark.parametrize("res", [(224, 520), (225, 518), (0, 14), (14, -14)])
def test_resolution_rejected(res):
    with pytest.raises(ConfigError):
        check_target_resolution(res)


def test_dump_roundtrip(tmp_path, teacher2):
    write_teacher_dump(teacher2, tmp_path / "d", "ds/scene/0")
    back = read_teacher_dump(tmp_path / "d")
    assert len(back) == 2
    a, b = teacher2.stacked(), back.stacked()
    for name in ("global_points", "local_points", "global_conf", "local_conf"):
        assert a[name].tobytes() == b[name].tobytes()
    assert back[0].mask is None


def test_dump_view_count_mismatch(tmp_path, teacher2):
    d = write_teacher_dump(teacher2, tmp_path / "d", "x")
    desc = json.loads((d / "descriptor.json").read_text())
    desc["n_views"] = 3
    (d / "descriptor.json").write_text(json.dumps(desc))
    with pytest.raises(CorruptDumpError, match="bytes"):
        read_teacher_dump(d)


def test_dump_missing_and_negative(tmp_path, teacher2):
    with pytest.raises(MissingDumpError):
        read_teacher_dump(tmp_path / "nothing")
    d = write_teacher_dump(teacher2, tmp_path / "d", "x")
    conf = np.fromfile(d / "local_conf.f32", "<f4")
    conf[5] = -1.0
    conf.tofile(d / "local_conf.f32")
    with pytest.raises(InvalidDataError):
        read_teacher_dump(d)


def test_synthetic_deterministic():
    a = synth_teacher(SyntheticScene(seed=0)).stacked()
    b = synth_teacher(SyntheticScene(seed=0)).stacked()
    c = synth_teacher(SyntheticScene(seed=1)).stacked()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["global_points"], c["global_points"])


def test_synthetic_identity_offsets():
    a = synth_teacher(SyntheticScene(seed=0, n_views=3, identity_offsets=True)).stacked()
    assert np.array_equal(a["global_points"], a["local_points"])


def test_synthetic_local_is_rigid_motion():
    a = synth_teacher(SyntheticScene(seed=4, n_views=2)).stacked()
    for k in range(2):
        g = a["global_points"][k].reshape(-1, 3).astype(np.float64)
        l = a["local_points"][k].reshape(-1, 3).astype(np.float64)
        # pairwise distances are preserved by a rigid motion
        idx = np.random.default_rng(0).integers(0, len(g), size=(200, 2))
        dg = np.linalg.norm(g[idx[:, 0]] - g[idx[:, 1]], axis=1)
        dl = np.linalg.norm(l[idx[:, 0]] - l[idx[:, 1]], axis=1)
        np.testing.assert_allclose(dg, dl, atol=1e-5)


def test_synthetic_confidence_range():
    s = SyntheticScene(seed=0)
    a = synth_teacher(s).stacked()
    for name in ("global_conf", "local_conf"):
        assert a[name].min() >= 0 and a[name].max() <= s.c_max


@pytest.mark.parametrize("falloff", [0.4, 0.6, 0.9])
def test_synthetic_masked_fraction_matches_area(falloff):
    scene = SyntheticScene(seed=0, n_views=1, height=224, width=336, falloff=falloff)
    aligned = align_and_filter(synth_teacher(scene), (112, 168), 0.3)
    measured = 1.0 - aligned[0].mask.valid_count / (112 * 168)
    assert abs(measured - analytic_masked_fraction(scene, 0.3)) <= 0.02


def test_derive_seed_stable():
    assert derive_seed(0, "a/b/0") == derive_seed(0, "a/b/0")
    assert derive_seed(0, "a/b/0") != derive_seed(1, "a/b/0")


def test_pipeline_composes_stage_oracles(teacher2):
    target = (14, 28)
    s = unpack_archive(build_cache_sample(teacher2, target, 0.3))
    for k, v in enumerate(teacher2):
        for name, m in (("global_points", v.global_points), ("local_points", v.local_points),
                        ("global_conf", v.global_conf), ("local_conf", v.local_conf)):
            expected = f16_encode(downsample_bilinear(m, target).data)
            assert np.array_equal(getattr(s, name)[k], expected)
        cl = downsample_bilinear(v.local_conf, target).data
        assert np.array_equal(s.decoded()["masks"][k], ~(cl < 0.3))


def test_tau_zero_single_run(teacher2):
    s = unpack_archive(build_cache_sample(teacher2, (14, 28), 0.0))
    for m in s.masks:
        assert m.first_value and m.run_lengths.tolist() == [14 * 28]


def test_mask_provenance(teacher2):
    aligned = align_and_filter(teacher2, (28, 42), 0.3)
    for v in aligned:
        masked = ~v.mask.bits
        assert masked.any()
        assert np.all(v.local_conf.data[masked] < 0.3)
        assert np.all(v.local_conf.data[~masked] >= 0.3)


def test_quantization_within_half_ulp(teacher2):
    aligned = align_and_filter(teacher2, (28, 42), 0.3)
    a = aligned.stacked()
    for name in ("global_points", "local_points", "global_conf", "local_conf"):
        x = a[name].astype(np.float64)
        q = f16_decode(f16_encode(a[name])).astype(np.float64)
        # half of the binary16 spacing at |x|, with the subnormal spacing as floor
        ulp = np.spacing(np.abs(x).astype(np.float16)).astype(np.float64)
        assert np.all(np.abs(q - x) <= 0.5 * ulp)


def test_degenerate_view_flagged_not_fatal(teacher2):
    s = unpack_archive(build_cache_sample(teacher2, (14, 28), 1e9))
    assert s.degenerate_views == [0, 1]


def test_build_cache_deterministic_and_parallel(tmp_path):
    jobs = [CacheJob(f"syn/s{i}/0", 2, synthetic_seed=i, teacher_res=(28, 56)) for i in range(3)]
    r1 = build_cache(jobs, tmp_path / "a", (14, 28), 0.3, workers=1)
    r2 = build_cache(jobs, tmp_path / "b", (14, 28), 0.3, workers=2)
    for j in jobs:
        name = archive_name(j.sample_id)
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    strip = lambda r: {k: v for k, v in r.items() if k != "timing"}
    assert strip(r1) == strip(r2)
    assert r1["samples_processed"] == 3
    assert sorted(os.listdir(tmp_path / "a")) == sorted(archive_name(j.sample_id) for j in jobs)


def test_build_cache_from_dump(tmp_path, teacher2):
    write_teacher_dump(teacher2, tmp_path / "dump", "ds/s/0")
    r = build_cache([CacheJob("ds/s/0", 2, dump_dir=str(tmp_path / "dump"))], tmp_path / "out", (14, 28))
    assert r["bytes_in"] == 2 * 40 * 60 * 8 * 4
    direct = build_cache_sample(teacher2, (14, 28), 0.3)
    assert (tmp_path / "out" / archive_name("ds/s/0")).read_bytes() == direct


def test_align_rejects_negative_tau(teacher2):
    with pytest.raises(ConfigError):
        align_and_filter(teacher2, (14, 28), -0.1)


def load_reference_writer():
    path = Path(__file__).resolve().parents[1] / "tools" / "dump_writer.py"
    spec = importlib.util.spec_from_file_location("dump_writer", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_reference_writer_roundtrip(tmp_path):
    writer = load_reference_writer()
    rng = np.random.default_rng(0)
    arrays = [rng.normal(size=(3, 5, 7, 3)), rng.normal(size=(3, 5, 7, 3)),
              rng.uniform(0, 2, size=(3, 5, 7)), rng.uniform(0, 2, size=(3, 5, 7))]
    d = writer.write_dump(tmp_path / writer.dump_dir_name("a/b/0"), "a/b/0", *arrays)
    assert d.name == "a__b__0"
    back = read_teacher_dump(d).stacked()
    for name, a in zip(("global_points", "local_points", "global_conf", "local_conf"), arrays):
        assert back[name].tobytes() == a.astype("<f4").tobytes()
    with pytest.raises(ValueError):
        writer.write_dump(tmp_path / "bad", "x", arrays[0], arrays[1], -arrays[2], arrays[3])
