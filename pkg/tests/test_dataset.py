import json
import math

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import layerforge.dataset as ds
from layerforge.dataset import (
    ASPECT_BINS,
    BucketKey,
    DatasetError,
    InvariantViolation,
    ManifestError,
    MissingFileError,
    SampleManifest,
    SchemaVersionError,
    aspect_bin,
    bucket_key_for,
    bucketize,
    iter_manifests,
    load_manifest,
    read_sample,
    resize_within,
    write_sample,
)

from conftest import random_sample


def test_roundtrip_tolerances(tmp_path, rng):
    s = random_sample(rng, 12, 20, 3)
    m = write_sample(s, tmp_path / "s0", {"note": "x"})
    back = read_sample(m.path)
    assert np.max(np.abs(back.source - s.source)) <= 0.5 / 255 + 1e-12
    assert np.max(np.abs(back.background - s.background)) <= 0.5 / 255 + 1e-12
    for a, b in zip(back.layers, s.layers):
        assert np.max(np.abs(a.rgb - b.rgb)) <= 0.5 / 255 + 1e-12
        assert np.max(np.abs(a.alpha - b.alpha)) <= 0.5 / 255 + 1e-12
        assert a.order_index == b.order_index
    assert np.max(np.abs(back.shadow - s.shadow)) <= 1 / 65535 + 1e-12
    assert back.roundtrip_error() <= 3 / 255
    loaded = load_manifest(tmp_path / "s0")
    assert loaded == m and loaded.provenance == {"note": "x"}
    assert loaded.bucket_key == BucketKey("16:9", 3)


def test_zero_shadow_is_midpoint_plane(tmp_path, rng):
    s = random_sample(rng, 4, 4, 1)
    s = type(s)(s.source, s.background, s.layers, np.zeros((4, 4, 3)))
    write_sample(s, tmp_path / "z", None)
    raw = cv2.imread(str(tmp_path / "z" / "shadow.png"), cv2.IMREAD_UNCHANGED)
    assert raw.dtype == np.uint16 and np.all(raw == 32768)


def test_missing_shadow_reads_as_none(tmp_path, rng):
    s = random_sample(rng, 5, 5, 2, with_shadow=False)
    m = write_sample(s, tmp_path / "n")
    assert m.shadow_path is None and read_sample(m.path).shadow is None


def test_manifest_json_is_canonical(tmp_path, rng):
    m = write_sample(random_sample(rng, 5, 5, 1), tmp_path / "c")
    text = (tmp_path / "c" / "manifest.json").read_text()
    assert text == json.dumps(json.loads(text), indent=2, sort_keys=True) + "\n"
    assert json.loads(text)["schema_version"] == 1
    assert m.to_json() == text


def count_writes(tmp_path, rng, monkeypatch):
    calls = []
    real = ds._write_bytes
    monkeypatch.setattr(ds, "_write_bytes", lambda p, d: (calls.append(p), real(p, d)))
    write_sample(random_sample(rng, 6, 6, 2), tmp_path / "count")
    monkeypatch.setattr(ds, "_write_bytes", real)
    return len(calls)


def test_crash_consistency_every_write(tmp_path, rng, monkeypatch):
    n = count_writes(tmp_path, rng, monkeypatch)
    assert n == 2 + 2 * 2 + 1 + 1  # source, background, layers, shadow, manifest
    real = ds._write_bytes
    for fail_at in range(n):
        state = {"i": 0}

        def flaky(path, data):
            if state["i"] == fail_at:
                raise OSError("disk full")
            state["i"] += 1
            real(path, data)

        monkeypatch.setattr(ds, "_write_bytes", flaky)
        d = tmp_path / "crash" / f"s{fail_at}"
        with pytest.raises(DatasetError):
            write_sample(random_sample(rng, 6, 6, 2), d)
        assert not (d / "manifest.json").exists()
        assert not (d / "manifest.json.tmp").exists()
    monkeypatch.setattr(ds, "_write_bytes", real)
    assert iter_manifests(tmp_path / "crash") == []


def test_failed_rewrite_drops_old_manifest(tmp_path, rng, monkeypatch):
    d = tmp_path / "s"
    write_sample(random_sample(rng, 6, 6, 1), d)
    assert len(iter_manifests(tmp_path)) == 1

    def boom(path, data):
        raise OSError("io error")

    monkeypatch.setattr(ds, "_write_bytes", boom)
    with pytest.raises(DatasetError):
        write_sample(random_sample(rng, 6, 6, 1), d)
    assert iter_manifests(tmp_path) == []


def test_corrupted_alpha_detected(tmp_path, rng):
    m = write_sample(random_sample(rng, 8, 8, 2), tmp_path / "s")
    cv2.imwrite(str(tmp_path / "s" / "layer_1_alpha.png"), np.full((8, 8), 255, np.uint8))
    with pytest.raises(InvariantViolation):
        read_sample(m.path)
    cv2.imwrite(str(tmp_path / "s" / "layer_1_alpha.png"), np.zeros((3, 3), np.uint8))
    with pytest.raises(InvariantViolation):
        read_sample(m.path, check_roundtrip=False)
    (tmp_path / "s" / "layer_1_alpha.png").write_bytes(b"not a png")
    with pytest.raises(InvariantViolation):
        read_sample(m.path)


def test_missing_file_and_bad_manifests(tmp_path, rng):
    m = write_sample(random_sample(rng, 6, 6, 1), tmp_path / "s")
    (tmp_path / "s" / "background.png").unlink()
    with pytest.raises(MissingFileError):
        read_sample(m.path)
    d = json.loads(m.to_json())
    d["schema_version"] = 99
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(SchemaVersionError):
        load_manifest(tmp_path / "s")
    (tmp_path / "s" / "manifest.json").write_text("{broken")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "s")
    with pytest.raises(ManifestError):
        SampleManifest.from_dict({"schema_version": 1, "sample_id": "x"})
    with pytest.raises(MissingFileError):
        load_manifest(tmp_path / "absent")


def test_layer_count_limits(tmp_path, rng):
    with pytest.raises(InvariantViolation):
        write_sample(random_sample(rng, 4, 4, 0), tmp_path / "a")
    with pytest.raises(InvariantViolation):
        write_sample(random_sample(rng, 4, 4, 6), tmp_path / "b")
    write_sample(random_sample(rng, 4, 4, 5), tmp_path / "c")


@pytest.mark.parametrize(
    "h,w,expected",
    [(600, 800, (600, 800)), (1024, 2048, (512, 1024)), (1000, 1500, (683, 1024)), (1500, 1000, (1024, 683)), (1024, 1024, (1024, 1024))],
)
def test_resize_within(h, w, expected):
    img = np.zeros((h, w, 3))
    assert resize_within(img).shape[:2] == expected


def test_resize_never_upscales_and_keeps_constants():
    out = resize_within(np.full((30, 10, 3), 0.25), max_side=12)
    assert out.shape == (12, 4, 3) and np.all(out == 0.25)
    assert resize_within(np.ones((5, 5, 3)), max_side=100).shape == (5, 5, 3)


def test_aspect_bins_and_ties():
    assert aspect_bin(1024, 1024) == "1:1"
    assert aspect_bin(1920, 1080) == "16:9"
    assert aspect_bin(100, 1000) == "1:2"
    ordered = sorted(ASPECT_BINS, key=lambda b: b[1] / b[2])
    for (lo, a, b), (hi, c, d) in zip(ordered, ordered[1:]):
        mid = math.sqrt((a / b) * (c / d))
        assert aspect_bin(mid, 1.0) == lo
        assert aspect_bin(mid * 1.001, 1.0) == hi
        assert aspect_bin(mid / 1.001, 1.0) == lo


def test_bucketize_single_bucket(tmp_path, rng):
    for i in range(3):
        write_sample(random_sample(rng, 8, 8, 2), tmp_path / f"s{i}")
    buckets = bucketize(iter_manifests(tmp_path))
    assert list(buckets) == [BucketKey("1:1", 2)]
    assert [m.sample_id for m in buckets[BucketKey("1:1", 2)]] == ["s0", "s1", "s2"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(16, 4096), st.integers(16, 4096), st.integers(1, 5)), max_size=30))
def test_bucketize_is_partition(dims):
    ms = [
        SampleManifest(f"s{i}", w, h, "a", "b", [{}] * k)
        for i, (w, h, k) in enumerate(dims)
    ]
    buckets = bucketize(ms)
    seen = [m.sample_id for group in buckets.values() for m in group]
    assert sorted(seen) == sorted(m.sample_id for m in ms)
    for key, group in buckets.items():
        for m in group:
            assert bucket_key_for(m.width, m.height, m.layer_count) == key
            assert key.layer_count == m.layer_count


def test_iter_manifests_skips_junk(tmp_path, rng):
    write_sample(random_sample(rng, 4, 4, 1), tmp_path / "good")
    (tmp_path / "partial").mkdir()
    (tmp_path / "partial" / "source.png").write_bytes(b"")
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "manifest.json").write_text("[]")
    assert [m.sample_id for m in iter_manifests(tmp_path)] == ["good"]
    assert iter_manifests(tmp_path / "missing") == []
