"""Archive format, normalization, and synthetic-generator checks."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from chipmae.data import (ArchiveHeaderError, ArchiveMagicError,
                          ArchiveTruncatedError, ArchiveVersionError,
                          BandStats, Chip, SyntheticSpec, compute_band_stats,
                          denormalize, generate_synthetic, holdout_split,
                          load_archive, normalize, write_archive)


def _chip(rng, h=8, w=8, c=7, labels=None, metadata=True):
    return Chip(
        pixels=rng.standard_normal((h, w, c)).astype(np.float32),
        lat=float(rng.uniform(-90, 90)), lon=float(rng.uniform(-180, 180)),
        week=float(rng.uniform(0, 52)), hour=float(rng.uniform(0, 24)),
        labels=labels, metadata_present=metadata,
    )


def test_round_trip_unlabelled(tmp_path):
    rng = np.random.default_rng(0)
    chips = [_chip(rng), _chip(rng)]
    path = tmp_path / "pair.gmch"
    write_archive(chips, path)
    back = load_archive(path)
    assert len(back) == 2
    for orig, got in zip(chips, back):
        assert np.array_equal(orig.pixels, got.pixels)  # bitwise
        assert got.labels is None
        assert got.lat == np.float32(orig.lat)
        assert got.week == np.float32(orig.week)
        assert got.metadata_present


def test_round_trip_single_and_multi(tmp_path):
    rng = np.random.default_rng(1)
    singles = [_chip(rng, labels=i % 3) for i in range(5)]
    p1 = tmp_path / "single.gmch"
    write_archive(singles, p1)
    back = load_archive(p1)
    assert back.header.label_mode == "single"
    assert back.header.class_count == 3
    assert [c.labels for c in back] == [0, 1, 2, 0, 1]

    # 11 classes forces a two-byte bitmask.
    multis = [_chip(rng, labels=(0, 10)), _chip(rng, labels=(3,)),
              _chip(rng, labels=(1, 5, 9))]
    p2 = tmp_path / "multi.gmch"
    write_archive(multis, p2, class_count=11)
    back = load_archive(p2)
    assert back.header.label_bytes == 2
    assert [c.labels for c in back] == [(0, 10), (3,), (1, 5, 9)]


def test_empty_archive(tmp_path):
    path = tmp_path / "empty.gmch"
    write_archive([], path)
    back = load_archive(path)
    assert len(back) == 0
    assert list(back) == []


def test_out_of_range_latitude_rejected(tmp_path):
    rng = np.random.default_rng(2)
    bad = _chip(rng)
    bad.lat = 91.0
    with pytest.raises(ValueError, match="lat"):
        write_archive([bad], tmp_path / "bad.gmch")


def test_heterogeneous_shapes_rejected(tmp_path):
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError, match="shape"):
        write_archive([_chip(rng, h=8), _chip(rng, h=4)], tmp_path / "x.gmch")


def test_mixed_label_modes_rejected(tmp_path):
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError, match="mix"):
        write_archive([_chip(rng, labels=1), _chip(rng, labels=(1,))],
                      tmp_path / "x.gmch")


def test_error_taxonomy(tmp_path):
    rng = np.random.default_rng(5)
    path = tmp_path / "base.gmch"
    write_archive([_chip(rng) for _ in range(4)], path)
    blob = path.read_bytes()

    bad = tmp_path / "magic.gmch"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ArchiveMagicError):
        load_archive(bad)

    bad.write_bytes(blob[:4] + b"\x09\x00\x00\x00" + blob[8:])
    with pytest.raises(ArchiveVersionError):
        load_archive(bad)

    # Chop the last record in half: the error names the bad record index.
    record = load_archive(path).header.record_bytes
    bad.write_bytes(blob[:len(blob) - record // 2])
    with pytest.raises(ArchiveTruncatedError) as exc:
        load_archive(bad)
    assert exc.value.record_index == 3

    # Header says 4 but only 3 records present.
    bad.write_bytes(blob[:len(blob) - record])
    with pytest.raises(ArchiveTruncatedError):
        load_archive(bad)

    bad.write_bytes(blob + b"\x00")
    with pytest.raises(ArchiveHeaderError, match="payload"):
        load_archive(bad)


def test_no_tmp_file_left_behind(tmp_path):
    rng = np.random.default_rng(6)
    path = tmp_path / "atomic.gmch"
    write_archive([_chip(rng)], path)
    assert [p.name for p in tmp_path.iterdir()] == ["atomic.gmch"]


def test_normalize_arithmetic():
    rng = np.random.default_rng(7)
    chip = _chip(rng, h=2, w=2, c=3)
    chip.pixels = np.full((2, 2, 3), 3.0, dtype=np.float32)
    stats = BandStats(mean=np.array([1.0, 3.0, 0.0]),
                      std=np.array([2.0, 5.0, 1.0]))
    out = normalize(chip, stats)
    assert np.allclose(out.pixels[:, :, 0], 1.0)   # (3-1)/2
    assert np.allclose(out.pixels[:, :, 1], 0.0)   # constant band at its mean
    assert np.allclose(out.pixels[:, :, 2], 3.0)   # mean 0, std 1: identity
    assert out.labels == chip.labels and out.lat == chip.lat


def test_normalize_round_trip():
    rng = np.random.default_rng(8)
    chip = _chip(rng)
    stats = BandStats(mean=rng.uniform(-1, 1, 7), std=rng.uniform(0.5, 2.0, 7))
    back = denormalize(normalize(chip, stats), stats)
    assert np.allclose(back.pixels, chip.pixels, atol=1e-6)


def test_band_stats_validation():
    with pytest.raises(ValueError):
        BandStats(mean=np.zeros(3), std=np.array([1.0, 0.0, 1.0]))
    # Degenerate stds are floored, never zero.
    chips = [Chip(pixels=np.ones((2, 2, 2), dtype=np.float32))]
    stats = compute_band_stats(chips)
    assert np.all(stats.std > 0)


def test_synthetic_deterministic():
    spec = SyntheticSpec(count=4, height=8, width=8, seed=7)
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    assert len(a) == 4
    for x, y in zip(a, b):
        assert np.array_equal(x.pixels, y.pixels)
        assert (x.lat, x.lon, x.week, x.hour) == (y.lat, y.lon, y.week, y.hour)


def test_synthetic_empty_and_validation():
    assert generate_synthetic(SyntheticSpec(count=0)) == []
    with pytest.raises(ValueError):
        SyntheticSpec(count=-1)
    with pytest.raises(ValueError):
        SyntheticSpec(count=1, label_mode="single", class_count=1)
    with pytest.raises(ValueError):
        SyntheticSpec(count=1, label_mode="weird")


def test_synthetic_metadata_and_multilabel():
    spec = SyntheticSpec(count=32, height=8, width=8, label_mode="multi",
                         class_count=6, seed=9)
    chips = generate_synthetic(spec)
    for c in chips:
        assert -90 <= c.lat <= 90 and -180 <= c.lon < 180
        assert 0 <= c.week < 52 and 0 <= c.hour < 24
        assert 1 <= len(c.labels) <= 3
        assert list(c.labels) == sorted(set(c.labels))
        assert all(0 <= j < 6 for j in c.labels)


def test_synthetic_classes_are_pixel_separable(tmp_path):
    """Flattened-pixel logistic regression must decode the class signal."""
    chips = generate_synthetic(SyntheticSpec(
        count=512, height=16, width=16, bands=7,
        label_mode="single", class_count=2, seed=11))
    path = tmp_path / "sep.gmch"
    write_archive(chips, path)
    archive = load_archive(path)
    train_idx, test_idx = holdout_split(archive, 0.25, seed=0)
    x = np.stack([c.pixels.reshape(-1) for c in chips])
    y = np.array([c.labels for c in chips])
    clf = LogisticRegression(max_iter=2000).fit(x[train_idx], y[train_idx])
    oa = clf.score(x[test_idx], y[test_idx])
    assert oa > 0.90, f"raw-pixel probe OA {oa}"


def test_holdout_split_properties(tmp_path):
    rng = np.random.default_rng(10)
    path = tmp_path / "split.gmch"
    write_archive([_chip(rng) for _ in range(20)], path)
    archive = load_archive(path)
    train, test = holdout_split(archive, 0.25, seed=3)
    assert sorted(train + test) == list(range(20))
    assert len(test) == 5
    assert holdout_split(archive, 0.25, seed=3) == (train, test)
    assert holdout_split(archive, 0.25, seed=4) != (train, test)
    with pytest.raises(ValueError):
        holdout_split(archive, 0.0, seed=0)


@settings(max_examples=25, deadline=None)
@given(count=st.integers(0, 4), h=st.integers(1, 4), w=st.integers(1, 4),
       c=st.integers(1, 3), seed=st.integers(0, 2**31 - 1),
       mode=st.sampled_from(["none", "single", "multi"]))
def test_round_trip_property(tmp_path_factory, count, h, w, c, seed, mode):
    rng = np.random.default_rng(seed)
    classes = 4
    chips = []
    for _ in range(count):
        if mode == "single":
            labels = int(rng.integers(0, classes))
        elif mode == "multi":
            n = int(rng.integers(0, classes))
            labels = tuple(sorted(rng.choice(classes, n, replace=False).tolist()))
        else:
            labels = None
        chips.append(_chip(rng, h=h, w=w, c=c, labels=labels))
    path = tmp_path_factory.mktemp("rt") / "prop.gmch"
    write_archive(chips, path, class_count=classes if mode != "none" else None)
    back = load_archive(path)
    assert len(back) == count
    for orig, got in zip(chips, back):
        assert np.array_equal(orig.pixels, got.pixels)
        assert got.labels == orig.labels
        assert got.lon == np.float32(orig.lon)
        assert got.hour == np.float32(orig.hour)
