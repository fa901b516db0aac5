"""Chip data model, binary archive format, and synthetic dataset generator.

Archive layout (all integers little-endian):

    magic "GMCH" | version u32 | header-JSON length u32 | header JSON | records

Each record is ``H*W*C`` float32 pixel values (row, col, band order), four
float32 metadata values (lat, lon, week, hour; zero-filled when the archive
has no metadata), then a label field. The label field is one u32 class index
in ``single`` mode, a ``ceil(classes/8)``-byte LSB-first bitmask in ``multi``
mode, and absent in ``none`` mode. The header carries per-band mean/std so the
training-split statistics travel with the data.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"GMCH"
FORMAT_VERSION = 1

LAT_RANGE = (-90.0, 90.0)
LON_RANGE = (-180.0, 180.0)
WEEK_RANGE = (0.0, 52.0)
HOUR_RANGE = (0.0, 24.0)


class ArchiveError(Exception):
    """Base class for chip-archive format errors."""


class ArchiveMagicError(ArchiveError):
    """File does not start with the archive magic bytes."""


class ArchiveVersionError(ArchiveError):
    """Archive was written with an unsupported format version."""


class ArchiveTruncatedError(ArchiveError):
    """Payload ends mid-record."""

    def __init__(self, record_index: int, message: str | None = None):
        self.record_index = record_index
        super().__init__(message or f"archive truncated in record {record_index}")


class ArchiveHeaderError(ArchiveError):
    """Header is malformed or inconsistent with the payload."""


@dataclass
class Chip:
    """One multispectral image with geo-temporal metadata and optional labels.

    ``labels`` is a sorted tuple of class indices (multi-label), a single int
    (single-label), or None. Metadata values are meaningful only when
    ``metadata_present`` is true; they are stored as zeros otherwise.
    """

    pixels: np.ndarray  # (H, W, C) float32
    lat: float = 0.0
    lon: float = 0.0
    week: float = 0.0
    hour: float = 0.0
    labels: tuple[int, ...] | int | None = None
    metadata_present: bool = False

    def validate_metadata(self) -> None:
        if not self.metadata_present:
            return
        checks = [
            ("lat", self.lat, LAT_RANGE, True),
            ("lon", self.lon, LON_RANGE, False),
            ("week", self.week, WEEK_RANGE, False),
            ("hour", self.hour, HOUR_RANGE, False),
        ]
        for name, value, (lo, hi), closed in checks:
            ok = lo <= value <= hi if closed else lo <= value < hi
            if not ok:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}{']' if closed else ')'}")


@dataclass
class BandStats:
    """Per-band mean and standard deviation."""

    mean: np.ndarray  # (C,) float64
    std: np.ndarray   # (C,) float64

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if np.any(self.std <= 0):
            raise ValueError("band std must be strictly positive")


def compute_band_stats(chips: Sequence[Chip], floor: float = 1e-6) -> BandStats:
    """Population mean/std per band over all pixels; degenerate stds are floored."""
    if not chips:
        bands = 0 if not chips else chips[0].pixels.shape[2]
        return BandStats(np.zeros(bands), np.ones(max(bands, 0)))
    stacked = np.stack([c.pixels for c in chips]).astype(np.float64)
    mean = stacked.mean(axis=(0, 1, 2))
    std = stacked.std(axis=(0, 1, 2))
    return BandStats(mean, np.maximum(std, floor))


def normalize(chip: Chip, stats: BandStats) -> Chip:
    """Z-score each band: (x - mean_b) / std_b. Metadata and labels unchanged."""
    if np.any(stats.std <= 0):
        raise ValueError("band std must be strictly positive")
    pixels = (chip.pixels.astype(np.float64) - stats.mean) / stats.std
    return replace(chip, pixels=pixels.astype(np.float32))


def denormalize(chip: Chip, stats: BandStats) -> Chip:
    """Inverse of :func:`normalize` with the same statistics."""
    pixels = chip.pixels.astype(np.float64) * stats.std + stats.mean
    return replace(chip, pixels=pixels.astype(np.float32))


@dataclass
class ArchiveHeader:
    height: int
    width: int
    bands: int
    count: int
    label_mode: str  # "none" | "single" | "multi"
    class_count: int
    metadata: bool
    band_mean: list[float] = field(default_factory=list)
    band_std: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.label_mode not in ("none", "single", "multi"):
            raise ArchiveHeaderError(f"unknown label mode {self.label_mode!r}")
        if self.label_mode != "none" and self.class_count < 1:
            raise ArchiveHeaderError("labelled archive needs class_count >= 1")

    @property
    def pixel_bytes(self) -> int:
        return self.height * self.width * self.bands * 4

    @property
    def label_bytes(self) -> int:
        if self.label_mode == "none":
            return 0
        if self.label_mode == "single":
            return 4
        return (self.class_count + 7) // 8

    @property
    def record_bytes(self) -> int:
        return self.pixel_bytes + 16 + self.label_bytes

    def stats(self) -> BandStats:
        return BandStats(np.array(self.band_mean), np.array(self.band_std))


class ChipArchive:
    """Immutable chip container with O(1) access by index after open."""

    def __init__(self, header: ArchiveHeader, payload: bytes):
        self.header = header
        self._payload = payload

    def __len__(self) -> int:
        return self.header.count

    def __iter__(self) -> Iterator[Chip]:
        return (self[i] for i in range(len(self)))

    def __getitem__(self, index: int) -> Chip:
        h = self.header
        if not 0 <= index < h.count:
            raise IndexError(index)
        off = index * h.record_bytes
        rec = self._payload[off:off + h.record_bytes]
        pixels = np.frombuffer(rec, dtype="<f4", count=h.height * h.width * h.bands)
        pixels = pixels.reshape(h.height, h.width, h.bands).copy()
        meta_off = h.pixel_bytes
        lat, lon, week, hour = struct.unpack_from("<4f", rec, meta_off)
        labels: tuple[int, ...] | int | None = None
        if h.label_mode == "single":
            (labels,) = struct.unpack_from("<I", rec, meta_off + 16)
        elif h.label_mode == "multi":
            mask = rec[meta_off + 16:meta_off + 16 + h.label_bytes]
            labels = tuple(
                j for j in range(h.class_count) if mask[j // 8] >> (j % 8) & 1
            )
        return Chip(
            pixels=pixels,
            lat=float(lat),
            lon=float(lon),
            week=float(week),
            hour=float(hour),
            labels=labels,
            metadata_present=h.metadata,
        )

    def pixel_array(self) -> np.ndarray:
        """All pixels as one (count, H, W, C) float32 array."""
        h = self.header
        if h.count == 0:
            return np.zeros((0, h.height, h.width, h.bands), dtype=np.float32)
        return np.stack([self[i].pixels for i in range(h.count)])

    def stats(self) -> BandStats:
        return self.header.stats()


def _encode_record(chip: Chip, header: ArchiveHeader) -> bytes:
    parts = [np.ascontiguousarray(chip.pixels, dtype="<f4").tobytes()]
    if header.metadata:
        parts.append(struct.pack("<4f", chip.lat, chip.lon, chip.week, chip.hour))
    else:
        parts.append(struct.pack("<4f", 0.0, 0.0, 0.0, 0.0))
    if header.label_mode == "single":
        parts.append(struct.pack("<I", int(chip.labels)))  # type: ignore[arg-type]
    elif header.label_mode == "multi":
        mask = bytearray(header.label_bytes)
        for j in chip.labels or ():  # type: ignore[union-attr]
            if not 0 <= j < header.class_count:
                raise ValueError(f"label {j} outside [0, {header.class_count})")
            mask[j // 8] |= 1 << (j % 8)
        parts.append(bytes(mask))
    return b"".join(parts)


def _infer_label_mode(chips: Sequence[Chip]) -> str:
    modes = set()
    for c in chips:
        if c.labels is None:
            modes.add("none")
        elif isinstance(c.labels, tuple):
            modes.add("multi")
        else:
            modes.add("single")
    if len(modes) > 1:
        raise ValueError(f"chips mix label modes: {sorted(modes)}")
    return modes.pop() if modes else "none"


def write_archive(
    chips: Sequence[Chip],
    path: str | os.PathLike,
    *,
    class_count: int | None = None,
    stats: BandStats | None = None,
) -> None:
    """Write chips to a binary archive; all chips must share shape and label mode.

    ``class_count`` is required for labelled chips unless inferable as
    max label + 1. Band statistics default to the population stats of the
    chips being written.
    """
    chips = list(chips)
    label_mode = _infer_label_mode(chips)
    if chips:
        shape = chips[0].pixels.shape
        meta = chips[0].metadata_present
        for i, c in enumerate(chips):
            if c.pixels.shape != shape:
                raise ValueError(f"chip {i} shape {c.pixels.shape} != {shape}")
            if c.metadata_present != meta:
                raise ValueError(f"chip {i} metadata presence differs")
            c.validate_metadata()
        h, w, bands = shape
    else:
        h, w, bands, meta = 0, 0, 0, False
    if class_count is None:
        class_count = 0
        for c in chips:
            if isinstance(c.labels, tuple):
                class_count = max(class_count, max(c.labels, default=-1) + 1)
            elif isinstance(c.labels, int):
                class_count = max(class_count, c.labels + 1)
    if stats is None:
        stats = compute_band_stats(chips)
    header = ArchiveHeader(
        height=h, width=w, bands=bands, count=len(chips),
        label_mode=label_mode, class_count=class_count, metadata=meta,
        band_mean=[float(v) for v in stats.mean],
        band_std=[float(v) for v in stats.std],
    )
    header_json = json.dumps(header.__dict__, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header_json)))
        f.write(header_json)
        for chip in chips:
            f.write(_encode_record(chip, header))
    os.replace(tmp, path)


def load_archive(path: str | os.PathLike) -> ChipArchive:
    """Open an archive; raises a distinct error per corruption class."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ArchiveMagicError(f"bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise ArchiveHeaderError("file too short for header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ArchiveVersionError(f"version {version}, expected {FORMAT_VERSION}")
    (json_len,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + json_len:
        raise ArchiveHeaderError("file too short for header JSON")
    try:
        header = ArchiveHeader(**json.loads(blob[12:12 + json_len]))
    except (json.JSONDecodeError, TypeError) as e:
        raise ArchiveHeaderError(f"unparseable header: {e}") from e
    payload = blob[12 + json_len:]
    expected = header.count * header.record_bytes
    if len(payload) < expected:
        raise ArchiveTruncatedError(len(payload) // max(header.record_bytes, 1))
    if len(payload) > expected:
        raise ArchiveHeaderError(
            f"payload holds {len(payload)} bytes, header implies {expected}"
        )
    if header.count and (len(header.band_mean) != header.bands
                         or len(header.band_std) != header.bands):
        raise ArchiveHeaderError("band statistics length != band count")
    if any(s <= 0 for s in header.band_std):
        raise ArchiveHeaderError("band std must be strictly positive")
    return ChipArchive(header, payload)


# ---------------------------------------------------------------------------
# Synthetic chips
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    count: int
    height: int = 40
    width: int = 40
    bands: int = 7
    label_mode: str = "none"
    class_count: int = 0
    seed: int = 0
    metadata: bool = True
    noise: float = 0.1

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.label_mode not in ("none", "single", "multi"):
            raise ValueError(f"unknown label mode {self.label_mode!r}")
        if self.label_mode != "none" and self.class_count < 2:
            raise ValueError("labelled synthetic data needs class_count >= 2")
        if min(self.height, self.width, self.bands) < 1:
            raise ValueError("height/width/bands must be >= 1")


def _class_signature(cls: int, bands: int) -> np.ndarray:
    """Distinct per-band mean offsets so every class is spectrally separable."""
    b = np.arange(bands)
    return 1.5 * np.sin(2 * np.pi * (b / bands + cls * 0.37)) + (0.3 * cls) % 2.4


def _class_texture(rng: np.random.Generator, cls: int, h: int, w: int,
                   bands: int) -> np.ndarray:
    """Per-class spatial recipe: gradients, speckle, blocks, stripes, or a blob."""
    rows = np.linspace(-1, 1, h)[:, None, None]
    cols = np.linspace(-1, 1, w)[None, :, None]
    band_gain = 0.5 + np.cos(2 * np.pi * (np.arange(bands) / bands + cls * 0.21))[None, None, :]
    kind = cls % 5
    if kind == 0:
        base = rows * band_gain
    elif kind == 1:
        base = cols * band_gain
    elif kind == 2:
        base = rng.normal(0.0, 1.0, size=(h, w, 1)) * 0.8 * band_gain
    elif kind == 3:
        blocks = np.zeros((h, w, 1))
        for _ in range(4):
            r0, c0 = rng.integers(0, h), rng.integers(0, w)
            r1 = min(h, r0 + int(rng.integers(2, max(3, h // 2))))
            c1 = min(w, c0 + int(rng.integers(2, max(3, w // 2))))
            blocks[r0:r1, c0:c1] += rng.normal(0.8, 0.2)
        base = blocks * band_gain
    else:
        freq = 2 + (cls // 5) % 3
        base = np.sin(np.pi * freq * (rows + cols)) * band_gain
    full = np.zeros((h, w, bands)) + base
    return full + _class_signature(cls, bands)


def generate_synthetic(spec: SyntheticSpec) -> list[Chip]:
    """Deterministic synthetic chips; class identity is decodable from pixels."""
    rng = np.random.default_rng(spec.seed)
    chips: list[Chip] = []
    for _ in range(spec.count):
        labels: tuple[int, ...] | int | None = None
        if spec.label_mode == "single":
            cls = int(rng.integers(0, spec.class_count))
            img = _class_texture(rng, cls, spec.height, spec.width, spec.bands)
            labels = cls
        elif spec.label_mode == "multi":
            n = int(rng.integers(1, min(3, spec.class_count) + 1))
            chosen = sorted(rng.choice(spec.class_count, size=n, replace=False).tolist())
            # Spatial composite: each chosen class paints a vertical strip.
            img = np.zeros((spec.height, spec.width, spec.bands))
            bounds = np.linspace(0, spec.width, n + 1).round().astype(int)
            for cls, (c0, c1) in zip(chosen, zip(bounds[:-1], bounds[1:])):
                tex = _class_texture(rng, cls, spec.height, spec.width, spec.bands)
                img[:, c0:c1, :] = tex[:, c0:c1, :]
            labels = tuple(chosen)
        else:
            img = _class_texture(rng, int(rng.integers(0, 5)), spec.height,
                                 spec.width, spec.bands)
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
        if spec.metadata:
            lat = float(rng.uniform(*LAT_RANGE))
            lon = float(rng.uniform(*LON_RANGE))
            week = float(rng.uniform(*WEEK_RANGE))
            hour = float(rng.uniform(*HOUR_RANGE))
        else:
            lat = lon = week = hour = 0.0
        chips.append(Chip(
            pixels=img.astype(np.float32),
            lat=lat, lon=lon, week=week, hour=hour,
            labels=labels, metadata_present=spec.metadata,
        ))
    return chips


def holdout_split(archive: ChipArchive, holdout_frac: float,
                  seed: int) -> tuple[list[int], list[int]]:
    """Deterministic train/holdout index split of an archive."""
    if not 0.0 < holdout_frac < 1.0:
        raise ValueError("holdout_frac must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(archive))
    n_hold = max(1, int(math.floor(len(archive) * holdout_frac + 0.5)))
    return sorted(perm[n_hold:].tolist()), sorted(perm[:n_hold].tolist())
