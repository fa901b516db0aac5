"""Run manifests, portable-pixmap images, and raw tensor export.

Every CLI output gets a manifest JSON next to it recording the resolved
configuration, seed, inputs, and a sha256 per artifact, so a run can be
audited and replayed. All writes go through a temp-file rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path: str | os.PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, dict] = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def add_output(self, name: str, path: str | os.PathLike) -> None:
        self.outputs[name] = {
            "path": os.fspath(path),
            "sha256": sha256_file(path),
        }

    def write(self, path: str | os.PathLike) -> None:
        self.finished = time.time()
        payload = {
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started": self.started,
            "finished": self.finished,
        }
        atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def manifest_path_for(output: str | os.PathLike) -> str:
    return f"{os.fspath(output)}.manifest.json"


# ---------------------------------------------------------------------------
# Portable pixmaps
# ---------------------------------------------------------------------------

def _to_uint8(img: np.ndarray, lo: float | None = None,
              hi: float | None = None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    if hi - lo < 1e-12:
        return np.zeros(img.shape, dtype=np.uint8)
    scaled = (img - lo) / (hi - lo)
    return np.clip(scaled * 255.0 + 0.5, 0, 255).astype(np.uint8)


def write_pgm(path: str | os.PathLike, image: np.ndarray, *,
              lo: float | None = None, hi: float | None = None) -> None:
    """Grayscale (H, W) array as binary P5, min-max scaled to 8 bits."""
    if image.ndim != 2:
        raise ValueError("P5 needs a 2-D array")
    data = _to_uint8(image, lo, hi)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + data.tobytes())


def write_ppm(path: str | os.PathLike, image: np.ndarray, *,
              lo: float | None = None, hi: float | None = None) -> None:
    """Color (H, W, 3) array as binary P6, min-max scaled to 8 bits."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("P6 needs an (H, W, 3) array")
    data = _to_uint8(image, lo, hi)
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + data.tobytes())


def chip_to_rgb(pixels: np.ndarray, bands: tuple[int, int, int] | None = None,
                ) -> np.ndarray:
    """Pick three bands of an (H, W, C) chip for visualization."""
    c = pixels.shape[2]
    if bands is None:
        bands = (min(2, c - 1), min(1, c - 1), 0)
    return np.stack([pixels[:, :, b] for b in bands], axis=-1)


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read back a binary P5/P6 file (test and inspection helper)."""
    with open(path, "rb") as f:
        blob = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    magic, width, height, maxval = (fields[0], int(fields[1]),
                                    int(fields[2]), int(fields[3]))
    pos += 1  # single whitespace after maxval
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if magic == b"P5":
        return data[:height * width].reshape(height, width).copy()
    if magic == b"P6":
        return data[:height * width * 3].reshape(height, width, 3).copy()
    raise ValueError(f"unsupported magic {magic!r}")


# ---------------------------------------------------------------------------
# Raw tensor export
# ---------------------------------------------------------------------------

def save_raw_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    """Row-major little-endian f32 payload plus a JSON sidecar."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    atomic_write_bytes(path, arr.tobytes())
    sidecar = {
        "dtype": "float32",
        "byte_order": "little",
        "order": "C",
        "shape": list(arr.shape),
    }
    atomic_write_text(f"{os.fspath(path)}.json",
                      json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_raw_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(f"{os.fspath(path)}.json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    with open(path, "rb") as f:
        data = np.frombuffer(f.read(), dtype="<f4")
    return data.reshape(sidecar["shape"]).copy()


def save_matrix_csv(path: str | os.PathLike, matrix: np.ndarray) -> None:
    rows = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(matrix)]
    atomic_write_text(path, "\n".join(rows) + "\n")
