"""CIFAR binary parsing and probe-set sampling.

Record layouts are the published binary format: CIFAR-10 records are one label
byte plus 3072 pixel bytes (1024 R, 1024 G, 1024 B, row-major 32x32); CIFAR-100
records carry a coarse then a fine label byte first. Pixels are scaled by
exactly 1/255 into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
IMAGE_BYTES = 3072
CLASS_COUNTS = {"cifar10": 10, "cifar100": 100}


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (3, 32, 32) float32 in [0, 1]
    label: int


@dataclass
class ProbeSet:
    images: list[LabeledImage]
    seed: int | None = None
    source: str = ""

    def __len__(self) -> int:
        return len(self.images)


def parse_cifar_batch(data: bytes, fmt: str = "cifar10") -> list[LabeledImage]:
    """Decode one binary batch into labeled [0,1] images."""
    if fmt not in CLASS_COUNTS:
        raise DataFormatError(f"unknown CIFAR format {fmt!r}")
    record = CIFAR10_RECORD if fmt == "cifar10" else CIFAR100_RECORD
    if len(data) == 0 or len(data) % record != 0:
        raise DataFormatError(
            f"byte length {len(data)} is not a positive multiple of the "
            f"{fmt} record size {record}"
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    label_col = 0 if fmt == "cifar10" else 1  # cifar100: coarse byte discarded
    labels = raw[:, label_col]
    limit = CLASS_COUNTS[fmt]
    bad = np.nonzero(labels >= limit)[0]
    if bad.size:
        raise DataFormatError(
            f"record {bad[0]}: label byte {labels[bad[0]]} out of range for {fmt}"
        )
    pixels = raw[:, record - IMAGE_BYTES :].reshape(-1, 3, 32, 32)
    scaled = pixels.astype(np.float32) / np.float32(255.0)
    return [LabeledImage(pixels=scaled[i], label=int(labels[i])) for i in range(len(raw))]


def load_cifar_file(path: str | Path, fmt: str = "cifar10") -> list[LabeledImage]:
    return parse_cifar_batch(Path(path).read_bytes(), fmt)


def serialize_cifar_batch(images: list[LabeledImage], fmt: str = "cifar10") -> bytes:
    """Inverse of parse_cifar_batch (pixels re-quantized to bytes)."""
    record = CIFAR10_RECORD if fmt == "cifar10" else CIFAR100_RECORD
    out = np.zeros((len(images), record), dtype=np.uint8)
    for i, img in enumerate(images):
        out[i, record - IMAGE_BYTES - 1] = img.label
        out[i, record - IMAGE_BYTES :] = np.round(img.pixels.reshape(-1) * 255.0).astype(np.uint8)
    return out.tobytes()


def sample_probe_set(
    dataset: list[LabeledImage], m: int, seed: int, source: str = ""
) -> ProbeSet:
    """Draw m distinct images; m == len(dataset) keeps stored order."""
    if not 1 <= m <= len(dataset):
        raise DataFormatError(f"probe size {m} out of range 1..{len(dataset)}")
    if m == len(dataset):
        return ProbeSet(images=list(dataset), seed=seed, source=source)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=m, replace=False)
    return ProbeSet(images=[dataset[i] for i in idx], seed=seed, source=source)


def load_probe_dir(path: str | Path, input_shape: tuple[int, ...]) -> list[LabeledImage]:
    """Read raw little-endian float32 blobs shaped like the model input.

    Used for models whose inputs are not CIFAR-sized; files are taken in sorted
    name order and carry no labels (label is -1).
    """
    root = Path(path)
    files = sorted(p for p in root.iterdir() if p.is_file())
    if not files:
        raise DataFormatError(f"no probe blobs in {root}")
    expected = int(np.prod(input_shape)) * 4
    images = []
    for p in files:
        blob = p.read_bytes()
        if len(blob) != expected:
            raise DataFormatError(
                f"{p.name}: {len(blob)} bytes, input shape {tuple(input_shape)} requires {expected}"
            )
        arr = np.frombuffer(blob, dtype="<f4").reshape(input_shape).copy()
        images.append(LabeledImage(pixels=arr, label=-1))
    return images
