"""Retrieval descriptors: global pooling and local max pooling (LMP) over
horizontal bands of the last convolutional feature map."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datamodel import DEFAULT_IMAGE_SIZE, ReIDSample, load_images


class PoolMode(str, enum.Enum):
    MAX = "max"
    AVG = "avg"


@dataclass
class Descriptor:
    vectors: torch.Tensor  # [batch, parts * channels]
    parts: int
    mode: PoolMode

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def band_bounds(height: int, parts: int) -> list[tuple[int, int]]:
    """Row ranges of ``parts`` horizontal bands; the first ``height % parts``
    bands get one extra row."""
    if not 1 <= parts <= height:
        raise ValueError(f"number of parts must lie in [1, {height}], got {parts}")
    base, extra = divmod(height, parts)
    bounds, top = [], 0
    for k in range(parts):
        rows = base + (1 if k < extra else 0)
        bounds.append((top, top + rows))
        top += rows
    return bounds


def lmp(fmap: torch.Tensor, parts: int = 1, mode: PoolMode | str = PoolMode.MAX) -> Descriptor:
    """Pool each horizontal band of ``fmap`` ([B, C, h, w]) per channel and
    concatenate the bands top to bottom."""
    mode = PoolMode(mode)
    if fmap.dim() != 4:
        raise ValueError(f"expected a [B, C, h, w] feature map, got shape {tuple(fmap.shape)}")
    pooled = []
    for top, bottom in band_bounds(fmap.shape[2], parts):
        band = fmap[:, :, top:bottom, :]
        pooled.append(band.amax(dim=(2, 3)) if mode is PoolMode.MAX else band.mean(dim=(2, 3)))
    return Descriptor(torch.cat(pooled, dim=1), parts, mode)


@dataclass
class DescriptorTable:
    keys: list[str]
    vectors: np.ndarray
    parts: int
    mode: PoolMode

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows(self, keys: Sequence[str]) -> np.ndarray:
        index = {k: i for i, k in enumerate(self.keys)}
        return self.vectors[[index[k] for k in keys]]


@torch.no_grad()
def extract_descriptors(C, samples: Sequence[ReIDSample], parts: int = 1,
                        mode: PoolMode | str = PoolMode.AVG, batch_size: int = 64,
                        image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
                        normalize: bool = False) -> DescriptorTable:
    """Descriptors for ``samples`` keyed by image path, in sample order.

    The learner is switched to eval mode for the pass and restored afterwards;
    no parameter or buffer changes.
    """
    mode = PoolMode(mode)
    was_training = C.training
    C.eval()
    chunks = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = load_images([s.image_path for s in chunk], image_size)
            ref = next(C.parameters())
            x = x.to(device=ref.device, dtype=ref.dtype)
            chunks.append(lmp(C.feature_map(x), parts, mode).vectors.double().cpu().numpy())
    finally:
        C.train(was_training)
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, 0))
    if normalize and len(vectors):
        vectors = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-12)
    return DescriptorTable([str(s.image_path) for s in samples], vectors, parts, mode)


# binary export: magic, then (count, dim, parts, mode) as little-endian uint32,
# then count * dim float32 values row-major
_MAGIC = b"TLDS"
_HEADER = struct.Struct("<4sIIII")


def save_descriptors(table: DescriptorTable, path) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vectors = np.ascontiguousarray(table.vectors, dtype="<f4")
    count, dim = vectors.shape if vectors.size else (len(table), 0)
    mode_code = 0 if table.mode is PoolMode.MAX else 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, count, dim, table.parts, mode_code))
        fh.write(vectors.tobytes())
    sidecar = path.with_name(path.name + ".manifest.tsv")
    sidecar.write_text("".join(f"{i}\t{k}\n" for i, k in enumerate(table.keys)))
    return path, sidecar


def load_descriptors(path) -> DescriptorTable:
    path = Path(path)
    data = path.read_bytes()
    magic, count, dim, parts, mode_code = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a descriptor file")
    vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=_HEADER.size).reshape(count, dim)
    sidecar = path.with_name(path.name + ".manifest.tsv")
    keys = [line.split("\t", 1)[1] for line in sidecar.read_text().splitlines()]
    return DescriptorTable(keys, vectors.astype(np.float64), parts, PoolMode.MAX if mode_code == 0 else PoolMode.AVG)
