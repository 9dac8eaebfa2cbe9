"""Multi-channel per-vertex scalar fields and the ICSF binary container."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .icosphere import prefix_count

_MAGIC = b"ICSF"
_VERSION = 1


@dataclass
class FeatureMap:
    """A (channels, V) float32 field on an order-``order`` icosphere."""

    order: int
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ValueError(f"data must be (channels, V), got shape {data.shape}")
        expected = prefix_count(self.order)
        if data.shape[1] != expected:
            raise ValueError(
                f"order-{self.order} map needs {expected} vertices, "
                f"got {data.shape[1]}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.data.shape[1]

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.order, self.data.copy())


def zeros(order: int, channels: int) -> FeatureMap:
    return FeatureMap(order, np.zeros((channels, prefix_count(order)), np.float32))


def save_feature_map(fmap: FeatureMap, path) -> None:
    header = struct.pack("<4sIII", _MAGIC, _VERSION, fmap.order, fmap.channels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fmap.data.astype("<f4").tobytes())


def load_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated ICSF header")
        magic, version, order, channels = struct.unpack("<4sIII", header)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not an ICSF file")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported ICSF version {version}")
        raw = fh.read()
    n_verts = prefix_count(order)
    flat = np.frombuffer(raw, dtype="<f4")
    if flat.shape[0] != channels * n_verts:
        raise ValueError(
            f"{path}: expected {channels * n_verts} values, got {flat.shape[0]}"
        )
    return FeatureMap(order, flat.reshape(channels, n_verts).copy())
