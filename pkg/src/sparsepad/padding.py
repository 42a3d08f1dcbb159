"""Padding schemes: zero, octree, N-ring and interpolation-aware.

Each scheme has a key-level core (``*_keys``) returning the padded key set and
a tensor-level wrapper that appends zero-featured rows flagged as padded.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .grid import (
    GridSpec,
    PointCloud,
    SparseTensor,
    check_finite,
    containing_keys,
    downsample_keys,
    pack_keys,
    unique_keys,
    unpack_keys,
)

# canonical corner order (-,-,-), (-,-,+), ..., (+,+,+); x is the slowest axis
CORNER_BITS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


@dataclass(frozen=True)
class PaddingScheme:
    kind: str = "zero"
    n: int = 1

    KINDS = ("zero", "octree", "ring", "interp")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown padding scheme {self.kind!r}")
        if self.kind == "ring" and self.n < 1:
            raise ValueError("ring padding requires N >= 1")

    @classmethod
    def parse(cls, text: str) -> "PaddingScheme":
        """Parse ``zero``, ``octree``, ``interp`` or ``ringN`` / ``ring:N``."""
        text = text.strip().lower()
        if text.startswith("ring"):
            n = text[4:].lstrip(":") or "1"
            return cls("ring", int(n))
        if text in ("interp-aware", "interp_aware"):
            text = "interp"
        return cls(text)

    def __str__(self):
        return f"ring{self.n}" if self.kind == "ring" else self.kind


@dataclass(frozen=True)
class PaddingReport:
    scheme: str
    voxel_size: float
    original: int
    padded: int

    @property
    def total(self) -> int:
        return self.original + self.padded

    @property
    def ratio(self) -> float:
        return self.padded / self.original if self.original else 0.0

    CSV_HEADER = "scheme,voxel_size,M,padded,total,ratio"

    def csv_row(self) -> str:
        return f"{self.scheme},{self.voxel_size:.10g},{self.original},{self.padded},{self.total},{self.ratio:.6f}"


def interp_corner_keys(p, spec: GridSpec) -> np.ndarray:
    """The 8 interpolation corner keys of one point, ``(8, 3)`` int64."""
    return corner_keys(np.asarray(p, dtype=np.float64).reshape(1, 3), spec)[0, :, 1:]


def corner_keys(points: np.ndarray, spec: GridSpec, batch=None) -> np.ndarray:
    """``(n, 8, 4)`` corner keys: floor(u + o) for o in {-0.5, +0.5}^3."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    check_finite(points)
    lower = np.floor(spec.normalized(points) - 0.5).astype(np.int64)
    ijk = lower[:, None, :] + CORNER_BITS[None, :, :]
    n = len(points)
    b = np.zeros(n, dtype=np.int64) if batch is None else np.asarray(batch, dtype=np.int64)
    return np.concatenate([np.broadcast_to(b[:, None, None], (n, 8, 1)), ijk], axis=2)


def _merge(keys: np.ndarray, extra: np.ndarray):
    """Return (all keys canonical, padded flags) with ``extra`` minus ``keys`` marked padded."""
    base = pack_keys(keys)
    cand = np.unique(pack_keys(extra))
    new = np.setdiff1d(cand, base, assume_unique=False)
    codes = np.concatenate([base, new])
    padded = np.concatenate([np.zeros(len(base), bool), np.ones(len(new), bool)])
    order = np.argsort(codes, kind="stable")
    return unpack_keys(codes[order]), padded[order]


def ring_offsets(n: int) -> np.ndarray:
    r = np.arange(-n, n + 1)
    return np.array(list(itertools.product(r, r, r)), dtype=np.int64)


def ring_keys(keys: np.ndarray, n: int = 1) -> np.ndarray:
    """All keys within Chebyshev distance ``n`` of ``keys`` (same batch)."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 4)
    off = np.column_stack([np.zeros(len(ring_offsets(n)), np.int64), ring_offsets(n)])
    return (keys[:, None, :] + off[None]).reshape(-1, 4)


def octree_keys(keys: np.ndarray) -> np.ndarray:
    """The 8 children of every key's parent."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 4)
    base = downsample_keys(keys)
    base[:, 1:] *= 2
    off = np.column_stack([np.zeros(8, np.int64), CORNER_BITS])
    return (base[:, None, :] + off[None]).reshape(-1, 4)


def interp_keys(points: np.ndarray, spec: GridSpec, batch=None) -> np.ndarray:
    return corner_keys(points, spec, batch).reshape(-1, 4)


def padded_key_set(keys, scheme: PaddingScheme, spec: GridSpec = None, cloud: PointCloud = None):
    """Apply ``scheme`` to a key set; returns ``(keys, padded_flags)``."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 4)
    if scheme.kind == "zero":
        extra = keys[:0]
    elif scheme.kind == "octree":
        extra = octree_keys(keys)
    elif scheme.kind == "ring":
        extra = ring_keys(keys, scheme.n)
    else:
        if cloud is None or spec is None:
            raise ValueError("interpolation-aware padding needs the point cloud and grid spec")
        extra = interp_keys(cloud.points, spec, cloud.batch_index)
    return _merge(keys, extra)


def _pad_tensor(t: SparseTensor, keys, padded) -> SparseTensor:
    # original rows are kept as-is; new rows are zero (indicator included)
    was_padded = padded.copy()
    rows = t.lookup(keys)
    feats = np.zeros((len(keys), t.num_channels), dtype=t.features.dtype)
    old = rows >= 0
    feats[old] = t.features[rows[old]]
    was_padded[old] = t.padded[rows[old]]
    return SparseTensor(t.spec, keys, feats, was_padded, canonical=True)


def pad(t: SparseTensor, scheme: PaddingScheme, cloud: PointCloud = None) -> SparseTensor:
    keys, padded = padded_key_set(t.keys, scheme, t.spec, cloud)
    return _pad_tensor(t, keys, padded)


def pad_ring(t: SparseTensor, n: int = 1) -> SparseTensor:
    return pad(t, PaddingScheme("ring", n))


def pad_octree(t: SparseTensor) -> SparseTensor:
    return pad(t, PaddingScheme("octree"))


def pad_interp_aware(t: SparseTensor, cloud: PointCloud) -> SparseTensor:
    return pad(t, PaddingScheme("interp"), cloud)


def padding_stats(before: SparseTensor, after: SparseTensor, scheme: str = "") -> PaddingReport:
    m = int((~before.padded).sum())
    if not np.all(after.contains(before.keys[~before.padded])):
        raise ValueError("padded tensor lost original keys")
    return PaddingReport(str(scheme), before.spec.size, m, len(after) - m)


def padding_report(cloud: PointCloud, spec: GridSpec, scheme: PaddingScheme) -> PaddingReport:
    """Voxelize ``cloud`` at ``spec`` and count voxels after ``scheme``."""
    keys = unique_keys(containing_keys(cloud.points, spec, cloud.batch_index))
    all_keys, _ = padded_key_set(keys, scheme, spec, cloud)
    return PaddingReport(str(scheme), spec.size, len(keys), len(all_keys) - len(keys))
