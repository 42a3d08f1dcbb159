"""Point clouds, voxel keys and voxelization into sparse tensors.

Keys are stored as int64 rows ``(batch, i, j, k)``. Every tensor keeps its rows
in canonical order (lexicographic, batch-major) so lookups reduce to a
``searchsorted`` over packed key codes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

POINTS_HEADER = "# sparsepad-points v1"

# packed code layout: 15 bits batch | 16 bits per signed coordinate
_COORD_BITS = 16
_COORD_OFFSET = 1 << (_COORD_BITS - 1)
_BATCH_LIMIT = 1 << 15


class VoxelKey(NamedTuple):
    i: int
    j: int
    k: int
    batch: int = 0


@dataclass(frozen=True)
class GridSpec:
    origin: tuple = (0.0, 0.0, 0.0)
    voxel_size: float = 1.0
    level: int = 0

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError(f"voxel size must be positive, got {self.voxel_size}")
        if self.level < 0:
            raise ValueError("level must be >= 0")
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))

    @property
    def size(self) -> float:
        """Voxel edge length at this level."""
        return self.voxel_size * 2 ** self.level

    def at_level(self, level: int) -> "GridSpec":
        return GridSpec(self.origin, self.voxel_size, level)

    def normalized(self, points: np.ndarray) -> np.ndarray:
        """Map world coordinates to grid units ``(p - origin) / size``."""
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.size


@dataclass
class PointCloud:
    points: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    batch: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim == 1:
                self.features = self.features[:, None]
            if len(self.features) != n:
                raise ValueError("features length does not match point count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("labels length does not match point count")
        if self.batch is not None:
            self.batch = np.asarray(self.batch, dtype=np.int64).reshape(-1)
            if len(self.batch) != n:
                raise ValueError("batch length does not match point count")

    def __len__(self):
        return len(self.points)

    @property
    def batch_index(self) -> np.ndarray:
        if self.batch is None:
            return np.zeros(len(self.points), dtype=np.int64)
        return self.batch

    def subset(self, idx) -> "PointCloud":
        take = lambda a: None if a is None else a[idx]
        return PointCloud(self.points[idx], take(self.features), take(self.labels), take(self.batch))

    def permuted(self, perm) -> "PointCloud":
        return self.subset(np.asarray(perm))

    @staticmethod
    def concat(clouds) -> "PointCloud":
        """Merge clouds into one batch; cloud ``b`` gets batch index ``b``."""
        clouds = list(clouds)
        feats = [c.features for c in clouds]
        labels = [c.labels for c in clouds]
        return PointCloud(
            np.concatenate([c.points for c in clouds]),
            None if any(f is None for f in feats) else np.concatenate(feats),
            None if any(l is None for l in labels) else np.concatenate(labels),
            np.concatenate([np.full(len(c), b, dtype=np.int64) for b, c in enumerate(clouds)]),
        )


def check_finite(points: np.ndarray):
    if not np.all(np.isfinite(points)):
        raise ValueError("point coordinates must be finite (found NaN or Inf)")


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Pack ``(n, 4)`` keys into order-preserving int64 codes."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 4)
    coords = keys[:, 1:] + _COORD_OFFSET
    if keys.size and (coords.min() < 0 or coords.max() >= 1 << _COORD_BITS):
        raise OverflowError("voxel coordinate outside the supported +-32767 range")
    if keys.size and (keys[:, 0].min() < 0 or keys[:, 0].max() >= _BATCH_LIMIT):
        raise OverflowError("batch index outside [0, 32768)")
    return (
        (keys[:, 0] << (3 * _COORD_BITS))
        | (coords[:, 0] << (2 * _COORD_BITS))
        | (coords[:, 1] << _COORD_BITS)
        | coords[:, 2]
    )


def unpack_keys(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    mask = (1 << _COORD_BITS) - 1
    out = np.empty((len(codes), 4), dtype=np.int64)
    out[:, 0] = codes >> (3 * _COORD_BITS)
    out[:, 1] = ((codes >> (2 * _COORD_BITS)) & mask) - _COORD_OFFSET
    out[:, 2] = ((codes >> _COORD_BITS) & mask) - _COORD_OFFSET
    out[:, 3] = (codes & mask) - _COORD_OFFSET
    return out


def unique_keys(keys: np.ndarray) -> np.ndarray:
    """Distinct keys in canonical order."""
    return unpack_keys(np.unique(pack_keys(keys)))


def with_batch(ijk: np.ndarray, batch=None) -> np.ndarray:
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    b = np.zeros(len(ijk), dtype=np.int64) if batch is None else np.broadcast_to(batch, len(ijk))
    return np.column_stack([b, ijk])


def containing_voxel_key(p, spec: GridSpec) -> VoxelKey:
    p = np.asarray(p, dtype=np.float64)
    check_finite(p)
    i, j, k = np.floor(spec.normalized(p)).astype(np.int64)
    return VoxelKey(int(i), int(j), int(k))


def containing_keys(points: np.ndarray, spec: GridSpec, batch=None) -> np.ndarray:
    """Vectorized :func:`containing_voxel_key`, returns ``(n, 4)`` keys."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    check_finite(points)
    return with_batch(np.floor(spec.normalized(points)), batch)


def voxel_center(key, spec: GridSpec) -> np.ndarray:
    ijk = np.asarray(key[:3], dtype=np.float64)
    return np.asarray(spec.origin) + spec.size * (ijk + 0.5)


def voxel_centers(keys: np.ndarray, spec: GridSpec) -> np.ndarray:
    keys = np.asarray(keys).reshape(-1, 4)
    return np.asarray(spec.origin) + spec.size * (keys[:, 1:] + 0.5)


def downsample_key(key: VoxelKey) -> VoxelKey:
    # python's // is floor division, so -1 // 2 == -1
    return VoxelKey(key[0] // 2, key[1] // 2, key[2] // 2, key[3] if len(key) > 3 else 0)


def downsample_keys(keys: np.ndarray, times: int = 1) -> np.ndarray:
    keys = np.array(keys, dtype=np.int64).reshape(-1, 4)
    keys[:, 1:] >>= times  # arithmetic shift is floor division by 2**times
    return keys


class SparseTensor:
    """Keys, per-row features and origin flags at one grid level.

    Rows are always in canonical key order. ``padded[r]`` is True for voxels
    added by a padding scheme, False for voxels holding input points.
    """

    def __init__(self, spec: GridSpec, keys, features, padded=None, *, canonical=False):
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 4)
        features = np.asarray(features)
        if features.ndim != 2 or len(features) != len(keys):
            raise ValueError("features must be (rows, channels) matching the key count")
        padded = np.zeros(len(keys), dtype=bool) if padded is None else np.asarray(padded, dtype=bool)
        codes = pack_keys(keys)
        if not canonical:
            order = np.argsort(codes, kind="stable")
            codes, keys, features, padded = codes[order], keys[order], features[order], padded[order]
        if len(codes) > 1 and np.any(codes[1:] <= codes[:-1]):
            raise ValueError("duplicate voxel keys")
        self.spec = spec
        self.keys = keys
        self.features = features
        self.padded = padded
        self._codes = codes

    def __len__(self):
        return len(self.keys)

    def __repr__(self):
        return (f"SparseTensor(rows={len(self)}, channels={self.num_channels}, "
                f"padded={int(self.padded.sum())}, level={self.spec.level})")

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    @property
    def codes(self) -> np.ndarray:
        return self._codes

    @property
    def index(self) -> dict:
        """Key -> row map (built on demand; ``lookup`` is the fast path)."""
        return {VoxelKey(int(i), int(j), int(k), int(b)): r for r, (b, i, j, k) in enumerate(self.keys)}

    def lookup(self, keys) -> np.ndarray:
        """Row of each key, or -1 where the key is absent."""
        return lookup_codes(self._codes, pack_keys(keys))

    def contains(self, keys) -> np.ndarray:
        return self.lookup(keys) >= 0

    def with_features(self, features) -> "SparseTensor":
        return SparseTensor(self.spec, self.keys, features, self.padded, canonical=True)

    def nbytes(self) -> int:
        """Exact bytes held by features, keys and flags."""
        return self.features.nbytes + self.keys.nbytes + self.padded.nbytes

    def to_dense(self, shape, channels=None):
        """Scatter into a dense ``shape + (C,)`` array (batch 0, keys >= 0)."""
        feats = self.features if channels is None else self.features[:, channels]
        out = np.zeros(tuple(shape) + (feats.shape[1],), dtype=feats.dtype)
        ijk = self.keys[:, 1:]
        out[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = feats
        return out


def lookup_codes(sorted_codes: np.ndarray, query: np.ndarray) -> np.ndarray:
    if len(sorted_codes) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_codes, query)
    pos_c = np.minimum(pos, len(sorted_codes) - 1)
    return np.where(sorted_codes[pos_c] == query, pos_c, -1).astype(np.int64)


def voxelize(cloud: PointCloud, spec: GridSpec, feature_mode: str = "mean", dtype=np.float64) -> SparseTensor:
    """Build a sparse tensor with one row per occupied voxel.

    ``feature_mode="mean"`` averages the contained points' features (occupancy
    ones when the cloud has none); ``"occupancy"`` uses a single ones channel.
    A trailing indicator channel equal to 1 is always appended.
    """
    if len(cloud) == 0:
        raise ValueError("cannot voxelize an empty point cloud")
    keys = containing_keys(cloud.points, spec, cloud.batch_index)
    codes, inverse = np.unique(pack_keys(keys), return_inverse=True)
    inverse = inverse.reshape(-1)
    m = len(codes)
    if feature_mode == "mean" and cloud.features is not None:
        counts = np.bincount(inverse, minlength=m).astype(np.float64)
        sums = np.zeros((m, cloud.features.shape[1]))
        np.add.at(sums, inverse, cloud.features)
        feats = sums / counts[:, None]
    elif feature_mode in ("mean", "occupancy"):
        feats = np.ones((m, 1))
    else:
        raise ValueError(f"unknown feature mode {feature_mode!r}")
    feats = np.column_stack([feats, np.ones(m)]).astype(dtype)
    return SparseTensor(spec, unpack_keys(codes), feats, canonical=True)


def read_points(path) -> PointCloud:
    """Read ``x y z [label] [f1 f2 ...]`` text; ``#`` starts a comment.

    Without a header, a fourth column is read as the label and any further
    columns as features. The v1 header line may declare ``label=0`` to mark
    files whose extra columns are features only.
    """
    has_label = None
    rows = []
    for line in Path(path).read_text().splitlines():
        stripped = line.strip()
        if stripped.startswith(POINTS_HEADER):
            for tok in stripped[len(POINTS_HEADER):].split():
                name, _, value = tok.partition("=")
                if name == "label":
                    has_label = value == "1"
            continue
        stripped = stripped.split("#", 1)[0].strip()
        if stripped:
            rows.append([float(v) for v in stripped.split()])
    if not rows:
        raise ValueError(f"{path}: no points")
    width = {len(r) for r in rows}
    if len(width) != 1 or min(width) < 3:
        raise ValueError(f"{path}: inconsistent or short rows")
    data = np.asarray(rows, dtype=np.float64)
    check_finite(data[:, :3])
    if has_label is None:
        has_label = data.shape[1] > 3
    labels = data[:, 3].astype(np.int64) if has_label else None
    rest = data[:, 4:] if has_label else data[:, 3:]
    return PointCloud(data[:, :3], rest if rest.shape[1] else None, labels)


def write_points(path, cloud: PointCloud):
    has_label = cloud.labels is not None
    cols = [cloud.points]
    if has_label:
        cols.append(cloud.labels[:, None].astype(np.float64))
    if cloud.features is not None:
        cols.append(cloud.features)
    nfeat = 0 if cloud.features is None else cloud.features.shape[1]
    with open(path, "w") as fh:
        fh.write(f"{POINTS_HEADER} label={int(has_label)} features={nfeat}\n")
        for row in np.column_stack(cols):
            vals = [repr(float(v)) for v in row[:3]]
            if has_label:
                vals.append(str(int(row[3])))
            vals += [repr(float(v)) for v in row[3 + has_label:]]
            fh.write(" ".join(vals) + "\n")
