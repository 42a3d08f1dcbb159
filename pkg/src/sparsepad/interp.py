"""Point features from voxel features: nearest and trilinear interpolation.

The trilinear modes differ only in how absent corner voxels are handled:

* ``zerofill``   absent corners contribute nothing, weights are not rescaled
* ``normalized`` weights of present corners are rescaled to sum to one
* ``strict``     every corner must exist (guaranteed by interp-aware padding)
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, PointCloud, SparseTensor, check_finite, containing_keys
from .padding import CORNER_BITS, corner_keys


class InterpMode(str, enum.Enum):
    NEAREST = "nearest"
    ZERO_FILL = "zerofill"
    NORMALIZED = "normalized"
    STRICT = "strict"

    @classmethod
    def parse(cls, value) -> "InterpMode":
        if isinstance(value, cls):
            return value
        aliases = {"zero_fill": "zerofill", "zero-fill": "zerofill", "trilinear": "strict", "near": "nearest"}
        return cls(aliases.get(str(value).lower(), str(value).lower()))


class MissingVoxelError(LookupError):
    """A voxel needed for interpolation is not in the tensor."""

    def __init__(self, message, keys):
        super().__init__(message)
        self.keys = np.asarray(keys)


class MissingCornerError(MissingVoxelError):
    pass


class DegenerateWeightsError(ArithmeticError):
    pass


@dataclass
class CornerSet:
    keys: np.ndarray     # (n, 8, 4)
    weights: np.ndarray  # (n, 8)
    rows: np.ndarray = None  # (n, 8), -1 where absent

    @property
    def present(self) -> np.ndarray:
        if self.rows is None:
            raise ValueError("presence is unknown until the corners are looked up in a tensor")
        return self.rows >= 0


def trilinear_weights(points, spec: GridSpec, batch=None) -> CornerSet:
    """Corner keys and trilinear weights for ``(n, 3)`` points (or one point)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    check_finite(pts)
    u = spec.normalized(pts)
    lower = np.floor(u - 0.5)
    t = u - (lower + 0.5)
    # per-axis factor: (1 - t) for the lower corner, t for the upper one
    factors = np.where(CORNER_BITS[None, :, :] == 1, t[:, None, :], 1.0 - t[:, None, :])
    return CornerSet(corner_keys(pts, spec, batch), factors.prod(axis=2))


def lookup_corners(t: SparseTensor, points, batch=None) -> CornerSet:
    cs = trilinear_weights(points, t.spec, batch)
    cs.rows = t.lookup(cs.keys.reshape(-1, 4)).reshape(-1, 8)
    return cs


@dataclass
class InterpContext:
    """Gather pattern reused by the backward pass."""

    rows: np.ndarray     # (n, K), -1 for absent voxels
    weights: np.ndarray  # (n, K) effective weights, zero where absent
    num_rows: int
    corners: CornerSet = None

    def forward(self, features: np.ndarray) -> np.ndarray:
        safe = np.where(self.rows >= 0, self.rows, 0)
        w = self.weights.astype(features.dtype, copy=False)
        return np.einsum("nk,nkc->nc", w, features[safe])

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad = np.zeros((self.num_rows, grad_out.shape[1]), dtype=grad_out.dtype)
        valid = self.rows >= 0
        w = self.weights.astype(grad_out.dtype, copy=False)
        contrib = w[:, :, None] * grad_out[:, None, :]
        np.add.at(grad, self.rows[valid], contrib[valid])
        return grad


def interp_context(t: SparseTensor, points, mode, batch=None) -> InterpContext:
    mode = InterpMode.parse(mode)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if mode is InterpMode.NEAREST:
        keys = containing_keys(pts, t.spec, batch)
        rows = t.lookup(keys)
        if np.any(rows < 0):
            raise MissingVoxelError("containing voxel missing for nearest interpolation", keys[rows < 0])
        return InterpContext(rows[:, None], np.ones((len(pts), 1)), len(t))

    cs = lookup_corners(t, pts, batch)
    present = cs.present
    if mode is InterpMode.STRICT:
        if not present.all():
            missing = np.unique(cs.keys[~present], axis=0)
            raise MissingCornerError(f"{len(missing)} interpolation corner voxels are missing", missing)
        w = cs.weights
    elif mode is InterpMode.ZERO_FILL:
        w = np.where(present, cs.weights, 0.0)
    else:
        w = np.where(present, cs.weights, 0.0)
        denom = w.sum(axis=1, keepdims=True)
        if np.any(denom <= 0):
            raise DegenerateWeightsError("no present corner carries positive weight")
        # with every corner present the denominator is exactly one; skip the rounding
        w = np.where(present.all(axis=1, keepdims=True), w, w / denom)
    return InterpContext(cs.rows, w, len(t), cs)


def interpolate_batch(t: SparseTensor, cloud, mode, features=None):
    """Interpolate at every point; returns ``(features, context)``.

    ``cloud`` may be a :class:`PointCloud` (batch tags respected) or an
    ``(n, 3)`` array. ``features`` overrides ``t.features``.
    """
    if isinstance(cloud, PointCloud):
        ctx = interp_context(t, cloud.points, mode, cloud.batch_index)
    else:
        ctx = interp_context(t, cloud, mode)
    feats = t.features if features is None else features
    return ctx.forward(feats), ctx


def interpolate(t: SparseTensor, p, mode) -> np.ndarray:
    out, _ = interpolate_batch(t, np.asarray(p, dtype=np.float64).reshape(1, 3), mode)
    return out[0]
