"""Sparse 3D convolution as gather -> matmul -> scatter over a kernel map.

Three flavors share one kernel-map representation:

* submanifold: kernel 3, stride 1, outputs at the input keys
* down:        kernel 2, stride 2, outputs at the parent keys
* up:          transposed kernel 2, stride 2, outputs at recorded finer keys
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, SparseTensor, downsample_keys, lookup_codes, pack_keys, unique_keys
from .padding import CORNER_BITS


def kernel_offsets(kernel_size: int) -> np.ndarray:
    if kernel_size == 3:
        r = (-1, 0, 1)
        return np.array(list(itertools.product(r, r, r)), dtype=np.int64)
    if kernel_size == 2:
        return CORNER_BITS.copy()
    if kernel_size == 1:
        return np.zeros((1, 3), dtype=np.int64)
    raise ValueError(f"unsupported kernel size {kernel_size}")


@dataclass
class KernelMap:
    offsets: np.ndarray          # (K, 3)
    in_rows: list                # K arrays
    out_rows: list               # K arrays
    num_in: int
    num_out: int
    kernel_size: int = 3
    stride: int = 1
    transposed: bool = False
    out_keys: np.ndarray = field(default=None, repr=False)
    out_padded: np.ndarray = field(default=None, repr=False)
    out_spec: GridSpec = None

    @property
    def num_pairs(self) -> int:
        return int(sum(len(r) for r in self.out_rows))

    def pairs(self):
        """Sorted ``(offset_index, in_row, out_row)`` triples."""
        out = [(d, int(i), int(o)) for d, (ins, outs) in enumerate(zip(self.in_rows, self.out_rows))
               for i, o in zip(ins, outs)]
        return sorted(out)


def _check_combo(kernel_size, stride, transposed):
    ok = {(3, 1, False), (1, 1, False), (2, 2, False), (2, 2, True)}
    if (kernel_size, stride, transposed) not in ok:
        kind = "transposed " if transposed else ""
        raise ValueError(f"unsupported {kind}convolution: kernel {kernel_size}, stride {stride}")


def build_kernel_map(inp, out_keys=None, kernel_size=3, stride=1, transposed=False,
                     out_padded=None, out_spec=None) -> KernelMap:
    """Build the gather/scatter pairs for one convolution.

    ``inp`` is a :class:`SparseTensor` or an ``(n, 4)`` canonical key array.
    When ``out_keys`` is omitted it defaults to the input keys (stride 1) or
    their parents (stride 2). Pair ``(in, out)`` is listed under offset ``d``
    iff ``key_in == stride * key_out + d`` (for the transposed case the roles
    of input and output are swapped).
    """
    _check_combo(kernel_size, stride, transposed)
    if isinstance(inp, SparseTensor):
        in_keys, in_padded, in_spec = inp.keys, inp.padded, inp.spec
    else:
        in_keys, in_padded, in_spec = np.asarray(inp, dtype=np.int64).reshape(-1, 4), None, None
    in_codes = pack_keys(in_keys)
    if len(in_codes) > 1 and np.any(in_codes[1:] <= in_codes[:-1]):
        raise ValueError("input keys must be canonical (sorted, unique)")

    if out_keys is None:
        if transposed:
            raise ValueError("transposed convolution needs the recorded finer key set")
        if stride == 1:
            out_keys, out_padded = in_keys, in_padded
        else:
            out_keys = unique_keys(downsample_keys(in_keys))
    out_keys = np.asarray(out_keys, dtype=np.int64).reshape(-1, 4)
    if out_spec is None and in_spec is not None:
        level = in_spec.level + (0 if stride == 1 else (-1 if transposed else 1))
        out_spec = in_spec.at_level(level)

    offsets = kernel_offsets(kernel_size)
    in_rows, out_rows = [], []
    if transposed:
        parents = downsample_keys(out_keys)
        parent_rows = lookup_codes(in_codes, pack_keys(parents))
        bits = out_keys[:, 1:] - 2 * parents[:, 1:]
        code = bits[:, 0] * 4 + bits[:, 1] * 2 + bits[:, 2]
        for d in range(len(offsets)):
            sel = np.nonzero((code == d) & (parent_rows >= 0))[0]
            in_rows.append(parent_rows[sel])
            out_rows.append(sel.astype(np.int64))
    else:
        base = out_keys.copy()
        base[:, 1:] *= stride
        for d in offsets:
            q = base.copy()
            q[:, 1:] += d
            rows = lookup_codes(in_codes, pack_keys(q))
            sel = np.nonzero(rows >= 0)[0]
            in_rows.append(rows[sel])
            out_rows.append(sel.astype(np.int64))
    return KernelMap(offsets, in_rows, out_rows, len(in_keys), len(out_keys),
                     kernel_size, stride, transposed, out_keys, out_padded, out_spec)


def conv_features(feats, kmap: KernelMap, weight, bias=None) -> np.ndarray:
    """Forward on raw feature matrices. ``weight`` is ``(K, C_in, C_out)``."""
    if feats.shape[0] != kmap.num_in:
        raise ValueError(f"input has {feats.shape[0]} rows, kernel map expects {kmap.num_in}")
    if weight.shape[0] != len(kmap.offsets) or weight.shape[1] != feats.shape[1]:
        raise ValueError(f"weight shape {weight.shape} does not match {feats.shape[1]} input channels "
                         f"and {len(kmap.offsets)} offsets")
    out = np.zeros((kmap.num_out, weight.shape[2]), dtype=np.result_type(feats, weight))
    if bias is not None:
        out += bias
    for d, (ins, outs) in enumerate(zip(kmap.in_rows, kmap.out_rows)):
        if len(ins):
            # out rows are unique within one offset, so plain fancy-index add is exact
            out[outs] += feats[ins] @ weight[d]
    return out


def conv_features_backward(grad_out, feats, kmap: KernelMap, weight):
    """Adjoint of :func:`conv_features`: ``(grad_in, grad_weight, grad_bias)``."""
    if grad_out.shape != (kmap.num_out, weight.shape[2]):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output")
    grad_in = np.zeros_like(feats, dtype=np.result_type(feats, grad_out))
    grad_w = np.zeros_like(weight, dtype=np.result_type(weight, grad_out))
    for d, (ins, outs) in enumerate(zip(kmap.in_rows, kmap.out_rows)):
        if len(ins):
            g = grad_out[outs]
            grad_in[ins] += g @ weight[d].T
            grad_w[d] = feats[ins].T @ g
    return grad_in, grad_w, grad_out.sum(axis=0)


@dataclass
class ConvParams:
    weight: np.ndarray
    bias: np.ndarray = None
    stride: int = 1
    kernel_size: int = 3
    transposed: bool = False

    def __post_init__(self):
        _check_combo(self.kernel_size, self.stride, self.transposed)
        if self.weight.shape[0] != len(kernel_offsets(self.kernel_size)):
            raise ValueError("weight's first axis must match the kernel window size")


def conv_forward(inp: SparseTensor, kmap: KernelMap, params: ConvParams) -> SparseTensor:
    feats = conv_features(inp.features, kmap, params.weight, params.bias)
    padded = kmap.out_padded if kmap.out_padded is not None else np.zeros(kmap.num_out, bool)
    return SparseTensor(kmap.out_spec or inp.spec, kmap.out_keys, feats, padded, canonical=True)


def conv_backward(grad_out, inp: SparseTensor, kmap: KernelMap, params: ConvParams):
    grad_out = grad_out.features if isinstance(grad_out, SparseTensor) else grad_out
    return conv_features_backward(grad_out, inp.features, kmap, params.weight)


def dense_reference_conv(dense, weight, bias=None):
    """Direct kernel-3 convolution of a dense ``(X, Y, Z, C_in)`` grid.

    Cells outside the array read as zero. Offsets follow :func:`kernel_offsets`.
    """
    X, Y, Z, _ = dense.shape
    if max(X, Y, Z) > 16:
        raise ValueError("dense reference is limited to 16^3 grids")
    offsets = kernel_offsets(3)
    out = np.zeros((X, Y, Z, weight.shape[2]), dtype=np.result_type(dense, weight))
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                acc = np.zeros(weight.shape[2], dtype=out.dtype) if bias is None else np.array(bias, dtype=out.dtype)
                for d, (dx, dy, dz) in enumerate(offsets):
                    a, b, c = x + dx, y + dy, z + dz
                    if 0 <= a < X and 0 <= b < Y and 0 <= c < Z:
                        acc = acc + dense[a, b, c] @ weight[d]
                out[x, y, z] = acc
    return out
