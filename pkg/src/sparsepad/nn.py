"""Layers with hand-written backward passes, loss, SGD and gradient checking.

Layers operate on feature matrices (rows = active voxels or points). Sparse
convolutions additionally take the :class:`~sparsepad.sparseconv.KernelMap`
for the key sets involved; the U-Net builds those once per forward pass.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sparseconv import KernelMap, conv_features, conv_features_backward, kernel_offsets

CHECKPOINT_MAGIC = b"sparsepad-checkpoint v1\n"


class NumericalError(ArithmeticError):
    """NaN or Inf showed up in a loss or gradient."""


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name, value):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add(self, name, module):
        self.children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def state_dict(self) -> dict:
        state = {name: p for name, p, _ in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def named_buffers(self, prefix=""):
        for name, b in getattr(self, "buffers", {}).items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def load_state_dict(self, state: dict):
        targets = dict((n, p) for n, p, _ in self.named_parameters())
        targets.update(self.named_buffers())
        missing = set(targets) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, arr in targets.items():
            if arr.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]

    def zero_grad(self):
        for _, _, g in self.named_parameters():
            g[...] = 0

    def train(self, mode=True):
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())


def fan_in_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SparseConv(Module):
    def __init__(self, c_in, c_out, kernel_size=3, stride=1, transposed=False, bias=True,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        k = len(kernel_offsets(kernel_size))
        self.kernel_size, self.stride, self.transposed = kernel_size, stride, transposed
        self.add_param("weight", fan_in_uniform(rng, (k, c_in, c_out), k * c_in, dtype))
        self.has_bias = bias
        if bias:
            self.add_param("bias", np.zeros(c_out, dtype=dtype))

    def forward(self, x, kmap: KernelMap):
        if (kmap.kernel_size, kmap.stride, kmap.transposed) != (self.kernel_size, self.stride, self.transposed):
            raise ValueError("kernel map built for a different convolution type")
        self._ctx = (x, kmap)
        return conv_features(x, kmap, self.params["weight"], self.params.get("bias"))

    def backward(self, g):
        x, kmap = self._ctx
        gx, gw, gb = conv_features_backward(g, x, kmap, self.params["weight"])
        self.grads["weight"] += gw
        if self.has_bias:
            self.grads["bias"] += gb
        return gx


class Linear(Module):
    def __init__(self, c_in, c_out, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.add_param("weight", fan_in_uniform(rng, (c_in, c_out), c_in, dtype))
        self.has_bias = bias
        if bias:
            self.add_param("bias", np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        self._x = x
        y = x @ self.params["weight"]
        return y + self.params["bias"] if self.has_bias else y

    def backward(self, g):
        self.grads["weight"] += self._x.T @ g
        if self.has_bias:
            self.grads["bias"] += g.sum(axis=0)
        return g @ self.params["weight"].T


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, g):
        return np.where(self._mask, g, 0).astype(g.dtype, copy=False)


class BatchNorm(Module):
    """Per-channel standardization over active rows.

    ``mask`` (bool per row) restricts which rows feed the statistics; all rows
    are normalized with them. The default uses every row, padded ones included.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.add_param("scale", np.ones(channels, dtype=dtype))
        self.add_param("shift", np.zeros(channels, dtype=dtype))
        self.buffers = {"running_mean": np.zeros(channels, dtype=dtype),
                        "running_var": np.ones(channels, dtype=dtype)}

    def forward(self, x, mask=None):
        if not self.training:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
            self._ctx = None
            self._eval_inv = 1.0 / np.sqrt(var + self.eps)
            return ((x - mean) * self._eval_inv * self.params["scale"] + self.params["shift"]).astype(x.dtype)
        sel = x if mask is None else x[mask]
        m = len(sel)
        if m < 2:
            raise ValueError(f"batch norm in training mode needs >= 2 active rows, got {m}")
        mean = sel.mean(axis=0)
        var = sel.var(axis=0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._ctx = (xhat, inv, mask, m)
        mom = self.momentum
        self.buffers["running_mean"][...] = (1 - mom) * self.buffers["running_mean"] + mom * mean
        self.buffers["running_var"][...] = (1 - mom) * self.buffers["running_var"] + mom * var * m / (m - 1)
        return (xhat * self.params["scale"] + self.params["shift"]).astype(x.dtype)

    def backward(self, g):
        if self._ctx is None:
            self.grads["shift"] += g.sum(axis=0)
            return g * self.params["scale"] * self._eval_inv
        xhat, inv, mask, m = self._ctx
        self.grads["scale"] += (g * xhat).sum(axis=0)
        self.grads["shift"] += g.sum(axis=0)
        gx_hat = g * self.params["scale"]
        # statistics depend only on the masked rows; every row depends on them
        d_var_term = (gx_hat * xhat).sum(axis=0)
        d_mean_term = gx_hat.sum(axis=0)
        gx = gx_hat * inv
        corr = -(inv / m) * (d_mean_term + xhat * d_var_term)
        if mask is None:
            gx += corr
        else:
            gx[mask] += corr[mask]
        return gx.astype(g.dtype, copy=False)


class ResBlock(Module):
    """conv3-norm-relu-conv3-norm plus skip, relu after the sum."""

    def __init__(self, c_in, c_out, rng=None, dtype=np.float32):
        super().__init__()
        self.conv1 = self.add("conv1", SparseConv(c_in, c_out, 3, bias=False, rng=rng, dtype=dtype))
        self.norm1 = self.add("norm1", BatchNorm(c_out, dtype=dtype))
        self.relu1 = ReLU()
        self.conv2 = self.add("conv2", SparseConv(c_out, c_out, 3, bias=False, rng=rng, dtype=dtype))
        self.norm2 = self.add("norm2", BatchNorm(c_out, dtype=dtype))
        self.proj = self.add("proj", Linear(c_in, c_out, bias=False, rng=rng, dtype=dtype)) if c_in != c_out else None
        self.relu_out = ReLU()

    def forward(self, x, kmap: KernelMap, mask=None):
        h = self.relu1.forward(self.norm1.forward(self.conv1.forward(x, kmap), mask))
        h = self.norm2.forward(self.conv2.forward(h, kmap), mask)
        skip = x if self.proj is None else self.proj.forward(x)
        return self.relu_out.forward(h + skip)

    def backward(self, g):
        g = self.relu_out.backward(g)
        g_skip = g if self.proj is None else self.proj.backward(g)
        h = self.conv2.backward(self.norm2.backward(g))
        h = self.conv1.backward(self.norm1.backward(self.relu1.backward(h)))
        return h + g_skip


def cross_entropy(logits, labels):
    """Mean negative log-softmax and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row expected")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(logits.dtype)


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 2
    schedule: str = "step"
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in ("step", "constant"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Step decay: x0.1 from epoch ceil(E/2) on, x0.01 from ceil(3E/4) on."""
        if self.schedule == "constant":
            return self.lr
        lr = self.lr
        for milestone in (math.ceil(self.epochs / 2), math.ceil(3 * self.epochs / 4)):
            if epoch >= milestone:
                lr *= 0.1
        return lr


class SGD:
    """Momentum SGD, ``v <- mu v + g; p <- p - lr v``."""

    def __init__(self, module: Module, config: TrainConfig):
        self.module, self.config = module, config
        self.velocity = {name: np.zeros_like(p) for name, p, _ in module.named_parameters()}

    def step(self, epoch: int):
        lr = self.config.lr_at(epoch)
        for name, p, g in self.module.named_parameters():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in {name}")
            if self.config.weight_decay:
                g = g + self.config.weight_decay * p
            v = self.velocity[name]
            v *= self.config.momentum
            v += g
            p -= (lr * v).astype(p.dtype, copy=False)


def sgd_step(params: dict, grads: dict, config: TrainConfig, epoch: int, velocity: dict = None) -> dict:
    """Functional form of one momentum step; returns updated copies."""
    velocity = {} if velocity is None else velocity
    lr = config.lr_at(epoch)
    out = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
        v = velocity.get(name, np.zeros_like(p)) * config.momentum + g
        velocity[name] = v
        out[name] = p - lr * v
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def lines(self):
        for name, err in self.per_param.items():
            yield f"{name:40s} {err:.3e}"


def rel_error(a, b, floor=1e-6):
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps exact-zero gradients comparable."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(model, inputs, tolerance=1e-4, samples=12, h=1e-5, seed=0, check_inputs=False,
               forward=None, backward=None):
    """Compare analytic and central-difference gradients.

    The scalar checked is ``sum(forward(*inputs) * R)`` for a fixed random
    ``R``. Up to ``samples`` entries per parameter are perturbed. With
    ``check_inputs`` the float ndarray inputs are checked too.
    """
    rng = np.random.default_rng(seed)
    forward = forward or model.forward
    backward = backward or model.backward
    out = forward(*inputs)
    proj = rng.standard_normal(out.shape)

    def scalar():
        return float(np.sum(forward(*inputs) * proj))

    if hasattr(model, "zero_grad"):
        model.zero_grad()
    forward(*inputs)
    grad_in = backward(proj.astype(out.dtype))
    targets = []
    if hasattr(model, "named_parameters"):
        targets += [(name, p, g.copy()) for name, p, g in model.named_parameters()]
    if check_inputs:
        targets += [(f"input{i}", x, grad_in if len(inputs) == 1 else grad_in[i])
                    for i, x in enumerate(inputs) if isinstance(x, np.ndarray) and x.dtype.kind == "f"]

    per_param = {}
    for name, p, analytic in targets:
        flat = p.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        errs = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            errs.append(rel_error(analytic.reshape(-1)[i], numeric))
        per_param[name] = float(max(errs)) if errs else 0.0
    worst = max(per_param.values(), default=0.0)
    return GradCheckReport(worst, per_param, tolerance)


def save_checkpoint(path, state: dict, meta: dict = None):
    """Write a versioned, byte-deterministic key -> array file.

    Layout: magic line, one JSON line indexing the arrays, raw little-endian
    array bytes in index order.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    index = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(index + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a sparsepad checkpoint")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    index = json.loads(rest[:nl])
    body = rest[nl + 1:]
    state = {}
    for e in index["arrays"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        state[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return state, index["meta"]
