import math

import numpy as np
import pytest

from oracles import central_difference, max_rel_error
from sparsepad.grid import GridSpec, SparseTensor, unique_keys
from sparsepad.nn import (
    SGD,
    BatchNorm,
    Linear,
    Module,
    NumericalError,
    ReLU,
    ResBlock,
    SparseConv,
    TrainConfig,
    cross_entropy,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from sparsepad.sparseconv import build_kernel_map

F64 = np.float64


def active_keys(rng, n, extent=4):
    return unique_keys(np.column_stack([np.zeros(n, int), rng.integers(0, extent, size=(n, 3))]))


def test_norm_constant_input_gives_shift():
    bn = BatchNorm(3, dtype=F64)
    bn.params["shift"][...] = [0.5, -1.0, 2.0]
    out = bn.forward(np.full((5, 3), 7.0))
    assert np.allclose(out, bn.params["shift"])


def test_norm_identity_on_standardized_input(rng):
    x = rng.standard_normal((50, 4))
    x = (x - x.mean(0)) / x.std(0)
    bn = BatchNorm(4, eps=0.0, dtype=F64)
    assert np.allclose(bn.forward(x), x, atol=1e-6)


def test_norm_rejects_single_row():
    with pytest.raises(ValueError):
        BatchNorm(2).forward(np.ones((1, 2)))


@pytest.mark.parametrize("masked", [False, True])
def test_norm_gradcheck(rng, masked):
    bn = BatchNorm(3, dtype=F64)
    bn.params["scale"][...] = rng.uniform(0.5, 2, 3)
    bn.params["shift"][...] = rng.standard_normal(3)
    x = rng.standard_normal((12, 3))
    mask = rng.random(12) < 0.6 if masked else None
    if masked:
        mask[:2] = True
    report = grad_check(bn, (x, mask), check_inputs=False, forward=lambda x, m: bn.forward(x, m))
    assert report.passed, report.per_param
    # input gradient against central differences
    proj = rng.standard_normal((12, 3))
    bn.zero_grad()
    bn.forward(x, mask)
    gx = bn.backward(proj)
    numeric = central_difference(lambda: float(np.sum(bn.forward(x, mask) * proj)), x)
    assert max_rel_error(gx, numeric, floor=1e-6) <= 1e-4


def test_norm_eval_uses_running_stats(rng):
    bn = BatchNorm(2, momentum=1.0, dtype=F64)
    x = rng.standard_normal((20, 2)) * 3 + 1
    bn.forward(x)
    bn.eval()
    y = bn.forward(x[:1])
    assert np.allclose(y, (x[:1] - x.mean(0)) / np.sqrt(x.var(0) * 20 / 19 + bn.eps))


def test_resblock_zero_convs_is_relu(rng):
    keys = active_keys(rng, 15)
    kmap = build_kernel_map(keys, keys)
    block = ResBlock(3, 3, rng=rng, dtype=F64)
    for conv in (block.conv1, block.conv2):
        conv.params["weight"][...] = 0
    x = rng.standard_normal((len(keys), 3))
    assert np.allclose(block.forward(x, kmap), np.maximum(x, 0))


def test_resblock_gradcheck(rng):
    keys = active_keys(rng, 10, extent=3)
    kmap = build_kernel_map(keys, keys)
    block = ResBlock(2, 3, rng=rng, dtype=F64)
    x = rng.standard_normal((len(keys), 2))
    report = grad_check(block, (x, kmap), samples=20, forward=lambda x, k: block.forward(x, k))
    assert report.passed, report.per_param
    proj = rng.standard_normal((len(keys), 3))
    block.zero_grad()
    block.forward(x, kmap)
    gx = block.backward(proj)
    numeric = central_difference(lambda: float(np.sum(block.forward(x, kmap) * proj)), x)
    assert max_rel_error(gx, numeric, floor=1e-6) <= 1e-4


def test_relu_and_norm_keep_rows(rng):
    x = rng.standard_normal((9, 2))
    assert ReLU().forward(x).shape == x.shape
    assert BatchNorm(2, dtype=F64).forward(x).shape == x.shape


@pytest.mark.parametrize("layer", ["conv", "down", "up", "linear"])
def test_layer_gradchecks(rng, layer):
    fine = active_keys(rng, 20)
    if layer == "linear":
        mod = Linear(3, 2, rng=rng, dtype=F64)
        x = rng.standard_normal((7, 3))
        report = grad_check(mod, (x,), check_inputs=True)
    else:
        from sparsepad.grid import downsample_keys
        coarse = unique_keys(downsample_keys(fine))
        if layer == "conv":
            mod, kmap, n = SparseConv(3, 2, 3, rng=rng, dtype=F64), build_kernel_map(fine, fine), len(fine)
        elif layer == "down":
            mod, kmap, n = SparseConv(3, 2, 2, 2, rng=rng, dtype=F64), build_kernel_map(fine, coarse, 2, 2), len(fine)
        else:
            mod = SparseConv(3, 2, 2, 2, transposed=True, rng=rng, dtype=F64)
            kmap, n = build_kernel_map(coarse, fine, 2, 2, transposed=True), len(coarse)
        x = rng.standard_normal((n, 3))
        report = grad_check(mod, (x, kmap), forward=lambda x, k: mod.forward(x, k))
    assert report.passed, report.per_param


def test_cross_entropy_values(rng):
    loss, _ = cross_entropy(np.zeros((4, 2)), np.array([0, 1, 1, 0]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss, _ = cross_entropy(np.array([[100.0, -100.0]]), np.array([0]))
    assert loss < 1e-12
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_cross_entropy_gradient(rng):
    logits = rng.standard_normal((6, 4))
    labels = rng.integers(0, 4, 6)
    _, grad = cross_entropy(logits, labels)
    softmax = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    onehot = np.eye(4)[labels]
    assert np.allclose(grad, (softmax - onehot) / 6)
    numeric = central_difference(lambda: cross_entropy(logits, labels)[0], logits)
    assert np.max(np.abs(grad - numeric)) <= 1e-6


def test_sgd_steps():
    p = {"w": np.array([1.0, -2.0])}
    assert np.array_equal(sgd_step(p, {"w": np.zeros(2)}, TrainConfig(lr=0.1, momentum=0.9), 0)["w"], p["w"])
    out = sgd_step(p, {"w": np.array([0.5, 1.0])}, TrainConfig(lr=0.1, momentum=0.0), 0)
    assert np.allclose(out["w"] - p["w"], [-0.05, -0.1])
    with pytest.raises(NumericalError):
        sgd_step(p, {"w": np.array([np.nan, 0.0])}, TrainConfig(), 0)


@pytest.mark.parametrize("epochs", [10, 9, 40])
def test_step_decay(epochs):
    cfg = TrainConfig(lr=0.1, epochs=epochs)
    half = math.ceil(epochs / 2)
    assert cfg.lr_at(half - 1) == pytest.approx(0.1)
    assert cfg.lr_at(half) == pytest.approx(0.01)
    assert cfg.lr_at(math.ceil(3 * epochs / 4)) == pytest.approx(0.001)
    assert TrainConfig(schedule="constant", epochs=epochs).lr_at(epochs - 1) == 0.1


def test_sgd_module_matches_functional(rng):
    lin = Linear(3, 2, rng=rng, dtype=F64)
    cfg = TrainConfig(lr=0.1, momentum=0.9)
    opt = SGD(lin, cfg)
    params = {n: p.copy() for n, p, _ in lin.named_parameters()}
    velocity = {}
    for step in range(3):
        grads = {n: rng.standard_normal(p.shape) for n, p in params.items()}
        for n, _, g in lin.named_parameters():
            g[...] = grads[n]
        opt.step(0)
        params = sgd_step(params, grads, cfg, 0, velocity)
    for n, p, _ in lin.named_parameters():
        assert np.allclose(p, params[n])


class Identity(Module):
    def forward(self, x):
        return x.copy()

    def backward(self, g):
        return g


def test_grad_check_identity_and_fault_injection(rng):
    assert grad_check(Identity(), (rng.standard_normal((3, 2)),)).max_rel_error == 0.0
    keys = active_keys(rng, 12)
    kmap = build_kernel_map(keys, keys)
    conv = SparseConv(2, 2, rng=rng, dtype=F64)
    x = rng.standard_normal((len(keys), 2))

    def broken_backward(g):
        gx = conv.backward(g)
        conv.grads["weight"] *= 1.05
        return gx

    report = grad_check(conv, (x, kmap), forward=lambda x, k: conv.forward(x, k), backward=broken_backward)
    assert not report.passed and report.max_rel_error > 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    state = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b.c": rng.standard_normal(5),
             "i": np.arange(4)}
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, state, {"epoch": 3})
    back, meta = load_checkpoint(p)
    assert meta == {"epoch": 3}
    for k, v in state.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)
    save_checkpoint(tmp_path / "m2.ckpt", state, {"epoch": 3})
    assert p.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
