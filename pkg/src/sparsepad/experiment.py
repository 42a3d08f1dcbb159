"""Run configuration, config files and the end-to-end train/eval pipeline.

Config files are flat ``section.key = value`` lines under a version header::

    # sparsepad-config v1
    model.levels = 3
    model.channels = 16, 24, 32
    model.padding = interp
    train.lr = 0.05
    data.train_points = 20000

Sections are ``model`` (:class:`UNetConfig`), ``train`` (:class:`TrainConfig`)
and ``data`` (:class:`DataConfig`). Values are Python literals, comma lists,
``true``/``false``/``none`` or bare strings. Everything after ``#`` is a
comment.
"""
from __future__ import annotations

import ast
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import checker_dataset, load_dataset, synth_sphere_octant, synth_subvoxel_checker
from .grid import downsample_keys, unique_keys
from .nn import (
    BatchNorm,
    Linear,
    ReLU,
    ResBlock,
    SparseConv,
    TrainConfig,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .sparseconv import build_kernel_map
from .train import EvalResult, History, evaluate, train_model
from .unet import UNet, UNetConfig

CONFIG_HEADER = "# sparsepad-config v1"
METRICS_VERSION = 1


@dataclass
class DataConfig:
    task: str = "checker"
    train_points: int = 20000
    test_points: int = 5000
    train_scenes: int = 10
    test_scenes: int = 2
    s_label: float = 0.5
    noise: float = 0.0
    # the test split uses seed + 1
    seed: int = 1
    train_dir: str = None
    test_dir: str = None

    def __post_init__(self):
        if self.task not in ("checker", "sphere"):
            raise ValueError(f"unknown training task {self.task!r}")


def experiment_model(**kw) -> UNetConfig:
    """The 3-level U-Net used by the checker experiments."""
    base = dict(levels=3, channels=(16, 24, 32), head_hidden=32)
    base.update(kw)
    return UNetConfig(**base)


@dataclass
class RunConfig:
    model: UNetConfig = field(default_factory=experiment_model)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05, epochs=60, batch_size=2))
    data: DataConfig = field(default_factory=DataConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with model init and batch order reseeded; data stays fixed."""
        return RunConfig(replace(self.model, seed=seed), replace(self.train, seed=seed), self.data)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": asdict(self.train), "data": asdict(self.data)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, kind in SECTIONS.items():
            values = d.get(name, {})
            known = {f.name for f in fields(kind)}
            bad = set(values) - known
            if bad:
                raise ValueError(f"unknown {name} keys: {sorted(bad)}")
            parts[name] = kind(**values)
        return cls(**parts)

    def updated(self, overrides: dict) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in d or not key:
                raise ValueError(f"bad config key {dotted!r}; expected section.key")
            d[section][key] = value
        return RunConfig.from_dict(d)


SECTIONS = {"model": UNetConfig, "train": TrainConfig, "data": DataConfig}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value) + ("," if len(value) == 1 else "")
    return str(value)


def parse_config_text(text: str) -> dict:
    """``section.key = value`` lines to a flat override dict."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != CONFIG_HEADER:
        raise ValueError(f"config must start with {CONFIG_HEADER!r}")
    out = {}
    for no, line in enumerate(lines[1:], start=2):
        line = line.partition("#")[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {no}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ValueError(f"line {no}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def format_config(rc: RunConfig) -> str:
    lines = [CONFIG_HEADER]
    for section, values in rc.to_dict().items():
        lines += [f"{section}.{k} = {format_value(v)}" for k, v in values.items()]
    return "\n".join(lines) + "\n"


def load_config(path, base: RunConfig = None) -> RunConfig:
    return (base or RunConfig()).updated(parse_config_text(Path(path).read_text()))


def _synth_split(dc: DataConfig, model: UNetConfig, points: int, scenes: int, seed: int) -> list:
    if dc.task == "checker":
        return checker_dataset(points, scenes, dc.s_label, seed, voxel_size=model.voxel_size, noise=dc.noise)
    per = np.full(scenes, points // scenes)
    per[: points % scenes] += 1
    seeds = np.random.SeedSequence(seed).spawn(scenes)
    return [synth_sphere_octant(int(k), noise=dc.noise, seed=int(s.generate_state(1)[0]))
            for k, s in zip(per, seeds)]


def load_data(rc: RunConfig):
    """``(train_clouds, test_clouds)`` from directories or the synthetic task."""
    dc = rc.data
    if dc.train_dir:
        train = load_dataset(dc.train_dir)
    else:
        train = _synth_split(dc, rc.model, dc.train_points, dc.train_scenes, dc.seed)
    if dc.test_dir:
        test = load_dataset(dc.test_dir)
    else:
        test = _synth_split(dc, rc.model, dc.test_points, dc.test_scenes, dc.seed + 1)
    return train, test


@dataclass
class RunResult:
    config: RunConfig
    model: UNet
    history: History
    test: EvalResult

    def metrics(self) -> dict:
        out = {"version": METRICS_VERSION, "seed": self.config.model.seed,
               "losses": [float(x) for x in self.history.losses]}
        out["test"] = self.test.to_json()
        return out


def run(rc: RunConfig, data=None) -> RunResult:
    """Train from the seeded init and evaluate on the test split."""
    train, test = load_data(rc) if data is None else data
    model, hist = train_model(rc.model, rc.train, train)
    return RunResult(rc, model, hist, evaluate(model, test))


def save_run(result: RunResult, path):
    save_checkpoint(path, result.model.state_dict(), {"config": result.config.to_dict()})


def load_run_model(path):
    """Rebuild a model and its run config from a checkpoint."""
    state, meta = load_checkpoint(path)
    if "config" not in meta:
        raise ValueError(f"{path}: checkpoint carries no run config")
    rc = RunConfig.from_dict(meta["config"])
    model = UNet(rc.model)
    model.load_state_dict(state)
    return model, rc


def summarize(values) -> dict:
    """Mean, sample standard deviation and mean absolute deviation."""
    values = [float(v) for v in values]
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    mad = statistics.fmean(abs(v - mean) for v in values)
    return {"mean": mean, "std": std, "mean_abs_dev": mad, "values": values}


def _keys(rng, n, extent):
    ijk = rng.integers(0, extent, size=(n, 3))
    return unique_keys(np.column_stack([np.zeros(n, dtype=np.int64), ijk]))


def _faulty(mod, backward):
    """Backward that inflates one gradient by 5%: the first parameter's, else the input's."""
    def wrapped(g):
        gx = backward(g)
        first = next(mod.named_parameters(), None)
        if first is None:
            return gx * 1.05
        first[2][...] *= 1.05
        return gx
    return wrapped


def gradcheck_suite(seed: int = 0, inject_bug: bool = False, tolerance: float = 1e-4) -> dict:
    """64-bit gradient checks of every layer type plus a 2-level U-Net."""
    rng = np.random.default_rng(seed)
    f64 = np.float64
    fine = _keys(rng, 20, 4)
    coarse = unique_keys(downsample_keys(fine))
    cases = {}

    conv = SparseConv(3, 2, rng=rng, dtype=f64)
    cases["conv_k3"] = (conv, (rng.standard_normal((len(fine), 3)), build_kernel_map(fine, fine)))
    down = SparseConv(3, 2, 2, 2, rng=rng, dtype=f64)
    cases["down_k2s2"] = (down, (rng.standard_normal((len(fine), 3)), build_kernel_map(fine, coarse, 2, 2)))
    up = SparseConv(3, 2, 2, 2, transposed=True, rng=rng, dtype=f64)
    cases["up_k2s2"] = (up, (rng.standard_normal((len(coarse), 3)),
                             build_kernel_map(coarse, fine, 2, 2, transposed=True)))
    cases["linear"] = (Linear(3, 2, rng=rng, dtype=f64), (rng.standard_normal((7, 3)),))
    cases["relu"] = (ReLU(), (rng.standard_normal((9, 3)),))
    bn = BatchNorm(3, dtype=f64)
    bn.params["scale"][...] = rng.uniform(0.5, 2.0, 3)
    cases["batchnorm"] = (bn, (rng.standard_normal((12, 3)),))
    block = ResBlock(2, 3, rng=rng, dtype=f64)
    cases["resblock"] = (block, (rng.standard_normal((len(fine), 2)), build_kernel_map(fine, fine)))

    cloud = synth_subvoxel_checker(60, 0.5, seed=seed, cells=(2, 2, 1))
    net = UNet(UNetConfig(levels=2, channels=(3, 4), head_hidden=5, padding="interp", interp="strict",
                          precision=64, seed=seed))
    cases["unet2"] = (net, (cloud, net.geometry(cloud)))

    reports = {}
    for name, (mod, inputs) in cases.items():
        fwd = (lambda c, g, m=mod: m.forward(c, g)[0]) if name == "unet2" else (lambda *a, m=mod: m.forward(*a))
        bwd = _faulty(mod, mod.backward) if inject_bug else mod.backward
        # input gradients too wherever the input is a plain array
        reports[name] = grad_check(mod, inputs, tolerance=tolerance, forward=fwd, backward=bwd, seed=seed,
                                   check_inputs=name in ("linear", "relu", "batchnorm"))
    return reports


def gradcheck_passed(reports: dict) -> bool:
    return all(r.passed for r in reports.values())

