"""Sparse-voxel U-Net producing per-point logits.

Encoder: stem conv at level 0, then per level a stride-2 down conv and
resblocks. Decoder: transposed up conv onto the recorded encoder key set,
skip concatenation and resblocks, stopping at the output level ``s_out``.
Voxel features at ``s_out`` are interpolated to the points and passed
through a two-layer point head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .grid import GridSpec, PointCloud, SparseTensor, downsample_keys, pack_keys, unique_keys, voxelize
from .interp import InterpContext, InterpMode, interp_context
from .nn import BatchNorm, Linear, Module, ReLU, ResBlock, SparseConv
from .padding import PaddingScheme, padded_key_set
from .sparseconv import build_kernel_map

SCANNET_BLOCKS = (2, 3, 4, 6, 2, 2, 2, 2)


@dataclass
class UNetConfig:
    levels: int = 5
    channels: tuple = (16, 24, 32, 48, 64)
    # encoder stages at levels 1..L-1, then decoder stages at levels L-2..0
    blocks: tuple = None
    in_channels: int = 2
    num_classes: int = 2
    s_out: int = 0
    padding: str = "zero"
    placement: str = "output"
    interp: str = "nearest"
    head_hidden: int = 32
    voxel_size: float = 1.0
    origin: tuple = (0.0, 0.0, 0.0)
    feature_mode: str = "occupancy"
    norm_padded: bool = True
    precision: int = 32
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.origin = tuple(float(c) for c in self.origin)
        if self.blocks is None:
            self.blocks = (1,) * (2 * (self.levels - 1))
        self.blocks = tuple(int(b) for b in self.blocks)
        if self.levels < 1:
            raise ValueError("need at least one level")
        if len(self.channels) != self.levels:
            raise ValueError(f"{self.levels} levels need {self.levels} channel widths, got {len(self.channels)}")
        if len(self.blocks) != 2 * (self.levels - 1):
            raise ValueError(f"blocks must list {2 * (self.levels - 1)} stage counts")
        if not 0 <= self.s_out < self.levels:
            raise ValueError(f"s_out must lie in [0, {self.levels})")
        if self.placement not in ("output", "all"):
            raise ValueError("placement must be 'output' or 'all'")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        PaddingScheme.parse(self.padding)
        InterpMode.parse(self.interp)

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.origin, self.voxel_size, 0)

    @property
    def scheme(self) -> PaddingScheme:
        return PaddingScheme.parse(self.padding)

    @property
    def mode(self) -> InterpMode:
        return InterpMode.parse(self.interp)

    def padded_levels(self):
        if self.scheme.kind == "zero":
            return set()
        return set(range(self.levels)) if self.placement == "all" else {self.s_out}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Geometry:
    """Everything about a forward pass that depends only on the point cloud."""

    specs: list
    keys: list
    padded: list
    input_features: np.ndarray
    sub_maps: list
    down_maps: dict
    up_maps: dict
    interp: InterpContext
    norm_masks: list


@dataclass
class ForwardTrace:
    keys: list
    padded: list
    skips: list = field(default_factory=list)
    output_features: np.ndarray = None
    point_features: np.ndarray = None
    interp: InterpContext = None


def _coarse_flags(fine_keys, fine_padded, coarse_keys):
    # a coarse voxel counts as original if any child is original
    parents = pack_keys(downsample_keys(fine_keys[~fine_padded]))
    return ~np.isin(pack_keys(coarse_keys), parents)


def build_geometry(config: UNetConfig, cloud: PointCloud) -> Geometry:
    if len(cloud) == 0:
        raise ValueError("empty point cloud")
    base = config.grid
    t0 = voxelize(cloud, base, config.feature_mode, dtype=config.dtype)
    if t0.num_channels != config.in_channels:
        raise ValueError(f"voxelized features have {t0.num_channels} channels, config expects {config.in_channels}")
    scheme = config.scheme
    pad_at = config.padded_levels()
    specs, keys, padded = [], [], []
    for level in range(config.levels):
        spec = base.at_level(level)
        if level == 0:
            k, flags = t0.keys, np.zeros(len(t0), bool)
        else:
            k = unique_keys(downsample_keys(keys[-1]))
            flags = _coarse_flags(keys[-1], padded[-1], k)
        if level in pad_at:
            k_new, added = padded_key_set(k, scheme, spec, cloud)
            old = np.isin(pack_keys(k_new), pack_keys(k))
            new_flags = np.ones(len(k_new), bool)
            new_flags[old] = flags[np.searchsorted(pack_keys(k), pack_keys(k_new[old]))]
            k, flags = k_new, new_flags
        specs.append(spec)
        keys.append(k)
        padded.append(flags)

    feats = np.zeros((len(keys[0]), t0.num_channels), dtype=config.dtype)
    rows = np.searchsorted(pack_keys(keys[0]), t0.codes)
    feats[rows] = t0.features

    sub_maps = [build_kernel_map(keys[l], keys[l], 3, 1) for l in range(config.levels)]
    down_maps = {l: build_kernel_map(keys[l - 1], keys[l], 2, 2) for l in range(1, config.levels)}
    up_maps = {l: build_kernel_map(keys[l + 1], keys[l], 2, 2, transposed=True)
               for l in range(config.s_out, config.levels - 1)}

    out_t = SparseTensor(specs[config.s_out], keys[config.s_out],
                         np.zeros((len(keys[config.s_out]), 0)), padded[config.s_out], canonical=True)
    ctx = interp_context(out_t, cloud.points, config.mode, cloud.batch_index)
    masks = [None if config.norm_padded else ~p for p in padded]
    return Geometry(specs, keys, padded, feats, sub_maps, down_maps, up_maps, ctx, masks)


class UNet(Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        dt = config.dtype
        ch, L = config.channels, config.levels
        enc_blocks, dec_blocks = config.blocks[:L - 1], config.blocks[L - 1:]

        self.stem = self.add("stem", SparseConv(config.in_channels, ch[0], 3, bias=False, rng=rng, dtype=dt))
        self.stem_norm = self.add("stem_norm", BatchNorm(ch[0], dtype=dt))
        self.stem_relu = ReLU()
        self.down, self.down_norm, self.down_relu, self.enc = {}, {}, {}, {}
        for l in range(1, L):
            self.down[l] = self.add(f"down{l}", SparseConv(ch[l - 1], ch[l], 2, 2, bias=False, rng=rng, dtype=dt))
            self.down_norm[l] = self.add(f"down{l}_norm", BatchNorm(ch[l], dtype=dt))
            self.down_relu[l] = ReLU()
            self.enc[l] = [self.add(f"enc{l}_{b}", ResBlock(ch[l], ch[l], rng=rng, dtype=dt))
                           for b in range(enc_blocks[l - 1])]
        # decoder stage for level l uses dec_blocks[L - 2 - l]; stages below s_out are dropped
        self.up, self.up_norm, self.up_relu, self.dec = {}, {}, {}, {}
        for l in range(L - 2, config.s_out - 1, -1):
            self.up[l] = self.add(f"up{l}", SparseConv(ch[l + 1], ch[l], 2, 2, transposed=True, bias=False, rng=rng, dtype=dt))
            self.up_norm[l] = self.add(f"up{l}_norm", BatchNorm(ch[l], dtype=dt))
            self.up_relu[l] = ReLU()
            n = max(1, dec_blocks[L - 2 - l])
            self.dec[l] = [self.add(f"dec{l}_{b}", ResBlock(2 * ch[l] if b == 0 else ch[l], ch[l], rng=rng, dtype=dt))
                           for b in range(n)]
        out_ch = ch[config.s_out]
        self.fc1 = self.add("fc1", Linear(out_ch, config.head_hidden, rng=rng, dtype=dt))
        self.fc_relu = ReLU()
        self.fc2 = self.add("fc2", Linear(config.head_hidden, config.num_classes, rng=rng, dtype=dt))

    def geometry(self, cloud: PointCloud) -> Geometry:
        return build_geometry(self.config, cloud)

    def forward(self, cloud, geometry: Geometry = None):
        """Per-point logits and the :class:`ForwardTrace` of the pass."""
        geo = geometry if geometry is not None else build_geometry(self.config, cloud)
        cfg, L = self.config, self.config.levels
        self._geo = geo
        m = geo.norm_masks
        x = self.stem_relu.forward(self.stem_norm.forward(self.stem.forward(geo.input_features, geo.sub_maps[0]), m[0]))
        skips = [x]
        for l in range(1, L):
            x = self.down[l].forward(x, geo.down_maps[l])
            x = self.down_relu[l].forward(self.down_norm[l].forward(x, m[l]))
            for block in self.enc[l]:
                x = block.forward(x, geo.sub_maps[l], m[l])
            skips.append(x)
        self._skip_channels = {}
        for l in range(L - 2, cfg.s_out - 1, -1):
            x = self.up[l].forward(x, geo.up_maps[l])
            x = self.up_relu[l].forward(self.up_norm[l].forward(x, m[l]))
            self._skip_channels[l] = x.shape[1]
            x = np.concatenate([x, skips[l]], axis=1)
            for block in self.dec[l]:
                x = block.forward(x, geo.sub_maps[l], m[l])
        voxel_out = x
        pts = geo.interp.forward(voxel_out)
        h = self.fc_relu.forward(self.fc1.forward(pts))
        logits = self.fc2.forward(h)
        trace = ForwardTrace(geo.keys, geo.padded, skips, voxel_out, pts, geo.interp)
        return logits, trace

    def backward(self, grad_logits):
        cfg, L, geo = self.config, self.config.levels, self._geo
        g = self.fc1.backward(self.fc_relu.backward(self.fc2.backward(grad_logits)))
        g = geo.interp.backward(g)
        skip_grads = {}
        for l in range(cfg.s_out, L - 1):
            for block in reversed(self.dec[l]):
                g = block.backward(g)
            c = self._skip_channels[l]
            g, skip_grads[l] = g[:, :c], g[:, c:]
            g = self.up_norm[l].backward(self.up_relu[l].backward(g))
            g = self.up[l].backward(g)
        for l in range(L - 1, 0, -1):
            if l in skip_grads:
                g = g + skip_grads[l]
            for block in reversed(self.enc[l]):
                g = block.backward(g)
            g = self.down_norm[l].backward(self.down_relu[l].backward(g))
            g = self.down[l].backward(g)
        if 0 in skip_grads:
            g = g + skip_grads[0]
        g = self.stem_norm.backward(self.stem_relu.backward(g))
        return self.stem.backward(g)


def build_unet(config: UNetConfig) -> UNet:
    return UNet(config)


def unet_forward(model: UNet, cloud: PointCloud, geometry: Geometry = None):
    return model.forward(cloud, geometry)


def predict_points(model: UNet, cloud: PointCloud, geometry: Geometry = None) -> np.ndarray:
    """Argmax labels; ties go to the lowest class index."""
    logits, _ = model.forward(cloud, geometry)
    return np.argmax(logits, axis=1)
