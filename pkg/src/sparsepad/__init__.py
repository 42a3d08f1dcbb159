"""Interpolation-aware padding for sparse-voxel CNNs, in NumPy."""
from .data import SegMetrics, SynthTask, majority_ceiling, miou, synth_disjoint_pair, synth_sphere_octant
from .data import synth_subvoxel_checker
from .grid import GridSpec, PointCloud, SparseTensor, VoxelKey, voxelize
from .interp import InterpMode, MissingCornerError, MissingVoxelError, interpolate, interpolate_batch
from .nn import TrainConfig, grad_check
from .padding import PaddingReport, PaddingScheme, pad, pad_interp_aware, pad_octree, pad_ring, padding_stats
from .sparseconv import KernelMap, build_kernel_map
from .unet import UNet, UNetConfig, build_unet, predict_points, unet_forward

__version__ = "0.1.0"
