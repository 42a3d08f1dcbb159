"""Synthetic point-cloud tasks, segmentation metrics and dataset IO."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .grid import GridSpec, PointCloud, containing_keys, pack_keys, read_points, write_points


def checker_labels(points, s_label: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Parity of the sum of per-axis cell indices at cell size ``s_label``."""
    u = (np.asarray(points, dtype=np.float64) - np.asarray(origin)) / s_label
    return (np.floor(u).astype(np.int64).sum(axis=1) % 2).astype(np.int64)


def checker_cells(cells=(6, 6, 2), spacing: int = 3) -> np.ndarray:
    """Voxel keys of the occupied cells: a lattice with ``spacing - 1`` empty voxels between cells."""
    ranges = [np.arange(c) * spacing for c in cells]
    return np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, 3)


def synth_subvoxel_checker(n: int, s_label: float = 0.5, seed: int = 0, voxel_size: float = None,
                           cells=(6, 6, 2), spacing: int = 3, noise: float = 0.0) -> PointCloud:
    """Points whose labels alternate at half-voxel scale.

    The slab is a lattice of isolated voxel-sized cells (``spacing`` voxels
    apart, so no two cells touch); points are uniform inside randomly chosen
    cells. With ``voxel_size = 2 * s_label`` every voxel holds both classes in
    equal volume. ``noise`` is a label-flip probability.
    """
    s = 2 * s_label if voxel_size is None else voxel_size
    if not s_label < s:
        raise ValueError("label cell size must be smaller than the voxel size")
    rng = np.random.default_rng(seed)
    sites = checker_cells(cells, spacing)
    pick = rng.integers(0, len(sites), size=n)
    pts = (sites[pick] + rng.random((n, 3))) * s
    labels = checker_labels(pts, s_label)
    if noise > 0:
        flip = rng.random(n) < noise
        labels = np.where(flip, 1 - labels, labels)
    return PointCloud(pts, labels=labels)


def octant_labels(points, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Octant index with bit order 4*[x >= cx] + 2*[y >= cy] + [z >= cz]."""
    d = np.asarray(points) - np.asarray(center)
    bits = (d >= 0).astype(np.int64)
    return 4 * bits[:, 0] + 2 * bits[:, 1] + bits[:, 2]


def synth_sphere_octant(n: int, radius: float = 1.0, center=(0.0, 0.0, 0.0), noise: float = 0.0,
                        seed: int = 0) -> PointCloud:
    """Uniform points on a sphere surface labelled by octant (8 classes)."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = radius + noise * rng.standard_normal((n, 1)) if noise > 0 else radius
    pts = np.asarray(center) + r * v
    return PointCloud(pts, labels=octant_labels(pts, center))


def synth_disjoint_pair(voxel_size: float = 1.0, seed: int = 0) -> PointCloud:
    """Two voxel-center points two voxels apart plus one trigger point.

    The trigger sits in the upper voxel, on the side facing the gap, so its
    interpolation corners include the empty voxel between the pair.
    """
    s = voxel_size
    pts = np.array([[0.5, 0.5, 0.5], [2.5, 0.5, 0.5], [2.2, 0.5, 0.5]]) * s
    return PointCloud(pts, labels=np.array([0, 1, 1]))


@dataclass(frozen=True)
class SynthTask:
    variant: str = "checker"
    n: int = 2000
    noise: float = 0.0
    seed: int = 0
    s_label: float = 0.5

    def generate(self) -> PointCloud:
        if self.variant in ("checker", "subvoxel_checker"):
            return synth_subvoxel_checker(self.n, self.s_label, self.seed, noise=self.noise)
        if self.variant in ("sphere", "sphere_octant"):
            return synth_sphere_octant(self.n, noise=self.noise, seed=self.seed)
        if self.variant in ("pair", "disjoint_pair"):
            return synth_disjoint_pair(seed=self.seed)
        raise ValueError(f"unknown synthetic task {self.variant!r}")


@dataclass
class SegMetrics:
    per_class_iou: dict
    miou: float
    accuracy: float

    def to_json(self) -> dict:
        return {"version": 1, "miou": self.miou, "accuracy": self.accuracy,
                "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()}}


def miou(pred, gt, num_classes: int) -> SegMetrics:
    """Pooled per-class IoU over points; classes absent from both sides are skipped."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth lengths differ")
    ious = {}
    for c in range(num_classes):
        p, g = pred == c, gt == c
        union = np.count_nonzero(p | g)
        if union:
            ious[c] = np.count_nonzero(p & g) / union
    mean = float(np.mean(list(ious.values()))) if ious else 0.0
    acc = float(np.mean(pred == gt)) if len(gt) else 0.0
    return SegMetrics(ious, mean, acc)


def majority_ceiling(cloud: PointCloud, spec: GridSpec) -> float:
    """Best accuracy reachable by any predictor constant within each voxel."""
    if cloud.labels is None:
        raise ValueError("majority ceiling needs labelled points")
    codes = pack_keys(containing_keys(cloud.points, spec, cloud.batch_index))
    _, vox = np.unique(codes, return_inverse=True)
    vox = vox.reshape(-1)
    ncls = int(cloud.labels.max()) + 1
    counts = np.zeros((vox.max() + 1, ncls), dtype=np.int64)
    np.add.at(counts, (vox, cloud.labels), 1)
    return float(counts.max(axis=1).sum() / len(cloud))


def checker_dataset(n_points: int, scenes: int, s_label: float = 0.5, seed: int = 0, **kw) -> list:
    """Split ``n_points`` over ``scenes`` independently seeded checker clouds."""
    per = np.full(scenes, n_points // scenes)
    per[: n_points % scenes] += 1
    ss = np.random.SeedSequence(seed)
    return [synth_subvoxel_checker(int(k), s_label, int(child.generate_state(1)[0]), **kw)
            for k, child in zip(per, ss.spawn(scenes))]


def save_dataset(directory, clouds, meta: dict = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, c in enumerate(clouds):
        name = f"scene_{i:04d}.xyz"
        write_points(d / name, c)
        names.append(name)
    (d / "dataset.json").write_text(json.dumps({"version": 1, "scenes": names, "meta": meta or {}},
                                               indent=2, sort_keys=True))


def load_dataset(directory) -> list:
    d = Path(directory)
    index = d / "dataset.json"
    if index.exists():
        names = json.loads(index.read_text())["scenes"]
    else:
        names = sorted(p.name for p in d.glob("*.xyz"))
    if not names:
        raise FileNotFoundError(f"{directory}: no scenes")
    return [read_points(d / n) for n in names]


def task_dict(task: SynthTask) -> dict:
    return asdict(task)
