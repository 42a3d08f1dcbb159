"""Training and evaluation loops shared by the CLI, scripts and tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import SegMetrics, majority_ceiling, miou
from .grid import PointCloud
from .nn import SGD, NumericalError, TrainConfig, cross_entropy
from .unet import UNet, UNetConfig

log = logging.getLogger(__name__)


@dataclass
class History:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)


def make_batches(clouds, batch_size: int):
    groups = [list(range(i, min(i + batch_size, len(clouds)))) for i in range(0, len(clouds), batch_size)]
    return [(tuple(g), PointCloud.concat([clouds[i] for i in g])) for g in groups]


def train_model(config: UNetConfig, tcfg: TrainConfig, clouds, model: UNet = None):
    """Train on ``clouds`` (one scene each) and return ``(model, history)``.

    Batches are fixed groups of consecutive scenes; their order is reshuffled
    every epoch from ``tcfg.seed``, so a run is a pure function of its inputs.
    """
    model = UNet(config) if model is None else model
    opt = SGD(model, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    batches = make_batches(clouds, tcfg.batch_size)
    geometries = {}
    hist = History()
    model.train()
    for epoch in range(tcfg.epochs):
        epoch_loss = 0.0
        for bi in rng.permutation(len(batches)):
            key, cloud = batches[bi]
            if key not in geometries:
                geometries[key] = model.geometry(cloud)
            logits, _ = model.forward(cloud, geometries[key])
            loss, grad = cross_entropy(logits, cloud.labels)
            if not np.isfinite(loss):
                raise NumericalError(f"loss became {loss} at epoch {epoch}")
            model.zero_grad()
            model.backward(grad)
            opt.step(epoch)
            epoch_loss += loss
        hist.losses.append(epoch_loss / max(len(batches), 1))
        hist.lrs.append(tcfg.lr_at(epoch))
        log.debug("epoch %d loss %.4f lr %.4g", epoch, hist.losses[-1], hist.lrs[-1])
    return model, hist


@dataclass
class EvalResult:
    metrics: SegMetrics
    ceiling: float
    predictions: list

    def to_json(self) -> dict:
        out = self.metrics.to_json()
        out["majority_ceiling"] = self.ceiling
        return out


def evaluate(model: UNet, clouds, num_classes: int = None) -> EvalResult:
    """Per-scene eval-mode predictions pooled into one metric."""
    model.eval()
    preds = []
    ncls = num_classes or model.config.num_classes
    spec = model.config.grid.at_level(model.config.s_out)
    for c in clouds:
        logits, _ = model.forward(c)
        preds.append(np.argmax(logits, axis=1))
    model.train()
    gt = np.concatenate([c.labels for c in clouds])
    metrics = miou(np.concatenate(preds), gt, ncls)
    ceiling = float(np.average([majority_ceiling(c, spec) for c in clouds], weights=[len(c) for c in clouds]))
    return EvalResult(metrics, ceiling, preds)
