"""Momentum SGD training loop, evaluation and per-iteration metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, batches
from .model import BackpropMode, BackwardContext, Network, softmax_xent
from .sparse import MacCounter
from .tensor import Rng

log = logging.getLogger(__name__)

# substream tags; dither draws are keyed (DITHER, iteration, node, layer)
SHUFFLE, DITHER = 1, 2


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 20
    mode: BackpropMode = field(default_factory=BackpropMode)
    seed: int = 0
    lr_decay: tuple[float, int] | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        if not self.lr_decay:
            return self.lr
        factor, every = self.lr_decay
        return self.lr * factor ** (epoch // every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = {k: v for k, v in asdict(self.mode).items() if v is not None}
        return d


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    loss: float
    sparsity: list[float]
    bitwidth: list[int]
    macs_performed: int
    macs_dense_equivalent: int
    nsd_overhead_ops: int
    test_accuracy: float | None = None


@dataclass
class TrainResult:
    model: Network
    records: list[MetricsRecord]
    epoch_accuracy: list[float]
    counter: MacCounter
    nsd_overhead_ops: int = 0


def apply_update(net: Network, grads: list[np.ndarray], cfg: TrainConfig, lr: float) -> None:
    """v <- mu v + (g + wd W); W <- W - lr v.  Decay applies to weights only."""
    for layer, gw, gb in zip(net.weighted, grads[::2], grads[1::2]):
        gw = gw + cfg.weight_decay * layer.W
        if layer.vel_W is None:
            layer.vel_W = np.zeros_like(layer.W)
            layer.vel_b = np.zeros_like(layer.b)
        layer.vel_W = cfg.momentum * layer.vel_W + gw
        layer.vel_b = cfg.momentum * layer.vel_b + gb
        layer.W = layer.W - lr * layer.vel_W
        layer.b = layer.b - lr * layer.vel_b


def train_step(net: Network, x: np.ndarray, y: np.ndarray, mode: BackpropMode,
               rng: Rng | None, counter: MacCounter, keep_grads: bool = False
               ) -> tuple[float, BackwardContext]:
    logits = net.forward(x, mode)
    loss, dlogits = softmax_xent(logits, y)
    if not math.isfinite(loss):
        raise DivergenceError(f"loss became {loss}")
    ctx = net.backward(dlogits, mode, rng, counter, keep_grads)
    return loss, ctx


def evaluate(net: Network, ds: Dataset, batch_size: int = 1000) -> float:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(ds), batch_size):
        xb = ds.images[start:start + batch_size]
        correct += int(np.sum(net.predict(xb) == ds.labels[start:start + batch_size]))
    return correct / len(ds)


def train(net: Network, data: Dataset, cfg: TrainConfig, test_data: Dataset | None = None,
          sink: Callable[[MetricsRecord], None] | None = None,
          on_step: Callable[[MetricsRecord, BackwardContext], None] | None = None,
          max_iterations: int | None = None) -> TrainResult:
    root = Rng(cfg.seed)
    counter = MacCounter()
    records: list[MetricsRecord] = []
    accs: list[float] = []
    nsd_ops = 0
    it = 0
    for epoch in range(cfg.epochs):
        if max_iterations is not None and it >= max_iterations:
            break
        lr = cfg.lr_at(epoch)
        for xb, yb in batches(data, cfg.batch_size, root.substream(SHUFFLE, epoch)):
            if max_iterations is not None and it >= max_iterations:
                break
            loss, ctx = train_step(net, xb, yb, cfg.mode, root.substream(DITHER, it, 0),
                                   counter, keep_grads=on_step is not None)
            apply_update(net, net.gradients(), cfg, lr)
            nsd_ops += ctx.nsd_ops
            rec = MetricsRecord(it, epoch, loss, [s.sparsity for s in ctx.stats],
                                [s.bitwidth for s in ctx.stats], counter.macs_performed,
                                counter.macs_dense_equivalent, nsd_ops)
            records.append(rec)
            if sink is not None:
                sink(rec)
            if on_step is not None:
                on_step(rec, ctx)
            it += 1
        if test_data is not None and records:
            acc = evaluate(net, test_data)
            accs.append(acc)
            records[-1].test_accuracy = acc
            log.info("epoch %d  loss %.4f  test acc %.4f", epoch, records[-1].loss, acc)
    return TrainResult(net, records, accs, counter, nsd_ops)


def sparsity_summary(records: list[MetricsRecord]) -> dict:
    """Mean gradient sparsity per layer and over all layers and iterations."""
    if not records:
        raise ValueError("no records")
    per_layer = np.array([r.sparsity for r in records], dtype=np.float64)
    return {"per_layer": per_layer.mean(axis=0).tolist(), "global": float(per_layer.mean())}


def worst_bitwidth(records: list[MetricsRecord]) -> int:
    return max((max(r.bitwidth) for r in records if r.bitwidth), default=0)
