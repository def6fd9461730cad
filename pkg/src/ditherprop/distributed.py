"""In-process synchronous data-parallel SGD with a parameter server.

Every node holds a full model replica and processes one sample per round
with its own dither substream. The server averages the uploaded gradients
in node-id order, updates its master copy and broadcasts the averaged
gradient; nodes apply the identical update, and replica hashes are checked
against the master afterwards.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset
from .model import BackpropMode, Network
from .sparse import MacCounter
from .trainer import DITHER, SHUFFLE, TrainConfig, apply_update, evaluate, train_step
from .tensor import Rng

log = logging.getLogger(__name__)


class ReplicaDivergenceError(RuntimeError):
    pass


@dataclass
class GradientUpload:
    node_id: int
    round: int
    grads: list[np.ndarray]
    nonzeros: int


@dataclass
class ParameterBroadcast:
    round: int
    avg_grads: list[np.ndarray]


@dataclass
class NodeState:
    node_id: int
    model: Network
    sparsity: list[list[float]] = field(default_factory=list)
    bitwidth: list[list[int]] = field(default_factory=list)
    counter: MacCounter = field(default_factory=MacCounter)
    nsd_ops: int = 0


@dataclass
class ServerState:
    model: Network
    round: int = 0
    comm_scalars_sent: int = 0
    comm_per_round: list[int] = field(default_factory=list)


def param_hash(net: Network) -> str:
    h = hashlib.blake2b(digest_size=16)
    for p in net.parameters():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def make_cluster(net: Network, n_nodes: int) -> tuple[list[NodeState], ServerState]:
    if n_nodes < 1:
        raise ValueError("need at least one node")
    nodes = [NodeState(i, copy.deepcopy(net)) for i in range(n_nodes)]
    return nodes, ServerState(copy.deepcopy(net))


def node_step(node: NodeState, x: np.ndarray, y: np.ndarray, mode: BackpropMode,
              rng: Rng, rnd: int) -> GradientUpload:
    _, ctx = train_step(node.model, x, y, mode, rng, node.counter)
    node.sparsity.append([s.sparsity for s in ctx.stats])
    node.bitwidth.append([s.bitwidth for s in ctx.stats])
    node.nsd_ops += ctx.nsd_ops
    grads = [g.copy() for g in node.model.gradients()]
    return GradientUpload(node.node_id, rnd, grads, sum(int(np.count_nonzero(g)) for g in grads))


def average(uploads: list[GradientUpload]) -> list[np.ndarray]:
    """Elementwise mean via a pairwise tree sum over node ids.

    The fixed tree makes the result independent of arrival order, and for
    a power-of-two node count identical uploads average back exactly.
    """
    level = [u.grads for u in sorted(uploads, key=lambda u: u.node_id)]
    while len(level) > 1:
        nxt = [[a + b for a, b in zip(level[i], level[i + 1])] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return [t / len(uploads) for t in level[0]]


def run_round(nodes: list[NodeState], server: ServerState, x: np.ndarray, y: np.ndarray,
              cfg: TrainConfig, lr: float | None = None, verify: bool = True
              ) -> ParameterBroadcast:
    """One synchronous round; sample ``i`` of ``x`` goes to node ``i``.

    A short final round uses only the first ``len(x)`` nodes.
    """
    if len(x) == 0 or len(x) > len(nodes):
        raise ValueError(f"round needs 1..{len(nodes)} samples, got {len(x)}")
    lr = cfg.lr if lr is None else lr
    root = Rng(cfg.seed)
    uploads = [node_step(node, x[i:i + 1], y[i:i + 1], cfg.mode,
                         root.substream(DITHER, server.round, node.node_id), server.round)
               for i, node in enumerate(nodes[:len(x)])]
    msg = ParameterBroadcast(server.round, average(uploads))
    sent = sum(u.nonzeros for u in uploads)
    server.comm_scalars_sent += sent
    server.comm_per_round.append(sent)
    apply_update(server.model, msg.avg_grads, cfg, lr)
    for node in nodes:
        apply_update(node.model, msg.avg_grads, cfg, lr)
    if verify:
        ref = param_hash(server.model)
        for node in nodes:
            if param_hash(node.model) != ref:
                raise ReplicaDivergenceError(f"node {node.node_id} diverged after round {server.round}")
    server.round += 1
    return msg


def parse_schedule(text: str | float | dict | Callable) -> Callable[[int], float]:
    """``"sqrt:3"`` -> 3*sqrt(N), ``"const:3"`` or ``3`` -> 3, ``{"1": 2, ...}`` -> lookup."""
    if callable(text):
        return text
    if isinstance(text, (int, float)):
        return lambda n: float(text)
    if isinstance(text, dict):
        table = {int(k): float(v) for k, v in text.items()}
        return lambda n: table[n]
    kind, _, val = str(text).partition(":")
    if kind == "sqrt":
        s0 = float(val)
        return lambda n: s0 * math.sqrt(n)
    if kind == "const":
        s0 = float(val)
        return lambda n: s0
    try:
        s0 = float(text)
    except ValueError:
        raise ValueError(f"bad s schedule {text!r}; use sqrt:S0, const:S0 or a number") from None
    return lambda n: s0


@dataclass
class SweepPoint:
    n_nodes: int
    s: float
    accuracy: float
    mean_sparsity: float
    worst_bitwidth: int
    comm_scalars: int
    macs_performed: int
    macs_dense_equivalent: int
    rounds: int


def train_distributed(net: Network, data: Dataset, cfg: TrainConfig, n_nodes: int,
                      max_rounds: int | None = None, verify: bool = True
                      ) -> tuple[list[NodeState], ServerState]:
    nodes, server = make_cluster(net, n_nodes)
    root = Rng(cfg.seed)
    for epoch in range(cfg.epochs):
        order = root.substream(SHUFFLE, epoch).permutation(len(data))
        lr = cfg.lr_at(epoch)
        for start in range(0, len(data), n_nodes):
            if max_rounds is not None and server.round >= max_rounds:
                return nodes, server
            idx = order[start:start + n_nodes]
            run_round(nodes, server, data.images[idx], data.labels[idx], cfg, lr, verify)
    return nodes, server


def scaling_sweep(model_fn: Callable[[], Network], data: Dataset, test_data: Dataset,
                  n_values: list[int], s_schedule, cfg: TrainConfig,
                  max_rounds: int | None = None, verify: bool = True) -> list[SweepPoint]:
    if not n_values:
        raise ValueError("n_values is empty")
    sched = parse_schedule(s_schedule)
    out = []
    for n in n_values:
        s = sched(n)
        variant = cfg.mode.variant if cfg.mode.dithered else "dithered"
        run_cfg = copy.copy(cfg)
        run_cfg.mode = BackpropMode(variant, s=s, sigma_floor=cfg.mode.sigma_floor)
        nodes, server = train_distributed(model_fn(), data, run_cfg, n, max_rounds, verify)
        sp = [v for node in nodes for row in node.sparsity for v in row]
        bw = [v for node in nodes for row in node.bitwidth for v in row]
        ctr = MacCounter()
        for node in nodes:
            ctr.merge(node.counter)
        acc = evaluate(server.model, test_data)
        log.info("N=%d s=%.3g acc %.4f sparsity %.4f", n, s, acc, float(np.mean(sp)))
        out.append(SweepPoint(n, s, acc, float(np.mean(sp)), max(bw, default=0),
                              server.comm_scalars_sent, ctr.macs_performed,
                              ctr.macs_dense_equivalent, server.round))
    return out


def noise_variance(net: Network, x: np.ndarray, y: np.ndarray, mode: BackpropMode,
                   n_nodes: int, reps: int, seed: int = 0) -> float:
    """Total per-entry variance of the node-averaged dithered gradient.

    The ``len(x)`` samples are split into groups of ``n_nodes``; each group
    plays one round ``reps`` times with fresh dither, and the summed
    per-entry variance is averaged over groups. Parameters are not updated.
    """
    if len(x) % n_nodes:
        raise ValueError(f"{len(x)} samples do not split into groups of {n_nodes}")
    root = Rng(seed, (0xBA5E, n_nodes))
    totals = []
    for grp in range(len(x) // n_nodes):
        sl = slice(grp * n_nodes, (grp + 1) * n_nodes)
        xs, ys = x[sl], y[sl]
        mean = m2 = None
        for r in range(reps):
            ups = []
            for i in range(n_nodes):
                train_step(net, xs[i:i + 1], ys[i:i + 1], mode,
                           root.substream(grp, r, i), MacCounter())
                ups.append(GradientUpload(i, r, [g.copy() for g in net.gradients()], 0))
            flat = np.concatenate([g.ravel() for g in average(ups)])
            if mean is None:
                mean, m2 = np.zeros_like(flat), np.zeros_like(flat)
            d = flat - mean
            mean += d / (r + 1)
            m2 += d * (flat - mean)
        totals.append(float(m2.sum() / (reps - 1)))
    return float(np.mean(totals))
