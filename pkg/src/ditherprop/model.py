"""Layers and the forward/backward passes.

Activations travel feature-major: a dense layer sees ``(features, batch)``
and a conv layer sees ``(channels, batch, height, width)``, so every weight
product has the form ``W @ a_prev`` and every preactivation gradient is a
``(units, batch * positions)`` matrix. That matrix is what the backprop mode
quantizes before the two backward products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quant
from .sparse import MacCounter, SparseGrad, dense_times_sparse_t, sparse_times_dense_t
from .tensor import Rng, ShapeError

VARIANTS = ("exact", "dithered", "meprop", "exact_8bit", "dithered_8bit")


@dataclass(frozen=True)
class BackpropMode:
    variant: str = "exact"
    s: float | None = None
    k: int | None = None
    target_sparsity: float | None = None
    sigma_floor: float = 1e-12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backprop mode {self.variant!r}; expected one of {VARIANTS}")
        if self.dithered and (self.s is None or self.s < 1):
            raise ValueError(f"{self.variant} needs a scale factor s >= 1")
        if self.variant == "meprop" and self.k is None and self.target_sparsity is None:
            raise ValueError("meprop needs k or target_sparsity")

    @property
    def dithered(self) -> bool:
        return self.variant in ("dithered", "dithered_8bit")

    @property
    def eight_bit(self) -> bool:
        return self.variant.endswith("_8bit")

    def meprop_k(self, rows: int) -> int:
        if self.k is not None:
            return min(self.k, rows)
        return quant.meprop_k_for(rows, self.target_sparsity)

    @classmethod
    def parse(cls, name: str, s=None, k=None, target_sparsity=None) -> "BackpropMode":
        return cls(name, s=s, k=k, target_sparsity=target_sparsity)


EXACT = BackpropMode("exact")


@dataclass
class LayerStats:
    layer: int
    sparsity: float
    bitwidth: int
    nnz: int
    elements: int
    delta: float
    passthrough: bool
    grad: np.ndarray | None = None


class MissingCacheError(RuntimeError):
    pass


class BackwardContext:
    """Per-step state shared by all layers during one backward pass."""

    def __init__(self, mode: BackpropMode, rng: Rng | None = None,
                 counter: MacCounter | None = None, keep_grads: bool = False):
        self.mode = mode
        self.rng = rng
        self.counter = counter if counter is not None else MacCounter()
        self.stats: list[LayerStats] = []
        self.nsd_ops = 0
        self.keep_grads = keep_grads


# --- im2col -----------------------------------------------------------------

@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1 or (h + 2 * self.padding - self.kernel) % self.stride \
                or (w + 2 * self.padding - self.kernel) % self.stride:
            raise ShapeError(f"conv geometry {self} does not tile a {h}x{w} input")
        return oh, ow


def im2col(x: np.ndarray, geo: ConvGeometry) -> np.ndarray:
    """Unroll ``(C, B, H, W)`` patches into ``(C*k*k, B*OH*OW)``.

    Rows run over (channel, kernel row, kernel col); columns over
    (sample, output row, output col).
    """
    c, b, h, w = x.shape
    if c != geo.in_channels:
        raise ShapeError(f"im2col: {c} input channels, geometry expects {geo.in_channels}")
    oh, ow = geo.out_size(h, w)
    p, k, st = geo.padding, geo.kernel, geo.stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::st, ::st][:, :, :oh, :ow]          # C, B, OH, OW, k, k
    return win.transpose(0, 4, 5, 1, 2, 3).reshape(c * k * k, b * oh * ow)


def col2im(cols: np.ndarray, geo: ConvGeometry, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Overlap-add inverse of :func:`im2col`."""
    c, b, h, w = shape
    oh, ow = geo.out_size(h, w)
    p, k, st = geo.padding, geo.kernel, geo.stride
    cols6 = cols.reshape(c, k, k, b, oh, ow)
    out = np.zeros((c, b, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + st * oh:st, j:j + st * ow:st] += cols6[:, i, j]
    return out[:, :, p:p + h, p:p + w] if p else out


# --- layers -----------------------------------------------------------------

class Layer:
    params: tuple[str, ...] = ()

    def forward(self, a_prev: np.ndarray, mode: BackpropMode) -> np.ndarray:
        raise NotImplementedError

    def backward(self, delta_out: np.ndarray, ctx: BackwardContext,
                 need_input_grad: bool = True) -> np.ndarray | None:
        raise NotImplementedError


class _Weighted(Layer):
    """Shared backward for dense and conv: quantize delta_z, then the two products."""

    params = ("W", "b")
    index = 0

    def __init__(self, relu: bool):
        self.relu = relu
        self.cache_z = None
        self.cache_a_prev = None
        self.cache_w = None
        self.vel_W = None
        self.vel_b = None
        self.grad_W = None
        self.grad_b = None

    def _affine(self, cols: np.ndarray, mode: BackpropMode) -> np.ndarray:
        w = self.W
        if mode.eight_bit:
            w = quant.quantize_8bit(w)
            cols = quant.quantize_8bit(cols)
        self.cache_w = w
        self.cache_a_prev = cols
        z = w @ cols + self.b
        self.cache_z = z
        return np.maximum(z, 0.0) if self.relu else z

    def _grads(self, dz: np.ndarray, ctx: BackwardContext,
               need_input_grad: bool) -> np.ndarray | None:
        """dz is the (units, columns) preactivation gradient."""
        if self.cache_z is None:
            raise MissingCacheError(f"layer {self.index}: backward before forward")
        if self.relu:
            dz = dz * (self.cache_z > 0)
        mode = ctx.mode
        w, a_prev = self.cache_w, self.cache_a_prev

        if mode.variant in ("exact", "exact_8bit"):
            zeros = int(np.count_nonzero(dz == 0))
            ctx.stats.append(LayerStats(self.index, zeros / dz.size, 0, dz.size - zeros,
                                        dz.size, 0.0, True, dz if ctx.keep_grads else None))
            self.grad_W = dz @ a_prev.T
            self.grad_b = dz.sum(axis=1, keepdims=True)
            m = dz.shape[0] * dz.shape[1]
            ctx.counter.add(m * a_prev.shape[0], m * a_prev.shape[0], self.index)
            if not need_input_grad:
                return None
            ctx.counter.add(m * w.shape[1], m * w.shape[1], self.index)
            return w.T @ dz

        if mode.dithered:
            rng = ctx.rng.substream(self.index)
            sg, qs = quant.nsd_quantize(dz, mode.s, rng, mode.sigma_floor)
            ctx.nsd_ops += quant.NSD_OPS_PER_ELEMENT * dz.size
            bits, delta, passthrough = qs.nonzero_bitwidth, qs.delta, qs.passthrough
        else:
            sg = quant.meprop_topk(dz, mode.meprop_k(dz.shape[0]))
            bits, delta, passthrough = 0, 0.0, True
        ctx.stats.append(LayerStats(self.index, sg.sparsity, bits, sg.nnz, dz.size, delta,
                                    passthrough, dz if ctx.keep_grads else None))
        self.grad_W = sparse_times_dense_t(sg, a_prev.T, ctx.counter, self.index)
        self.grad_b = _row_sums(sg)
        if not need_input_grad:
            return None
        return dense_times_sparse_t(w.T, sg, ctx.counter, self.index)


def _row_sums(sg: SparseGrad) -> np.ndarray:
    out = np.zeros((sg.rows, 1))
    filled = np.flatnonzero(np.diff(sg.row_ptr))
    if len(filled):
        out[filled, 0] = np.add.reduceat(sg.data, sg.row_ptr[:-1][filled])
    return out


class Dense(_Weighted):
    kind = "fully_connected"

    def __init__(self, in_features: int, out_features: int, relu: bool = True,
                 rng: Rng | None = None):
        super().__init__(relu)
        self.in_features, self.out_features = in_features, out_features
        rng = rng or Rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.W = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.b = rng.uniform(-bound, bound, size=(out_features, 1))

    def forward(self, a_prev, mode):
        if a_prev.shape[0] != self.in_features:
            raise ShapeError(f"dense layer {self.index}: expected {self.in_features} features, "
                             f"got {a_prev.shape[0]}")
        return self._affine(a_prev, mode)

    def backward(self, delta_out, ctx, need_input_grad=True):
        return self._grads(delta_out, ctx, need_input_grad)


class Conv2d(_Weighted):
    kind = "conv2d"

    def __init__(self, geo: ConvGeometry, relu: bool = True, rng: Rng | None = None):
        super().__init__(relu)
        self.geo = geo
        rng = rng or Rng(0)
        fan_in = geo.in_channels * geo.kernel ** 2
        bound = 1.0 / np.sqrt(fan_in)
        self.W = rng.uniform(-bound, bound, size=(geo.out_channels, fan_in))
        self.b = rng.uniform(-bound, bound, size=(geo.out_channels, 1))
        self.in_shape = None

    def forward(self, a_prev, mode):
        if a_prev.ndim != 4:
            raise ShapeError(f"conv layer {self.index}: expected (C, B, H, W) input")
        self.in_shape = a_prev.shape
        _, b, h, w = a_prev.shape
        oh, ow = self.geo.out_size(h, w)
        out = self._affine(im2col(a_prev, self.geo), mode)
        return out.reshape(self.geo.out_channels, b, oh, ow)

    def backward(self, delta_out, ctx, need_input_grad=True):
        dz = delta_out.reshape(self.geo.out_channels, -1)
        dcols = self._grads(dz, ctx, need_input_grad)
        if dcols is None:
            return None
        return col2im(dcols, self.geo, self.in_shape)


class MaxPool2(Layer):
    """2x2 max-pool, stride 2, on (C, B, H, W)."""

    def forward(self, a_prev, mode):
        c, b, h, w = a_prev.shape
        if h % 2 or w % 2:
            raise ShapeError(f"max-pool needs even spatial dims, got {h}x{w}")
        win = a_prev.reshape(c, b, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(c, b, h // 2, w // 2, 4)
        self.arg = win.argmax(axis=-1)
        self.in_shape = a_prev.shape
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, delta_out, ctx, need_input_grad=True):
        c, b, h, w = self.in_shape
        win = np.zeros((c, b, h // 2, w // 2, 4))
        np.put_along_axis(win, self.arg[..., None], delta_out[..., None], axis=-1)
        win = win.reshape(c, b, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return win.reshape(c, b, h, w)


class Flatten(Layer):
    """(C, B, H, W) -> (C*H*W, B)."""

    def forward(self, a_prev, mode):
        self.in_shape = a_prev.shape
        c, b, h, w = a_prev.shape
        return a_prev.transpose(0, 2, 3, 1).reshape(c * h * w, b)

    def backward(self, delta_out, ctx, need_input_grad=True):
        c, b, h, w = self.in_shape
        return delta_out.reshape(c, h, w, b).transpose(0, 3, 1, 2)


# --- loss -------------------------------------------------------------------

def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch; logits are (classes, batch)."""
    labels = np.asarray(labels, dtype=np.int64)
    n_cls, batch = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"{batch} logit columns but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls})")
    shifted = logits - logits.max(axis=0, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    cols = np.arange(batch)
    loss = -float(logp[labels, cols].mean())
    grad = np.exp(logp)
    grad[labels, cols] -= 1.0
    return loss, grad / batch


# --- network ----------------------------------------------------------------

class Network:
    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...]):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.weighted = [l for l in layers if isinstance(l, _Weighted)]
        for i, layer in enumerate(self.weighted):
            layer.index = i

    def _to_internal(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        feats = int(np.prod(self.input_shape))
        if x.ndim != 2 or x.shape[1] != feats:
            raise ShapeError(f"input must be (batch, {feats}), got {x.shape}")
        if len(self.input_shape) == 1:
            return np.ascontiguousarray(x.T)
        return x.reshape((x.shape[0],) + self.input_shape).transpose(1, 0, 2, 3)

    def forward(self, x: np.ndarray, mode: BackpropMode = EXACT) -> np.ndarray:
        """Logits ``(classes, batch)`` for samples given as rows of ``x``."""
        a = self._to_internal(x)
        for layer in self.layers:
            a = layer.forward(a, mode)
        return a

    def backward(self, logits_grad: np.ndarray, mode: BackpropMode = EXACT,
                 rng: Rng | None = None, counter: MacCounter | None = None,
                 keep_grads: bool = False) -> BackwardContext:
        """Fills ``grad_W``/``grad_b`` on every weighted layer."""
        if mode.dithered and rng is None:
            raise ValueError("dithered backprop needs an rng")
        ctx = BackwardContext(mode, rng, counter, keep_grads)
        delta = logits_grad
        first = self.layers.index(self.weighted[0])
        for pos in range(len(self.layers) - 1, first - 1, -1):
            delta = self.layers[pos].backward(delta, ctx, need_input_grad=pos > first)
        ctx.stats.sort(key=lambda st: st.layer)
        return ctx

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, EXACT).argmax(axis=0)

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self.weighted:
            out += [layer.grad_W, layer.grad_b]
        return out

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.weighted:
            out += [layer.W, layer.b]
        return out

    def get_state(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def set_state(self, state: list[np.ndarray]) -> None:
        for layer, (w, b) in zip(self.weighted, zip(state[::2], state[1::2])):
            layer.W = w.copy()
            layer.b = b.copy()


# --- architectures ----------------------------------------------------------

def mlp(sizes: list[int], seed: int = 0) -> Network:
    rng = Rng(seed, (0xC0FFEE,))
    layers = [Dense(a, b, relu=i < len(sizes) - 2, rng=rng.substream(i))
              for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
    return Network(layers, (sizes[0],))


def lenet5(seed: int = 0, n_classes: int = 10) -> Network:
    rng = Rng(seed, (0xC0FFEE,))
    layers = [
        Conv2d(ConvGeometry(1, 6, 5, padding=2), rng=rng.substream(0)),
        MaxPool2(),
        Conv2d(ConvGeometry(6, 16, 5), rng=rng.substream(1)),
        MaxPool2(),
        Flatten(),
        Dense(16 * 5 * 5, 120, rng=rng.substream(2)),
        Dense(120, 84, rng=rng.substream(3)),
        Dense(84, n_classes, relu=False, rng=rng.substream(4)),
    ]
    return Network(layers, (1, 28, 28))


PRESETS = {
    "mlp500": lambda seed, n_in=784, n_cls=10: mlp([n_in, 500, 500, n_cls], seed),
    "lenet300100": lambda seed, n_in=784, n_cls=10: mlp([n_in, 300, 100, n_cls], seed),
    "lenet5": lambda seed, n_in=784, n_cls=10: lenet5(seed, n_cls),
}


def build(spec: dict, n_in: int, n_classes: int, seed: int = 0) -> Network:
    """Build a network from a config dict.

    Either ``{"preset": name}`` or ``{"hidden": [h1, h2, ...]}`` for an MLP, or
    ``{"input_shape": [C, H, W], "layers": [...]}`` with layer entries
    ``{"type": "conv", "out": 6, "kernel": 5, "stride": 1, "padding": 2}``,
    ``{"type": "pool"}``, ``{"type": "flatten"}``, ``{"type": "dense", "out": 120}``.
    The last dense layer is linear and sized to ``n_classes``.
    """
    allowed = {"preset", "hidden", "input_shape", "layers"}
    unknown = set(spec) - allowed
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    if "preset" in spec:
        if spec["preset"] not in PRESETS:
            raise ValueError(f"unknown preset {spec['preset']!r}; have {sorted(PRESETS)}")
        return PRESETS[spec["preset"]](seed, n_in, n_classes)
    if "hidden" in spec:
        return mlp([n_in, *spec["hidden"], n_classes], seed)
    shape = tuple(spec["input_shape"])
    if int(np.prod(shape)) != n_in:
        raise ValueError(f"input_shape {shape} does not match {n_in} input features")
    rng = Rng(seed, (0xC0FFEE,))
    layers: list[Layer] = []
    cur = shape
    n_w = 0
    entries = list(spec["layers"])
    for j, e in enumerate(entries):
        kind = e.get("type")
        if kind == "conv":
            geo = ConvGeometry(cur[0], e["out"], e["kernel"], e.get("stride", 1), e.get("padding", 0))
            oh, ow = geo.out_size(cur[1], cur[2])
            layers.append(Conv2d(geo, rng=rng.substream(n_w)))
            cur = (e["out"], oh, ow)
        elif kind == "pool":
            layers.append(MaxPool2())
            cur = (cur[0], cur[1] // 2, cur[2] // 2)
        elif kind == "flatten":
            layers.append(Flatten())
            cur = (int(np.prod(cur)),)
        elif kind == "dense":
            if len(cur) != 1:
                layers.append(Flatten())
                cur = (int(np.prod(cur)),)
            layers.append(Dense(cur[0], e["out"], rng=rng.substream(n_w)))
            cur = (e["out"],)
        else:
            raise ValueError(f"layer {j}: unknown type {kind!r}")
        n_w += kind in ("conv", "dense")
    if len(cur) != 1:
        layers.append(Flatten())
        cur = (int(np.prod(cur)),)
    layers.append(Dense(cur[0], n_classes, relu=False, rng=rng.substream(n_w)))
    return Network(layers, shape)
