"""A small convolutional network in plain numpy.

Activations are kept channels-last (N, H, W, C) inside the network; the
public ``forward``/``loss_and_grads`` take the usual (N, C, H, W) batch.
Convolutions and fully connected layers run one GEMM per sample (a
stacked ``np.matmul``), which keeps every sample's arithmetic identical
whatever the batch size.
"""
from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ChecksumMismatchError,
    IoError,
    ShapeMismatchError,
    SingleClassDatasetError,
    VersionMismatchError,
)

N_CLASSES = 2
MICRO_BATCH = 8  # samples per pass; keeps im2col buffers cache-resident


class LayerKind(enum.IntEnum):
    CONV = 0
    MAXPOOL = 1
    FC = 2
    RELU = 3
    DROPOUT = 4
    SOFTMAX = 5


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0  # conv input channels, or FC input width
    out_channels: int = 0  # conv filters, or FC output width
    kernel_size: int = 0  # conv kernel, or pooling window
    stride: int = 1
    padding: int = 0
    keep_prob: float = 1.0

    def __str__(self):
        k = self.kind
        if k == LayerKind.CONV:
            return f"Conv({self.in_channels}->{self.out_channels}, {self.kernel_size}x{self.kernel_size}, s{self.stride}, p{self.padding})"
        if k == LayerKind.MAXPOOL:
            return f"MaxPool({self.kernel_size}, s{self.stride})"
        if k == LayerKind.FC:
            return f"FC({self.in_channels}->{self.out_channels})"
        if k == LayerKind.DROPOUT:
            return f"Dropout({self.keep_prob})"
        return k.name.capitalize()


def conv(in_channels, out_channels, kernel_size, stride=1, padding=0) -> LayerSpec:
    return LayerSpec(LayerKind.CONV, in_channels, out_channels, kernel_size, stride, padding)


def maxpool(window=2, stride=None) -> LayerSpec:
    return LayerSpec(LayerKind.MAXPOOL, kernel_size=window, stride=stride or window)


def fc(in_dim, out_dim) -> LayerSpec:
    """``in_dim=0`` is filled in by :func:`infer_shapes`."""
    return LayerSpec(LayerKind.FC, in_dim, out_dim)


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.RELU)


def dropout(keep_prob=0.5) -> LayerSpec:
    if not 0 < keep_prob <= 1:
        raise ValueError("keep_prob must lie in (0, 1]")
    return LayerSpec(LayerKind.DROPOUT, keep_prob=keep_prob)


def softmax() -> LayerSpec:
    return LayerSpec(LayerKind.SOFTMAX)


def infer_shapes(layers, input_shape) -> tuple[list[LayerSpec], list[tuple]]:
    """Propagate (C, H, W) through the stack, resolving FC input widths.

    Returns the resolved layer list and the output shape of every layer.
    Raises ShapeMismatchError on any inconsistency.
    """
    shape = tuple(int(s) for s in input_shape)
    resolved, shapes = [], []
    for i, spec in enumerate(layers):
        kind = spec.kind
        if kind == LayerKind.CONV:
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise ShapeMismatchError(f"layer {i} {spec}: input shape {shape}")
            c, h, w = shape
            k, s, p = spec.kernel_size, spec.stride, spec.padding
            if k < 1 or s < 1 or p < 0 or h + 2 * p < k or w + 2 * p < k:
                raise ShapeMismatchError(f"layer {i} {spec}: kernel does not fit {shape}")
            shape = (spec.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif kind == LayerKind.MAXPOOL:
            if len(shape) != 3 or shape[1] < spec.kernel_size or shape[2] < spec.kernel_size:
                raise ShapeMismatchError(f"layer {i} {spec}: window does not fit {shape}")
            c, h, w = shape
            k, s = spec.kernel_size, spec.stride
            shape = (c, (h - k) // s + 1, (w - k) // s + 1)
        elif kind == LayerKind.FC:
            width = int(np.prod(shape))
            if spec.in_channels == 0:
                spec = replace(spec, in_channels=width)
            if spec.in_channels != width:
                raise ShapeMismatchError(f"layer {i} {spec}: input width {width}")
            shape = (spec.out_channels,)
        elif kind == LayerKind.SOFTMAX:
            if len(shape) != 1 or i != len(layers) - 1:
                raise ShapeMismatchError("softmax must be the last layer and follow a flat layer")
        resolved.append(spec)
        shapes.append(shape)
    if not resolved or resolved[-1].kind != LayerKind.SOFTMAX or shapes[-1] != (N_CLASSES,):
        raise ShapeMismatchError(f"network must end in a {N_CLASSES}-way softmax")
    return resolved, shapes


def paper64(channels=(16, 32, 32, 64, 64), fc_widths=(256, 64), keep_prob=0.5, in_channels=3) -> list[LayerSpec]:
    """Five conv layers (stride-1 5x5 first), three FC layers and a softmax."""
    c1, c2, c3, c4, c5 = channels
    f1, f2 = fc_widths
    return [
        conv(in_channels, c1, 5), relu(), maxpool(2),
        conv(c1, c2, 3), relu(),
        conv(c2, c3, 3), relu(), maxpool(2),
        conv(c3, c4, 3), relu(),
        conv(c4, c5, 3), relu(), maxpool(2),
        fc(0, f1), relu(), dropout(keep_prob),
        fc(f1, f2), relu(),
        fc(f2, N_CLASSES), softmax(),
    ]


def desk64(keep_prob=0.5) -> list[LayerSpec]:
    """paper64 with half the filters; the default for CPU experiments."""
    return paper64((8, 16, 16, 32, 32), (128, 32), keep_prob)


ARCHITECTURES = {"paper64": paper64, "desk64": desk64}


def layers_from_json(items) -> list[LayerSpec]:
    """Layer list from JSON objects such as ``{"kind": "conv", "in_channels": 3, ...}``."""
    out = []
    for i, item in enumerate(items):
        item = dict(item)
        try:
            kind = LayerKind[str(item.pop("kind")).upper()]
        except KeyError:
            raise ValueError(f"layer {i}: missing or unknown kind") from None
        out.append(LayerSpec(kind, **item))
    return out


def resolve_architecture(net) -> list[LayerSpec]:
    """An architecture name or an inline JSON layer list."""
    if isinstance(net, str):
        try:
            return ARCHITECTURES[net]()
        except KeyError:
            raise ValueError(f"unknown architecture {net!r}; known: {sorted(ARCHITECTURES)}") from None
    return layers_from_json(net)


# --- layer kernels (channels-last) ------------------------------------------

def _im2col(x, k, stride, padding):
    """(N, H, W, C) -> (N, Ho*Wo, k*k*C) patches ordered (row, col, channel)."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    n, h, w, c = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    # along a flattened image row, one kernel row is a contiguous run of k*c values
    runs = sliding_window_view(x.reshape(n, h, w * c), k * c, axis=2)[:, :, :: c * stride]
    cols = np.empty((n, ho, wo, k, k * c), dtype=x.dtype)
    for i in range(k):
        cols[:, :, :, i] = runs[:, i : i + stride * (ho - 1) + 1 : stride, :wo]
    return cols.reshape(n, ho * wo, k * k * c), (ho, wo), x.shape


def _conv_forward(x, W, b, spec):
    cols, (ho, wo), padded_shape = _im2col(x, spec.kernel_size, spec.stride, spec.padding)
    wmat = W.transpose(0, 2, 3, 1).reshape(W.shape[0], -1).T
    out = np.matmul(cols, wmat) + b
    return out.reshape(x.shape[0], ho, wo, -1), (cols, padded_shape, (ho, wo))


def _conv_backward(dout, W, cache, spec, need_dx=True):
    cols, padded_shape, (ho, wo) = cache
    n = dout.shape[0]
    cout = W.shape[0]
    d2 = dout.reshape(n, ho * wo, cout)
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    dW = np.tensordot(cols, d2, axes=([0, 1], [0, 1])).T.reshape(cout, k, k, -1).transpose(0, 3, 1, 2)
    db = d2.sum(axis=(0, 1))
    if not need_dx:
        return None, dW, db
    dcols = np.matmul(d2, W.transpose(0, 2, 3, 1).reshape(cout, -1)).reshape(n, ho, wo, k, k, -1)
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j]
    if p:
        dxp = dxp[:, p:-p, p:-p, :]
    return dxp, dW, db


def _pool_forward(x, spec):
    k, s = spec.kernel_size, spec.stride
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    flat = win.reshape(win.shape[:4] + (k * k,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def _pool_backward(dout, cache, spec):
    shape, arg = cache
    k, s = spec.kernel_size, spec.stride
    ho, wo = dout.shape[1:3]
    dx = np.zeros(shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            if hit.any():
                dx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dout * hit
    return dx


def _log_softmax(z):
    z = z.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass(eq=False)
class ConvNetModel:
    layers: list[LayerSpec]
    weights: list[dict] = field(default_factory=list)
    input_shape: tuple[int, int, int] = (3, 64, 64)
    rng_seed: int = 0
    training_mode: bool = False
    dtype: np.dtype = np.float32

    def __post_init__(self):
        self.layers, self.shapes = infer_shapes(self.layers, self.input_shape)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.dtype = np.dtype(self.dtype)
        self.rng = np.random.default_rng(self.rng_seed)
        if not self.weights:
            self.initialize(self.rng_seed)
        self._check_weights()

    @classmethod
    def build(cls, layers, input_shape=(3, 64, 64), seed=0, dtype=np.float32) -> "ConvNetModel":
        if isinstance(layers, str):
            try:
                layers = ARCHITECTURES[layers]()
            except KeyError:
                raise ValueError(f"unknown architecture {layers!r}; known: {sorted(ARCHITECTURES)}") from None
        return cls(list(layers), [], input_shape, seed, False, dtype)

    def initialize(self, seed) -> None:
        """He-scaled Gaussian weights, zero biases."""
        rng = np.random.default_rng(seed)
        self.weights = []
        for spec in self.layers:
            if spec.kind == LayerKind.CONV:
                fan_in = spec.in_channels * spec.kernel_size**2
                shape = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
            elif spec.kind == LayerKind.FC:
                fan_in = spec.in_channels
                shape = (spec.in_channels, spec.out_channels)
            else:
                self.weights.append({})
                continue
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(self.dtype)
            self.weights.append({"W": W, "b": np.zeros(shape[0] if spec.kind == LayerKind.CONV else shape[1], self.dtype)})

    def _check_weights(self):
        if len(self.weights) != len(self.layers):
            raise ShapeMismatchError("one weight dict per layer expected")
        for spec, w in zip(self.layers, self.weights):
            if spec.kind == LayerKind.CONV:
                want = {"W": (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size), "b": (spec.out_channels,)}
            elif spec.kind == LayerKind.FC:
                want = {"W": (spec.in_channels, spec.out_channels), "b": (spec.out_channels,)}
            else:
                want = {}
            if {k: v.shape for k, v in w.items()} != want:
                raise ShapeMismatchError(f"{spec}: weight shapes {[v.shape for v in w.values()]} != {list(want.values())}")

    def astype(self, dtype) -> "ConvNetModel":
        weights = [{k: v.astype(dtype) for k, v in w.items()} for w in self.weights]
        return ConvNetModel(list(self.layers), weights, self.input_shape, self.rng_seed, self.training_mode, dtype)

    def copy(self) -> "ConvNetModel":
        return self.astype(self.dtype)

    def n_parameters(self) -> int:
        return sum(v.size for w in self.weights for v in w.values())

    # -- passes --------------------------------------------------------------

    def _run(self, batch, keep_cache):
        x = np.asarray(batch)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeMismatchError(f"expected batch of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        caches = []
        for spec, w in zip(self.layers, self.weights):
            kind = spec.kind
            cache = None
            if kind == LayerKind.CONV:
                x, cache = _conv_forward(x, w["W"], w["b"], spec)
            elif kind == LayerKind.MAXPOOL:
                x, cache = _pool_forward(x, spec)
            elif kind == LayerKind.FC:
                if x.ndim > 2:
                    cache = x.shape
                    x = x.reshape(x.shape[0], -1)
                inp = x
                x = np.matmul(x[:, None, :], w["W"])[:, 0, :] + w["b"]
                cache = (inp, cache)
            elif kind == LayerKind.RELU:
                cache = x > 0
                x = x * cache
            elif kind == LayerKind.DROPOUT:
                if self.training_mode and spec.keep_prob < 1:
                    cache = (self.rng.random(x.shape) < spec.keep_prob).astype(self.dtype) / self.dtype.type(spec.keep_prob)
                    x = x * cache
            elif kind == LayerKind.SOFTMAX:
                pass  # logits stay in x; normalisation happens in float64 below
            if keep_cache:
                caches.append(cache)
        return x, caches

    def forward(self, batch) -> np.ndarray:
        """(N, 2) class probabilities: column 0 non-fracture, column 1 fracture."""
        logits, _ = self._run(batch, keep_cache=False)
        return np.exp(_log_softmax(logits))

    def loss_and_grads(self, batch, labels) -> tuple[float, list[dict]]:
        """Mean softmax cross-entropy and its gradient for every weight."""
        labels = np.asarray(labels)
        logits, caches = self._run(batch, keep_cache=True)
        n = logits.shape[0]
        if labels.shape != (n,):
            raise ShapeMismatchError(f"need {n} labels, got shape {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        labels = labels.astype(np.int64)
        logp = _log_softmax(logits)
        loss = float(-logp[np.arange(n), labels].mean())
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        d = (d / n).astype(self.dtype)

        grads = [{} for _ in self.layers]
        for i in range(len(self.layers) - 1, -1, -1):
            spec, w, cache = self.layers[i], self.weights[i], caches[i]
            kind = spec.kind
            need_dx = i > 0
            if kind == LayerKind.CONV:
                d, dW, db = _conv_backward(d, w["W"], cache, spec, need_dx)
                grads[i] = {"W": dW.astype(self.dtype), "b": db.astype(self.dtype)}
            elif kind == LayerKind.FC:
                inp, in_shape = cache
                grads[i] = {"W": (inp.T @ d).astype(self.dtype), "b": d.sum(axis=0).astype(self.dtype)}
                if need_dx:
                    d = d @ w["W"].T
                    if in_shape is not None:
                        d = d.reshape(in_shape)
            elif kind == LayerKind.MAXPOOL:
                d = _pool_backward(d, cache, spec)
            elif kind == LayerKind.RELU:
                d = d * cache
            elif kind == LayerKind.DROPOUT and cache is not None:
                d = d * cache
            if d is None:
                break
        return loss, grads

    def backward(self, batch, labels) -> tuple[list[dict], float]:
        loss, grads = self.loss_and_grads(batch, labels)
        return grads, loss

    def predict_proba(self, batch, batch_size: int = MICRO_BATCH) -> np.ndarray:
        """Inference-mode forward in chunks; returns the fracture probability."""
        mode, self.training_mode = self.training_mode, False
        try:
            x = np.asarray(batch)
            out = np.empty(len(x), dtype=np.float64)
            for s in range(0, len(x), batch_size):
                out[s : s + batch_size] = self.forward(x[s : s + batch_size])[:, 1]
            return out
        finally:
            self.training_mode = mode


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    train_accuracy: float


def evaluate(model: ConvNetModel, x, y, batch_size: int = MICRO_BATCH) -> tuple[float, float]:
    """Inference-mode mean cross-entropy and accuracy over a labelled set."""
    p = model.predict_proba(x, batch_size)
    y = np.asarray(y)
    likelihood = np.clip(np.where(y == 1, p, 1.0 - p), 1e-300, 1.0)
    loss = float(-np.mean(np.log(likelihood)))
    acc = float(np.mean((p >= 0.5) == (y == 1)))
    return loss, acc


def _accumulated_grads(model, x, y, idx):
    total = None
    for s in range(0, len(idx), MICRO_BATCH):
        part = idx[s : s + MICRO_BATCH]
        _, grads = model.loss_and_grads(x[part], y[part])
        scale = model.dtype.type(len(part) / len(idx))
        if total is None:
            total = [{k: g[k] * scale for k in g} for g in grads]
        else:
            for t, g in zip(total, grads):
                for k in g:
                    t[k] += g[k] * scale
    return total


def train(model: ConvNetModel, dataset, cfg: TrainConfig, log=None) -> tuple[ConvNetModel, list[EpochStats]]:
    """Mini-batch SGD with momentum and L2 weight decay on a copy of ``model``.

    ``dataset`` is a PatchSet or an ``(x, y)`` pair.  After every epoch the
    whole training set is re-scored in inference mode; that loss and
    accuracy form the history.
    """
    x, y = dataset.arrays() if hasattr(dataset, "arrays") else (np.asarray(dataset[0]), np.asarray(dataset[1]))
    if len(x) == 0:
        raise SingleClassDatasetError("dataset is empty")
    if len(np.unique(y)) < 2:
        raise SingleClassDatasetError("dataset holds a single class")

    model = model.copy()
    model.rng = np.random.default_rng([cfg.seed, 1])
    order_rng = np.random.default_rng([cfg.seed, 0])
    velocity = [{k: np.zeros_like(v) for k, v in w.items()} for w in model.weights]
    lr = model.dtype.type(cfg.learning_rate)
    mu = model.dtype.type(cfg.momentum)
    wd = model.dtype.type(cfg.weight_decay)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.training_mode = True
        order = order_rng.permutation(len(x))
        for s in range(0, len(x), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            grads = _accumulated_grads(model, x, y, idx)
            for w, g, v in zip(model.weights, grads, velocity):
                for key in w:
                    step = g[key] + wd * w[key] if key == "W" else g[key]
                    v[key] *= mu
                    v[key] -= lr * step
                    w[key] += v[key]
        model.training_mode = False
        loss, acc = evaluate(model, x, y)
        history.append(EpochStats(epoch, loss, acc))
        if log is not None:
            log(history[-1])
    return model, history


# --- checkpoints --------------------------------------------------------------

MAGIC = b"CNET"
VERSION = 1
_HEADER = struct.Struct("<4sIQ3II")
_LAYER = struct.Struct("<B5if")


def model_bytes(model: ConvNetModel) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, model.rng_seed & (2**64 - 1), *model.input_shape, len(model.layers))]
    for s in model.layers:
        parts.append(_LAYER.pack(int(s.kind), s.in_channels, s.out_channels, s.kernel_size, s.stride, s.padding, s.keep_prob))
    for w in model.weights:
        for key in ("W", "b"):
            if key in w:
                parts.append(np.asarray(w[key], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(model: ConvNetModel, path) -> None:
    try:
        Path(path).write_bytes(model_bytes(model))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_model(path) -> ConvNetModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise VersionMismatchError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < _HEADER.size + 4:
        raise ChecksumMismatchError(f"{path}: truncated checkpoint")
    _, version, *_ = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatchError(f"{path}: CRC32 mismatch")

    _, _, seed, c, h, w, n_layers = _HEADER.unpack_from(body, 0)
    offset = _HEADER.size
    layers = []
    for _ in range(n_layers):
        kind, a, b, k, s, p, keep = _LAYER.unpack_from(body, offset)
        offset += _LAYER.size
        layers.append(LayerSpec(LayerKind(kind), a, b, k, s, p, float(np.float32(keep))))
    weights = []
    for spec in layers:
        if spec.kind == LayerKind.CONV:
            shapes = {"W": (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size), "b": (spec.out_channels,)}
        elif spec.kind == LayerKind.FC:
            shapes = {"W": (spec.in_channels, spec.out_channels), "b": (spec.out_channels,)}
        else:
            weights.append({})
            continue
        entry = {}
        for key, shape in shapes.items():
            count = int(np.prod(shape))
            entry[key] = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * count
        weights.append(entry)
    if offset != len(body):
        raise ChecksumMismatchError(f"{path}: payload length does not match the layer table")
    return ConvNetModel(layers, weights, (c, h, w), seed, False, np.float32)
