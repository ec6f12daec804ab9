"""Feed-forward face network: conv, max-pool, locally-connected and fully-connected
layers, softmax cross-entropy, back-propagation and SGD training.

All tensors are numpy arrays in NHWC layout. Training runs in float32; building a
network with ``dtype=np.float64`` gives a network suitable for gradient checks.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CONV = "conv"
MAXPOOL = "maxpool"
LOCAL = "local"
FC = "fc"
LAYER_KINDS = (CONV, MAXPOOL, LOCAL, FC)

CHECKPOINT_MAGIC = b"WFCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Raised when a network configuration has invalid geometry."""


@dataclass
class LayerSpec:
    kind: str
    channels_out: int = 0
    kernel: tuple[int, int] | None = None
    stride: int = 1
    has_relu: bool = True
    name: str = ""

    def __post_init__(self):
        if self.kernel is not None:
            self.kernel = tuple(int(k) for k in self.kernel)


@dataclass
class NetworkConfig:
    input_dims: tuple[int, int, int]
    layers: list[LayerSpec]
    bottleneck_dim: int
    num_classes: int

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "layers": [
                {**asdict(l), "kernel": list(l.kernel) if l.kernel else None} for l in self.layers
            ],
            "bottleneck_dim": self.bottleneck_dim,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            input_dims=tuple(d["input_dims"]),
            layers=[LayerSpec(**l) for l in d["layers"]],
            bottleneck_dim=int(d["bottleneck_dim"]),
            num_classes=int(d["num_classes"]),
        )

    def layer_index(self, name: str) -> int:
        for i, l in enumerate(self.layers):
            if l.name == name:
                return i
        raise KeyError(name)

    def shapes(self) -> list[tuple[int, ...]]:
        """Validate the stack and return the per-layer output shape (without batch)."""
        h, w, c = self.input_dims
        if min(h, w, c) < 1:
            raise ConfigError(f"input_dims must be positive, got {self.input_dims}")
        if len(self.layers) < 2:
            raise ConfigError("network needs at least the F7 and F8 fully-connected layers")
        out = []
        flat = None
        for i, l in enumerate(self.layers):
            label = l.name or f"layer {i}"
            if l.kind not in LAYER_KINDS:
                raise ConfigError(f"{label}: unknown layer kind {l.kind!r}")
            if l.stride < 1:
                raise ConfigError(f"{label}: stride must be >= 1")
            if l.kind == FC:
                if l.channels_out < 1:
                    raise ConfigError(f"{label}: channels_out must be >= 1")
                flat = l.channels_out
                out.append((flat,))
                continue
            if flat is not None:
                raise ConfigError(f"{label}: spatial layer after a fully-connected layer")
            if l.kernel is None or len(l.kernel) != 2 or min(l.kernel) < 1:
                raise ConfigError(f"{label}: kernel must be a pair of positive ints")
            kh, kw = l.kernel
            if kh > h or kw > w:
                raise ConfigError(f"{label}: kernel {l.kernel} exceeds input size {(h, w)}")
            h = (h - kh) // l.stride + 1
            w = (w - kw) // l.stride + 1
            if l.kind != MAXPOOL:
                if l.channels_out < 1:
                    raise ConfigError(f"{label}: channels_out must be >= 1")
                c = l.channels_out
            out.append((h, w, c))
        f7, f8 = self.layers[-2], self.layers[-1]
        if f7.kind != FC or f8.kind != FC:
            raise ConfigError("the last two layers (F7, F8) must be fully-connected")
        if not f7.has_relu:
            raise ConfigError(f"{f7.name or 'F7'}: representation layer must have a ReLU")
        if f8.has_relu:
            raise ConfigError(f"{f8.name or 'F8'}: classification layer must not have a ReLU")
        if f7.channels_out != self.bottleneck_dim:
            raise ConfigError(
                f"F7 width {f7.channels_out} does not match bottleneck_dim {self.bottleneck_dim}"
            )
        if f8.channels_out != self.num_classes:
            raise ConfigError(
                f"F8 width {f8.channels_out} does not match num_classes {self.num_classes}"
            )
        return out


def default_config(
    bottleneck_dim: int = 64,
    num_classes: int = 10,
    input_size: int = 32,
    conv_filters: tuple[int, int] = (8, 16),
    local_filters: int = 16,
) -> NetworkConfig:
    """Desk-scale version of the C1-M2-C3-L4-L5-L6-F7-F8 stack."""
    c1, c3 = conv_filters
    return NetworkConfig(
        input_dims=(input_size, input_size, 1),
        layers=[
            LayerSpec(CONV, c1, (5, 5), 1, True, "C1"),
            LayerSpec(MAXPOOL, 0, (2, 2), 2, False, "M2"),
            LayerSpec(CONV, c3, (3, 3), 1, True, "C3"),
            LayerSpec(LOCAL, local_filters, (3, 3), 1, True, "L4"),
            LayerSpec(LOCAL, local_filters, (3, 3), 1, True, "L5"),
            LayerSpec(LOCAL, local_filters, (3, 3), 1, True, "L6"),
            LayerSpec(FC, bottleneck_dim, None, 1, True, "F7"),
            LayerSpec(FC, num_classes, None, 1, False, "F8"),
        ],
        bottleneck_dim=bottleneck_dim,
        num_classes=num_classes,
    )


@dataclass
class Network:
    config: NetworkConfig
    params: list[dict[str, np.ndarray]]
    frozen: set[int] = field(default_factory=set)
    rng_seed: int = 0

    @property
    def dtype(self):
        for p in self.params:
            if p:
                return p["W"].dtype
        return np.dtype(np.float32)

    def copy(self) -> "Network":
        return Network(
            copy.deepcopy(self.config),
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            set(self.frozen),
            self.rng_seed,
        )

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.params = [{k: v.astype(dtype) for k, v in p.items()} for p in net.params]
        return net


def param_shapes(config: NetworkConfig) -> list[dict[str, tuple[int, ...]]]:
    shapes = config.shapes()
    prev = tuple(config.input_dims)
    result = []
    for l, out in zip(config.layers, shapes):
        if l.kind == CONV:
            kh, kw = l.kernel
            result.append({"W": (kh, kw, prev[2], l.channels_out), "b": (l.channels_out,)})
        elif l.kind == LOCAL:
            kh, kw = l.kernel
            oh, ow, _ = out
            result.append(
                {"W": (oh * ow, kh * kw * prev[2], l.channels_out), "b": (oh, ow, l.channels_out)}
            )
        elif l.kind == FC:
            result.append({"W": (int(np.prod(prev)), l.channels_out), "b": (l.channels_out,)})
        else:
            result.append({})
        prev = out
    return result


def init_layer(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator, dtype) -> dict:
    if not shapes:
        return {}
    w_shape = shapes["W"]
    fan_in = int(np.prod(w_shape[:-1])) if len(w_shape) != 3 else w_shape[1]
    W = rng.standard_normal(w_shape) / np.sqrt(fan_in)
    return {"W": W.astype(dtype), "b": np.zeros(shapes["b"], dtype=dtype)}


def build_network(config: NetworkConfig, rng_seed: int, dtype=np.float32) -> Network:
    """Initialize every layer from N(0, 1/fan_in) with zero biases."""
    shapes = param_shapes(config)
    params = []
    for i, s in enumerate(shapes):
        rng = np.random.default_rng([rng_seed, i])
        params.append(init_layer(s, rng, dtype))
    return Network(config, params, set(), rng_seed)


# ---------------------------------------------------------------- layer kernels


def _patches(x: np.ndarray, kernel: tuple[int, int], stride: int) -> np.ndarray:
    """(B, H, W, C) -> (B, OH, OW, KH*KW*C), patch entries in (kh, kw, c) order."""
    kh, kw = kernel
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    b, oh, ow = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, oh, ow, -1)


def _unpatch(dcols: np.ndarray, x_shape, kernel, stride) -> np.ndarray:
    kh, kw = kernel
    b, oh, ow, _ = dcols.shape
    c = x_shape[3]
    d = dcols.reshape(b, oh, ow, kh, kw, c)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += d[:, :, :, i, j, :]
    return dx


def conv_forward(x, W, b, stride):
    kh, kw, cin, cout = W.shape
    cols = _patches(x, (kh, kw), stride)
    out = cols @ W.reshape(-1, cout) + b
    return out, cols


def conv_backward(dout, cols, x_shape, W, stride):
    kh, kw, cin, cout = W.shape
    d2 = dout.reshape(-1, cout)
    dW = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    dcols = dout @ W.reshape(-1, cout).T
    return _unpatch(dcols, x_shape, (kh, kw), stride), dW, db


def local_forward(x, W, b, kernel, stride):
    """Locally-connected layer: an independent filter bank at every output location."""
    cols = _patches(x, kernel, stride)
    bsz, oh, ow, k = cols.shape
    per_loc = cols.reshape(bsz, oh * ow, k).transpose(1, 0, 2)
    out = np.matmul(per_loc, W).transpose(1, 0, 2).reshape(bsz, oh, ow, -1) + b
    return out, cols


def local_backward(dout, cols, x_shape, W, kernel, stride):
    bsz, oh, ow, k = cols.shape
    cout = W.shape[2]
    per_loc = cols.reshape(bsz, oh * ow, k).transpose(1, 0, 2)
    d = dout.reshape(bsz, oh * ow, cout).transpose(1, 0, 2)
    dW = np.matmul(per_loc.transpose(0, 2, 1), d)
    db = dout.sum(axis=0)
    dcols = np.matmul(d, W.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(bsz, oh, ow, k)
    return _unpatch(dcols, x_shape, kernel, stride), dW, db


def maxpool_forward(x, kernel, stride):
    kh, kw = kernel
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], kh * kw)
    # np.argmax returns the first maximum: ties route to the first row-major position
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, idx, x_shape, kernel, stride):
    kh, kw = kernel
    _, oh, ow, _ = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            mask = idx == i * kw + j
            dx[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dout * mask
    return dx


# ---------------------------------------------------------------- network passes


@dataclass
class ForwardPass:
    """Per-layer activations (post-ReLU where applicable) plus backward caches."""

    inputs: np.ndarray
    outputs: list[np.ndarray]
    caches: list[object]

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]

    @property
    def representation(self) -> np.ndarray:
        return self.outputs[-2]


def _as_batch(net: Network, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    h, w, c = net.config.input_dims
    if batch.ndim == 3 and c == 1:
        batch = batch[..., None]
    if batch.ndim != 4 or batch.shape[1:] != (h, w, c):
        raise ValueError(f"batch shape {batch.shape} does not match input_dims {(h, w, c)}")
    return batch.astype(net.dtype, copy=False)


def forward(net: Network, batch: np.ndarray, upto: int | None = None) -> ForwardPass:
    """Run the stack; ``upto`` stops after that layer index (inclusive)."""
    x = _as_batch(net, batch)
    inputs = x
    outputs, caches = [], []
    last = len(net.config.layers) - 1 if upto is None else upto
    for i, (l, p) in enumerate(zip(net.config.layers, net.params)):
        if i > last:
            break
        if l.kind == CONV:
            y, cache = conv_forward(x, p["W"], p["b"], l.stride)
        elif l.kind == LOCAL:
            y, cache = local_forward(x, p["W"], p["b"], l.kernel, l.stride)
        elif l.kind == MAXPOOL:
            y, cache = maxpool_forward(x, l.kernel, l.stride)
        else:
            y = x.reshape(x.shape[0], -1) @ p["W"] + p["b"]
            cache = None
        if l.has_relu:
            y = np.maximum(y, 0)
        outputs.append(y)
        caches.append(cache)
        x = y
    return ForwardPass(inputs, outputs, caches)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = np.asarray(logits, dtype=np.result_type(logits, np.float32))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probs: np.ndarray, true_class) -> np.ndarray | float:
    """-log p_k for one probability vector or a batch of them."""
    probs = np.asarray(probs)
    n = probs.shape[-1]
    k = np.asarray(true_class)
    if np.any(k < 0) or np.any(k >= n):
        raise IndexError(f"class index {true_class} out of range for {n} classes")
    if probs.ndim == 1:
        return float(-np.log(probs[int(k)]))
    picked = probs[np.arange(probs.shape[0]), k]
    return -np.log(picked)


def batch_loss(net: Network, batch: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of the batch."""
    fp = forward(net, batch)
    return float(cross_entropy_loss(softmax(fp.logits), labels).mean())


def backward(net: Network, fp: ForwardPass, true_classes) -> list[dict[str, np.ndarray]]:
    """Gradients of the mean cross-entropy w.r.t. every parameter.

    Frozen layers get zero-filled gradients; propagation stops below the lowest
    trainable layer.
    """
    layers = net.config.layers
    if len(fp.outputs) != len(layers):
        raise ValueError(
            f"forward pass has {len(fp.outputs)} layer outputs, network has {len(layers)}"
        )
    labels = np.asarray(true_classes)
    bsz = fp.inputs.shape[0]
    if labels.shape != (bsz,):
        raise ValueError(f"expected {bsz} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= net.config.num_classes):
        raise IndexError("label out of range")

    grads: list[dict[str, np.ndarray]] = [
        {k: np.zeros_like(v) for k, v in p.items()} for p in net.params
    ]
    trainable = [i for i, p in enumerate(net.params) if p and i not in net.frozen]
    if not trainable:
        return grads
    lowest = min(trainable)

    d = softmax(fp.logits)
    d[np.arange(bsz), labels] -= 1
    d /= bsz
    for i in range(len(layers) - 1, lowest - 1, -1):
        l, p = layers[i], net.params[i]
        x = fp.inputs if i == 0 else fp.outputs[i - 1]
        if l.has_relu:
            d = d * (fp.outputs[i] > 0)
        if l.kind == FC:
            x2 = x.reshape(bsz, -1)
            dW, db = x2.T @ d, d.sum(axis=0)
            dx = (d @ p["W"].T).reshape(x.shape) if i > lowest else None
        elif l.kind == CONV:
            dx, dW, db = conv_backward(d, fp.caches[i], x.shape, p["W"], l.stride)
        elif l.kind == LOCAL:
            dx, dW, db = local_backward(d, fp.caches[i], x.shape, p["W"], l.kernel, l.stride)
        else:
            dx = maxpool_backward(d, fp.caches[i], x.shape, l.kernel, l.stride)
            dW = db = None
        if dW is not None and i not in net.frozen:
            grads[i]["W"] = dW.astype(p["W"].dtype, copy=False)
            grads[i]["b"] = db.astype(p["b"].dtype, copy=False)
        d = dx
    return grads


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    rng_seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def epoch_order(n: int, rng_seed: int, epoch: int) -> np.ndarray:
    """Deterministic per-epoch permutation keyed by (seed, epoch)."""
    return np.random.default_rng([rng_seed, epoch]).permutation(n)


def train(
    net: Network,
    images: np.ndarray,
    labels: np.ndarray,
    tc: TrainConfig,
    log=None,
) -> tuple[Network, list[float]]:
    """SGD on mean cross-entropy. Returns a trained copy and the per-epoch mean loss."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot train on an empty split")
    if np.any(labels < 0) or np.any(labels >= net.config.num_classes):
        raise ValueError("labels must lie within num_classes")
    x = _as_batch(net, images)
    net = net.copy()
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]
    lr = np.asarray(tc.learning_rate, dtype=net.dtype)
    mom = np.asarray(tc.momentum, dtype=net.dtype)
    wd = np.asarray(tc.weight_decay, dtype=net.dtype)
    history = []
    n = len(labels)
    for epoch in range(tc.epochs):
        order = epoch_order(n, tc.rng_seed, epoch)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            fp = forward(net, x[idx])
            total += float(cross_entropy_loss(softmax(fp.logits), labels[idx]).sum())
            grads = backward(net, fp, labels[idx])
            for i, (p, g, v) in enumerate(zip(net.params, grads, velocity)):
                if not p or i in net.frozen:
                    continue
                for k in p:
                    step = g[k] + wd * p[k] if k == "W" and tc.weight_decay else g[k]
                    v[k] *= mom
                    v[k] -= lr * step
                    p[k] += v[k]
        history.append(total / n)
        if log is not None:
            log(epoch, history[-1])
    return net, history


# ---------------------------------------------------------------- checkpoints


def _write_framed(header: dict, blobs: Sequence[bytes]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def _read_framed(data: bytes, magic: bytes) -> tuple[dict, memoryview]:
    if data[: len(magic)] != magic:
        raise ValueError("bad file magic")
    (n,) = struct.unpack_from("<Q", data, len(magic))
    start = len(magic) + 8
    header = json.loads(data[start : start + n].decode())
    return header, memoryview(data)[start + n :]


def checkpoint_bytes(net: Network) -> bytes:
    tensors, blobs = [], []
    for i, p in enumerate(net.params):
        for k in sorted(p):
            arr = np.ascontiguousarray(p[k], dtype="<f4")
            tensors.append({"layer": i, "name": k, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    header = {
        "format": "webface-checkpoint",
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "layer_order": [l.name or str(i) for i, l in enumerate(net.config.layers)],
        "frozen": sorted(net.frozen),
        "rng_seed": int(net.rng_seed),
        "tensors": tensors,
    }
    return _write_framed(header, blobs)


def checkpoint_from_bytes(data: bytes) -> Network:
    header, body = _read_framed(data, CHECKPOINT_MAGIC)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    config = NetworkConfig.from_dict(header["config"])
    params: list[dict[str, np.ndarray]] = [{} for _ in config.layers]
    offset = 0
    for t in header["tensors"]:
        count = int(np.prod(t["shape"]))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(t["shape"])
        params[t["layer"]][t["name"]] = arr.astype(np.float32)
        offset += 4 * count
    if offset != len(body):
        raise ValueError("trailing bytes in checkpoint")
    expected = param_shapes(config)
    for i, (p, s) in enumerate(zip(params, expected)):
        if {k: v.shape for k, v in p.items()} != s:
            raise ValueError(f"layer {i}: parameter shapes do not match config")
    return Network(config, params, set(header["frozen"]), header["rng_seed"])


def save_checkpoint(net: Network, path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(net))


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
