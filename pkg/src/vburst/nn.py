"""Minimal neural-network core on numpy: layers, losses, optimizers, schedule.

Convolution follows the cross-correlation convention (no kernel flip).
Everything runs in 64-bit; forward caches hold exactly the values backward
needs, so gradients are analytic and finite-difference checkable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LR_FLOOR = 1e-6
LR_CEILING = 1e-1

_MAGIC = b"BMTL"
_FORMAT_VERSION = 1
_KIND_IDS = {"conv1d": 0, "dense": 1, "relu": 2, "leaky_relu": 3, "softmax": 4, "flatten": 5}
_KIND_NAMES = {v: k for k, v in _KIND_IDS.items()}


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_len: int = 0
    stride: int = 1
    in_dim: int = 0
    out_dim: int = 0
    slope: float = 0.01

    def __post_init__(self) -> None:
        if self.kind not in _KIND_IDS:
            raise ValueError(f"unknown layer kind: {self.kind!r}")
        if self.kind == "conv1d":
            if min(self.in_channels, self.out_channels, self.kernel_len) <= 0:
                raise ValueError("conv1d needs positive channels and kernel")
            if self.stride <= 0:
                raise ValueError("conv1d stride must be positive")
        if self.kind == "dense" and min(self.in_dim, self.out_dim) <= 0:
            raise ValueError("dense needs positive dimensions")


@dataclass
class Network:
    """Ordered layers plus their parameter arrays."""

    specs: list[LayerSpec]
    params: list[dict]
    rng_seed: int

    def n_params(self) -> int:
        return sum(int(a.size) for p in self.params for a in p.values())

    def flat_params(self):
        """Yield (layer_index, name, array) in declaration order."""
        for i, p in enumerate(self.params):
            for name in sorted(p):
                yield i, name, p[name]


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def build_network(specs: list[LayerSpec], seed: int) -> Network:
    """Initialize weights uniform in a Glorot range, biases zero, seeded."""
    rng = np.random.default_rng(seed)
    params: list[dict] = []
    for spec in specs:
        if spec.kind == "conv1d":
            fan_in = spec.in_channels * spec.kernel_len
            fan_out = spec.out_channels * spec.kernel_len
            lim = glorot_limit(fan_in, fan_out)
            params.append(
                {
                    "b": np.zeros(spec.out_channels),
                    "w": rng.uniform(
                        -lim,
                        lim,
                        (spec.out_channels, spec.in_channels, spec.kernel_len),
                    ),
                }
            )
        elif spec.kind == "dense":
            lim = glorot_limit(spec.in_dim, spec.out_dim)
            params.append(
                {
                    "b": np.zeros(spec.out_dim),
                    "w": rng.uniform(-lim, lim, (spec.in_dim, spec.out_dim)),
                }
            )
        else:
            params.append({})
    return Network(list(specs), params, seed)


def conv_output_len(length: int, kernel_len: int, stride: int) -> int:
    return (length - kernel_len) // stride + 1


def _conv_windows(x: np.ndarray, kernel_len: int, stride: int) -> np.ndarray:
    # (B, C, L) -> (B, C, L_out, K) strided view, no copy
    view = np.lib.stride_tricks.sliding_window_view(x, kernel_len, axis=2)
    return view[:, :, ::stride, :]


def _conv_cols(x: np.ndarray, kernel_len: int, stride: int) -> np.ndarray:
    # contiguous (B*L_out, C*K) window matrix so matmul hits BLAS
    win = _conv_windows(x, kernel_len, stride)
    b, c, l_out, k = win.shape
    return win.transpose(0, 2, 1, 3).reshape(b * l_out, c * k), l_out


def _layer_forward(spec: LayerSpec, p: dict, x: np.ndarray, index: int):
    kind = spec.kind
    if kind == "conv1d":
        if x.ndim != 3 or x.shape[1] != spec.in_channels:
            raise ValueError(
                f"layer {index} (conv1d): expected (batch, {spec.in_channels},"
                f" length) input, got {x.shape}"
            )
        if x.shape[2] < spec.kernel_len:
            raise ValueError(
                f"layer {index} (conv1d): input length {x.shape[2]} shorter"
                f" than kernel {spec.kernel_len}"
            )
        cols, l_out = _conv_cols(x, spec.kernel_len, spec.stride)
        out = cols @ p["w"].reshape(spec.out_channels, -1).T + p["b"]
        y = out.reshape(x.shape[0], l_out, spec.out_channels).transpose(0, 2, 1)
        return y, x
    if kind == "dense":
        if x.ndim != 2 or x.shape[1] != spec.in_dim:
            raise ValueError(
                f"layer {index} (dense): expected (batch, {spec.in_dim})"
                f" input, got {x.shape}"
            )
        return x @ p["w"] + p["b"], x
    if kind == "relu":
        return np.maximum(x, 0.0), x
    if kind == "leaky_relu":
        return np.where(x >= 0.0, x, spec.slope * x), x
    if kind == "softmax":
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    raise ValueError(f"unknown layer kind: {kind!r}")


def forward(net: Network, x: np.ndarray, n_layers: int | None = None):
    """Run the network; returns (output, cache) for a later backward call.

    n_layers runs only the leading layers (a cache built that way cannot
    back-propagate through the full network).
    """
    x = np.asarray(x, dtype=np.float64)
    stop = len(net.specs) if n_layers is None else n_layers
    cache = {"net_id": id(net), "input_shape": x.shape, "layers": []}
    for i, (spec, p) in enumerate(zip(net.specs[:stop], net.params)):
        x, layer_cache = _layer_forward(spec, p, x, i)
        cache["layers"].append(layer_cache)
    cache["output_shape"] = x.shape
    return x, cache


def _layer_backward(spec: LayerSpec, p: dict, grad: np.ndarray, layer_cache):
    kind = spec.kind
    if kind == "conv1d":
        x = layer_cache
        batch, channels, _ = x.shape
        kernel_len, stride = spec.kernel_len, spec.stride
        cols, l_out = _conv_cols(x, kernel_len, stride)
        flat = grad.transpose(0, 2, 1).reshape(batch * l_out, spec.out_channels)
        grad_w = (flat.T @ cols).reshape(spec.out_channels, channels, kernel_len)
        grad_b = flat.sum(axis=0)
        # scatter window gradients back onto the (overlapping) input taps
        grad_win = (flat @ p["w"].reshape(spec.out_channels, -1)).reshape(
            batch, l_out, channels, kernel_len
        )
        grad_x = np.zeros_like(x)
        for j in range(kernel_len):
            grad_x[:, :, j : j + stride * l_out : stride] += grad_win[
                :, :, :, j
            ].transpose(0, 2, 1)
        return grad_x, {"w": grad_w, "b": grad_b}
    if kind == "dense":
        x = layer_cache
        return grad @ p["w"].T, {"w": x.T @ grad, "b": grad.sum(axis=0)}
    if kind == "relu":
        return grad * (layer_cache > 0.0), {}
    if kind == "leaky_relu":
        return grad * np.where(layer_cache >= 0.0, 1.0, spec.slope), {}
    if kind == "softmax":
        y = layer_cache
        inner = (grad * y).sum(axis=-1, keepdims=True)
        return y * (grad - inner), {}
    if kind == "flatten":
        return grad.reshape(layer_cache), {}
    raise ValueError(f"unknown layer kind: {kind!r}")


def backward(
    net: Network, cache, loss_grad: np.ndarray, return_input_grad: bool = False
):
    """Exact gradients of the scalar loss for every parameter array.

    With return_input_grad, also returns the loss gradient at the network
    input so gradients can flow through composed networks.
    """
    if cache.get("net_id") != id(net) or len(cache["layers"]) != len(net.specs):
        raise ValueError("cache does not match this network")
    grad = np.asarray(loss_grad, dtype=np.float64)
    if grad.shape != cache["output_shape"]:
        raise ValueError(
            f"loss gradient shape {grad.shape} does not match network"
            f" output {cache['output_shape']}"
        )
    grads: list[dict] = [{} for _ in net.specs]
    for i in range(len(net.specs) - 1, -1, -1):
        grad, param_grads = _layer_backward(
            net.specs[i], net.params[i], grad, cache["layers"][i]
        )
        grads[i] = param_grads
    if return_input_grad:
        return grads, grad
    return grads


def loss_mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements, with its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def loss_cross_entropy(probs: np.ndarray, class_index: int):
    """Negative log probability of the true class, with its gradient.

    Probabilities are clamped to 1e-12 before the log.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("probs must be a single distribution")
    if not 0 <= class_index < probs.shape[0]:
        raise ValueError(f"class index {class_index} out of range")
    if probs.min() < -1e-6 or abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError("probs is not a valid distribution")
    p = max(float(probs[class_index]), 1e-12)
    grad = np.zeros_like(probs)
    grad[class_index] = -1.0 / p
    return -float(np.log(p)), grad


def mean_cross_entropy(probs: np.ndarray, class_indices: np.ndarray):
    """Batch mean of per-row cross-entropy, with its gradient."""
    probs = np.asarray(probs, dtype=np.float64)
    idx = np.asarray(class_indices, dtype=np.int64)
    if probs.ndim != 2 or idx.shape != (probs.shape[0],):
        raise ValueError("expected (batch, classes) probs and (batch,) labels")
    if ((idx < 0) | (idx >= probs.shape[1])).any():
        raise ValueError("class index out of range")
    rows = np.arange(probs.shape[0])
    p = np.maximum(probs[rows, idx], 1e-12)
    grad = np.zeros_like(probs)
    grad[rows, idx] = -1.0 / (p * probs.shape[0])
    return float(-np.log(p).mean()), grad


@dataclass
class OptimizerState:
    """SGD or Adam state over one network's parameter list."""

    kind: str
    learning_rate: float
    m: list[dict] = field(default_factory=list)
    v: list[dict] = field(default_factory=list)
    t: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind: {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(
    state: OptimizerState,
    params: list[dict],
    grads: list[dict],
    grad_clip: float = 0.0,
) -> None:
    """Update parameters in place; errors on any non-finite gradient.

    A positive grad_clip rescales the whole gradient so its global L2 norm
    is at most grad_clip.
    """
    flat = []
    for p, g in zip(params, grads):
        for name in p:
            if name not in g:
                raise ValueError(f"missing gradient for parameter {name!r}")
            if not np.isfinite(g[name]).all():
                raise FloatingPointError(
                    "non-finite gradient encountered; aborting the step"
                )
            flat.append((p, g, name))
    scale = 1.0
    if grad_clip > 0.0:
        norm = float(
            np.sqrt(sum(float((g[name] ** 2).sum()) for _, g, name in flat))
        )
        if norm > grad_clip:
            scale = grad_clip / norm

    lr = state.learning_rate
    if state.kind == "sgd":
        for p, g, name in flat:
            p[name] -= lr * scale * g[name]
        return

    if not state.m:
        state.m = [{n: np.zeros_like(a) for n, a in p.items()} for p in params]
        state.v = [{n: np.zeros_like(a) for n, a in p.items()} for p in params]
    state.t += 1
    b1, b2, eps = 0.9, 0.999, 1e-8
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        for name in p:
            grad = scale * g[name]
            m = state.m[i][name]
            v = state.v[i][name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            p[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class LrSchedule:
    """Halve on no improvement, clamp to the floor, flag exhaustion."""

    current_lr: float = LR_CEILING
    best_val_loss: float = float("inf")
    floor: float = LR_FLOOR
    ceiling: float = LR_CEILING
    exhausted: bool = False

    def __post_init__(self) -> None:
        if not self.floor <= self.current_lr <= self.ceiling:
            raise ValueError("learning rate outside schedule range")


def lr_update(sched: LrSchedule, epoch_val_loss: float) -> LrSchedule:
    """One epoch of the halving schedule; returns the updated schedule.

    No improvement halves the rate (clamped at the floor) and marks the
    schedule exhausted once a halving would cross the floor; improvement
    records the new best loss and keeps the rate.
    """
    if not np.isfinite(epoch_val_loss):
        raise ValueError("validation loss must be finite")
    if epoch_val_loss >= sched.best_val_loss:
        if sched.current_lr / 2.0 < sched.floor:
            sched.exhausted = True
        sched.current_lr = max(sched.current_lr / 2.0, sched.floor)
    else:
        sched.best_val_loss = float(epoch_val_loss)
    return sched


def encode_network(net: Network) -> bytes:
    """Serialize to the versioned binary model format.

    Layout: magic "BMTL", format version (u32), rng seed (i64), layer count
    (u32), one spec record per layer, then every parameter tensor as
    little-endian 64-bit floats in declaration order.
    """
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _FORMAT_VERSION)
    out += struct.pack("<q", net.rng_seed)
    out += struct.pack("<I", len(net.specs))
    for spec in net.specs:
        out += struct.pack("<B", _KIND_IDS[spec.kind])
        if spec.kind == "conv1d":
            out += struct.pack(
                "<IIII",
                spec.in_channels,
                spec.out_channels,
                spec.kernel_len,
                spec.stride,
            )
        elif spec.kind == "dense":
            out += struct.pack("<II", spec.in_dim, spec.out_dim)
        elif spec.kind == "leaky_relu":
            out += struct.pack("<d", spec.slope)
    for _, _, array in net.flat_params():
        out += array.astype("<f8").tobytes()
    return bytes(out)


def save_network(net: Network, path: str | Path) -> None:
    """Persist via encode_network."""
    Path(path).write_bytes(encode_network(net))


def decode_network(raw: bytes) -> Network:
    """Inverse of encode_network; errors on bad magic or version."""
    if raw[:4] != _MAGIC:
        raise ValueError(f"not a model file: bad magic {raw[:4]!r}")
    offset = 4
    version = struct.unpack_from("<I", raw, offset)[0]
    offset += 4
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    seed = struct.unpack_from("<q", raw, offset)[0]
    offset += 8
    n_layers = struct.unpack_from("<I", raw, offset)[0]
    offset += 4
    specs: list[LayerSpec] = []
    for _ in range(n_layers):
        kind_id = struct.unpack_from("<B", raw, offset)[0]
        offset += 1
        kind = _KIND_NAMES.get(kind_id)
        if kind is None:
            raise ValueError(f"unknown layer kind id {kind_id}")
        if kind == "conv1d":
            ic, oc, k, s = struct.unpack_from("<IIII", raw, offset)
            offset += 16
            specs.append(
                LayerSpec("conv1d", in_channels=ic, out_channels=oc, kernel_len=k, stride=s)
            )
        elif kind == "dense":
            di, do = struct.unpack_from("<II", raw, offset)
            offset += 8
            specs.append(LayerSpec("dense", in_dim=di, out_dim=do))
        elif kind == "leaky_relu":
            (slope,) = struct.unpack_from("<d", raw, offset)
            offset += 8
            specs.append(LayerSpec("leaky_relu", slope=slope))
        else:
            specs.append(LayerSpec(kind))
    net = build_network(specs, seed)
    for _, _, array in net.flat_params():
        nbytes = array.size * 8
        if offset + nbytes > len(raw):
            raise ValueError(f"model file truncated at byte {offset}")
        array[...] = np.frombuffer(raw, dtype="<f8", count=array.size, offset=offset).reshape(array.shape)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"trailing bytes after model data at byte {offset}")
    return net


def load_network(path: str | Path) -> Network:
    """Load a model saved by save_network."""
    return decode_network(Path(path).read_bytes())
