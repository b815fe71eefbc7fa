"""Residual network layers: spec types, cached forward, exact backward.

A network is a flat sequence of layer specs; residual blocks nest a branch
sub-sequence plus an additive skip (identity, or a learned projection when
the branch changes shape). The forward pass saves exactly what backward
needs; backward walks the sequence in reverse and accumulates parameter
gradients by hierarchical path (e.g. ``block1.conv0.weight``).

The post-addition ReLU of a residual stage sits outside the block, so the
skip/branch decomposition point is exactly the addition node: backward
through a block computes  dL/dx = skip_back(u) + branch_back(u)  with
u = dL/dy at that node. An optional tap observes (u, dL/dx) per block
without perturbing the pass.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .tensor import DTYPES, ShapeError, Tensor, col2im, conv2d_out_hw, im2col

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

CHECKPOINT_MAGIC = b"ZNL1"


class StaleCacheError(RuntimeError):
    """A forward cache was already consumed by a backward call."""


class CacheMismatchError(RuntimeError):
    """Cache entry does not belong to the block being decomposed."""


class LabelError(ValueError):
    """A class label lies outside [0, num_classes)."""


class CheckpointError(ValueError):
    """Checkpoint bytes do not follow the documented layout."""


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0
    bias: bool = True


@dataclass(frozen=True)
class BatchNorm:
    num_features: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class ResidualBlock:
    branch: tuple
    skip: str = "identity"  # "identity" | "projection"

    def __post_init__(self):
        if self.skip not in ("identity", "projection"):
            raise ValueError(f"unknown skip kind {self.skip!r}")


_KIND_NAMES = {
    Dense: "dense",
    Conv2d: "conv",
    BatchNorm: "bn",
    Relu: "relu",
    Flatten: "flatten",
    GlobalAvgPool: "gap",
    ResidualBlock: "block",
}


def _named(layers, prefix: str = ""):
    counters: dict[str, int] = {}
    out = []
    for layer in layers:
        kind = _KIND_NAMES[type(layer)]
        idx = counters.get(kind, 0)
        counters[kind] = idx + 1
        out.append((f"{prefix}{kind}{idx}", layer))
    return out


def _shape_after(layer, shape, path: str):
    """Output feature shape (without batch dim) for one layer."""
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_dim:
            raise ShapeError(f"{path}: dense expects ({layer.in_dim},), got {shape}")
        return (layer.out_dim,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ShapeError(f"{path}: conv expects (C={layer.in_ch},H,W), got {shape}")
        oh, ow = conv2d_out_hw(shape[1], shape[2], layer.kernel, layer.kernel,
                               layer.stride, layer.pad)
        if oh < 1 or ow < 1:
            raise ShapeError(f"{path}: conv output would be empty for input {shape}")
        return (layer.out_ch, oh, ow)
    if isinstance(layer, BatchNorm):
        if shape[0] != layer.num_features:
            raise ShapeError(f"{path}: batchnorm over {layer.num_features} features, got {shape}")
        return shape
    if isinstance(layer, Relu):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, GlobalAvgPool):
        if len(shape) != 3:
            raise ShapeError(f"{path}: global-avg-pool expects (C,H,W), got {shape}")
        return (shape[0],)
    if isinstance(layer, ResidualBlock):
        inner = shape
        for name, sub in _named(layer.branch, f"{path}."):
            inner = _shape_after(sub, inner, name)
        if layer.skip == "identity":
            if inner != shape:
                raise ShapeError(
                    f"{path}: identity skip needs matching shapes, branch {shape} -> {inner}"
                )
        else:
            if inner == shape:
                raise ShapeError(f"{path}: projection skip but branch preserves shape {shape}")
            _projection_layer(layer, shape, inner, path)  # validates derivability
        return inner
    raise TypeError(f"unknown layer spec {layer!r}")


def _projection_layer(block: ResidualBlock, in_shape, out_shape, path: str):
    """Learned skip matching the branch's shape change: 1x1 conv or dense."""
    if len(in_shape) == 3 and len(out_shape) == 3:
        stride = in_shape[1] // out_shape[1] if out_shape[1] else 1
        if conv2d_out_hw(in_shape[1], in_shape[2], 1, 1, stride, 0) != out_shape[1:]:
            raise ShapeError(f"{path}: no 1x1 projection maps {in_shape} to {out_shape}")
        return Conv2d(in_shape[0], out_shape[0], 1, stride, 0, bias=False)
    if len(in_shape) == 1 and len(out_shape) == 1:
        return Dense(in_shape[0], out_shape[0], bias=False)
    raise ShapeError(f"{path}: projection cannot map {in_shape} to {out_shape}")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple  # per-example shape, e.g. (C, H, W)
    name: str = "net"

    def output_shape(self) -> tuple:
        shape = self.input_shape
        for path, layer in _named(self.layers):
            shape = _shape_after(layer, shape, path)
        return shape

    def validate(self) -> None:
        self.output_shape()


# ---------------------------------------------------------------------------
# parameters and initialization


class Parameter:
    """Named weight tensor with a same-shape gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: Tensor):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _kaiming_uniform(gen: rng.Xoshiro256StarStar, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    n = int(np.prod(shape))
    vals = np.fromiter((gen.uniform(-bound, bound) for _ in range(n)), dtype=np.float64, count=n)
    return vals.astype(dtype).reshape(shape)


def _init_layer(name, layer, params, bn_state, gen, dtype, in_shape, path_prefix=""):
    if isinstance(layer, Dense):
        params[f"{name}.weight"] = Parameter(
            f"{name}.weight",
            _kaiming_uniform(gen, (layer.in_dim, layer.out_dim), layer.in_dim, dtype),
        )
        if layer.bias:
            params[f"{name}.bias"] = Parameter(
                f"{name}.bias", np.zeros(layer.out_dim, dtype=dtype)
            )
    elif isinstance(layer, Conv2d):
        fan_in = layer.in_ch * layer.kernel * layer.kernel
        shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
        params[f"{name}.weight"] = Parameter(
            f"{name}.weight", _kaiming_uniform(gen, shape, fan_in, dtype)
        )
        if layer.bias:
            params[f"{name}.bias"] = Parameter(
                f"{name}.bias", np.zeros(layer.out_ch, dtype=dtype)
            )
    elif isinstance(layer, BatchNorm):
        params[f"{name}.gamma"] = Parameter(
            f"{name}.gamma", np.ones(layer.num_features, dtype=dtype)
        )
        params[f"{name}.beta"] = Parameter(
            f"{name}.beta", np.zeros(layer.num_features, dtype=dtype)
        )
        bn_state[name] = {
            "mean": np.zeros(layer.num_features, dtype=dtype),
            "var": np.ones(layer.num_features, dtype=dtype),
        }
    elif isinstance(layer, ResidualBlock):
        inner = in_shape
        for sub_name, sub in _named(layer.branch, f"{name}."):
            _init_layer(sub_name, sub, params, bn_state, gen, dtype, inner)
            inner = _shape_after(sub, inner, sub_name)
        if layer.skip == "projection":
            proj = _projection_layer(layer, in_shape, inner, name)
            _init_layer(f"{name}.skip", proj, params, bn_state, gen, dtype, in_shape)


def init_network(spec: NetworkSpec, seed: int, precision: str = "f32"):
    """Seeded Kaiming-uniform weights, zero biases, gamma=1/beta=0.

    Returns (params, bn_state); paths follow construction order, which is the
    canonical parameter order everywhere else (checkpoints, diagnostics).
    """
    spec.validate()
    dtype = DTYPES[precision]
    gen = rng.generator(seed, "init")
    params: dict[str, Parameter] = {}
    bn_state: dict[str, dict[str, Tensor]] = {}
    shape = spec.input_shape
    for name, layer in _named(spec.layers):
        _init_layer(name, layer, params, bn_state, gen, dtype, shape)
        shape = _shape_after(layer, shape, name)
    return params, bn_state


# ---------------------------------------------------------------------------
# forward


@dataclass
class BlockEntry:
    path: str
    in_shape: tuple
    branch_entries: list
    skip_entry: object  # None for identity skip
    skip_layer: object


@dataclass
class Cache:
    """Per-step forward state; produced by one forward, consumed by one backward."""

    entries: list = field(default_factory=list)
    mode: str = "train"
    consumed: bool = False


class BlockTap:
    """Observation-only record of residual-block gradients during backward.

    ``blocks[path] = (upstream, input_grad)`` where upstream is dL/dy at the
    addition node and input_grad the full dL/dx. Never feeds back into the
    pass; trajectories with or without a tap are identical.
    """

    def __init__(self):
        self.blocks: dict[str, tuple[Tensor, Tensor]] = {}

    def record(self, path: str, upstream: Tensor, input_grad: Tensor) -> None:
        self.blocks[path] = (upstream, input_grad)


def _bn_axes(x: Tensor):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_broadcast(v: Tensor, ndim: int) -> Tensor:
    return v.reshape(1, -1, 1, 1) if ndim == 4 else v


def _forward_layer(name, layer, params, bn_state, x, mode):
    if isinstance(layer, Dense):
        w = params[f"{name}.weight"].value
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"{name}: dense input {x.shape} vs weight {w.shape}")
        y = x @ w
        if layer.bias:
            y = y + params[f"{name}.bias"].value
        return y, ("dense", x)
    if isinstance(layer, Conv2d):
        w = params[f"{name}.weight"].value
        k, _, r, s = w.shape
        if x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"{name}: conv input {x.shape} vs kernel {w.shape}")
        oh, ow = conv2d_out_hw(x.shape[2], x.shape[3], r, s, layer.stride, layer.pad)
        col = im2col(x, r, s, layer.stride, layer.pad)
        out = col @ w.reshape(k, -1).T
        if layer.bias:
            out = out + params[f"{name}.bias"].value
        y = out.reshape(x.shape[0], oh, ow, k).transpose(0, 3, 1, 2)
        return y, ("conv", col, x.shape)
    if isinstance(layer, BatchNorm):
        gamma = params[f"{name}.gamma"].value
        beta = params[f"{name}.beta"].value
        state = bn_state[name]
        axes = _bn_axes(x)
        if mode == "train":
            if x.shape[0] == 1:
                raise ValueError(f"{name}: batch of size 1 in train mode has undefined variance")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            state["mean"][...] = BN_MOMENTUM * state["mean"] + (1 - BN_MOMENTUM) * mean
            state["var"][...] = BN_MOMENTUM * state["var"] + (1 - BN_MOMENTUM) * var
        else:
            mean = state["mean"]
            var = state["var"]
        invstd = 1.0 / np.sqrt(var + x.dtype.type(BN_EPS))
        xhat = (x - _bn_broadcast(mean, x.ndim)) * _bn_broadcast(invstd, x.ndim)
        y = _bn_broadcast(gamma, x.ndim) * xhat + _bn_broadcast(beta, x.ndim)
        return y.astype(x.dtype, copy=False), ("bn", xhat, invstd, gamma, mode)
    if isinstance(layer, Relu):
        mask = x > 0
        return x * mask, ("relu", mask)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), ("flatten", x.shape)
    if isinstance(layer, GlobalAvgPool):
        if x.ndim != 4:
            raise ShapeError(f"{name}: global-avg-pool expects 4-D input, got {x.shape}")
        return x.mean(axis=(2, 3)), ("gap", x.shape)
    if isinstance(layer, ResidualBlock):
        branch_entries = []
        yb = x
        for sub_name, sub in _named(layer.branch, f"{name}."):
            yb, entry = _forward_layer(sub_name, sub, params, bn_state, yb, mode)
            branch_entries.append(entry)
        if layer.skip == "identity":
            skip_layer, skip_entry, ys = None, None, x
        else:
            skip_layer = _projection_layer(
                layer, x.shape[1:], yb.shape[1:], name
            )
            ys, skip_entry = _forward_layer(
                f"{name}.skip", skip_layer, params, bn_state, x, mode
            )
        y = yb + ys
        return y, BlockEntry(name, x.shape, branch_entries, skip_entry, skip_layer)
    raise TypeError(f"unknown layer spec {layer!r}")


def forward(spec: NetworkSpec, params, batch: Tensor, bn_state, mode: str = "train"):
    """Run the network on a batch; returns (logits, cache).

    ``mode`` selects batch-norm behavior; train mode updates running stats
    in place. The cache retains everything backward needs for this batch.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(
            f"{spec.name}: batch shape {batch.shape[1:]} != input spec {spec.input_shape}"
        )
    cache = Cache(mode=mode)
    x = batch
    if params:
        dtype = next(iter(params.values())).value.dtype
        x = x.astype(dtype, copy=False)
    for name, layer in _named(spec.layers):
        x, entry = _forward_layer(name, layer, params, bn_state, x, mode)
        cache.entries.append(entry)
    return x, cache


# ---------------------------------------------------------------------------
# backward


def _backward_layer(name, layer, entry, params, u, sink, tap):
    if isinstance(layer, Dense):
        _, x = entry
        w = params[f"{name}.weight"].value
        _sink_add(sink, f"{name}.weight", x.T @ u)
        if layer.bias:
            _sink_add(sink, f"{name}.bias", u.sum(axis=0))
        return u @ w.T
    if isinstance(layer, Conv2d):
        _, col, x_shape = entry
        w = params[f"{name}.weight"].value
        k, _, r, s = w.shape
        um = u.transpose(0, 2, 3, 1).reshape(-1, k)
        _sink_add(sink, f"{name}.weight", (um.T @ col).reshape(w.shape))
        if layer.bias:
            _sink_add(sink, f"{name}.bias", um.sum(axis=0))
        dcol = um @ w.reshape(k, -1)
        return col2im(dcol, x_shape, r, s, layer.stride, layer.pad)
    if isinstance(layer, BatchNorm):
        _, xhat, invstd, gamma, mode = entry
        axes = _bn_axes(u)
        dgamma = (u * xhat).sum(axis=axes)
        dbeta = u.sum(axis=axes)
        _sink_add(sink, f"{name}.gamma", dgamma)
        _sink_add(sink, f"{name}.beta", dbeta)
        g = _bn_broadcast(gamma * invstd, u.ndim)
        if mode == "eval":
            return u * g
        m = float(np.prod([u.shape[i] for i in axes]))
        return (g / u.dtype.type(m)) * (
            m * u
            - xhat * _bn_broadcast(dgamma, u.ndim)
            - _bn_broadcast(dbeta, u.ndim)
        )
    if isinstance(layer, Relu):
        _, mask = entry
        return u * mask
    if isinstance(layer, Flatten):
        _, x_shape = entry
        return u.reshape(x_shape)
    if isinstance(layer, GlobalAvgPool):
        _, x_shape = entry
        n, c, h, w = x_shape
        return np.broadcast_to((u / u.dtype.type(h * w))[:, :, None, None], x_shape).copy()
    if isinstance(layer, ResidualBlock):
        g_skip, g_branch = _block_backward_parts(layer, entry, params, u, sink)
        dx = g_skip + g_branch
        if tap is not None:
            tap.record(entry.path, u, dx)
        return dx
    raise TypeError(f"unknown layer spec {layer!r}")


def _block_backward_parts(layer: ResidualBlock, entry: BlockEntry, params, u, sink):
    """Skip-path and branch-path gradients of the block input, separately."""
    gb = u
    for (sub_name, sub), sub_entry in zip(
        reversed(_named(layer.branch, f"{entry.path}.")), reversed(entry.branch_entries)
    ):
        gb = _backward_layer(sub_name, sub, sub_entry, params, gb, sink, None)
    if layer.skip == "identity":
        gs = u.copy()
    else:
        gs = _backward_layer(
            f"{entry.path}.skip", entry.skip_layer, entry.skip_entry, params, u, sink, None
        )
    return gs, gb


def _sink_add(sink: dict, path: str, delta: Tensor) -> None:
    if path in sink:
        sink[path] += delta
    else:
        sink[path] = delta


def backward(spec: NetworkSpec, params, cache: Cache, loss_grad: Tensor,
             tap: BlockTap | None = None):
    """Exact reverse pass; returns the gradient map (path -> tensor).

    Parameter ``grad`` buffers are overwritten with the new gradients and the
    returned map aliases them. The cache is single-use.
    """
    if cache.consumed:
        raise StaleCacheError("cache was already consumed by a backward call")
    cache.consumed = True
    sink: dict[str, Tensor] = {}
    u = loss_grad
    for (name, layer), entry in zip(
        reversed(_named(spec.layers)), reversed(cache.entries)
    ):
        u = _backward_layer(name, layer, entry, params, u, sink, tap)
    grads: dict[str, Tensor] = {}
    for path, p in params.items():
        if path in sink:
            p.grad[...] = sink[path]
        else:
            p.grad[...] = 0
        grads[path] = p.grad
    return grads


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean cross-entropy and its logits gradient, max-subtraction stabilized."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise LabelError(f"label {bad} outside [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    sumexp = expz.sum(axis=1, keepdims=True)
    logp = z - np.log(sumexp)
    loss = float(-logp[np.arange(n), labels].mean())
    p = expz / sumexp
    p[np.arange(n), labels] -= 1
    dlogits = (p / logits.dtype.type(n)).astype(logits.dtype, copy=False)
    return loss, dlogits


def accuracy(logits: Tensor, labels) -> float:
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# presets


def preset(name: str, input_shape: tuple, num_classes: int) -> NetworkSpec:
    """Reference architectures for the desk-scale experiments."""
    if name == "resmlp-s":
        width = 128
        return _resmlp(name, input_shape, num_classes, width=width, blocks=4)
    if name == "resnet-8":
        return _resnet8(name, input_shape, num_classes, c1=16, c2=32)
    raise ValueError(f"unknown architecture preset {name!r}")


def verification_preset(name: str) -> NetworkSpec:
    """Reduced geometry for finite-difference checks: same layer kinds and
    block topology as the training preset, sized so checking every parameter
    coordinate stays fast."""
    if name == "resmlp-s":
        return _resmlp("resmlp-s-check", (1, 1, 4), 3, width=12, blocks=2)
    if name == "resnet-8":
        return _resnet8("resnet-8-check", (3, 8, 8), 4, c1=6, c2=12)
    raise ValueError(f"unknown architecture preset {name!r}")


def _resmlp(name, input_shape, num_classes, width, blocks):
    in_dim = int(np.prod(input_shape))
    layers = [Flatten(), Dense(in_dim, width), Relu()]
    for _ in range(blocks):
        layers.append(
            ResidualBlock(branch=(Dense(width, width), Relu(), Dense(width, width)))
        )
        layers.append(Relu())
    layers.append(Dense(width, num_classes))
    return NetworkSpec(tuple(layers), tuple(input_shape), name)


def _resnet8(name, input_shape, num_classes, c1, c2):
    c_in = input_shape[0]
    def conv_bn(cin, cout, stride=1):
        return (Conv2d(cin, cout, 3, stride, 1), BatchNorm(cout))
    layers = [
        *conv_bn(c_in, c1), Relu(),
        ResidualBlock(branch=(*conv_bn(c1, c1), Relu(), *conv_bn(c1, c1))), Relu(),
        ResidualBlock(branch=(*conv_bn(c1, c2, 2), Relu(), *conv_bn(c2, c2)),
                      skip="projection"), Relu(),
        ResidualBlock(branch=(*conv_bn(c2, c2), Relu(), *conv_bn(c2, c2))), Relu(),
        GlobalAvgPool(),
        Dense(c2, num_classes),
    ]
    return NetworkSpec(tuple(layers), tuple(input_shape), name)


# ---------------------------------------------------------------------------
# checkpoint io
#
# Layout, little-endian throughout:
#   magic "ZNL1" | u8 value width (4 or 8) | entries until EOF
#   entry: u32 path length | path UTF-8 | u32 rank | u32 extents... | raw values


def save_checkpoint(path, tensors: dict[str, Tensor], precision: str) -> None:
    width = 4 if precision == "f32" else 8
    dtype = "<f4" if width == 4 else "<f8"
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", width))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=dtype)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, Tensor], str]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 5:
        raise CheckpointError("truncated header")
    width = blob[4]
    if width not in (4, 8):
        raise CheckpointError(f"bad precision flag {width}")
    dtype = np.dtype("<f4") if width == 4 else np.dtype("<f8")
    tensors: dict[str, Tensor] = {}
    off = 5
    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated while reading {what}")
        chunk = blob[off : off + n]
        off += n
        return chunk
    while off < len(blob):
        (plen,) = struct.unpack("<I", take(4, "path length"))
        name = take(plen, "path").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        extents = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(extents)) if rank else 1
        raw = take(count * width, f"values of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(extents).copy()
    return tensors, ("f32" if width == 4 else "f64")
