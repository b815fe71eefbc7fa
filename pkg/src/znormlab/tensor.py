"""Dense tensor primitives shared by every other module.

Tensors are C-contiguous (row-major) numpy arrays of a configurable float
precision: float32 for normal training, float64 for verification builds.
Operations are pure functions; nothing here mutates its inputs.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_PRECISION = "f32"


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class EmptyTensorError(ValueError):
    """Operation requires at least one element."""


def as_tensor(data, precision: str = DEFAULT_PRECISION) -> Tensor:
    """Row-major float tensor of the given precision."""
    return np.ascontiguousarray(data, dtype=DTYPES[precision])


def reshape(a: Tensor, shape) -> Tensor:
    """Reshape preserving row-major element order."""
    return np.reshape(a, shape)


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Apply `kind` between a tensor and a same-shape tensor or scalar."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if isinstance(b, np.ndarray) and b.shape != a.shape and b.shape != ():
        raise ShapeError(f"elementwise {kind}: shapes {a.shape} vs {b.shape}")
    return _ELEMENTWISE[kind](a, b)


def add(a: Tensor, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b) -> Tensor:
    return elementwise("mul", a, b)


def reduce_stats(a: Tensor) -> tuple[float, float]:
    """Mean and population standard deviation (N in the denominator).

    Accumulates in float64 whatever the tensor dtype, so the result matches
    a naive two-pass loop over the same values essentially exactly.
    """
    if a.size == 0:
        raise EmptyTensorError("reduce_stats on empty tensor")
    d = a.astype(np.float64, copy=False)
    mean = float(np.mean(d))
    var = float(np.mean((d - mean) ** 2))
    return mean, float(np.sqrt(var))


def l2_norm(a: Tensor) -> float:
    """Euclidean norm over all elements, accumulated in float64."""
    d = a.astype(np.float64, copy=False)
    return float(np.sqrt(np.sum(d * d)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def conv2d_out_hw(h: int, w: int, r: int, s: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - r) // stride + 1, (w + 2 * pad - s) // stride + 1


def _check_conv_geometry(x: Tensor, k: Tensor, stride: int, pad: int) -> tuple[int, int]:
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and KCRS kernel, got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d stride/pad infeasible: stride={stride} pad={pad}")
    _, _, h, w = x.shape
    _, _, r, s = k.shape
    if r > h + 2 * pad or s > w + 2 * pad:
        raise ShapeError(
            f"conv2d kernel {r}x{s} exceeds padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    return conv2d_out_hw(h, w, r, s, stride, pad)


def im2col(x: Tensor, r: int, s: int, stride: int, pad: int) -> Tensor:
    """Patch matrix [N*H'*W', C*R*S] for convolution as a single matmul."""
    n, c, h, w = x.shape
    oh, ow = conv2d_out_hw(h, w, r, s, stride, pad)
    img = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)]) if pad else x
    col = np.empty((n, c, r, s, oh, ow), dtype=x.dtype)
    for i in range(r):
        i_max = i + stride * oh
        for j in range(s):
            j_max = j + stride * ow
            col[:, :, i, j, :, :] = img[:, :, i:i_max:stride, j:j_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * r * s)


def col2im(col: Tensor, x_shape, r: int, s: int, stride: int, pad: int) -> Tensor:
    """Adjoint of im2col: scatter-add patch gradients back to image layout."""
    n, c, h, w = x_shape
    oh, ow = conv2d_out_hw(h, w, r, s, stride, pad)
    col = col.reshape(n, oh, ow, c, r, s).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for i in range(r):
        i_max = i + stride * oh
        for j in range(s):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, :, i, j, :, :]
    if pad:
        return img[:, :, pad : pad + h, pad : pad + w]
    return img


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding, NCHW layout."""
    oh, ow = _check_conv_geometry(x, k, stride, pad)
    n = x.shape[0]
    kk, _, r, s = k.shape
    col = im2col(x, r, s, stride, pad)
    out = col @ k.reshape(kk, -1).T
    return out.reshape(n, oh, ow, kk).transpose(0, 3, 1, 2)
