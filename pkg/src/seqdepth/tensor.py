"""Dense tensor kernels.

Tensors are plain C-contiguous numpy arrays, channels-first (C x H x W) for
images. Production code runs in float32; every kernel preserves the dtype of
its inputs so the gradient checker can run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionMismatchError, InvalidConfigError

DTYPE = np.float32


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    """Return ``x`` as a C-contiguous array of ``dtype`` (no copy if already one)."""
    return np.ascontiguousarray(x, dtype=dtype)


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int]
    stride: int = 1
    pad: int = 0
    in_channels: int | None = None
    out_channels: int | None = None

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or self.stride < 1 or self.pad < 0:
            raise InvalidConfigError(f"invalid conv spec {self}")

    @classmethod
    def same(cls, k, stride=1, in_channels=None, out_channels=None):
        """3x3 kernels pad by 1, 1x1 kernels do not pad."""
        return cls((k, k), stride, (k - 1) // 2, in_channels, out_channels)

    def output_extent(self, height, width):
        kh, kw = self.kernel
        ho = (height + 2 * self.pad - kh) // self.stride + 1
        wo = (width + 2 * self.pad - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise InvalidConfigError(
                f"conv {self.kernel}/{self.stride} pad {self.pad} on {height}x{width} "
                "gives an empty output"
            )
        return ho, wo


def _check_conv(x, weight, bias, spec):
    if x.ndim != 3:
        raise DimensionMismatchError(f"conv2d input must be C x H x W, got {x.shape}", "input")
    if weight.ndim != 4:
        raise DimensionMismatchError(f"conv2d weight must be O x C x kh x kw, got {weight.shape}", "weight")
    if x.shape[0] != weight.shape[1]:
        raise DimensionMismatchError(
            f"input has {x.shape[0]} channels but weight expects {weight.shape[1]}", "channels"
        )
    if tuple(weight.shape[2:]) != tuple(spec.kernel):
        raise DimensionMismatchError(
            f"weight kernel {weight.shape[2:]} does not match spec kernel {spec.kernel}", "kernel"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionMismatchError(
            f"bias shape {bias.shape} does not match {weight.shape[0]} output channels", "bias"
        )
    if spec.in_channels is not None and spec.in_channels != x.shape[0]:
        raise DimensionMismatchError("spec in_channels disagrees with input", "channels")
    if spec.out_channels is not None and spec.out_channels != weight.shape[0]:
        raise DimensionMismatchError("spec out_channels disagrees with weight", "out_channels")


def im2col(x: np.ndarray, kernel, stride=1, pad=0):
    """Unfold a C x H x W array into (C*kh*kw, Ho*Wo) patch columns."""
    kh, kw = kernel
    c, h, w = x.shape
    if pad:
        xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x
        x = xp
    else:
        x = np.ascontiguousarray(x)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    sc, sh, sw = x.strides
    win = as_strided(x, (c, kh, kw, ho, wo), (sc, sh, sw, sh * stride, sw * stride),
                     writeable=False)
    return win.reshape(c * kh * kw, ho * wo), ho, wo


def col2im(cols: np.ndarray, shape, kernel, stride=1, pad=0):
    """Adjoint of :func:`im2col`: scatter-add patch columns back onto the image."""
    kh, kw = kernel
    c, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(c, kh, kw, ho, wo)
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    if pad:
        out = out[:, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def conv2d(x, weight, bias, spec: ConvSpec, return_cols=False):
    """2-D cross-correlation with zero padding, via im2col + GEMM."""
    _check_conv(x, weight, bias, spec)
    o = weight.shape[0]
    ho, wo = spec.output_extent(x.shape[1], x.shape[2])
    kh, kw = spec.kernel
    if kh == 1 and kw == 1 and spec.stride == 1 and spec.pad == 0:
        cols = x.reshape(x.shape[0], -1)
    else:
        cols, ho, wo = im2col(x, spec.kernel, spec.stride, spec.pad)
    out = weight.reshape(o, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(o, ho, wo)
    if return_cols:
        return out, cols
    return out


def conv2d_naive(x, weight, bias, spec: ConvSpec):
    """Quadruple-loop reference convolution. Slow; used as a test oracle."""
    _check_conv(x, weight, bias, spec)
    c, h, w = x.shape
    o = weight.shape[0]
    kh, kw = spec.kernel
    s, p = spec.stride, spec.pad
    ho, wo = spec.output_extent(h, w)
    out = np.zeros((o, ho, wo), dtype=np.float64)
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if bias is None else float(bias[oc])
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            yi = i * s + di - p
                            xj = j * s + dj - p
                            if 0 <= yi < h and 0 <= xj < w:
                                acc += float(weight[oc, ic, di, dj]) * float(x[ic, yi, xj])
                out[oc, i, j] = acc
    return out


def depth_to_space(x: np.ndarray, block: int = 2) -> np.ndarray:
    """Move channel groups into ``block x block`` spatial cells.

    out[c, h*b + dy, w*b + dx] == x[c*b*b + dy*b + dx, h, w]
    """
    c, h, w = x.shape
    b2 = block * block
    if block < 1 or c % b2:
        raise InvalidConfigError(f"{c} channels not divisible by block^2={b2}")
    y = x.reshape(c // b2, block, block, h, w).transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(y).reshape(c // b2, h * block, w * block)


def space_to_depth(x: np.ndarray, block: int = 2) -> np.ndarray:
    """Exact inverse of :func:`depth_to_space`."""
    c, h, w = x.shape
    if block < 1 or h % block or w % block:
        raise InvalidConfigError(f"spatial extents {h}x{w} not divisible by block {block}")
    y = x.reshape(c, h // block, block, w // block, block).transpose(0, 2, 4, 1, 3)
    return np.ascontiguousarray(y).reshape(c * block * block, h // block, w // block)


LRELU_VARIANTS = ("standard", "paper_verbatim")


def lrelu(x: np.ndarray, alpha: float = 0.1, variant: str = "standard") -> np.ndarray:
    """Leaky rectifier.

    ``standard``: x for x >= 0, alpha*x otherwise.
    ``paper_verbatim``: alpha*max(0, x) + (1 - alpha)*max(0, -x), taken literally.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidConfigError(f"alpha must lie in [0, 1], got {alpha}")
    a = x.dtype.type(alpha)
    if variant == "standard":
        return np.where(x >= 0, x, a * x)
    if variant == "paper_verbatim":
        zero = x.dtype.type(0)
        return a * np.maximum(zero, x) + (1 - a) * np.maximum(zero, -x)
    raise InvalidConfigError(f"unknown lrelu variant {variant!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x| and much faster than masking
    half = x.dtype.type(0.5)
    return half + half * np.tanh(half * x)


def _binary(fn):
    def op(a, b):
        if isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and a.shape != b.shape:
            raise DimensionMismatchError(f"shape mismatch {a.shape} vs {b.shape}", "shape")
        return fn(a, b)

    return op


_ELEMENTWISE = {
    "add": _binary(np.add),
    "sub": _binary(np.subtract),
    "mul": _binary(np.multiply),
    "scale": lambda a, s: a * a.dtype.type(s),
    "sigmoid": lambda a, _=None: sigmoid(a),
    "tanh": lambda a, _=None: np.tanh(a),
}


def elementwise(op: str, a, b=None):
    """Apply one of add, sub, mul, scale, sigmoid, tanh."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise InvalidConfigError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)
