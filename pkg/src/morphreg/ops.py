"""Array-level neural-network building blocks with explicit backward passes.

Feature maps are arrays of shape (*spatial, channels).  Convolutions use
zero "same" padding, so stride 1 preserves each extent and stride 2 halves
it (ceil).  Kernels are shaped (*kernel_spatial, in_channels, out_channels).
"""

from __future__ import annotations

import itertools

import numpy as np


def _offsets(kernel_shape: tuple[int, ...]):
    return itertools.product(*(range(k) for k in kernel_shape))


def conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    n = kernel.ndim - 2
    spatial = x.shape[:n]
    kshape = kernel.shape[:n]
    if x.shape[n] != kernel.shape[n]:
        raise ValueError(f"input has {x.shape[n]} channels, kernel expects {kernel.shape[n]}")
    pads = [((k - 1) // 2, k // 2) for k in kshape] + [(0, 0)]
    xp = np.pad(x, pads)
    out_spatial = tuple(-(-s // stride) for s in spatial)
    out = np.broadcast_to(bias, out_spatial + (kernel.shape[-1],)).copy()
    for off in _offsets(kshape):
        sl = tuple(
            slice(off[d], off[d] + stride * (out_spatial[d] - 1) + 1, stride)
            for d in range(n)
        )
        out += xp[sl] @ kernel[off]
    return out


def conv_backward(
    x: np.ndarray, kernel: np.ndarray, stride: int, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """VJPs of conv_forward wrt input, kernel and bias."""
    n = kernel.ndim - 2
    spatial = x.shape[:n]
    kshape = kernel.shape[:n]
    out_spatial = upstream.shape[:n]
    pads = [((k - 1) // 2, k // 2) for k in kshape] + [(0, 0)]
    xp = np.pad(x, pads)
    grad_xp = np.zeros_like(xp)
    grad_k = np.zeros_like(kernel)
    spatial_axes = tuple(range(n))
    for off in _offsets(kshape):
        sl = tuple(
            slice(off[d], off[d] + stride * (out_spatial[d] - 1) + 1, stride)
            for d in range(n)
        )
        grad_k[off] = np.tensordot(xp[sl], upstream, axes=(spatial_axes, spatial_axes))
        grad_xp[sl] += upstream @ kernel[off].T
    crop = tuple(slice(p[0], p[0] + spatial[d]) for d, p in enumerate(pads[:n]))
    grad_b = upstream.sum(axis=spatial_axes)
    return grad_xp[crop], grad_k, grad_b


def leaky_relu_forward(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, slope: float, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is the negative-side slope
    return upstream * np.where(x > 0, 1.0, slope)


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor repetition by 2 along every spatial axis."""
    n = x.ndim - 1
    out = x
    for axis in range(n):
        out = np.repeat(out, 2, axis=axis)
    return out


def upsample2x_backward(x_shape: tuple[int, ...], upstream: np.ndarray) -> np.ndarray:
    n = len(x_shape) - 1
    out = upstream
    for axis in range(n):
        shape = out.shape[:axis] + (x_shape[axis], 2) + out.shape[axis + 1 :]
        out = out.reshape(shape).sum(axis=axis + 1)
    return out


def concat_forward(xs: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(xs, axis=-1)


def concat_backward(channel_counts: list[int], upstream: np.ndarray) -> list[np.ndarray]:
    splits = np.cumsum(channel_counts)[:-1]
    return np.split(upstream, splits, axis=-1)
