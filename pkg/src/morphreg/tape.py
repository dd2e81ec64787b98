"""Minimal reverse-mode differentiation over a fixed primitive set.

A :class:`Tape` records forward applications of primitives in topological
order; :meth:`Tape.backward` replays their vector-Jacobian products in
reverse, accumulating cotangents additively at fan-out points.  The
primitive set is closed: convolution, leaky rectifier, 2x upsampling,
channel concatenation, warping, the loss terms, and scalar weighted sums.
Accumulation order is fixed by tape order, so gradients are bit-identical
across runs.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .grid import DisplacementField, GridImage, SegmentationMap
from .losses import (
    local_cc,
    local_cc_backward,
    mse,
    mse_backward,
    seg_loss,
    seg_loss_backward,
    smoothness,
    smoothness_backward,
    smoothness_term_count,
)
from .warp import (
    warp_backward,
    warp_image,
    warp_segmentation,
    warp_segmentation_backward,
)


class Node:
    """One recorded value: forward result plus the closure for its VJP."""

    __slots__ = ("value", "parents", "backward_fn", "grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=""):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.grad = None
        self.name = name


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str = "") -> Node:
        node = Node(np.asarray(value, dtype=np.float64), name=name)
        self.nodes.append(node)
        return node

    def record(self, value, parents, backward_fn, name: str = "") -> Node:
        node = Node(value, parents, backward_fn, name)
        self.nodes.append(node)
        return node

    def backward(self, output: Node) -> None:
        """Fill ``node.grad`` for every node reachable from ``output``.

        ``output`` must be scalar-valued.  Leaves that do not feed the output
        end up with an all-zero gradient.
        """
        if np.ndim(output.value) != 0:
            raise ValueError("backward requires a scalar output node")
        for node in self.nodes:
            node.grad = None
        output.grad = np.float64(1.0)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)


# ---------------------------------------------------------------------------
# primitives

def conv(tape: Tape, x: Node, kernel: Node, bias: Node, stride: int = 1) -> Node:
    y = ops.conv_forward(x.value, kernel.value, bias.value, stride)

    def bwd(up):
        gx, gk, gb = ops.conv_backward(x.value, kernel.value, stride, up)
        return gx, gk, gb

    return tape.record(y, (x, kernel, bias), bwd, f"conv(s{stride})")


def leaky_relu(tape: Tape, x: Node, slope: float = 0.2) -> Node:
    y = ops.leaky_relu_forward(x.value, slope)

    def bwd(up):
        return (ops.leaky_relu_backward(x.value, slope, up),)

    return tape.record(y, (x,), bwd, "leaky_relu")


def upsample2x(tape: Tape, x: Node) -> Node:
    y = ops.upsample2x_forward(x.value)
    shape = x.value.shape

    def bwd(up):
        return (ops.upsample2x_backward(shape, up),)

    return tape.record(y, (x,), bwd, "upsample2x")


def concat(tape: Tape, xs: list[Node]) -> Node:
    y = ops.concat_forward([x.value for x in xs])
    counts = [x.value.shape[-1] for x in xs]

    def bwd(up):
        return tuple(ops.concat_backward(counts, up))

    return tape.record(y, xs, bwd, "concat")


def warp(tape: Tape, moving: GridImage, u: Node) -> Node:
    """Warp a constant image by the recorded displacement vectors."""
    field = DisplacementField(moving.geom, u.value)
    y = warp_image(moving, field).values

    def bwd(up):
        _, gu = warp_backward(moving, field, up)
        return (gu,)

    return tape.record(y, (u,), bwd, "warp")


def warp_seg(tape: Tape, moving_seg: SegmentationMap, u: Node) -> Node:
    field = DisplacementField(moving_seg.geom, u.value)
    y = warp_segmentation(moving_seg, field).weights

    def bwd(up):
        _, gu = warp_segmentation_backward(moving_seg, field, up)
        return (gu,)

    return tape.record(y, (u,), bwd, "warp_seg")


def mse_loss(tape: Tape, fixed: GridImage, warped: Node) -> Node:
    w = GridImage(fixed.geom, warped.value)
    y = np.float64(mse(fixed, w))

    def bwd(up):
        return (mse_backward(fixed, w, float(up)),)

    return tape.record(y, (warped,), bwd, "mse")


def cc_loss(tape: Tape, fixed: GridImage, warped: Node, window: int) -> Node:
    """Negated, per-voxel-normalized local cross-correlation."""
    w = GridImage(fixed.geom, warped.value)
    scale = -1.0 / fixed.geom.voxel_count
    y = np.float64(scale * local_cc(fixed, w, window))

    def bwd(up):
        return (local_cc_backward(fixed, w, window, float(up) * scale),)

    return tape.record(y, (warped,), bwd, "cc")


def smooth_loss(tape: Tape, u: Node, geom) -> Node:
    """Diffusion smoothness, normalized to a mean over difference terms."""
    field = DisplacementField(geom, u.value)
    scale = 1.0 / smoothness_term_count(field)
    y = np.float64(scale * smoothness(field))

    def bwd(up):
        return (smoothness_backward(field, float(up) * scale),)

    return tape.record(y, (u,), bwd, "smooth")


def overlap_loss(tape: Tape, fixed_seg: SegmentationMap, warped_seg: Node) -> Node:
    sw = SegmentationMap(fixed_seg.geom, warped_seg.value)
    y = np.float64(seg_loss(fixed_seg, sw))

    def bwd(up):
        return (seg_loss_backward(fixed_seg, sw, float(up)),)

    return tape.record(y, (warped_seg,), bwd, "overlap")


def weighted_sum(tape: Tape, terms: list[Node], weights: list[float]) -> Node:
    y = np.float64(sum(w * float(t.value) for t, w in zip(terms, weights)))

    def bwd(up):
        return tuple(np.float64(up * w) for w in weights)

    return tape.record(y, terms, bwd, "weighted_sum")
