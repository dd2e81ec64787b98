"""Encoder/decoder CNN mapping an image pair to a displacement field.

The network takes the fixed and moving images concatenated as a 2-channel
input, halves the resolution at each encoder level with strided
convolutions, then decodes back to full resolution with upsampling and
skip-connection concatenation.  The final stride-1 convolution has one
output channel per spatial axis and no nonlinearity, so displacements are
signed.  Its weights are initialized small so the initial warp is close to
the identity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tape as T
from .grid import DisplacementField, GridImage, check_same_geometry


@dataclass(frozen=True)
class NetConfig:
    encoder_filters: tuple[int, ...] = (16, 32, 32)
    decoder_filters: tuple[int, ...] = (32, 32, 32, 16)
    kernel_size: int = 3
    stride: int = 2
    leaky_slope: float = 0.2
    feature_multiplier: int = 1

    def __post_init__(self):
        object.__setattr__(self, "encoder_filters", tuple(int(f) for f in self.encoder_filters))
        object.__setattr__(self, "decoder_filters", tuple(int(f) for f in self.decoder_filters))
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        if self.stride != 2:
            raise ValueError("encoder stride must be 2")
        if not self.encoder_filters:
            raise ValueError("encoder needs at least one level")
        if len(self.decoder_filters) < len(self.encoder_filters):
            raise ValueError("decoder needs at least one convolution per encoder level")
        if self.feature_multiplier < 1:
            raise ValueError("feature_multiplier must be a positive integer")

    @property
    def depth(self) -> int:
        return len(self.encoder_filters)


@dataclass(frozen=True)
class _LayerSpec:
    in_ch: int
    out_ch: int
    stride: int
    role: str


def layer_plan(config: NetConfig, ndim: int) -> list[_LayerSpec]:
    """Deterministic layer sequence implied by a config."""
    m = config.feature_multiplier
    enc = [f * m for f in config.encoder_filters]
    dec = [f * m for f in config.decoder_filters]
    depth = config.depth
    layers = []
    cur = 2
    skips = [2]  # channel counts of skip sources, index = resolution level
    for f in enc:
        layers.append(_LayerSpec(cur, f, config.stride, "encoder"))
        cur = f
        skips.append(f)
    for j in range(depth):
        layers.append(_LayerSpec(cur, dec[j], 1, "decoder"))
        cur = dec[j] + skips[depth - 1 - j]
    for f in dec[depth:]:
        layers.append(_LayerSpec(cur, f, 1, "refine"))
        cur = f
    layers.append(_LayerSpec(cur, ndim, 1, "flow"))
    return layers


@dataclass
class NetParams:
    """Convolution kernels and biases, ordered per :func:`layer_plan`."""

    config: NetConfig
    ndim: int
    kernels: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)

    def __post_init__(self):
        plan = layer_plan(self.config, self.ndim)
        if len(self.kernels) != len(plan) or len(self.biases) != len(plan):
            raise ValueError("parameter count does not match the layer plan")
        k = self.config.kernel_size
        for spec, kern, bias in zip(plan, self.kernels, self.biases):
            expected = (k,) * self.ndim + (spec.in_ch, spec.out_ch)
            if kern.shape != expected:
                raise ValueError(f"kernel shape {kern.shape}, expected {expected}")
            if bias.shape != (spec.out_ch,):
                raise ValueError(f"bias shape {bias.shape}, expected ({spec.out_ch},)")
            if not (np.all(np.isfinite(kern)) and np.all(np.isfinite(bias))):
                raise ValueError("network parameters must be finite")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.append(k)
            out.append(b)
        return out

    def replace_arrays(self, arrays: list[np.ndarray]) -> "NetParams":
        kernels = [a for a in arrays[0::2]]
        biases = [a for a in arrays[1::2]]
        return NetParams(self.config, self.ndim, kernels, biases)


def init_params(config: NetConfig, ndim: int, rng: np.random.Generator) -> NetParams:
    """Fan-in-scaled Gaussian kernels, zero biases, damped final layer."""
    kernels, biases = [], []
    k = config.kernel_size
    plan = layer_plan(config, ndim)
    for spec in plan:
        fan_in = k**ndim * spec.in_ch
        kern = rng.standard_normal((k,) * ndim + (spec.in_ch, spec.out_ch)) / np.sqrt(fan_in)
        if spec.role == "flow":
            kern *= 1e-2
        kernels.append(kern)
        biases.append(np.zeros(spec.out_ch))
    return NetParams(config, ndim, kernels, biases)


def check_geometry_compatible(config: NetConfig, geom) -> None:
    divisor = 2**config.depth
    if any(d % divisor for d in geom.dims):
        raise ValueError(
            f"every extent of {geom.dims} must be divisible by 2^depth = {divisor}"
        )


def build_forward(
    tp: T.Tape,
    param_nodes: list[T.Node],
    fixed: GridImage,
    moving: GridImage,
    config: NetConfig,
) -> T.Node:
    """Record the network forward pass; returns the displacement node.

    ``param_nodes`` interleaves kernels and biases as in ``NetParams.arrays``.
    """
    check_same_geometry(fixed, moving)
    check_geometry_compatible(config, fixed.geom)
    ndim = fixed.geom.ndim
    plan = layer_plan(config, ndim)
    slope = config.leaky_slope
    depth = config.depth

    x = tp.leaf(np.stack([fixed.values, moving.values], axis=-1), "input")
    skips = [x]
    nodes = iter(range(len(plan)))
    cur = x
    for i, spec in zip(nodes, plan):
        kern, bias = param_nodes[2 * i], param_nodes[2 * i + 1]
        cur = T.conv(tp, cur, kern, bias, spec.stride)
        if spec.role != "flow":
            cur = T.leaky_relu(tp, cur, slope)
        if spec.role == "encoder":
            skips.append(cur)
        elif spec.role == "decoder":
            cur = T.upsample2x(tp, cur)
            cur = T.concat(tp, [cur, skips[len(skips) - 1 - (i - depth) - 1]])
    return cur


def predict_displacement(params: NetParams, fixed: GridImage, moving: GridImage) -> DisplacementField:
    """Run the network once outside any training loop."""
    tp = T.Tape()
    param_nodes = [tp.leaf(a) for a in params.arrays()]
    out = build_forward(tp, param_nodes, fixed, moving, params.config)
    return DisplacementField(fixed.geom, out.value)


# ---------------------------------------------------------------------------
# serialization: magic, version, config, then shape-prefixed float32 arrays

MAGIC = b"MRNP"
VERSION = 1


def save_params(path, params: NetParams) -> None:
    config = params.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(
            struct.pack(
                "<BBBBfBBB",
                VERSION,
                params.ndim,
                config.kernel_size,
                config.stride,
                config.leaky_slope,
                config.feature_multiplier,
                len(config.encoder_filters),
                len(config.decoder_filters),
            )
        )
        for f in config.encoder_filters + config.decoder_filters:
            fh.write(struct.pack("<I", f))
        for arr in params.arrays():
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> NetParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError("not a model file (bad magic)")
    version, ndim, ksize, stride, slope, mult, n_enc, n_dec = struct.unpack_from(
        "<BBBBfBBB", blob, 4
    )
    if version != VERSION:
        raise ValueError(f"unsupported model version {version}")
    off = 4 + struct.calcsize("<BBBBfBBB")
    filters = struct.unpack_from(f"<{n_enc + n_dec}I", blob, off)
    off += 4 * (n_enc + n_dec)
    config = NetConfig(
        encoder_filters=filters[:n_enc],
        decoder_filters=filters[n_enc:],
        kernel_size=ksize,
        stride=stride,
        leaky_slope=slope,
        feature_multiplier=mult,
    )
    arrays = []
    for _ in range(2 * len(layer_plan(config, ndim))):
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        arrays.append(arr.reshape(shape).astype(np.float64))
    if off != len(blob):
        raise ValueError("trailing bytes after model payload")
    return NetParams(config, ndim, arrays[0::2], arrays[1::2])
