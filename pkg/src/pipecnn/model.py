"""Core domain types: tensor layout, layer descriptors, accelerator config.

All activation and weight data is 32-bit float, stored in a channel-blocked
layout: the channel dimension is split into C' = ceil(C / vec_size) blocks of
vec_size lanes each, and lanes past the true channel count are zero.  The
blocked layout is the unit of exchange between the data movers and the
compute kernels; zero tail lanes contribute nothing to any MAC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NonIntegralOutputDim, ShapeMismatch

VALID_VEC_SIZES = (1, 2, 4, 8, 16)


def output_dim(w: int, k: int, s: int, p: int) -> int:
    """Output pixels of a windowed op: (W - K + 2P)/S + 1, which must be integral."""
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    span = w - k + 2 * p
    if span < 0:
        raise ValueError(f"window K={k} larger than padded input W={w}+2*{p}")
    if span % s != 0:
        raise NonIntegralOutputDim(f"(W-K+2P)={span} not divisible by S={s}")
    return span // s + 1


def c_prime(c: int, vec_size: int) -> int:
    """Channel block count: ceil(C / vec_size)."""
    if c < 1 or vec_size < 1:
        raise ValueError("channels and vec_size must be >= 1")
    return -(-c // vec_size)


@dataclass(frozen=True)
class TensorShape:
    w: int
    h: int
    c: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1 or self.c < 1:
            raise ValueError(f"degenerate shape {self}")

    @property
    def pixels(self) -> int:
        return self.w * self.h

    @property
    def elements(self) -> int:
        return self.w * self.h * self.c

    def blocks(self, vec_size: int) -> int:
        return c_prime(self.c, vec_size)


class FeatureMap:
    """Vectorized activation tensor in [H][W][C'][VEC] blocked layout."""

    def __init__(self, shape: TensorShape, vec_size: int, data: np.ndarray):
        cb = shape.blocks(vec_size)
        expected = (shape.h, shape.w, cb, vec_size)
        if data.shape != expected or data.dtype != np.float32:
            raise ValueError(f"blocked data must be float32 {expected}, got {data.dtype} {data.shape}")
        self.shape = shape
        self.vec_size = vec_size
        self.data = data

    @classmethod
    def zeros(cls, shape: TensorShape, vec_size: int) -> "FeatureMap":
        cb = shape.blocks(vec_size)
        return cls(shape, vec_size, np.zeros((shape.h, shape.w, cb, vec_size), np.float32))

    @classmethod
    def from_dense(cls, dense: np.ndarray, vec_size: int) -> "FeatureMap":
        """Pack a dense [H][W][C] array, zero-padding the channel tail."""
        if dense.ndim != 3:
            raise ValueError(f"dense tensor must be 3-D (H, W, C), got {dense.shape}")
        h, w, c = dense.shape
        shape = TensorShape(w=w, h=h, c=c)
        fm = cls.zeros(shape, vec_size)
        flat = fm.data.reshape(h, w, -1)
        flat[:, :, :c] = dense.astype(np.float32, copy=False)
        return fm

    def to_dense(self) -> np.ndarray:
        """Unpack to dense [H][W][C], dropping the zero tail lanes."""
        h, w = self.shape.h, self.shape.w
        return self.data.reshape(h, w, -1)[:, :, : self.shape.c].copy()

    def flat_blocks_padded(self) -> np.ndarray:
        """(H*W*C' + 1, VEC) view with one trailing all-zero row.

        Out-of-bounds gather indices point at the zero row, which is how
        the data mover materializes zero padding without a padded tensor.
        """
        flat = self.data.reshape(-1, self.vec_size)
        return np.concatenate([flat, np.zeros((1, self.vec_size), np.float32)])

    def tail_lanes_zero(self) -> bool:
        rem = self.shape.c % self.vec_size
        if rem == 0:
            return True
        return not self.data[:, :, -1, rem:].any()


class WeightBank:
    """Per-layer weights in [M][K][K][C'][VEC] blocked layout.

    input_channels is the fan-in of one output map (the per-group channel
    count for grouped convolutions).  FC banks use K = 1.
    """

    def __init__(self, output_maps: int, kernel: int, input_channels: int,
                 vec_size: int, data: np.ndarray):
        cb = c_prime(input_channels, vec_size)
        expected = (output_maps, kernel, kernel, cb, vec_size)
        if data.shape != expected or data.dtype != np.float32:
            raise ValueError(f"weight data must be float32 {expected}, got {data.dtype} {data.shape}")
        self.output_maps = output_maps
        self.kernel = kernel
        self.input_channels = input_channels
        self.vec_size = vec_size
        self.data = data

    @classmethod
    def from_dense(cls, dense: np.ndarray, vec_size: int) -> "WeightBank":
        """Pack dense [M][K][K][C] weights, zero-padding the channel tail."""
        m, k, k2, c = dense.shape
        if k != k2:
            raise ValueError(f"kernel must be square, got {k}x{k2}")
        cb = c_prime(c, vec_size)
        data = np.zeros((m, k, k, cb, vec_size), np.float32)
        data.reshape(m, k, k, -1)[:, :, :, :c] = dense.astype(np.float32, copy=False)
        return cls(m, k, c, vec_size, data)

    def to_dense(self) -> np.ndarray:
        m, k = self.output_maps, self.kernel
        return self.data.reshape(m, k, k, -1)[:, :, :, : self.input_channels].copy()

    def bundle_matrix(self, m: int) -> np.ndarray:
        """Weights of map m as a (CN, VEC) matrix in MAC-stream order.

        Stream order within one output neuron is kx fastest, then ky, then
        channel block, matching the data mover's work-item enumeration.
        """
        k = self.kernel
        cb = self.data.shape[3]
        # [K][K][C'][VEC] -> [C'][K][K][VEC] -> (CN, VEC)
        return np.ascontiguousarray(
            self.data[m].transpose(2, 0, 1, 3).reshape(k * k * cb, self.vec_size))


@dataclass(frozen=True)
class PoolSpec:
    mode: str  # "max" | "avg"
    window: int
    stride: int

    def __post_init__(self):
        if self.mode not in ("max", "avg"):
            raise ValueError(f"pool mode must be max|avg, got {self.mode!r}")
        if self.window < 2 or self.stride < 1:
            raise ValueError(f"bad pool spec {self}")

    @property
    def line_buffers(self) -> int:
        # L buffered rows plus the incoming one form the (L+1)-row window
        return self.window - 1


@dataclass(frozen=True)
class LrnSpec:
    local_size: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.local_size < 1:
            raise ValueError("local_size must be >= 1")


@dataclass(frozen=True)
class LayerDescriptor:
    layer_type: str  # "conv" | "fc"
    k: int
    s: int
    p: int
    input_shape: TensorShape
    output_maps: int
    relu: bool = False
    pool: Optional[PoolSpec] = None
    lrn: Optional[LrnSpec] = None
    groups: int = 1
    name: str = ""

    def __post_init__(self):
        if self.layer_type not in ("conv", "fc"):
            raise ValueError(f"layer_type must be conv|fc, got {self.layer_type!r}")
        if self.layer_type == "fc":
            if self.k != 1 or self.s != 1 or self.p != 0:
                raise ValueError("fc layers require K=1, S=1, P=0")
            if self.input_shape.w != 1 or self.input_shape.h != 1:
                raise ValueError("fc input must be a flattened 1x1xC vector")
            if self.groups != 1:
                raise ValueError("fc layers do not support groups")
        if self.groups < 1 or self.input_shape.c % self.groups != 0:
            raise ValueError(f"groups={self.groups} must divide C={self.input_shape.c}")
        if self.output_maps % self.groups != 0:
            raise ValueError(f"groups={self.groups} must divide M={self.output_maps}")

    @property
    def channels_per_group(self) -> int:
        return self.input_shape.c // self.groups

    def conv_output_shape(self) -> TensorShape:
        wo = output_dim(self.input_shape.w, self.k, self.s, self.p)
        ho = output_dim(self.input_shape.h, self.k, self.s, self.p)
        return TensorShape(w=wo, h=ho, c=self.output_maps)

    def output_shape(self) -> TensorShape:
        """Shape leaving the layer, after the optional pooling stage."""
        conv = self.conv_output_shape()
        if self.pool is None:
            return conv
        wo = output_dim(conv.w, self.pool.window, self.pool.stride, 0)
        ho = output_dim(conv.h, self.pool.window, self.pool.stride, 0)
        return TensorShape(w=wo, h=ho, c=conv.c)

    def cn(self, vec_size: int) -> int:
        """Bundles consumed per output neuron: K*K*C' (conv) or C' (fc)."""
        cb = c_prime(self.channels_per_group, vec_size)
        if self.layer_type == "fc":
            return cb
        return self.k * self.k * cb

    def macs(self) -> int:
        """True multiply-accumulates, not counting zero-padded lanes."""
        out = self.conv_output_shape()
        return out.pixels * self.output_maps * self.k * self.k * self.channels_per_group


@dataclass(frozen=True)
class AcceleratorConfig:
    """One design point of the accelerator."""

    vec_size: int = 8
    cu_num: int = 16
    reg_depth: int = 8
    channel_depth: int = 512
    clock_hz: float = 181e6
    ii: int = 2
    lrn_n: int = 2

    def __post_init__(self):
        if self.vec_size not in VALID_VEC_SIZES:
            raise ValueError(f"vec_size must be one of {VALID_VEC_SIZES}")
        if self.cu_num < 1 or self.reg_depth < 1 or self.channel_depth < 1 or self.ii < 1:
            raise ValueError(f"bad accelerator config {self}")
        if self.lrn_n < 0:
            raise ValueError("lrn_n must be >= 0")
        if self.clock_hz <= 0:
            raise ValueError("clock_hz must be positive")


@dataclass(frozen=True)
class DeviceProfile:
    logic_elements: int
    dsp_blocks: int
    ram_blocks: int
    dram_bandwidth: float  # bytes/second

    def __post_init__(self):
        if min(self.logic_elements, self.dsp_blocks, self.ram_blocks) <= 0 \
                or self.dram_bandwidth <= 0:
            raise ValueError(f"device capacities must be positive: {self}")


def _check_layer(i: int, layer: LayerDescriptor, errors: list):
    try:
        layer.output_shape()
    except NonIntegralOutputDim as e:
        errors.append(NonIntegralOutputDim(f"layer {i}: {e}", layer=i))


def validate_network(layers: list) -> list:
    """Check inter-layer shape compatibility; returns a list of errors (empty = ok).

    A conv layer's pooled output must match the next layer's input shape; the
    conv->fc boundary flattens H*W*C into the fc input vector; fc layers must
    all come after the last conv layer.
    """
    if not layers:
        return [ShapeMismatch("network has no layers")]
    errors = []
    seen_fc = False
    prev_out: Optional[TensorShape] = None
    for i, layer in enumerate(layers):
        if layer.layer_type == "fc":
            seen_fc = True
        elif seen_fc:
            errors.append(ShapeMismatch(f"layer {i}: conv layer after fc layers", layer=i))
        _check_layer(i, layer, errors)
        if prev_out is not None:
            if layer.layer_type == "fc":
                if layer.input_shape.c != prev_out.elements:
                    errors.append(ShapeMismatch(
                        f"layer {i}: fc expects C={layer.input_shape.c}, "
                        f"previous layer flattens to {prev_out.elements}", layer=i))
            elif layer.input_shape != prev_out:
                errors.append(ShapeMismatch(
                    f"layer {i}: input {layer.input_shape} != previous output {prev_out}",
                    layer=i))
        try:
            prev_out = layer.output_shape()
        except NonIntegralOutputDim:
            prev_out = None  # already recorded
    return errors
