"""Multi-mode convolution kernel: pipelined MAC datapath with a delayed buffer.

The datapath consumes CN vectorized feature/weight bundle pairs per output
neuron (CN = K*K*C' in conv mode, C' in fc mode).  Each step multiplies the
vec_size lanes, reduces them through a fixed adjacent-pair adder tree, adds
the oldest lane of an N-deep shift register, shifts, and stores the result in
lane 0.  After CN steps the neuron value is the sum of all N lanes in
ascending index order.  Interleaving partial sums across N lanes breaks the
loop-carried add dependency, which is what lets the hardware pipeline issue
every cycle; functionally it fixes one particular float summation order.

Two implementations share these semantics:

* a scalar reference (`conv_pipeline`) that processes one bundle at a time,
  mirroring the hardware loop literally, and
* a vectorized engine (`mac_block`) that evaluates many neurons at once with
  numpy while performing bit-identical float32 operations.

`run_conv_layer` / `run_fc_layer` drive the vectorized engine over a whole
layer.  Output maps are partitioned across cu_num compute units in contiguous
blocks; partitioning is pure parallelization and never changes results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import StreamUnderrun
from .model import (AcceleratorConfig, FeatureMap, LayerDescriptor, TensorShape,
                    WeightBank, c_prime)
from .movers import conv_gather_indices, fc_gather_indices, pixel_chunk_size


@dataclass
class MacBundle:
    features: np.ndarray  # (vec_size,) float32
    weights: np.ndarray   # (vec_size,) float32

    def __post_init__(self):
        self.features = np.asarray(self.features, np.float32)
        self.weights = np.asarray(self.weights, np.float32)
        if self.features.shape != self.weights.shape or self.features.ndim != 1:
            raise ValueError("feature/weight lanes must be equal-length vectors")


@dataclass
class ShiftRegister:
    lanes: np.ndarray  # (depth,) float32 partial sums

    @classmethod
    def zeros(cls, depth: int) -> "ShiftRegister":
        return cls(np.zeros(depth, np.float32))

    @property
    def depth(self) -> int:
        return self.lanes.shape[0]


def tree_dot(weights: np.ndarray, features: np.ndarray) -> np.float32:
    """Lane dot product via a fixed adjacent-pair reduction tree."""
    acc = np.multiply(weights, features, dtype=np.float32)
    while acc.shape[-1] > 1:
        acc = acc[..., 0::2] + acc[..., 1::2]
    return acc[..., 0]


def mac_accumulate(reg: ShiftRegister, bundle: MacBundle) -> ShiftRegister:
    """One pipeline step: temp = dot(w, f) + oldest lane; shift; store in lane 0."""
    t = tree_dot(bundle.weights, bundle.features) + reg.lanes[-1]
    lanes = np.empty_like(reg.lanes)
    lanes[1:] = reg.lanes[:-1]
    lanes[0] = t
    return ShiftRegister(lanes)


def reduce_shift_register(reg: ShiftRegister) -> np.float32:
    """Final neuron value: sum of all lanes in ascending index order."""
    acc = reg.lanes[0]
    for i in range(1, reg.depth):
        acc = acc + reg.lanes[i]
    return acc


def conv_pipeline(feature_stream: Iterable, weight_stream: Iterable, cn: int,
                  cfg: AcceleratorConfig) -> Iterator[np.float32]:
    """Scalar datapath: consume CN bundle pairs per neuron, emit neuron values.

    Streams may yield MacBundle or bare (vec,) float32 arrays.  The register
    is reset to zeros at every neuron boundary; a stream ending mid-neuron is
    a mapping bug and raises StreamUnderrun.
    """
    if cn < 1:
        raise ValueError("cn must be >= 1")
    fit = iter(feature_stream)
    wit = iter(weight_stream)
    while True:
        reg = ShiftRegister.zeros(cfg.reg_depth)
        for j in range(cn):
            try:
                f = next(fit)
            except StopIteration:
                if j == 0:
                    return
                raise StreamUnderrun(f"feature stream ended at bundle {j} of {cn}") from None
            try:
                w = next(wit)
            except StopIteration:
                raise StreamUnderrun(f"weight stream ended at bundle {j} of {cn}") from None
            if isinstance(f, MacBundle):
                f = f.features
            if isinstance(w, MacBundle):
                w = w.weights
            reg = mac_accumulate(reg, MacBundle(f, w))
        yield reduce_shift_register(reg)


def tree_reduce_lanes(prod: np.ndarray) -> np.ndarray:
    """(n, CN, VEC) -> (n, CN) via the same adjacent-pair tree as tree_dot."""
    while prod.shape[-1] > 1:
        prod = prod[..., 0::2] + prod[..., 1::2]
    return prod[..., 0]


def delayed_buffer_accumulate(terms: np.ndarray, depth: int) -> np.ndarray:
    """Reduce (n, CN) per-step terms exactly as the N-lane shift register does.

    Lane r accumulates terms with step index congruent to r mod depth, in
    time order; the final reduction visits lanes in ascending index order,
    i.e. residues (CN-1) % depth, (CN-2) % depth, ...  Zero padding of the
    trailing steps reproduces the never-written lanes.
    """
    n, cn = terms.shape
    steps = -(-cn // depth)
    if steps * depth != cn:
        padded = np.zeros((n, steps * depth), np.float32)
        padded[:, :cn] = terms
    else:
        padded = terms
    blocks = padded.reshape(n, steps, depth)
    acc = blocks[:, 0].copy()
    for t in range(1, steps):
        acc += blocks[:, t]
    order = [(cn - 1 - i) % depth for i in range(depth)]
    out = acc[:, order[0]].copy()
    for i in range(1, depth):
        out += acc[:, order[i]]
    return out


def mac_block(features: np.ndarray, wmat: np.ndarray, depth: int) -> np.ndarray:
    """Vectorized datapath over a block of neurons.

    features: (n, CN, VEC) gathered bundles, wmat: (CN, VEC) weights of one
    output map.  Returns (n,) float32, bit-identical to running conv_pipeline
    per neuron.
    """
    prod = features * wmat
    return delayed_buffer_accumulate(tree_reduce_lanes(prod), depth)


def finish_neurons(values: np.ndarray, bias: np.float32, relu: bool) -> np.ndarray:
    """Post-accumulation bias add and optional ReLU (float32, in place)."""
    values += np.float32(bias)
    if relu:
        np.maximum(values, np.float32(0), out=values)
    return values


def _bias_array(bias, m: int) -> np.ndarray:
    if bias is None:
        return np.zeros(m, np.float32)
    b = np.asarray(bias, np.float32)
    if b.shape != (m,):
        raise ValueError(f"bias must have shape ({m},), got {b.shape}")
    return b


def run_conv_layer(layer: LayerDescriptor, fm: FeatureMap, bank: WeightBank,
                   bias, cfg: AcceleratorConfig,
                   apply_relu: Optional[bool] = None) -> FeatureMap:
    """Full conv layer (bias + optional ReLU), independent of cu partitioning.

    Output maps are evaluated per gathered pixel chunk; each neuron's float
    operation sequence depends only on its own bundle stream, so results are
    bit-identical for every cu_num and every chunking.
    """
    if layer.layer_type != "conv":
        raise ValueError("run_conv_layer requires a conv layer")
    out = layer.conv_output_shape()
    m = layer.output_maps
    bias = _bias_array(bias, m)
    relu = layer.relu if apply_relu is None else apply_relu
    idx_groups = conv_gather_indices(layer, cfg.vec_size)
    flat = fm.flat_blocks_padded()
    cn = layer.cn(cfg.vec_size)
    cb_out = c_prime(m, cfg.vec_size)
    blocked = np.zeros((out.pixels, cb_out, cfg.vec_size), np.float32)
    mg = m // layer.groups
    chunk = pixel_chunk_size(cn, cfg.vec_size, out.pixels)
    wmats = [bank.bundle_matrix(mi) for mi in range(m)]

    for start in range(0, out.pixels, chunk):
        rows = slice(start, min(start + chunk, out.pixels))
        for g in range(layer.groups):
            gathered = flat[idx_groups[g][rows]]
            for mi in range(g * mg, (g + 1) * mg):
                vals = mac_block(gathered, wmats[mi], cfg.reg_depth)
                finish_neurons(vals, bias[mi], relu)
                blocked[rows, mi // cfg.vec_size, mi % cfg.vec_size] = vals

    return FeatureMap(out, cfg.vec_size,
                      blocked.reshape(out.h, out.w, cb_out, cfg.vec_size))


def run_fc_layer(layer: LayerDescriptor, fm: FeatureMap, bank: WeightBank,
                 bias, cfg: AcceleratorConfig) -> FeatureMap:
    """Fully connected layer on a single flattened input vector."""
    if layer.layer_type != "fc":
        raise ValueError("run_fc_layer requires an fc layer")
    if fm.shape.pixels != 1:
        raise ValueError("fc input must be a 1x1xC tensor; flatten upstream")
    m = layer.output_maps
    bias = _bias_array(bias, m)
    cb = fm.shape.blocks(cfg.vec_size)
    flat = fm.flat_blocks_padded()
    gathered = flat[fc_gather_indices(cb, 1)]  # (1, C', VEC)
    cb_out = c_prime(m, cfg.vec_size)
    blocked = np.zeros((1, cb_out, cfg.vec_size), np.float32)
    for mi in range(m):
        vals = mac_block(gathered, bank.bundle_matrix(mi), cfg.reg_depth)
        finish_neurons(vals, bias[mi], layer.relu)
        blocked[0, mi // cfg.vec_size, mi % cfg.vec_size] = vals[0]
    return FeatureMap(TensorShape(w=1, h=1, c=m), cfg.vec_size,
                      blocked.reshape(1, 1, cb_out, cfg.vec_size))


def layer_bundle_count(layer: LayerDescriptor, cfg: AcceleratorConfig,
                       batch: int = 1) -> int:
    """MacBundles consumed per layer: out_pixels * M * CN."""
    if layer.layer_type == "fc":
        return batch * layer.output_maps * layer.cn(cfg.vec_size)
    return layer.conv_output_shape().pixels * layer.output_maps * layer.cn(cfg.vec_size)
