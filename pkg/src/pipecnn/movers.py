"""MemRD / MemWR data movers: NDRange plans, bundle streams, traffic counters.

MemRD turns the blocked input tensor and weight bank into the bundle streams
the convolution engine consumes; MemWR packs result streams back into a
blocked tensor.  Work is organized the way the hardware dispatches it:

* conv mode: global work size (Wo*K, Ho*K, C'g * G) with local (K, K, C'g),
  where G = ceil(M / cu_num) map-groups along z.  One work-group supplies the
  CN = K*K*C'g bundles of one output neuron; the z-group with index g feeds
  map k*G + g to compute unit k, so each compute unit owns a contiguous block
  of output maps.
* fc mode: a batch of B inputs is arranged as a (C, bx, by) 3-D set with
  bx*by = B (most-square factorization), global (bx, by, C' * G),
  local (1, 1, C').

Work-groups are traversed z-major, then y, then x, which fixes the stream
order and makes every counter deterministic.

Traffic model: weights are served through a per-layer cache keyed on the
work-group z index, so with the default unbounded cache every weight element
is read from global memory exactly once.  Feature vectors are counted once
per sliding-window element per convolution group; the register-level
replication inside MemRD distributes a fetched vector to all maps and compute
units without re-reading it, so feature traffic does not depend on cu_num.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import PlanMismatch, StreamOverrun, StreamUnderrun
from .model import (AcceleratorConfig, FeatureMap, LayerDescriptor, TensorShape,
                    WeightBank, c_prime)

# transport granularity of the vectorized engine, in bundle lanes per chunk
CHUNK_LANES = 1 << 19


@dataclass(frozen=True)
class WorkItemPlan:
    mode: str  # "conv" | "fc"
    global_size: Tuple[int, int, int]
    local_size: Tuple[int, int, int]

    def __post_init__(self):
        for g, l in zip(self.global_size, self.local_size):
            if l < 1 or g % l != 0:
                raise ValueError(f"global {self.global_size} not a multiple of local {self.local_size}")

    @property
    def groups(self) -> Tuple[int, int, int]:
        return tuple(g // l for g, l in zip(self.global_size, self.local_size))

    @property
    def work_items(self) -> int:
        return self.global_size[0] * self.global_size[1] * self.global_size[2]


@dataclass
class TrafficCounters:
    feature_bytes_read: int = 0
    weight_bytes_read: int = 0
    bytes_written: int = 0
    cache_hits: int = 0
    cache_misses: int = 0

    def merge(self, other: "TrafficCounters") -> "TrafficCounters":
        return TrafficCounters(
            self.feature_bytes_read + other.feature_bytes_read,
            self.weight_bytes_read + other.weight_bytes_read,
            self.bytes_written + other.bytes_written,
            self.cache_hits + other.cache_hits,
            self.cache_misses + other.cache_misses)


def map_fc_batch(batch: int, c: int) -> Tuple[int, int, int]:
    """Arrange a batch of C-vectors as one (C, bx, by) 3-D set, bx >= by.

    The factorization is the most-square divisor pair of the batch size, so
    64 -> (C, 8, 8) and a prime batch degrades to (C, batch, 1).
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    by = 1
    for d in range(int(math.isqrt(batch)), 0, -1):
        if batch % d == 0:
            by = d
            break
    return (c, batch // by, by)


def _map_groups(m: int, cu_num: int) -> int:
    return -(-m // cu_num)


def cu_map_block(m: int, cu_num: int) -> int:
    """Contiguous output-map block size owned by each compute unit."""
    return _map_groups(m, cu_num)


def z_group_maps(z: int, m: int, cu_num: int) -> List[int]:
    """Output maps served by z-group z, one per compute unit."""
    b = cu_map_block(m, cu_num)
    return [k * b + z for k in range(cu_num) if k * b + z < m]


def memrd_plan(layer: LayerDescriptor, cfg: AcceleratorConfig,
               mode: str = "conv", batch: int = 1) -> WorkItemPlan:
    """NDRange of the read mover for one layer execution."""
    cb = c_prime(layer.channels_per_group, cfg.vec_size)
    g = _map_groups(layer.output_maps, cfg.cu_num)
    if mode == "fc" or layer.layer_type == "fc":
        _, bx, by = map_fc_batch(batch, layer.input_shape.c)
        return WorkItemPlan("fc", (bx, by, cb * g), (1, 1, cb))
    out = layer.conv_output_shape()
    return WorkItemPlan("conv", (out.w * layer.k, out.h * layer.k, cb * g),
                        (layer.k, layer.k, cb))


def memwr_plan(layer: LayerDescriptor, cfg: AcceleratorConfig,
               mode: str = "conv", batch: int = 1) -> WorkItemPlan:
    """NDRange of the write mover: one stored element per work-item.

    When a pooling stage is attached the writer sees the pooled stream, so
    the plan uses the post-pool dimensions.
    """
    if mode == "fc" or layer.layer_type == "fc":
        _, bx, by = map_fc_batch(batch, layer.input_shape.c)
        return WorkItemPlan("fc", (bx, by, layer.output_maps), (1, 1, 1))
    out = layer.output_shape()
    return WorkItemPlan("conv", (out.w, out.h, layer.output_maps), (1, 1, 1))


def conv_gather_indices(layer: LayerDescriptor, vec_size: int) -> List[np.ndarray]:
    """Per conv-group gather indices, one (Ho*Wo, CN) int32 array each.

    Entries index rows of FeatureMap.flat_blocks_padded(); out-of-bounds
    window positions point at the trailing zero row, which realizes zero
    padding without materializing a padded tensor.  Bundle order within a
    neuron is kx fastest, then ky, then channel block.
    """
    shape = layer.input_shape
    k, s, p = layer.k, layer.s, layer.p
    out = layer.conv_output_shape()
    cbt = shape.blocks(vec_size)
    cg = layer.channels_per_group
    cbg = c_prime(cg, vec_size)
    if layer.groups > 1 and cg % vec_size != 0:
        raise ValueError(
            f"grouped layers need channels_per_group divisible by vec_size "
            f"({cg} % {vec_size} != 0)")
    zero_row = shape.h * shape.w * cbt

    yin = (np.arange(out.h, dtype=np.int64)[:, None] * s
           + np.arange(k, dtype=np.int64)[None, :] - p)      # (Ho, K)
    xin = (np.arange(out.w, dtype=np.int64)[:, None] * s
           + np.arange(k, dtype=np.int64)[None, :] - p)      # (Wo, K)
    yy = yin[:, None, None, :, None]                          # (Ho, 1, 1, K, 1)
    xx = xin[None, :, None, None, :]                          # (1, Wo, 1, 1, K)
    zz = np.arange(cbg, dtype=np.int64)[None, None, :, None, None]
    valid = (yy >= 0) & (yy < shape.h) & (xx >= 0) & (xx < shape.w)

    result = []
    for g in range(layer.groups):
        base = g * cg // vec_size
        idx = (yy * shape.w + xx) * cbt + base + zz
        idx = np.where(valid, idx, zero_row)
        result.append(idx.reshape(out.h * out.w, cbg * k * k).astype(np.int32))
    return result


def fc_gather_indices(cb: int, pixels: int) -> np.ndarray:
    """(pixels, C') indices into the batched fc input's flat block rows."""
    return (np.arange(pixels, dtype=np.int32)[:, None] * cb
            + np.arange(cb, dtype=np.int32)[None, :])


def pixel_chunk_size(cn: int, vec_size: int, pixels: int) -> int:
    return max(1, min(pixels, CHUNK_LANES // max(1, cn * vec_size)))


@dataclass
class FeatureChunk:
    """Gathered feature bundles for a run of neurons of one z-group."""
    z_group: int
    pix_start: int
    data: np.ndarray  # (n, CN, VEC) float32

    @property
    def elements(self) -> int:
        return self.data.shape[0] * self.data.shape[1]


@dataclass
class WeightChunk:
    """The weight bundles of one z-group: one matrix per served map."""
    z_group: int
    maps: List[int]
    matrices: List[np.ndarray]  # each (CN, VEC) float32

    @property
    def elements(self) -> int:
        return len(self.maps) * (self.matrices[0].shape[0] if self.matrices else 0)


def _check_stream_args(layer, fm, bank, cfg, mode):
    if fm.vec_size != cfg.vec_size or bank.vec_size != cfg.vec_size:
        raise PlanMismatch(f"vec_size mismatch: tensor {fm.vec_size}, "
                           f"bank {bank.vec_size}, cfg {cfg.vec_size}")
    if bank.output_maps != layer.output_maps or bank.kernel != layer.k:
        raise PlanMismatch(f"weight bank {bank.output_maps}x{bank.kernel} "
                           f"does not match layer M={layer.output_maps} K={layer.k}")
    if bank.input_channels != layer.channels_per_group:
        raise PlanMismatch(f"weight bank fan-in {bank.input_channels} != "
                           f"layer channels/group {layer.channels_per_group}")
    if mode == "conv" and (fm.shape.w != layer.input_shape.w
                           or fm.shape.h != layer.input_shape.h
                           or fm.shape.c != layer.input_shape.c):
        raise PlanMismatch(f"input tensor {fm.shape} != layer input {layer.input_shape}")
    if mode == "fc" and fm.shape.c != layer.input_shape.c:
        raise PlanMismatch(f"fc input C={fm.shape.c} != layer C={layer.input_shape.c}")


def conv_traffic(layer: LayerDescriptor, cfg: AcceleratorConfig,
                 cache_blocks: Optional[int] = None) -> TrafficCounters:
    """Analytic global-memory traffic of one conv layer execution."""
    out = layer.conv_output_shape()
    stored = layer.output_shape()
    cbg = c_prime(layer.channels_per_group, cfg.vec_size)
    cn = layer.cn(cfg.vec_size)
    vec_bytes = cfg.vec_size * 4
    m = layer.output_maps

    feature = out.pixels * cn * layer.groups * vec_bytes
    requests = out.pixels * cn * m
    unique = m * layer.k * layer.k * cbg
    misses = _weight_misses(layer, cfg, out.pixels, unique, cache_blocks)
    return TrafficCounters(
        feature_bytes_read=feature,
        weight_bytes_read=misses * vec_bytes,
        bytes_written=stored.pixels * m * 4,
        cache_hits=requests - misses,
        cache_misses=misses)


def fc_traffic(layer: LayerDescriptor, cfg: AcceleratorConfig, batch: int = 1,
               cache_blocks: Optional[int] = None) -> TrafficCounters:
    cb = c_prime(layer.input_shape.c, cfg.vec_size)
    vec_bytes = cfg.vec_size * 4
    m = layer.output_maps
    requests = batch * cb * m
    unique = m * cb
    misses = _weight_misses(layer, cfg, batch, unique, cache_blocks)
    return TrafficCounters(
        feature_bytes_read=batch * cb * vec_bytes,
        weight_bytes_read=misses * vec_bytes,
        bytes_written=batch * m * 4,
        cache_hits=requests - misses,
        cache_misses=misses)


def _weight_misses(layer, cfg, pixels_per_group, unique, cache_blocks):
    """Cache misses over the z-major access sequence.

    Each z-group cycles through its own block set once per work-group (x, y)
    position, so an LRU cache either holds a z-group's working set (one miss
    per block) or, when undersized, thrashes on the cyclic sequence (every
    access misses).
    """
    if cache_blocks is None:
        return unique
    cn = layer.cn(cfg.vec_size)
    m = layer.output_maps
    misses = 0
    for z in range(_map_groups(m, cfg.cu_num)):
        n_maps = len(z_group_maps(z, m, cfg.cu_num))
        working_set = cn * n_maps
        if cache_blocks >= working_set:
            misses += working_set
        else:
            misses += working_set * pixels_per_group
    return misses


def memrd_stream(plan: WorkItemPlan, fm: FeatureMap, bank: WeightBank,
                 cfg: AcceleratorConfig, layer: LayerDescriptor,
                 batch: int = 1, cache_blocks: Optional[int] = None,
                 ) -> Tuple[Iterator[FeatureChunk], Iterator[WeightChunk], TrafficCounters]:
    """Produce the feature/weight chunk streams and the layer's traffic counters.

    Both iterators walk z-groups in the fixed z-major order; within a z-group
    the feature stream covers output positions row-major in bounded chunks.
    Feature data for a z-group is gathered once and serves all of its maps.
    """
    mode = plan.mode
    _check_stream_args(layer, fm, bank, cfg, mode)
    m = layer.output_maps
    n_groups_z = _map_groups(m, cfg.cu_num)
    if mode == "fc":
        _, bx, by = map_fc_batch(batch, layer.input_shape.c)
        if plan.global_size != (bx, by, bank.data.shape[3] * n_groups_z):
            raise PlanMismatch(f"plan {plan.global_size} does not match fc batch {batch}")
        if fm.shape.w != bx or fm.shape.h != by:
            raise PlanMismatch(f"fc input grid {fm.shape} != batch mapping ({by},{bx})")
        pixels = bx * by
        idx_groups = [fc_gather_indices(fm.shape.blocks(cfg.vec_size), pixels)]
        group_of_map = [0] * m
    else:
        out = layer.conv_output_shape()
        pixels = out.pixels
        expected = memrd_plan(layer, cfg, "conv")
        if plan.global_size != expected.global_size:
            raise PlanMismatch(f"plan {plan.global_size} != expected {expected.global_size}")
        idx_groups = conv_gather_indices(layer, cfg.vec_size)
        mg = m // layer.groups
        group_of_map = [mi // mg for mi in range(m)]

    cn = layer.cn(cfg.vec_size)
    chunk = pixel_chunk_size(cn, cfg.vec_size, pixels)
    flat = fm.flat_blocks_padded()
    counters = conv_traffic(layer, cfg, cache_blocks) if mode == "conv" \
        else fc_traffic(layer, cfg, batch, cache_blocks)

    def features() -> Iterator[FeatureChunk]:
        for z in range(n_groups_z):
            maps = z_group_maps(z, m, cfg.cu_num)
            idx_needed = sorted({group_of_map[mi] for mi in maps})
            for start in range(0, pixels, chunk):
                rows = slice(start, min(start + chunk, pixels))
                if len(idx_needed) == 1:
                    data = flat[idx_groups[idx_needed[0]][rows]]
                else:
                    # maps of this z-group span conv groups; stack their
                    # gathers in conv-group order for the engine to slice
                    data = np.stack([flat[idx_groups[g][rows]] for g in idx_needed])
                yield FeatureChunk(z, start, data)

    def weights() -> Iterator[WeightChunk]:
        for z in range(n_groups_z):
            maps = z_group_maps(z, m, cfg.cu_num)
            yield WeightChunk(z, maps, [bank.bundle_matrix(mi) for mi in maps])

    return features(), weights(), counters


@dataclass
class ResultChunk:
    """A run of finished neurons of one output map, in row-major pixel order."""
    map_index: int
    pix_start: int
    values: np.ndarray  # (n,) float32

    @property
    def elements(self) -> int:
        return self.values.shape[0]


def memwr_commit(results: Iterator[ResultChunk], plan: WorkItemPlan,
                 cfg: AcceleratorConfig) -> Tuple[FeatureMap, TrafficCounters]:
    """Pack a result stream into a blocked tensor, one element per work-item."""
    wo, ho, m = plan.global_size
    cb = c_prime(m, cfg.vec_size)
    blocked = np.zeros((ho * wo, cb, cfg.vec_size), np.float32)
    filled = np.zeros(m, np.int64)
    for item in results:
        mi = item.map_index
        n = item.values.shape[0]
        if mi >= m or filled[mi] + n > ho * wo:
            raise StreamOverrun(f"map {mi}: {filled[mi] + n} results for {ho * wo} slots")
        s = item.pix_start
        blocked[s:s + n, mi // cfg.vec_size, mi % cfg.vec_size] = item.values
        filled[mi] += n
    if (filled != ho * wo).any():
        short = int(np.argmin(filled))
        raise StreamUnderrun(f"map {short}: got {filled[short]} of {ho * wo} results")
    shape = TensorShape(w=wo, h=ho, c=m)
    fm = FeatureMap(shape, cfg.vec_size, blocked.reshape(ho, wo, cb, cfg.vec_size))
    counters = TrafficCounters(bytes_written=ho * wo * m * 4)
    return fm, counters


def bundle_stream_for_cu(layer: LayerDescriptor, fm: FeatureMap, bank: WeightBank,
                         cfg: AcceleratorConfig, cu: int, batch: int = 1):
    """Per-work-item MacBundle pairs seen by one compute unit, in stream order.

    Reference-grade expansion of the chunked stream; used to drive the
    scalar conv pipeline in tests.  Yields (features, weights) float32 pairs.
    """
    mode = "fc" if layer.layer_type == "fc" else "conv"
    plan = memrd_plan(layer, cfg, mode, batch)
    feats, weights, _ = memrd_stream(plan, fm, bank, cfg, layer, batch)
    weights = list(weights)
    b = cu_map_block(layer.output_maps, cfg.cu_num)
    for chunk in feats:
        wchunk = weights[chunk.z_group]
        if cu >= len(wchunk.maps):
            continue
        mi = wchunk.maps[cu]
        assert mi == cu * b + chunk.z_group
        wmat = wchunk.matrices[cu]
        data = chunk.data
        if data.ndim == 4:  # stacked conv groups; pick this map's group
            maps_groups = sorted({m_ // (layer.output_maps // layer.groups) for m_ in wchunk.maps})
            data = data[maps_groups.index(mi // (layer.output_maps // layer.groups))]
        for p in range(data.shape[0]):
            for j in range(data.shape[1]):
                yield data[p, j], wmat[j]
