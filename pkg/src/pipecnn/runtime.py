"""Pipeline runtime: bounded blocking channels and per-layer stage orchestration.

One layer execution wires MemRD -> Conv -> (Pool) -> MemWR into a deep
pipeline.  The stages are generator transformers, so the same code runs in
two modes:

* cooperative (worker count 0 or 1): stages compose as a lazy generator
  chain on one thread; this is the determinism baseline.
* threaded (worker count >= 2): each stage runs on its own worker thread,
  communicating only through bounded channels.

Stage computations are pure functions of their input streams, so outputs are
bit-identical across modes, worker counts, and channel capacities; only the
timing observations differ.  The normalization stage runs as a separate
whole-tensor pass between pipeline launches, and fully connected layers run
once per batch with the batched work mapping.

Channel transport is chunked for throughput.  Result channels split chunks to
at most the channel capacity so buffered elements never exceed it; the bundle
channels treat one gathered chunk as an atomic burst (a burst larger than the
capacity waits for an empty channel), since per-bundle transport of hundreds
of millions of elements is not practical in an emulator.  Element counts,
stall durations, and peak occupancy are recorded per channel either way.
"""

from __future__ import annotations

import os
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional

import numpy as np

from .conv import finish_neurons, mac_block, _bias_array
from .errors import ChannelClosed, DeadlockError, PipeCnnError, PlanMismatch
from .lrn import PwlTable, lrn_apply, lrn_build_table
from .model import AcceleratorConfig, FeatureMap, LayerDescriptor, TensorShape
from .movers import (FeatureChunk, ResultChunk, TrafficCounters, WeightChunk,
                     map_fc_batch, memrd_plan, memrd_stream, memwr_commit,
                     memwr_plan)
from .pooling import pool_stream

THREADS_ENV = "PIPECNN_THREADS"
RESULT_SPLIT_MAX = 4096
_WAIT_TICK = 0.05


def worker_count(threads: Optional[int] = None) -> int:
    if threads is not None:
        return threads
    raw = os.environ.get(THREADS_ENV, "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


class PipelineMonitor:
    """Global progress tracker backing the deadlock watchdog."""

    def __init__(self, watchdog_s: float = 60.0):
        self.watchdog_s = watchdog_s
        self._last_progress = time.perf_counter()
        self._exception: Optional[BaseException] = None
        self._lock = threading.Lock()

    def touch(self):
        self._last_progress = time.perf_counter()

    def fail(self, exc: BaseException):
        with self._lock:
            if self._exception is None:
                self._exception = exc

    def check(self, where: str):
        if self._exception is not None:
            raise PipeCnnError(f"pipeline stage failed: {self._exception!r}") \
                from self._exception
        if time.perf_counter() - self._last_progress > self.watchdog_s:
            raise DeadlockError(
                f"no pipeline progress for {self.watchdog_s:.1f}s while {where}; "
                f"producer/consumer plans are inconsistent")


class Channel:
    """Bounded FIFO with blocking backpressure and element accounting.

    Capacity is counted in stream elements; a chunk push occupies as many
    slots as it carries.  A chunk larger than the capacity is admitted only
    into an empty channel (atomic burst).  FIFO order is preserved and no
    element is dropped or duplicated; push and pop totals must match at the
    end of every run.
    """

    def __init__(self, capacity: int, name: str = "",
                 monitor: Optional[PipelineMonitor] = None):
        if capacity < 1:
            raise ValueError("channel capacity must be >= 1")
        self.capacity = capacity
        self.name = name
        self.monitor = monitor
        self._cond = threading.Condition()
        self._items: deque = deque()
        self._elements = 0
        self._closed = False
        self.pushed = 0
        self.popped = 0
        self.push_stall_s = 0.0
        self.pop_stall_s = 0.0
        self.peak_elements = 0

    def _fits(self, n: int) -> bool:
        if n > self.capacity:
            return self._elements == 0
        return self._elements + n <= self.capacity

    def push_chunk(self, payload, n: int = 1):
        t0 = None
        with self._cond:
            if self._closed:
                raise ChannelClosed(f"push on closed channel {self.name!r}")
            while not self._fits(n):
                if t0 is None:
                    t0 = time.perf_counter()
                self._cond.wait(_WAIT_TICK)
                if self.monitor is not None:
                    self.monitor.check(f"pushing to {self.name!r}")
            if t0 is not None:
                self.push_stall_s += time.perf_counter() - t0
            self._items.append((payload, n))
            self._elements += n
            self.pushed += n
            self.peak_elements = max(self.peak_elements, self._elements)
            if self.monitor is not None:
                self.monitor.touch()
            self._cond.notify_all()

    def pop_chunk(self):
        t0 = None
        with self._cond:
            while not self._items:
                if self._closed:
                    raise ChannelClosed(f"pop on closed empty channel {self.name!r}")
                if t0 is None:
                    t0 = time.perf_counter()
                self._cond.wait(_WAIT_TICK)
                if self.monitor is not None:
                    self.monitor.check(f"popping from {self.name!r}")
            if t0 is not None:
                self.pop_stall_s += time.perf_counter() - t0
            payload, n = self._items.popleft()
            self._elements -= n
            self.popped += n
            if self.monitor is not None:
                self.monitor.touch()
            self._cond.notify_all()
            return payload

    def push(self, element):
        self.push_chunk(element, 1)

    def pop(self):
        return self.pop_chunk()

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def stats(self) -> dict:
        return {"name": self.name, "capacity": self.capacity,
                "pushed": self.pushed, "popped": self.popped,
                "peak_elements": self.peak_elements,
                "push_stall_s": round(self.push_stall_s, 6),
                "pop_stall_s": round(self.pop_stall_s, 6)}


def channel_push(ch: Channel, element):
    ch.push(element)


def channel_pop(ch: Channel):
    return ch.pop()


def channel_iter(ch: Channel) -> Iterator:
    while True:
        try:
            yield ch.pop_chunk()
        except ChannelClosed:
            return


class CountingRelay:
    """Cooperative-mode stand-in for a channel: counts elements, no buffering."""

    def __init__(self, name: str, capacity: int):
        self.name = name
        self.capacity = capacity
        self.pushed = 0
        self.popped = 0
        self.peak_elements = 0
        self.push_stall_s = 0.0
        self.pop_stall_s = 0.0

    def wrap(self, it: Iterable, elements=lambda item: item.elements) -> Iterator:
        for item in it:
            n = elements(item)
            self.pushed += n
            self.peak_elements = max(self.peak_elements, n)
            yield item
            self.popped += n

    stats = Channel.stats


@dataclass
class ProfileEvent:
    kernel: str
    layer: int
    start: float
    end: float
    image: int = 0
    bytes: int = 0
    stall_s: float = 0.0


class RunProfile:
    """Per-kernel timeline events, per-layer traffic counters, channel stats."""

    def __init__(self):
        self.events: List[ProfileEvent] = []
        self.layer_counters: Dict[int, TrafficCounters] = {}
        self.channel_stats: List[dict] = []
        self.meta: dict = {}

    def add_event(self, ev: ProfileEvent):
        self.events.append(ev)

    def merge_counters(self, layer: int, counters: TrafficCounters):
        cur = self.layer_counters.get(layer, TrafficCounters())
        self.layer_counters[layer] = cur.merge(counters)

    def add_channel_stats(self, layer: int, stats: dict):
        self.channel_stats.append({"layer": layer, **stats})

    def total_stall_s(self) -> float:
        return sum(s["push_stall_s"] + s["pop_stall_s"] for s in self.channel_stats)

    def timeline_records(self) -> List[dict]:
        return [{"kernel": e.kernel, "layer": e.layer, "image": e.image,
                 "start": round(e.start, 6), "end": round(e.end, 6),
                 "bytes": e.bytes, "stalls": round(e.stall_s, 6)}
                for e in sorted(self.events, key=lambda e: (e.start, e.layer))]

    def export_timeline(self, fh):
        import json
        for rec in self.timeline_records():
            fh.write(json.dumps(rec) + "\n")


def conv_stage_items(feature_iter: Iterable[FeatureChunk],
                     weight_iter: Iterable[WeightChunk],
                     layer: LayerDescriptor, cfg: AcceleratorConfig,
                     bias: np.ndarray, relu: bool) -> Iterator[ResultChunk]:
    """The Conv kernel as a stream transformer.

    Pops one weight chunk per z-group, then reduces every feature chunk for
    each compute unit's map of that group.  Bundle consumption per neuron and
    the float operation order match the scalar pipeline exactly.
    """
    wit = iter(weight_iter)
    current: Optional[WeightChunk] = None
    conv_groups: List[int] = []
    mg = layer.output_maps // layer.groups
    for fchunk in feature_iter:
        if current is None or current.z_group != fchunk.z_group:
            current = next(wit, None)
            if current is None or current.z_group != fchunk.z_group:
                raise PlanMismatch("weight and feature streams diverged on z-group order")
            conv_groups = sorted({mi // mg for mi in current.maps})
        for slot, mi in enumerate(current.maps):
            if fchunk.data.ndim == 4:
                data = fchunk.data[conv_groups.index(mi // mg)]
            else:
                data = fchunk.data
            vals = mac_block(data, current.matrices[slot], cfg.reg_depth)
            finish_neurons(vals, bias[mi], relu)
            yield ResultChunk(mi, fchunk.pix_start, vals)


def _split_results(items: Iterable[ResultChunk], limit: int) -> Iterator[ResultChunk]:
    for item in items:
        n = item.values.shape[0]
        if n <= limit:
            yield item
            continue
        for s in range(0, n, limit):
            yield ResultChunk(item.map_index, item.pix_start + s, item.values[s:s + limit])


@dataclass
class LayerRun:
    output: FeatureMap
    counters: TrafficCounters


def execute_layer(layer: LayerDescriptor, fm: FeatureMap, bank, bias,
                  cfg: AcceleratorConfig, *, batch: int = 1,
                  threads: Optional[int] = None,
                  profile: Optional[RunProfile] = None,
                  layer_index: int = 0, image_index: int = 0,
                  watchdog_s: float = 60.0,
                  cache_blocks: Optional[int] = None) -> LayerRun:
    """Run one layer through the MemRD -> Conv -> (Pool) -> MemWR pipeline.

    The streamed result equals the sequential run_conv_layer / run_fc_layer
    composition bit for bit; channel capacity and worker count only influence
    the recorded timing.
    """
    mode = "fc" if layer.layer_type == "fc" else "conv"
    plan_rd = memrd_plan(layer, cfg, mode, batch)
    plan_wr = memwr_plan(layer, cfg, mode, batch)
    bias = _bias_array(bias, layer.output_maps)
    conv_out = layer.conv_output_shape() if mode == "conv" else None
    row_len = conv_out.w if mode == "conv" else plan_wr.global_size[0]
    workers = worker_count(threads)
    if profile is None:
        profile = RunProfile()

    feats, weights, counters = memrd_stream(plan_rd, fm, bank, cfg, layer,
                                            batch, cache_blocks)
    split = min(cfg.channel_depth, RESULT_SPLIT_MAX)
    t_layer = time.perf_counter()

    if workers <= 1:
        relays = {
            "feature": CountingRelay("feature", cfg.channel_depth),
            "weight": CountingRelay("weight", cfg.channel_depth),
            "conv_out": CountingRelay("conv_out", cfg.channel_depth),
        }
        f_it = relays["feature"].wrap(feats)
        w_it = relays["weight"].wrap(weights)
        items = conv_stage_items(f_it, w_it, layer, cfg, bias, layer.relu)
        items = relays["conv_out"].wrap(_split_results(items, split))
        if layer.pool is not None and mode == "conv":
            relays["pool_out"] = CountingRelay("pool_out", cfg.channel_depth)
            items = relays["pool_out"].wrap(
                _split_results(pool_stream(items, layer.pool, row_len), split))
        out_fm, wr_counters = memwr_commit(items, plan_wr, cfg)
        t_end = time.perf_counter()
        for kernel in ("memrd", "conv") + (("pool",) if layer.pool and mode == "conv" else ()) + ("memwr",):
            by = counters.feature_bytes_read + counters.weight_bytes_read \
                if kernel == "memrd" else (wr_counters.bytes_written if kernel == "memwr" else 0)
            profile.add_event(ProfileEvent(kernel, layer_index, t_layer, t_end,
                                           image_index, by))
        for relay in relays.values():
            profile.add_channel_stats(layer_index, relay.stats())
    else:
        out_fm, wr_counters = _execute_layer_threaded(
            layer, cfg, bias, feats, weights, counters, plan_wr, row_len, split,
            mode, profile, layer_index, image_index, watchdog_s)

    counters = counters.merge(TrafficCounters(bytes_written=wr_counters.bytes_written))
    profile.merge_counters(layer_index, counters)
    return LayerRun(output=out_fm, counters=counters)


def _execute_layer_threaded(layer, cfg, bias, feats, weights, counters,
                            plan_wr, row_len, split, mode, profile,
                            layer_index, image_index, watchdog_s):
    monitor = PipelineMonitor(watchdog_s)
    depth = cfg.channel_depth
    ch_f = Channel(depth, "feature", monitor)
    ch_w = Channel(depth, "weight", monitor)
    ch_conv = Channel(depth, "conv_out", monitor)
    has_pool = layer.pool is not None and mode == "conv"
    ch_pool = Channel(depth, "pool_out", monitor) if has_pool else None
    result = {}
    spans = {}

    def timed(name):
        def deco(fn):
            def run():
                t0 = time.perf_counter()
                try:
                    fn()
                except BaseException as e:  # propagate through the monitor
                    monitor.fail(e)
                finally:
                    spans[name] = (t0, time.perf_counter())
            return run
        return deco

    @timed("memrd")
    def memrd_worker():
        try:
            wit = iter(weights)
            last_z = -1
            for fchunk in feats:
                # weights of a z-group precede its feature chunks
                if fchunk.z_group != last_z:
                    wchunk = next(wit)
                    ch_w.push_chunk(wchunk, wchunk.elements)
                    last_z = fchunk.z_group
                ch_f.push_chunk(fchunk, fchunk.elements)
        finally:
            ch_f.close()
            ch_w.close()

    @timed("conv")
    def conv_worker():
        try:
            items = conv_stage_items(channel_iter(ch_f), channel_iter(ch_w),
                                     layer, cfg, bias, layer.relu)
            for item in _split_results(items, split):
                ch_conv.push_chunk(item, item.elements)
        finally:
            ch_conv.close()

    @timed("pool")
    def pool_worker():
        try:
            pooled = pool_stream(channel_iter(ch_conv), layer.pool, row_len)
            for item in _split_results(pooled, split):
                ch_pool.push_chunk(item, item.elements)
        finally:
            ch_pool.close()

    @timed("memwr")
    def memwr_worker():
        last = ch_pool if has_pool else ch_conv
        result["out"] = memwr_commit(channel_iter(last), plan_wr, cfg)

    workers = [memrd_worker, conv_worker] + ([pool_worker] if has_pool else []) + [memwr_worker]
    threads = [threading.Thread(target=w, daemon=True) for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    monitor.check("joining pipeline")
    if "out" not in result:
        raise PipeCnnError("pipeline finished without a committed result")

    channels = [ch_f, ch_w, ch_conv] + ([ch_pool] if has_pool else [])
    stage_stalls = {
        "memrd": ch_f.push_stall_s + ch_w.push_stall_s,
        "conv": ch_f.pop_stall_s + ch_w.pop_stall_s + ch_conv.push_stall_s,
        "pool": (ch_conv.pop_stall_s + ch_pool.push_stall_s) if has_pool else 0.0,
        "memwr": (ch_pool.pop_stall_s if has_pool else ch_conv.pop_stall_s),
    }
    out_fm, wr_counters = result["out"]
    for name, (t0, t1) in spans.items():
        by = counters.feature_bytes_read + counters.weight_bytes_read \
            if name == "memrd" else (wr_counters.bytes_written if name == "memwr" else 0)
        profile.add_event(ProfileEvent(name, layer_index, t0, t1, image_index,
                                       by, stage_stalls.get(name, 0.0)))
    for ch in channels:
        profile.add_channel_stats(layer_index, ch.stats())
    return out_fm, wr_counters


def flatten_feature_map(fm: FeatureMap, vec_size: int) -> np.ndarray:
    """(H, W, C) tensor -> flat activation vector in (y, x, c) order."""
    return fm.to_dense().reshape(-1)


def batch_feature_map(vectors: List[np.ndarray], vec_size: int) -> FeatureMap:
    """Stack B flattened vectors into the batched (C, bx, by) fc input set."""
    b = len(vectors)
    c = vectors[0].shape[0]
    _, bx, by = map_fc_batch(b, c)
    dense = np.zeros((by, bx, c), np.float32)
    for i, v in enumerate(vectors):
        dense[i // bx, i % bx] = v
    return FeatureMap.from_dense(dense, vec_size)


def execute_network(layers: List[LayerDescriptor], banks, biases, inputs,
                    cfg: AcceleratorConfig, *, batch: int = 1,
                    threads: Optional[int] = None, watchdog_s: float = 60.0,
                    collect_layers: bool = False):
    """Forward pass of a whole network.

    Convolutional layers stream one image at a time; at the conv/fc boundary
    the batch is flattened into a single 3-D set so every fc layer runs once
    per batch and fetches its weights once.  Normalization layers execute as
    separate whole-tensor passes between pipeline launches.

    inputs: one FeatureMap (replicated across the batch) or a list of batch
    FeatureMaps.  Returns (outputs, RunProfile); outputs is a (batch, M)
    array when the network ends in fc layers, else a list of FeatureMaps.
    """
    if isinstance(inputs, FeatureMap):
        inputs = [inputs] * batch
    if len(inputs) != batch:
        raise ValueError(f"need {batch} inputs, got {len(inputs)}")
    profile = RunProfile()
    profile.meta["batch"] = batch
    profile.meta["threads"] = worker_count(threads)
    tables: Dict[tuple, PwlTable] = {}
    per_layer: List[List[FeatureMap]] = [[] for _ in layers]

    fc_start = next((i for i, l in enumerate(layers) if l.layer_type == "fc"),
                    len(layers))

    def lrn_pass(fm: FeatureMap, layer: LayerDescriptor, li: int, img: int) -> FeatureMap:
        key = (layer.lrn, cfg.lrn_n)
        if key not in tables:
            tables[key] = lrn_build_table(cfg.lrn_n, layer.lrn.k, layer.lrn.alpha,
                                          layer.lrn.beta)
        t0 = time.perf_counter()
        out = lrn_apply(fm, layer.lrn, tables[key])
        t1 = time.perf_counter()
        profile.add_event(ProfileEvent("lrn", li, t0, t1, img,
                                       bytes=2 * fm.shape.elements * 4))
        return out

    # conv front: per image
    states = list(inputs)
    for li in range(fc_start):
        layer = layers[li]
        for img in range(batch):
            run = execute_layer(layer, states[img], banks[li], biases[li], cfg,
                                threads=threads, profile=profile, layer_index=li,
                                image_index=img, watchdog_s=watchdog_s)
            out = run.output
            if layer.lrn is not None:
                out = lrn_pass(out, layer, li, img)
            states[img] = out
            if collect_layers:
                per_layer[li].append(out)

    if fc_start == len(layers):
        return (states, profile, per_layer) if collect_layers else (states, profile)

    # fc back end: one batched launch per layer
    vectors = [flatten_feature_map(s, cfg.vec_size) for s in states]
    batched = batch_feature_map(vectors, cfg.vec_size)
    for li in range(fc_start, len(layers)):
        layer = layers[li]
        run = execute_layer(layer, batched, banks[li], biases[li], cfg,
                            batch=batch, threads=threads, profile=profile,
                            layer_index=li, watchdog_s=watchdog_s)
        batched = run.output
        if collect_layers:
            per_layer[li].append(batched)

    dense = batched.to_dense()  # (by, bx, M)
    outputs = dense.reshape(-1, dense.shape[2])[:batch]
    return (outputs, profile, per_layer) if collect_layers else (outputs, profile)
