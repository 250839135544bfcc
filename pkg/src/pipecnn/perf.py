"""First-order performance, bandwidth, and resource models plus the DSE sweep.

Cycle model: the pipeline retires one MAC bundle per ii/2 cycles.  The
initiation interval spans a feature/weight channel-read pair, so at the
synthesized ii = 2 each compute unit sustains one vectorized bundle per
cycle.  A layer then costs

    cycles = ceil(M / cu_num) * pixels * ceil(CN * ii / 2) + drain

with CN = K*K*C' (conv) or C' (fc), pixels the output positions computed per
map-group (batch positions for fc), and drain = reg_depth + a per-launch
pipeline constant.

Bandwidth model: layer bytes come from the data-reuse traffic counters
(weights fetched once, features once per window element); memory time is
bytes / DRAM bandwidth and a layer's effective time is max(compute, memory),
the roofline behavior that caps speedup once layers turn memory-bound.

Resource model: every estimate is affine in vec_size * cu_num,
    blocks = ceil(a * vec_size * cu_num) + c,
with coefficients calibrated to the one published utilization point of the
reference platform (162 DSP blocks at vec 8, cu 16) and its linear scaling
trend.  The defaults are calibration constants, not derivations, and can be
overridden.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

from .errors import NoFeasiblePoint
from .model import AcceleratorConfig, DeviceProfile, LayerDescriptor
from .movers import conv_traffic, fc_traffic, map_fc_batch

OPS_PER_MAC = 2  # multiply and add counted separately


@dataclass(frozen=True)
class CostCoefficients:
    a_dsp: float = 1.2
    c_dsp: int = 8
    a_logic: float = 1800.0
    c_logic: int = 60_000
    a_ram: float = 6.0
    c_ram: int = 200
    drain_cycles: int = 64  # per-launch pipeline fill/flush allowance
    lrn_cycles_per_element: float = 1.0


DEFAULT_COEFFS = CostCoefficients()


@dataclass(frozen=True)
class ResourceEstimate:
    dsp: int
    logic: int
    ram: int

    def fits(self, device: DeviceProfile) -> bool:
        return (self.dsp <= device.dsp_blocks
                and self.logic <= device.logic_elements
                and self.ram <= device.ram_blocks)


def resource_raw(cfg: AcceleratorConfig,
                 coeffs: CostCoefficients = DEFAULT_COEFFS) -> dict:
    """Pre-rounding affine estimates, exactly linear in cu_num for fixed vec."""
    x = cfg.vec_size * cfg.cu_num
    return {"dsp": coeffs.a_dsp * x + coeffs.c_dsp,
            "logic": coeffs.a_logic * x + coeffs.c_logic,
            "ram": coeffs.a_ram * x + coeffs.c_ram}


def estimate_resources(cfg: AcceleratorConfig,
                       coeffs: CostCoefficients = DEFAULT_COEFFS) -> ResourceEstimate:
    x = cfg.vec_size * cfg.cu_num
    return ResourceEstimate(
        dsp=math.ceil(coeffs.a_dsp * x) + coeffs.c_dsp,
        logic=math.ceil(coeffs.a_logic * x) + coeffs.c_logic,
        ram=math.ceil(coeffs.a_ram * x) + coeffs.c_ram)


def layer_ops(layer: LayerDescriptor) -> int:
    """2 * Wo * Ho * M * K * K * C true operations (zero-pad lanes excluded)."""
    return OPS_PER_MAC * layer.macs()


def network_ops(layers: Sequence[LayerDescriptor]) -> int:
    return sum(layer_ops(l) for l in layers)


def _layer_pixels(layer: LayerDescriptor, batch: int) -> int:
    if layer.layer_type == "fc":
        _, bx, by = map_fc_batch(batch, layer.input_shape.c)
        return bx * by
    return layer.conv_output_shape().pixels


def estimate_layer_cycles(layer: LayerDescriptor, cfg: AcceleratorConfig,
                          batch: int = 1,
                          coeffs: CostCoefficients = DEFAULT_COEFFS) -> int:
    cn = layer.cn(cfg.vec_size)
    mg = -(-layer.output_maps // cfg.cu_num)
    pixels = _layer_pixels(layer, batch)
    per_neuron = math.ceil(cn * cfg.ii / 2)
    drain = cfg.reg_depth + coeffs.drain_cycles
    return mg * pixels * per_neuron + drain


@dataclass(frozen=True)
class LayerCost:
    compute_cycles: int
    bytes_in: int
    bytes_out: int
    memory_time: float
    compute_time: float

    @property
    def effective_time(self) -> float:
        return max(self.compute_time, self.memory_time)

    @property
    def stalled(self) -> bool:
        return self.memory_time > self.compute_time


def estimate_bandwidth(layer: LayerDescriptor, cfg: AcceleratorConfig,
                       device: DeviceProfile, batch: int = 1,
                       coeffs: CostCoefficients = DEFAULT_COEFFS) -> LayerCost:
    """Roofline cost of one layer launch (FC launches cover the whole batch)."""
    if layer.layer_type == "fc":
        tc = fc_traffic(layer, cfg, batch)
    else:
        tc = conv_traffic(layer, cfg)
    cycles = estimate_layer_cycles(layer, cfg, batch, coeffs)
    bytes_in = tc.feature_bytes_read + tc.weight_bytes_read
    bytes_out = tc.bytes_written
    if layer.lrn is not None:
        # separate normalization pass: re-read and re-write the stored tensor
        bytes_in += tc.bytes_written
        bytes_out += tc.bytes_written
        cycles += int(coeffs.lrn_cycles_per_element * tc.bytes_written / 4)
    return LayerCost(compute_cycles=cycles, bytes_in=bytes_in, bytes_out=bytes_out,
                     memory_time=(bytes_in + bytes_out) / device.dram_bandwidth,
                     compute_time=cycles / cfg.clock_hz)


def network_cost(layers: Sequence[LayerDescriptor], cfg: AcceleratorConfig,
                 device: DeviceProfile, batch: int = 1,
                 coeffs: CostCoefficients = DEFAULT_COEFFS
                 ) -> Tuple[List[LayerCost], float, float]:
    """(per-layer costs, total seconds for the batch, GOPS)."""
    costs = [estimate_bandwidth(l, cfg, device, batch, coeffs) for l in layers]
    total = 0.0
    for layer, cost in zip(layers, costs):
        launches = batch if layer.layer_type == "conv" else 1
        total += launches * cost.effective_time
    gops = network_ops(layers) * batch / total / 1e9
    return costs, total, gops


@dataclass(frozen=True)
class DesignPoint:
    cfg: AcceleratorConfig
    resources: ResourceEstimate
    total_time: float
    gops: float
    feasible: bool

    @property
    def density(self) -> float:
        return performance_density(self.gops, self.resources.dsp)


def performance_density(gops: float, dsp: int) -> float:
    """Throughput per DSP block, GOPS/DSP."""
    if dsp == 0:
        raise ZeroDivisionError("dsp count must be nonzero")
    return gops / dsp


def sweep(layers: Sequence[LayerDescriptor], device: DeviceProfile,
          vec_candidates: Sequence[int], cu_candidates: Sequence[int],
          batch: int = 1, base_cfg: Optional[AcceleratorConfig] = None,
          coeffs: CostCoefficients = DEFAULT_COEFFS) -> List[DesignPoint]:
    """Evaluate every (vec, cu) candidate and rank the feasible points.

    Feasible points come first, ordered by total time ascending with ties
    broken by (vec_size, cu_num); infeasible points follow for reporting.
    Raises NoFeasiblePoint when nothing fits the device.
    """
    if not vec_candidates or not cu_candidates:
        raise ValueError("candidate sets must be non-empty")
    base = base_cfg or AcceleratorConfig()
    points = []
    for vec in sorted(set(vec_candidates)):
        for cu in sorted(set(cu_candidates)):
            cfg = replace(base, vec_size=vec, cu_num=cu)
            res = estimate_resources(cfg, coeffs)
            _, total, gops = network_cost(layers, cfg, device, batch, coeffs)
            points.append(DesignPoint(cfg, res, total, gops, res.fits(device)))
    feasible = sorted((p for p in points if p.feasible),
                      key=lambda p: (p.total_time, p.cfg.vec_size, p.cfg.cu_num))
    if not feasible:
        raise NoFeasiblePoint(f"no candidate fits device {device}")
    infeasible = sorted((p for p in points if not p.feasible),
                        key=lambda p: (p.cfg.vec_size, p.cfg.cu_num))
    return feasible + infeasible
