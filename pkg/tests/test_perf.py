import math

import numpy as np
import pytest

from pipecnn import netio, perf
from pipecnn.errors import NoFeasiblePoint
from pipecnn.model import (AcceleratorConfig, DeviceProfile, LayerDescriptor,
                           TensorShape)

A7 = netio.DEVICES["stratixv_a7"]
UNLIMITED = netio.DEVICES["unlimited"]


def conv_layer(w=13, c=256, m=384, k=3, s=1, p=1):
    return LayerDescriptor("conv", k, s, p, TensorShape(w, w, c), m)


class TestCycles:
    def test_doubling_cu_halves_cycles(self):
        layer = conv_layer()
        coeffs = perf.CostCoefficients(drain_cycles=0)
        cy = {cu: perf.estimate_layer_cycles(
            layer, AcceleratorConfig(vec_size=8, cu_num=cu, reg_depth=0 or 8),
            coeffs=coeffs) - 8 for cu in (2, 4, 8, 16)}
        assert cy[2] == 2 * cy[4] == 4 * cy[8] == 8 * cy[16]

    def test_doubling_vec_halves_cycles(self):
        layer = conv_layer(c=256)
        coeffs = perf.CostCoefficients(drain_cycles=0)
        cy = {v: perf.estimate_layer_cycles(
            layer, AcceleratorConfig(vec_size=v, cu_num=4, reg_depth=8),
            coeffs=coeffs) - 8 for v in (4, 8, 16)}
        assert cy[4] == 2 * cy[8] == 4 * cy[16]

    def test_formula_value(self):
        layer = conv_layer(w=13, c=256, m=384, k=3)
        cfg = AcceleratorConfig(vec_size=8, cu_num=16, reg_depth=8, ii=2)
        # ceil(384/16) * 13*13 * ceil(288*2/2) + (8 + 64)
        assert perf.estimate_layer_cycles(layer, cfg) == 24 * 169 * 288 + 72

    def test_fc_uses_batch_positions(self):
        fc = LayerDescriptor("fc", 1, 1, 0, TensorShape(1, 1, 4096), 1000)
        cfg = AcceleratorConfig(vec_size=8, cu_num=16)
        one = perf.estimate_layer_cycles(fc, cfg, batch=1)
        b64 = perf.estimate_layer_cycles(fc, cfg, batch=64)
        assert (b64 - 72) == 64 * (one - 72)


class TestBandwidth:
    def test_huge_bandwidth_compute_bound(self):
        cost = perf.estimate_bandwidth(conv_layer(), AcceleratorConfig(), UNLIMITED)
        assert cost.effective_time == cost.compute_time
        assert not cost.stalled

    def test_fc_batch_weight_amortization(self):
        fc = LayerDescriptor("fc", 1, 1, 0, TensorShape(1, 1, 4096), 1000)
        cfg = AcceleratorConfig()
        c1 = perf.estimate_bandwidth(fc, cfg, A7, batch=1)
        c64 = perf.estimate_bandwidth(fc, cfg, A7, batch=64)
        w_bytes = 1000 * 512 * 8 * 4
        assert c1.bytes_in - 4096 * 4 == w_bytes
        assert c64.bytes_in - 64 * 4096 * 4 == w_bytes  # per-image share is 64x smaller

    def test_alexnet_fc_memory_bound_at_optimum(self):
        net = netio.load_network("alexnet")
        cfg = AcceleratorConfig(vec_size=8, cu_num=16)
        costs, _, _ = perf.network_cost(net.layers, cfg, A7, batch=1)
        fc_costs = [c for l, c in zip(net.layers, costs) if l.layer_type == "fc"]
        assert any(c.stalled for c in fc_costs)

    def test_effective_time_invariant(self):
        cost = perf.estimate_bandwidth(conv_layer(), AcceleratorConfig(), A7)
        assert cost.effective_time == max(cost.compute_time, cost.memory_time)
        assert cost.stalled == (cost.memory_time > cost.compute_time)


class TestResources:
    def test_calibration_point(self):
        assert perf.estimate_resources(AcceleratorConfig(vec_size=8, cu_num=16)).dsp == 162

    def test_infeasible_point(self):
        r = perf.estimate_resources(AcceleratorConfig(vec_size=16, cu_num=16))
        assert r.dsp == 316
        assert r.dsp > A7.dsp_blocks and not r.fits(A7)

    def test_degenerate_floor(self):
        assert perf.estimate_resources(AcceleratorConfig(vec_size=1, cu_num=1)).dsp == 10

    def test_affine_in_cu_for_fixed_vec(self):
        for vec in (4, 8, 16):
            raws = [perf.resource_raw(AcceleratorConfig(vec_size=vec, cu_num=cu))
                    for cu in (1, 2, 3, 4, 5)]
            for key in ("dsp", "logic", "ram"):
                diffs = np.diff([r[key] for r in raws])
                assert np.allclose(diffs, diffs[0], rtol=1e-12)
            ints = [perf.estimate_resources(AcceleratorConfig(vec_size=vec, cu_num=cu))
                    for cu in (1, 2, 3, 4, 5)]
            for r, raw in zip(ints, raws):
                assert 0 <= r.dsp - raw["dsp"] < 1
                assert 0 <= r.logic - raw["logic"] < 1
                assert 0 <= r.ram - raw["ram"] < 1


class TestDensity:
    def test_table_values(self):
        assert round(perf.performance_density(33.9, 162), 2) == 0.21
        assert round(perf.performance_density(31.8, 246), 2) == 0.13
        assert round(perf.performance_density(61.6, 2240), 3) == 0.028
        assert perf.performance_density(61.6, 2240) == pytest.approx(0.0275, abs=5e-4)

    def test_exact_inverse(self):
        for g, d in ((33.9, 162), (1.0, 7), (0.5, 3)):
            assert perf.performance_density(g, d) * d == pytest.approx(g, rel=1e-15)

    def test_zero_dsp(self):
        with pytest.raises(ZeroDivisionError):
            perf.performance_density(1.0, 0)


class TestOpsAccounting:
    def test_alexnet_total_ops_range(self):
        net = netio.load_network("alexnet")
        total = perf.network_ops(net.layers)
        assert 1.3e9 <= total <= 1.6e9

    def test_ops_formula(self):
        layer = conv_layer(w=13, c=256, m=384, k=3)
        assert perf.layer_ops(layer) == 2 * 13 * 13 * 384 * 3 * 3 * 256

    def test_ops_independent_of_cfg(self):
        net = netio.load_network("alexnet")
        assert perf.network_ops(net.layers) == perf.network_ops(net.layers)


class TestSweep:
    def test_alexnet_winner_and_infeasible(self):
        net = netio.load_network("alexnet")
        points = perf.sweep(net.layers, A7, [4, 8, 16], [2, 4, 8, 16], batch=1)
        best = points[0]
        assert (best.cfg.vec_size, best.cfg.cu_num) == (8, 16)
        assert best.resources.dsp == 162
        flags = {(p.cfg.vec_size, p.cfg.cu_num): p.feasible for p in points}
        assert flags[(16, 16)] is False
        assert sum(1 for f in flags.values() if not f) == 1

    def test_unlimited_device_prefers_biggest(self):
        net = netio.load_network("alexnet")
        points = perf.sweep(net.layers, UNLIMITED, [4, 8, 16], [2, 4, 8, 16], batch=1)
        assert (points[0].cfg.vec_size, points[0].cfg.cu_num) == (16, 16)

    def test_monotone_speedup_under_infinite_bandwidth(self):
        net = netio.load_network("alexnet")
        times = {}
        for vec in (4, 8, 16):
            for cu in (2, 4, 8, 16):
                cfg = AcceleratorConfig(vec_size=vec, cu_num=cu)
                _, t, _ = perf.network_cost(net.layers, cfg, UNLIMITED, batch=1)
                times[(vec, cu)] = t
        for vec in (4, 8, 16):
            for a, b in ((2, 4), (4, 8), (8, 16)):
                assert times[(vec, b)] <= times[(vec, a)]
        for cu in (2, 4, 8, 16):
            for a, b in ((4, 8), (8, 16)):
                assert times[(b, cu)] <= times[(a, cu)]

    def test_bandwidth_plateau(self):
        net = netio.load_network("alexnet")
        t = {}
        for cu in (4, 8, 16):
            cfg = AcceleratorConfig(vec_size=8, cu_num=cu)
            _, t[cu], _ = perf.network_cost(net.layers, cfg, A7, batch=1)
        assert t[4] / t[8] > t[8] / t[16]

    def test_gops_within_band(self):
        net = netio.load_network("alexnet")
        cfg = AcceleratorConfig(vec_size=8, cu_num=16, clock_hz=181e6, ii=2)
        _, _, gops = perf.network_cost(net.layers, cfg, A7, batch=1)
        assert 33.9 * 0.7 <= gops <= 33.9 * 1.3

    def test_no_feasible_point(self):
        tiny = DeviceProfile(logic_elements=1000, dsp_blocks=1, ram_blocks=1,
                             dram_bandwidth=1e9)
        net = netio.load_network("alexnet")
        with pytest.raises(NoFeasiblePoint):
            perf.sweep(net.layers, tiny, [8], [8])

    def test_rank_order_and_tie_break(self):
        net = netio.load_network("alexnet")
        points = perf.sweep(net.layers, A7, [4, 8], [2, 4], batch=1)
        feas = [p for p in points if p.feasible]
        assert all(a.total_time <= b.total_time for a, b in zip(feas, feas[1:]))
