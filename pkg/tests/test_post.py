import numpy as np
import pytest

from pipecnn import lrn
from pipecnn.errors import IncompleteRow, InvalidRange
from pipecnn.model import FeatureMap, LrnSpec, PoolSpec, TensorShape
from pipecnn.movers import ResultChunk
from pipecnn.pooling import LineBufferBank, pool_plane, pool_stream
from pipecnn.reference import lrn_ref, max_rel_error, pool_ref


def plane_chunks(plane, map_index=0):
    h, w = plane.shape
    return [ResultChunk(map_index, r * w, plane[r].astype(np.float32))
            for r in range(h)]


class TestPooling:
    def test_3x3_max(self):
        plane = np.arange(1, 10, dtype=np.float32).reshape(3, 3)
        out = pool_plane(plane, PoolSpec("max", 3, 1))
        assert out.shape == (1, 1) and out[0, 0] == 9

    def test_3x3_avg(self):
        plane = np.arange(1, 10, dtype=np.float32).reshape(3, 3)
        out = pool_plane(plane, PoolSpec("avg", 3, 1))
        assert out[0, 0] == np.float32(5.0)

    def test_alexnet_window_on_random_tensor(self, rng):
        spec = PoolSpec("max", 3, 2)
        dense = rng.random((55, 55, 4), dtype=np.float32) - np.float32(0.5)
        pooled = np.stack([pool_plane(dense[:, :, c], spec) for c in range(4)], axis=2)
        ref = pool_ref(dense, spec)
        assert pooled.shape == (27, 27, 4)
        assert np.array_equal(pooled.astype(np.float64), ref)  # max is exact

    def test_avg_tolerance(self, rng):
        spec = PoolSpec("avg", 3, 2)
        dense = rng.random((13, 13, 3), dtype=np.float32)
        pooled = np.stack([pool_plane(dense[:, :, c], spec) for c in range(3)], axis=2)
        ref = pool_ref(dense, spec)
        assert max_rel_error(pooled, ref) <= 1e-6

    def test_bypass_identity(self, rng):
        chunks = plane_chunks(rng.random((5, 7), dtype=np.float32))
        out = list(pool_stream(iter(chunks), None, 7))
        assert out is not None and len(out) == 5
        for a, b in zip(out, chunks):
            assert a is b  # bit-exact passthrough, same objects

    def test_constant_tensor_fixed_point(self):
        plane = np.full((6, 6), 3.25, np.float32)
        for mode in ("max", "avg"):
            out = pool_plane(plane, PoolSpec(mode, 2, 2))
            assert (out == np.float32(3.25)).all()

    def test_selection_and_bounds_property(self, rng):
        plane = rng.random((9, 9), dtype=np.float32)
        got_max = pool_plane(plane, PoolSpec("max", 3, 2))
        assert np.isin(got_max, plane).all()  # selection property
        got_avg = pool_plane(plane, PoolSpec("avg", 3, 2))
        assert (got_avg <= plane.max() + 1e-6).all()
        assert (got_avg >= plane.min() - 1e-6).all()

    def test_interleaved_maps(self, rng):
        spec = PoolSpec("max", 2, 2)
        a = rng.random((4, 4), dtype=np.float32)
        b = rng.random((4, 4), dtype=np.float32)
        mixed = []
        for ca, cb in zip(plane_chunks(a, 0), plane_chunks(b, 1)):
            mixed += [ca, cb]
        outs = {0: np.empty((2, 2), np.float32), 1: np.empty((2, 2), np.float32)}
        for item in pool_stream(iter(mixed), spec, 4):
            outs[item.map_index][item.pix_start // 2] = item.values
        assert np.array_equal(outs[0].astype(np.float64), pool_ref(a[:, :, None], spec)[:, :, 0])
        assert np.array_equal(outs[1].astype(np.float64), pool_ref(b[:, :, None], spec)[:, :, 0])

    def test_incomplete_row_raises(self, rng):
        chunks = plane_chunks(rng.random((3, 4), dtype=np.float32))
        chunks.append(ResultChunk(0, 12, rng.random(2, dtype=np.float32)))
        with pytest.raises(IncompleteRow):
            list(pool_stream(iter(chunks), PoolSpec("max", 3, 1), 4))

    def test_line_buffer_fill_contract(self):
        bank = LineBufferBank(2, 4)
        assert not bank.filled
        bank.store(np.zeros(4, np.float32))
        assert not bank.filled
        bank.store(np.zeros(4, np.float32))
        assert bank.filled


ALEX = dict(k=2.0, alpha=1e-4, beta=0.75)


class TestPwlTable:
    def test_boundary_exactness(self):
        t = lrn.lrn_build_table(2, **ALEX)
        exact = lrn.lrn_factor_exact(t.boundaries, **ALEX)
        got = lrn.pwlf_eval(t, t.boundaries)
        assert np.max(np.abs(got - exact) / exact) < 1e-12

    def test_alexnet_error_bound(self):
        t = lrn.lrn_build_table(2, **ALEX)
        assert lrn.table_max_rel_error(t, 500_000) <= 0.005

    def test_error_decreases_with_n(self):
        errs = {n: lrn.table_max_rel_error(lrn.lrn_build_table(n, **ALEX), 200_000)
                for n in (0, 1, 2, 4)}
        assert errs[4] < errs[1] < errs[0]
        assert errs[4] < errs[2]

    def test_clamping(self):
        t = lrn.lrn_build_table(2, **ALEX)
        g = lrn.lrn_factor_exact
        assert lrn.pwlf_eval(t, t.x_min / 8) == pytest.approx(g(t.x_min, **ALEX), rel=1e-9)
        assert lrn.pwlf_eval(t, t.x_max * 8) == pytest.approx(g(t.x_max, **ALEX), rel=1e-9)

    def test_addressing_matches_binary_search(self, rng):
        t = lrn.lrn_build_table(3, **ALEX)
        xs = np.exp(rng.uniform(np.log(t.x_min), np.log(t.x_max), 100_000))
        assert np.array_equal(lrn.segment_index(t, xs),
                              lrn.segment_index_bsearch(t, xs))

    def test_monotone_non_increasing(self):
        t = lrn.lrn_build_table(2, **ALEX)
        assert (t.slopes <= 0).all()
        xs = np.logspace(-4, 4, 1000)
        ys = lrn.pwlf_eval(t, xs)
        assert (np.diff(ys) <= 1e-15).all()

    def test_invalid_range(self):
        with pytest.raises(InvalidRange):
            lrn.lrn_build_table(2, 2.0, 1e-4, 0.75, x_min=-1.0)
        with pytest.raises(InvalidRange):
            lrn.lrn_build_table(2, 2.0, 1e-4, 0.75, x_min=4.0, x_max=2.0)
        with pytest.raises(InvalidRange):
            lrn.lrn_build_table(-1, 2.0, 1e-4, 0.75)

    def test_text_roundtrip(self):
        t = lrn.lrn_build_table(2, **ALEX)
        t2 = lrn.PwlTable.from_text(t.to_text())
        assert t2.n == t.n and t2.shift_bit == t.shift_bit
        assert np.array_equal(t2.boundaries, t.boundaries)
        assert np.array_equal(t2.slopes, t.slopes)
        assert np.array_equal(t2.intercepts, t.intercepts)


class TestLrnApply:
    def test_zero_input(self):
        spec = LrnSpec()
        t = lrn.lrn_build_table(2, spec.k, spec.alpha, spec.beta)
        fm = FeatureMap.zeros(TensorShape(4, 4, 8), 4)
        out = lrn.lrn_apply(fm, spec, t)
        assert not out.data.any()

    def test_alpha_zero_single_channel(self, rng):
        spec = LrnSpec(local_size=5, k=2.0, alpha=0.0, beta=0.75)
        t = lrn.lrn_build_table(2, spec.k, spec.alpha, spec.beta)
        dense = np.zeros((3, 3, 6), np.float32)
        dense[:, :, 2] = rng.random((3, 3), dtype=np.float32)
        out = lrn.lrn_apply(FeatureMap.from_dense(dense, 4), spec, t).to_dense()
        expect = dense * np.float32(2.0 ** -0.75)
        assert max_rel_error(out, expect) < 1e-6

    def test_random_tensor_against_exact_oracle(self, rng):
        spec = LrnSpec()
        t = lrn.lrn_build_table(2, spec.k, spec.alpha, spec.beta)
        dense = (rng.random((13, 13, 32), dtype=np.float32) - 0.5) * 8
        out = lrn.lrn_apply(FeatureMap.from_dense(dense, 8), spec, t).to_dense()
        ref = lrn_ref(dense, spec)
        assert max_rel_error(out, ref) <= 0.005

    def test_exact_variant_matches_textbook_oracle(self, rng):
        spec = LrnSpec()
        dense = (rng.random((5, 7, 16), dtype=np.float32) - 0.5) * 4
        out = lrn.lrn_apply_exact(FeatureMap.from_dense(dense, 4), spec).to_dense()
        ref = lrn_ref(dense, spec)
        assert max_rel_error(out, ref) <= 1e-6

    def test_tiling_invariance(self, rng):
        spec = LrnSpec()
        t = lrn.lrn_build_table(2, spec.k, spec.alpha, spec.beta)
        dense = rng.random((10, 6, 12), dtype=np.float32)
        fm = FeatureMap.from_dense(dense, 4)
        a = lrn.lrn_apply(fm, spec, t, tile_rows=2).data
        b = lrn.lrn_apply(fm, spec, t, tile_rows=64).data
        assert np.array_equal(a, b)
