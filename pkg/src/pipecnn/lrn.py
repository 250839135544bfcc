"""Cross-channel response normalization with a piecewise-linear table.

The normalization factor g(s) = (k + alpha*s)^(-beta) of the channel-window
sum of squares s is approximated by a lookup table whose segments split every
power-of-two interval [2^e, 2^(e+1)) into 2^n equal pieces.  A segment index
is therefore computable directly from the float32 bit pattern: shifting the
word right by shift_bit = 23 - n keeps the exponent bits plus the top n
mantissa bits, so  addr = (bits >> shift_bit) - base_code  needs no search or
division.  Segment endpoints interpolate g exactly, and each increment of n
roughly quarters the worst-case interpolation error.

The table applies to the factor argument s, clamped to [x_min, x_max]; range
ends must be (or are widened to) exact powers of two so segment edges align
with float exponent boundaries.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidRange, ParseError
from .model import FeatureMap, LrnSpec

MANTISSA_BITS = 23


def _pow2_floor(x: float) -> int:
    return int(math.floor(math.log2(x)))


def _pow2_ceil(x: float) -> int:
    return int(math.ceil(math.log2(x)))


@dataclass
class PwlTable:
    n: int
    shift_bit: int
    x_min: float
    x_max: float
    boundaries: np.ndarray  # (segments + 1,) float64, exact powers-of-2^-n grid
    slopes: np.ndarray      # (segments,) float64
    intercepts: np.ndarray  # (segments,) float64
    k: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0

    @property
    def segments(self) -> int:
        return self.slopes.shape[0]

    @property
    def base_code(self) -> int:
        return int(np.float32(self.x_min).view(np.uint32)) >> self.shift_bit

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# pwl table n={self.n} shift_bit={self.shift_bit} "
                  f"x_min={self.x_min:.17g} x_max={self.x_max:.17g} "
                  f"k={self.k:.17g} alpha={self.alpha:.17g} beta={self.beta:.17g}\n")
        buf.write("# x_lo x_hi slope intercept\n")
        for i in range(self.segments):
            buf.write(f"{self.boundaries[i]:.17g} {self.boundaries[i + 1]:.17g} "
                      f"{self.slopes[i]:.17g} {self.intercepts[i]:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "PwlTable":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# pwl table "):
            raise ParseError("not a pwl table file")
        header = dict(kv.split("=", 1) for kv in lines[0][len("# pwl table "):].split())
        rows = [ln.split() for ln in lines if ln and not ln.startswith("#")]
        if not rows:
            raise ParseError("pwl table has no segments")
        lo = np.array([float(r[0]) for r in rows])
        hi = np.array([float(r[1]) for r in rows])
        return cls(n=int(header["n"]), shift_bit=int(header["shift_bit"]),
                   x_min=float(header["x_min"]), x_max=float(header["x_max"]),
                   boundaries=np.concatenate([lo, hi[-1:]]),
                   slopes=np.array([float(r[2]) for r in rows]),
                   intercepts=np.array([float(r[3]) for r in rows]),
                   k=float(header["k"]), alpha=float(header["alpha"]),
                   beta=float(header["beta"]))


def lrn_factor_exact(s, k: float, alpha: float, beta: float):
    """g(s) = (k + alpha*s)^(-beta) in float64."""
    return np.power(k + alpha * np.asarray(s, np.float64), -beta)


def lrn_build_table(n: int, k: float, alpha: float, beta: float,
                    x_min: float = 2.0 ** -16, x_max: float = 2.0 ** 16) -> PwlTable:
    """Build the segment table for g(s) = (k + alpha*s)^(-beta).

    x_min/x_max are widened outward to powers of two.  Each octave holds 2^n
    segments whose index is recoverable from the float32 bit pattern with a
    single shift by 23 - n.
    """
    if x_min <= 0 or x_max <= x_min:
        raise InvalidRange(f"need 0 < x_min < x_max, got [{x_min}, {x_max}]")
    if n < 0 or n > MANTISSA_BITS:
        raise InvalidRange(f"segmentation exponent n must be in [0, {MANTISSA_BITS}]")
    if k <= 0 or beta < 0 or alpha < 0:
        raise InvalidRange("need k > 0, alpha >= 0, beta >= 0")
    e_min, e_max = _pow2_floor(x_min), _pow2_ceil(x_max)
    if e_min < -126 or e_max > 127:
        raise InvalidRange("range exceeds float32 normal exponents")
    per_octave = 1 << n
    octaves = e_max - e_min
    edges = np.empty(octaves * per_octave + 1, np.float64)
    for o in range(octaves):
        base = 2.0 ** (e_min + o)
        for i in range(per_octave):
            edges[o * per_octave + i] = base * (1.0 + i / per_octave)
    edges[-1] = 2.0 ** e_max
    g = lrn_factor_exact(edges, k, alpha, beta)
    slopes = (g[1:] - g[:-1]) / (edges[1:] - edges[:-1])
    intercepts = g[:-1] - slopes * edges[:-1]
    return PwlTable(n=n, shift_bit=MANTISSA_BITS - n,
                    x_min=2.0 ** e_min, x_max=2.0 ** e_max,
                    boundaries=edges, slopes=slopes, intercepts=intercepts,
                    k=k, alpha=alpha, beta=beta)


def segment_index(table: PwlTable, x) -> np.ndarray:
    """Segment address from the float32 bit pattern (no search)."""
    xc = np.clip(np.asarray(x, np.float32), np.float32(table.x_min),
                 np.float32(table.x_max))
    code = (xc.view(np.uint32).astype(np.int64) >> table.shift_bit) - table.base_code
    return np.clip(code, 0, table.segments - 1)


def segment_index_bsearch(table: PwlTable, x) -> np.ndarray:
    """Binary-search twin of segment_index, for cross-checking the addressing."""
    xc = np.clip(np.asarray(x, np.float64), table.x_min, table.x_max)
    idx = np.searchsorted(table.boundaries, xc, side="right") - 1
    return np.clip(idx, 0, table.segments - 1)


def pwlf_eval(table: PwlTable, x) -> np.ndarray:
    """Evaluate the table: slope*x + intercept of the addressed segment.

    Inputs outside [x_min, x_max] clamp to the range ends.
    """
    xc = np.clip(np.asarray(x, np.float64), table.x_min, table.x_max)
    idx = segment_index(table, xc)
    return table.slopes[idx] * xc + table.intercepts[idx]


def table_max_rel_error(table: PwlTable, samples: int = 100_000,
                        lo: Optional[float] = None, hi: Optional[float] = None) -> float:
    """Max |pwlf - g| / g over a dense log-uniform sample of the input range."""
    lo = table.x_min if lo is None else lo
    hi = table.x_max if hi is None else hi
    xs = np.logspace(math.log10(lo), math.log10(hi), samples)
    approx = pwlf_eval(table, xs)
    exact = lrn_factor_exact(xs, table.k, table.alpha, table.beta)
    return float(np.max(np.abs(approx - exact) / exact))


def lrn_apply(fm: FeatureMap, spec: LrnSpec, table: PwlTable,
              tile_rows: int = 16) -> FeatureMap:
    """Normalize across channels using the table for the factor function.

    For each pixel and channel c the factor argument is the raw sum of
    squares over channels [c - local_size//2, c + local_size//2] clamped to
    the valid range.  The tensor is processed in row tiles staged through a
    local buffer (the hardware loads a tile, synchronizes, computes, and
    synchronizes again before storing).
    """
    dense = fm.to_dense()
    h, w, c = dense.shape
    half = spec.local_size // 2
    out = np.empty_like(dense)
    for r0 in range(0, h, tile_rows):
        tile = dense[r0:r0 + tile_rows]
        sq = tile * tile
        padded = np.zeros((tile.shape[0], w, c + 2 * half), np.float32)
        padded[:, :, half:half + c] = sq
        sums = padded[:, :, 0:c].copy()
        for off in range(1, 2 * half + 1):
            sums += padded[:, :, off:off + c]
        factor = pwlf_eval(table, sums).astype(np.float32)
        out[r0:r0 + tile_rows] = tile * factor
    return FeatureMap.from_dense(out, fm.vec_size)


def lrn_apply_exact(fm: FeatureMap, spec: LrnSpec) -> FeatureMap:
    """Table-free variant used to isolate approximation error in tests."""
    dense = fm.to_dense().astype(np.float64)
    h, w, c = dense.shape
    half = spec.local_size // 2
    sq = dense * dense
    out = np.empty_like(dense)
    for ch in range(c):
        lo, hi = max(0, ch - half), min(c, ch + half + 1)
        s = sq[:, :, lo:hi].sum(axis=2)
        out[:, :, ch] = dense[:, :, ch] * lrn_factor_exact(s, spec.k, spec.alpha, spec.beta)
    return FeatureMap.from_dense(out.astype(np.float32), fm.vec_size)
