"""Line-buffer pooling stage.

The kernel receives each feature map line by line.  L completed rows are held
in line buffers; together with the incoming row they expose an (L+1)-row
window, so window emission starts only once all L buffers are full.  Columns
slide with the configured stride, supporting overlapped windows (e.g. 3x3
stride 2).  Max mode selects, avg mode divides the window sum by its size.
The stage can also run in bypass mode, forwarding the stream untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List

import numpy as np

from .errors import IncompleteRow
from .model import PoolSpec, output_dim
from .movers import ResultChunk


@dataclass
class LineBufferBank:
    """Row storage for one feature map streaming through the pooling stage."""
    line_buffers: int          # L
    row_length: int
    buffers: List[np.ndarray] = field(default_factory=list)
    pending: List[np.ndarray] = field(default_factory=list)
    pending_len: int = 0
    rows_in: int = 0

    def push(self, values: np.ndarray):
        self.pending.append(values)
        self.pending_len += values.shape[0]
        if self.pending_len > self.row_length:
            raise IncompleteRow(f"row overflow: {self.pending_len} > {self.row_length}")

    def pop_row(self):
        """Completed row, or None while the current row is still partial."""
        if self.pending_len < self.row_length:
            return None
        row = np.concatenate(self.pending) if len(self.pending) > 1 else self.pending[0]
        self.pending = []
        self.pending_len = 0
        self.rows_in += 1
        return row

    def window_rows(self, incoming: np.ndarray) -> np.ndarray:
        return np.stack(self.buffers + [incoming])

    def store(self, row: np.ndarray):
        self.buffers.append(row)
        if len(self.buffers) > self.line_buffers:
            self.buffers.pop(0)

    @property
    def filled(self) -> bool:
        return len(self.buffers) == self.line_buffers


def pool_row(window: np.ndarray, spec: PoolSpec) -> np.ndarray:
    """Pool an (window, W) row band into the output row (float32)."""
    w = window.shape[1]
    wo = output_dim(w, spec.window, spec.stride, 0)
    cols = [window[:, i:i + (wo - 1) * spec.stride + 1:spec.stride]
            for i in range(spec.window)]
    stackx = np.stack(cols)              # (window, window, Wo)
    if spec.mode == "max":
        return stackx.max(axis=(0, 1)).astype(np.float32, copy=False)
    s = stackx.sum(axis=(0, 1), dtype=np.float32)
    return s / np.float32(spec.window * spec.window)


def pool_stream(items: Iterable[ResultChunk], spec: PoolSpec | None,
                row_length: int) -> Iterator[ResultChunk]:
    """Pool a per-map pixel stream; spec None (or mode 'bypass') is the identity.

    Items carry row-major pixel runs per feature map; maps may interleave.
    Raises IncompleteRow if the stream ends with a partially received row.
    """
    if spec is None or spec.mode == "bypass":
        yield from items
        return
    wo = output_dim(row_length, spec.window, spec.stride, 0)
    banks: Dict[int, LineBufferBank] = {}
    out_rows: Dict[int, int] = {}
    for item in items:
        bank = banks.get(item.map_index)
        if bank is None:
            bank = banks[item.map_index] = LineBufferBank(spec.line_buffers, row_length)
            out_rows[item.map_index] = 0
        values = item.values
        while values.shape[0]:
            take = min(values.shape[0], row_length - bank.pending_len)
            bank.push(values[:take])
            values = values[take:]
            row = bank.pop_row()
            if row is None:
                continue
            r = bank.rows_in - 1
            if bank.filled and (r - (spec.window - 1)) % spec.stride == 0:
                pooled = pool_row(bank.window_rows(row), spec)
                yield ResultChunk(item.map_index, out_rows[item.map_index] * wo, pooled)
                out_rows[item.map_index] += 1
            bank.store(row)
    for mi, bank in banks.items():
        if bank.pending_len:
            raise IncompleteRow(
                f"map {mi}: stream ended {row_length - bank.pending_len} short of a row")


def pool_plane(plane: np.ndarray, spec: PoolSpec) -> np.ndarray:
    """Pool a whole (H, W) float32 plane through the streaming path."""
    h, w = plane.shape
    chunks = [ResultChunk(0, r * w, plane[r].astype(np.float32, copy=False))
              for r in range(h)]
    wo = output_dim(w, spec.window, spec.stride, 0)
    ho = output_dim(h, spec.window, spec.stride, 0)
    out = np.empty((ho, wo), np.float32)
    for item in pool_stream(iter(chunks), spec, w):
        out[item.pix_start // wo] = item.values
    return out
