"""Brute-force reference implementations used to check the streaming kernels.

Everything here computes in float64 with plain nested-loop/dense-matrix
semantics and shares no code with the pipelined engine.  The convolution
follows the direct definition

    out[m, y, x] = sum_c sum_ky sum_kx w[m, ky, kx, c] * in[y*S+ky-P, x*S+kx-P, c]

realized as an im2col + matmul per output-row chunk so whole-network checks
stay fast.
"""

from __future__ import annotations

import numpy as np

from .model import LayerDescriptor, LrnSpec, PoolSpec, output_dim


def conv_layer_ref(layer: LayerDescriptor, dense_in: np.ndarray,
                   dense_w: np.ndarray, bias: np.ndarray,
                   row_chunk: int = 64) -> np.ndarray:
    """Direct convolution of a dense [H][W][C] input with [M][K][K][Cg] weights.

    Returns dense [Ho][Wo][M] float64, bias added and ReLU applied when the
    layer asks for them.  Grouped layers convolve each output-map group with
    its own slice of the input channels.
    """
    k, s, p = layer.k, layer.s, layer.p
    h, w, c = dense_in.shape
    wo = output_dim(w, k, s, p)
    ho = output_dim(h, k, s, p)
    m = dense_w.shape[0]
    cg = layer.channels_per_group
    mg = m // layer.groups

    padded = np.zeros((h + 2 * p, w + 2 * p, c), np.float64)
    padded[p:p + h, p:p + w] = dense_in
    out = np.empty((ho, wo, m), np.float64)

    wmat = dense_w.astype(np.float64).reshape(m, k * k * cg)
    for g in range(layer.groups):
        src = padded[:, :, g * cg:(g + 1) * cg]
        wg = wmat[g * mg:(g + 1) * mg]
        for y0 in range(0, ho, row_chunk):
            y1 = min(y0 + row_chunk, ho)
            cols = np.empty((y1 - y0, wo, k, k, cg), np.float64)
            for ky in range(k):
                for kx in range(k):
                    rows = src[y0 * s + ky:(y1 - 1) * s + ky + 1:s, kx:kx + (wo - 1) * s + 1:s]
                    cols[:, :, ky, kx, :] = rows
            block = cols.reshape((y1 - y0) * wo, k * k * cg) @ wg.T
            out[y0:y1, :, g * mg:(g + 1) * mg] = block.reshape(y1 - y0, wo, mg)

    out += np.asarray(bias, np.float64)
    if layer.relu:
        np.maximum(out, 0.0, out=out)
    return out


def fc_layer_ref(dense_in: np.ndarray, dense_w: np.ndarray, bias: np.ndarray,
                 relu: bool = False) -> np.ndarray:
    """Dense mat-vec: out[m] = sum_c w[m, c] * in[c] + bias[m]."""
    out = dense_w.astype(np.float64) @ dense_in.astype(np.float64)
    out += np.asarray(bias, np.float64)
    if relu:
        np.maximum(out, 0.0, out=out)
    return out


def pool_ref(dense_in: np.ndarray, spec: PoolSpec) -> np.ndarray:
    """Sliding-window pooling of a dense [H][W][C] tensor."""
    h, w, c = dense_in.shape
    wo = output_dim(w, spec.window, spec.stride, 0)
    ho = output_dim(h, spec.window, spec.stride, 0)
    out = np.empty((ho, wo, c), np.float64)
    x = dense_in.astype(np.float64)
    for y in range(ho):
        for xo in range(wo):
            win = x[y * spec.stride:y * spec.stride + spec.window,
                    xo * spec.stride:xo * spec.stride + spec.window]
            if spec.mode == "max":
                out[y, xo] = win.max(axis=(0, 1))
            else:
                out[y, xo] = win.mean(axis=(0, 1))
    return out


def lrn_ref(dense_in: np.ndarray, spec: LrnSpec) -> np.ndarray:
    """Exact cross-channel response normalization.

    out[y, x, c] = in[y, x, c] * (k + alpha * sum_{c'} in[y, x, c']^2)^(-beta)
    with c' running over the local_size window centered on c, clamped to the
    valid channel range.  alpha scales the raw (unnormalized) sum of squares.
    """
    x = dense_in.astype(np.float64)
    c = x.shape[2]
    half = spec.local_size // 2
    sq = x * x
    out = np.empty_like(x)
    for ch in range(c):
        lo, hi = max(0, ch - half), min(c, ch + half + 1)
        s = sq[:, :, lo:hi].sum(axis=2)
        out[:, :, ch] = x[:, :, ch] * np.power(spec.k + spec.alpha * s, -spec.beta)
    return out


def layer_ref(layer: LayerDescriptor, dense_in: np.ndarray, dense_w: np.ndarray,
              bias: np.ndarray, apply_lrn=None) -> np.ndarray:
    """Full layer: conv/fc (+bias/ReLU), then pooling, then exact LRN.

    apply_lrn may be a replacement LRN callable (e.g. to splice in the
    table-based version); None uses the exact-math reference.
    """
    if layer.layer_type == "fc":
        return fc_layer_ref(dense_in.reshape(-1), dense_w.reshape(layer.output_maps, -1),
                            bias, layer.relu)[None, None, :]
    out = conv_layer_ref(layer, dense_in, dense_w, bias)
    if layer.pool is not None:
        out = pool_ref(out, layer.pool)
    if layer.lrn is not None:
        fn = apply_lrn if apply_lrn is not None else lrn_ref
        out = fn(out, layer.lrn)
    return out


def network_ref(layers, dense_weights, biases, dense_in: np.ndarray,
                collect_layers: bool = False):
    """Run a whole network through the reference path (single image)."""
    per_layer = []
    x = dense_in
    for layer, w, b in zip(layers, dense_weights, biases):
        if layer.layer_type == "fc":
            x = x.reshape(-1)
            x = fc_layer_ref(x, w.reshape(layer.output_maps, -1), b, layer.relu)
            x = x[None, None, :]
        else:
            x = layer_ref(layer, x, w, b)
        if collect_layers:
            per_layer.append(x.copy())
    return (x, per_layer) if collect_layers else x


def max_rel_error(got: np.ndarray, ref: np.ndarray) -> float:
    """Max elementwise error relative to the reference max magnitude.

    The max-norm denominator keeps the metric meaningful where individual
    reference elements cancel to ~0.
    """
    ref = np.asarray(ref, np.float64)
    got = np.asarray(got, np.float64)
    scale = np.abs(ref).max()
    if scale == 0.0:
        return float(np.abs(got).max())
    return float(np.abs(got - ref).max() / scale)


def max_elementwise_rel_error(got: np.ndarray, ref: np.ndarray) -> float:
    """Strict per-element |got-ref| / |ref|; use on cancellation-free data."""
    ref = np.asarray(ref, np.float64)
    got = np.asarray(got, np.float64)
    err = np.abs(got - ref)
    denom = np.abs(ref)
    mask = denom == 0
    if mask.any() and err[mask].max() > 0:
        return float("inf")
    denom[mask] = 1.0
    return float((err / denom).max())
