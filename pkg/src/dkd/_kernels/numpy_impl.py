"""Pure-numpy implementations of the hot inner kernels.

This is the fallback backend: same signatures and accumulation order as the
compiled extension in native.pyx, so results agree to the last bit wherever
the summation order is defined (im2col, col2im, depthwise forward/input
gradients, segment max). The only place the backends may differ in the last
ulp is the depthwise weight gradient, where numpy uses pairwise summation.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Unfold a padded (C, Hp, Wp) image into (C*kh*kw, Ho*Wo) columns."""
    c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (c, kh, kw, ho, wo), (sc, sh, sw, sh * stride, sw * stride)
    )
    return np.ascontiguousarray(win).reshape(c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, c: int, hp: int, wp: int, kh: int, kw: int, stride: int) -> np.ndarray:
    """Fold (C*kh*kw, Ho*Wo) column gradients back onto the padded image."""
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    g = cols.reshape(c, kh, kw, ho, wo)
    out = np.zeros((c, hp, wp), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += g[:, ki, kj]
    return out


def depthwise_fw(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Per-channel 2D cross-correlation. xp: (C, Hp, Wp), w: (C, kh, kw)."""
    c, hp, wp = xp.shape
    kh, kw = w.shape[1], w.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((c, ho, wo), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            out += w[:, ki, kj, None, None] * xp[:, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride]
    return out


def depthwise_bw_input(g: np.ndarray, w: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    c, ho, wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((c, hp, wp), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            out[:, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += w[:, ki, kj, None, None] * g
    return out


def depthwise_bw_weight(xp: np.ndarray, g: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    c, ho, wo = g.shape
    out = np.empty((c, kh, kw), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            win = xp[:, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride]
            out[:, ki, kj] = (win * g).reshape(c, -1).sum(axis=1)
    return out


def segment_max(values: np.ndarray, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max over contiguous row segments of (P, C) values.

    starts has S+1 entries delimiting non-empty segments. Returns the (S, C)
    maxima and the absolute row index of the first occurrence of each max.
    """
    p, c = values.shape
    heads = starts[:-1]
    out = np.maximum.reduceat(values, heads, axis=0)
    seg_of_row = np.repeat(np.arange(len(heads)), np.diff(starts))
    rows = np.arange(p, dtype=np.int64)[:, None]
    hit = values == out[seg_of_row]
    cand = np.where(hit, rows, p)
    arg = np.minimum.reduceat(cand, heads, axis=0)
    return out, arg
