"""Hot numeric kernels: batched same-padding convolution and ROI max-pooling.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports successfully; set the environment
variable ``ATTENTRACK_NO_NUMBA=1`` to force the numpy path (useful for
debugging and for the benchmark in ``benchmarks/bench_kernels.py``).

All kernels operate on float64 arrays. Batched tensors are laid out as
``(S, H, W, C)``; conv weights as ``(kh, kw, cin, cout)``.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "USE_NUMBA",
    "NUMBA_ENV_FLAG",
    "conv2d_forward",
    "conv2d_backward",
    "roi_pool_batch",
    "conv2d_forward_numpy",
    "conv2d_backward_numpy",
    "roi_pool_batch_numpy",
    "warmup",
]

NUMBA_ENV_FLAG = "ATTENTRACK_NO_NUMBA"

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag instead
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get(NUMBA_ENV_FLAG, "") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(S, H, W, C) -> (S, H, W, kh, kw, C) patches under zero same-padding."""
    s, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((s, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xp[:, ph:ph + h, pw:pw + w, :] = x
    cols = np.empty((s, h, w, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols


def conv2d_forward_numpy(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    s, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    cols = _im2col(x, kh, kw).reshape(s * h * wd, kh * kw * cin)
    y = cols @ w.reshape(kh * kw * cin, cout)
    y += b
    return y.reshape(s, h, wd, cout)


def conv2d_backward_numpy(x, w, gy, need_input_grad=True):
    s, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = kh // 2, kw // 2
    cols = _im2col(x, kh, kw).reshape(s * h * wd, kh * kw * cin)
    gy2 = gy.reshape(s * h * wd, cout)
    gw = (cols.T @ gy2).reshape(kh, kw, cin, cout)
    gb = gy2.sum(axis=0)
    if not need_input_grad:
        return None, gw, gb
    gcols = (gy2 @ w.reshape(kh * kw * cin, cout).T).reshape(s, h, wd, kh, kw, cin)
    gxp = np.zeros((s, h + 2 * ph, wd + 2 * pw, cin), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + h, j:j + wd, :] += gcols[:, :, :, i, j, :]
    gx = gxp[:, ph:ph + h, pw:pw + wd, :]
    return gx, gw, gb


def roi_pool_batch_numpy(fmap: np.ndarray, bins: np.ndarray, hb: int, wb: int) -> np.ndarray:
    """Max-pool map cells into per-box bins.

    ``bins`` is (K, 2*(hb+wb)) int64 per box: row starts, row ends, column
    starts, column ends, already clamped to the map bounds (bins may overlap;
    see features.roi_bins). Empty bins stay zero.
    """
    k = bins.shape[0]
    c = fmap.shape[2]
    out = np.zeros((k, hb, wb, c), dtype=fmap.dtype)
    for n in range(k):
        rs = bins[n, :hb]
        re = bins[n, hb:2 * hb]
        cs = bins[n, 2 * hb:2 * hb + wb]
        ce = bins[n, 2 * hb + wb:]
        for i in range(hb):
            if re[i] <= rs[i]:
                continue
            for j in range(wb):
                if ce[j] <= cs[j]:
                    continue
                out[n, i, j, :] = fmap[rs[i]:re[i], cs[j]:ce[j], :].max(axis=(0, 1))
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True, parallel=True)
    def _conv2d_forward_nb(x, w, b):
        s, h, wd, cin = x.shape
        kh, kw, _, cout = w.shape
        ph, pw = kh // 2, kw // 2
        y = np.empty((s, h, wd, cout), dtype=np.float64)
        for n in numba.prange(s):
            for i in range(h):
                for j in range(wd):
                    acc = y[n, i, j]
                    acc[:] = b
                    for ki in range(kh):
                        ii = i + ki - ph
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = j + kj - pw
                            if jj < 0 or jj >= wd:
                                continue
                            for ci in range(cin):
                                xv = x[n, ii, jj, ci]
                                if xv != 0.0:
                                    wv = w[ki, kj, ci]
                                    for co in range(cout):
                                        acc[co] += xv * wv[co]
        return y

    @numba.njit(cache=True)
    def _conv2d_backward_nb(x, w, gy, need_gx):
        s, h, wd, cin = x.shape
        kh, kw, _, cout = w.shape
        ph, pw = kh // 2, kw // 2
        gx = np.zeros(x.shape, dtype=np.float64)
        gw = np.zeros(w.shape, dtype=np.float64)
        gb = np.zeros(cout, dtype=np.float64)
        for n in range(s):
            for i in range(h):
                for j in range(wd):
                    g = gy[n, i, j]
                    for co in range(cout):
                        gb[co] += g[co]
                    for ki in range(kh):
                        ii = i + ki - ph
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = j + kj - pw
                            if jj < 0 or jj >= wd:
                                continue
                            xr = x[n, ii, jj]
                            gwr = gw[ki, kj]
                            for ci in range(cin):
                                xv = xr[ci]
                                if xv != 0.0:
                                    for co in range(cout):
                                        gwr[ci, co] += xv * g[co]
        if need_gx:
            for n in range(s):
                for i in range(h):
                    for j in range(wd):
                        g = gy[n, i, j]
                        for ki in range(kh):
                            ii = i + ki - ph
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(kw):
                                jj = j + kj - pw
                                if jj < 0 or jj >= wd:
                                    continue
                                gxr = gx[n, ii, jj]
                                wr = w[ki, kj]
                                for ci in range(cin):
                                    acc = 0.0
                                    for co in range(cout):
                                        acc += wr[ci, co] * g[co]
                                    gxr[ci] += acc
        return gx, gw, gb

    @numba.njit(cache=True)
    def _roi_pool_batch_nb(fmap, bins, hb, wb):
        k = bins.shape[0]
        c = fmap.shape[2]
        out = np.zeros((k, hb, wb, c), dtype=np.float64)
        for n in range(k):
            for i in range(hb):
                r0 = bins[n, i]
                r1 = bins[n, hb + i]
                if r1 <= r0:
                    continue
                for j in range(wb):
                    c0 = bins[n, 2 * hb + j]
                    c1 = bins[n, 2 * hb + wb + j]
                    if c1 <= c0:
                        continue
                    for ch in range(c):
                        m = fmap[r0, c0, ch]
                        for r in range(r0, r1):
                            for cc in range(c0, c1):
                                v = fmap[r, cc, ch]
                                if v > m:
                                    m = v
                        out[n, i, j, ch] = m
        return out

    def _conv2d_forward_numba(x, w, b):
        return _conv2d_forward_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(b)
        )

    def _conv2d_backward_numba(x, w, gy, need_input_grad=True):
        gx, gw, gb = _conv2d_backward_nb(
            np.ascontiguousarray(x), np.ascontiguousarray(w),
            np.ascontiguousarray(gy), need_input_grad
        )
        return (gx if need_input_grad else None), gw, gb

    def _roi_pool_batch_numba(fmap, bins, hb, wb):
        return _roi_pool_batch_nb(np.ascontiguousarray(fmap), bins, hb, wb)


if USE_NUMBA:
    conv2d_forward = _conv2d_forward_numba
    conv2d_backward = _conv2d_backward_numba
    roi_pool_batch = _roi_pool_batch_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward = conv2d_backward_numpy
    roi_pool_batch = roi_pool_batch_numpy


def warmup():
    """Trigger JIT compilation of the active kernels on tiny inputs."""
    x = np.zeros((1, 3, 7, 2))
    w = np.zeros((3, 7, 2, 4))
    b = np.zeros(4)
    y = conv2d_forward(x, w, b)
    conv2d_backward(x, w, y)
    bins = np.array([[0, 1, 1, 2, 0, 2, 2, 4]], dtype=np.int64)
    roi_pool_batch(np.zeros((4, 4, 2)), bins, 2, 2)
