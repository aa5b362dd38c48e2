"""Compiled inner loops of the backward step.

Rows are functions of the revenue index extended linearly beyond both ends
of the grid; values between nodes use the four-point Lagrange stencil on that
extension (so affine rows are reproduced everywhere).
"""

import math

import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True, inline="always")
def _extended(row, m, Nr):
    if m < 0:
        return row[0] + m * (row[1] - row[0])
    if m > Nr - 1:
        return row[Nr - 1] + (m - (Nr - 1)) * (row[Nr - 1] - row[Nr - 2])
    return row[m]


@nb.njit(cache=True, nogil=True, inline="always")
def _cubic(row, q, Nr):
    s = math.floor(q)
    t = q - s
    m = int(s)
    w0 = -t * (t - 1.0) * (t - 2.0) / 6.0
    w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
    w2 = -(t + 1.0) * t * (t - 2.0) / 2.0
    w3 = (t + 1.0) * t * (t - 1.0) / 6.0
    if m >= 1 and m + 2 <= Nr - 1:
        return w0 * row[m - 1] + w1 * row[m] + w2 * row[m + 1] + w3 * row[m + 2]
    return (w0 * _extended(row, m - 1, Nr) + w1 * _extended(row, m, Nr)
            + w2 * _extended(row, m + 1, Nr) + w3 * _extended(row, m + 2, Nr))


@nb.njit(cache=True, nogil=True)
def interp_points(rows, pos):
    """``rows[i]`` at fractional index ``pos[i]``."""
    n, Nr = rows.shape
    out = np.empty(n)
    for i in range(n):
        out[i] = _cubic(rows[i], pos[i], Nr)
    return out


@nb.njit(cache=True, nogil=True)
def interp_shifted(rows, shift):
    """``rows[i]`` at ``j + shift[i, k]`` for every revenue index ``j``: (M, K, Nr)."""
    M, Nr = rows.shape
    K = shift.shape[1]
    out = np.empty((M, K, Nr))
    for i in range(M):
        for k in range(K):
            for j in range(Nr):
                out[i, k, j] = _cubic(rows[i], j + shift[i, k], Nr)
    return out


@nb.njit(cache=True, nogil=True)
def expected_log_gap(prev, stencil, weights, shift, wq, out):
    """``out[i, j] = log sum_k wq[k] exp(sum_s weights[i, s] * prev[stencil[i, s]](j + shift[i, s, k]))``.

    Stencil rows with zero weight are never read.  NaN rows propagate.
    """
    n, S = stencil.shape
    K = wq.size
    Nr = prev.shape[1]
    buf = np.empty((K, Nr))
    for i in range(n):
        buf[:, :] = 0.0
        for s in range(S):
            ws = weights[i, s]
            if ws == 0.0:
                continue
            row = prev[stencil[i, s]]
            for k in range(K):
                q0 = shift[i, s, k]
                f = math.floor(q0)
                t = q0 - f
                m0 = int(f)
                w0 = ws * (-t * (t - 1.0) * (t - 2.0) / 6.0)
                w1 = ws * ((t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0)
                w2 = ws * (-(t + 1.0) * t * (t - 2.0) / 2.0)
                w3 = ws * ((t + 1.0) * t * (t - 1.0) / 6.0)
                lo = max(0, 1 - m0)
                hi = min(Nr, Nr - 3 - m0 + 1)
                for j in range(Nr):
                    m = j + m0
                    if lo <= j < hi:
                        buf[k, j] += (w0 * row[m - 1] + w1 * row[m] + w2 * row[m + 1]
                                      + w3 * row[m + 2])
                    else:
                        buf[k, j] += (w0 * _extended(row, m - 1, Nr) + w1 * _extended(row, m, Nr)
                                      + w2 * _extended(row, m + 1, Nr)
                                      + w3 * _extended(row, m + 2, Nr))
        for j in range(Nr):
            top = buf[0, j]
            bad = False
            for k in range(K):
                v = buf[k, j]
                if math.isnan(v):
                    bad = True
                elif v > top:
                    top = v
            if bad:
                out[i, j] = np.nan
                continue
            acc = 0.0
            for k in range(K):
                acc += wq[k] * math.exp(buf[k, j] - top)
            out[i, j] = top + math.log(acc)
