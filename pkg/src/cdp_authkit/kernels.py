"""Inner loops shared by the channel, the estimator network and the metrics.

Every kernel exists twice: a numba-compiled loop (``*_nb``) and a numpy
formulation (``*_np``). The public name is bound to one of them at import
time according to :data:`cdp_authkit._accel.USE_NUMBA`. The two paths are
tested against each other for exact equality.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# 3x3 neighbourhood offsets in (dy, dx) raster order; column blocks of im2col
# follow this order.
OFFSETS_3x3 = tuple((dy, dx) for dy in range(3) for dx in range(3))


# ---------------------------------------------------------------- im2col


def im2col3x3_np(xp):
    """(N, H+2, W+2, C) padded input -> (N, H, W, 9*C) patch matrix."""
    n, hp, wp, c = xp.shape
    h, w = hp - 2, wp - 2
    return np.concatenate([xp[:, dy:dy + h, dx:dx + w, :] for dy, dx in OFFSETS_3x3], axis=-1)


@njit
def im2col3x3_nb(xp):
    n, hp, wp, c = xp.shape
    h = hp - 2
    w = wp - 2
    out = np.empty((n, h, w, 9 * c), dtype=xp.dtype)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                k = 0
                for dy in range(3):
                    for dx in range(3):
                        for ch in range(c):
                            out[b, i, j, k] = xp[b, i + dy, j + dx, ch]
                            k += 1
    return out


def col2im3x3_np(dcols, c):
    """Adjoint of im2col: scatter-add (N, H, W, 9*C) back to (N, H+2, W+2, C)."""
    n, h, w, _ = dcols.shape
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for k, (dy, dx) in enumerate(OFFSETS_3x3):
        dxp[:, dy:dy + h, dx:dx + w, :] += dcols[..., k * c:(k + 1) * c]
    return dxp


@njit
def col2im3x3_nb(dcols, c):
    n, h, w, _ = dcols.shape
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    # offset-major accumulation order matches the numpy path bit for bit
    for k in range(9):
        dy = k // 3
        dx = k % 3
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    for ch in range(c):
                        dxp[b, i + dy, j + dx, ch] += dcols[b, i, j, k * c + ch]
    return dxp


# ------------------------------------------------------ stochastic dilation


def dilate_stochastic_np(ink, u, p):
    """Flip 0-pixels with a 4-neighbour ink pixel to 1 where ``u < p``."""
    ink = ink.astype(bool)
    nb = np.zeros_like(ink)
    nb[1:, :] |= ink[:-1, :]
    nb[:-1, :] |= ink[1:, :]
    nb[:, 1:] |= ink[:, :-1]
    nb[:, :-1] |= ink[:, 1:]
    flip = nb & ~ink & (u < p)
    return (ink | flip).astype(np.float64)


@njit
def dilate_stochastic_nb(ink, u, p):
    # branch-free over the interior; random ink defeats the branch predictor
    h, w = ink.shape
    out = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        up = i - 1 if i > 0 else i
        dn = i + 1 if i < h - 1 else i
        for j in range(w):
            lf = j - 1 if j > 0 else j
            rt = j + 1 if j < w - 1 else j
            nbr = (ink[up, j] != 0) | (ink[dn, j] != 0) | (ink[i, lf] != 0) | (ink[i, rt] != 0)
            here = ink[i, j] != 0
            out[i, j] = 1.0 if here | (nbr & (u[i, j] < p)) else 0.0
    return out


# --------------------------------------------------------- rank statistics


def pair_counts_np(pos, neg):
    """Return (wins, ties): pairs with pos > neg and pos == neg."""
    neg_sorted = np.sort(neg)
    lo = np.searchsorted(neg_sorted, pos, side="left")
    hi = np.searchsorted(neg_sorted, pos, side="right")
    return int(lo.sum()), int((hi - lo).sum())


@njit
def pair_counts_nb(pos, neg):
    p = np.sort(pos)
    q = np.sort(neg)
    wins = 0
    ties = 0
    lo = 0
    hi = 0
    m = q.size
    for v in p:
        while lo < m and q[lo] < v:
            lo += 1
        if hi < lo:
            hi = lo
        while hi < m and q[hi] <= v:
            hi += 1
        wins += lo
        ties += hi - lo
    return wins, ties


if USE_NUMBA:
    im2col3x3 = im2col3x3_nb
    col2im3x3 = col2im3x3_nb
    dilate_stochastic = dilate_stochastic_nb

    def pair_counts(pos, neg):
        w, t = pair_counts_nb(np.ascontiguousarray(pos, dtype=np.float64),
                              np.ascontiguousarray(neg, dtype=np.float64))
        return int(w), int(t)
else:
    im2col3x3 = im2col3x3_np
    col2im3x3 = col2im3x3_np
    dilate_stochastic = dilate_stochastic_np
    pair_counts = pair_counts_np

BACKEND = "numba" if USE_NUMBA else "numpy"
