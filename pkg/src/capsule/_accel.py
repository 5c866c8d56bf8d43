"""Pixel-level kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``CAPSULE_DISABLE_NUMBA`` is unset (or ``0``). Both paths perform the
same floating-point operations in the same order, so their outputs agree
bit-for-bit; ``tests/test_accel.py`` holds them to that.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("CAPSULE_DISABLE_NUMBA", "0") in ("", "0")


def _njit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def _reflect101(i: int, n: int) -> int:
    # cv2.BORDER_REFLECT_101 index mapping; n > 1 assumed by callers
    if n == 1:
        return 0
    period = 2 * n - 2
    i = abs(i) % period
    return period - i if i >= n else i


# --------------------------------------------------------------------------
# separable blur


def _pad_index(n: int, r: int) -> np.ndarray:
    return np.array([_reflect101(i, n) for i in range(-r, n + r)], dtype=np.int64)


def blur_numpy(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    h, w, _ = img.shape
    r = len(taps) // 2
    rows = img[:, _pad_index(w, r), :]
    tmp = np.zeros_like(img)
    for k in range(len(taps)):
        tmp += taps[k] * rows[:, k : k + w, :]
    cols = tmp[_pad_index(h, r), :, :]
    out = np.zeros_like(img)
    for k in range(len(taps)):
        out += taps[k] * cols[k : k + h, :, :]
    return out


@_njit
def _blur_loops(img, taps, col_idx, row_idx):
    h, w, c = img.shape
    n = taps.shape[0]
    tmp = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = np.float32(0.0)
                for k in range(n):
                    acc += taps[k] * img[y, col_idx[x + k], ch]
                tmp[y, x, ch] = acc
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = np.float32(0.0)
                for k in range(n):
                    acc += taps[k] * tmp[row_idx[y + k], x, ch]
                out[y, x, ch] = acc
    return out


def blur_numba(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    h, w, _ = img.shape
    r = len(taps) // 2
    return _blur_loops(img, taps, _pad_index(w, r), _pad_index(h, r))


# --------------------------------------------------------------------------
# affine warp, bilinear, constant border


def warp_numpy(img: np.ndarray, inv: np.ndarray, fill: float) -> np.ndarray:
    h, w, c = img.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def sample(yy, xx):
        inside = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        v = np.full((h, w, c), fill, dtype=np.float64)
        v[inside] = img[yy[inside], xx[inside]]
        return v

    v00 = sample(y0, x0)
    v01 = sample(y0, x0 + 1)
    v10 = sample(y0 + 1, x0)
    v11 = sample(y0 + 1, x0 + 1)
    fx = fx[..., None]
    fy = fy[..., None]
    top = (1.0 - fx) * v00 + fx * v01
    bot = (1.0 - fx) * v10 + fx * v11
    return ((1.0 - fy) * top + fy * bot).astype(img.dtype)


@_njit
def _warp_loops(img, inv, fill):
    h, w, c = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            sx = inv[0, 0] * x + inv[0, 1] * y + inv[0, 2]
            sy = inv[1, 0] * x + inv[1, 1] * y + inv[1, 2]
            fx0 = np.floor(sx)
            fy0 = np.floor(sy)
            fx = sx - fx0
            fy = sy - fy0
            x0 = int(fx0)
            y0 = int(fy0)
            in00 = 0 <= x0 < w and 0 <= y0 < h
            in01 = 0 <= x0 + 1 < w and 0 <= y0 < h
            in10 = 0 <= x0 < w and 0 <= y0 + 1 < h
            in11 = 0 <= x0 + 1 < w and 0 <= y0 + 1 < h
            for ch in range(c):
                v00 = np.float64(img[y0, x0, ch]) if in00 else fill
                v01 = np.float64(img[y0, x0 + 1, ch]) if in01 else fill
                v10 = np.float64(img[y0 + 1, x0, ch]) if in10 else fill
                v11 = np.float64(img[y0 + 1, x0 + 1, ch]) if in11 else fill
                top = (1.0 - fx) * v00 + fx * v01
                bot = (1.0 - fx) * v10 + fx * v11
                out[y, x, ch] = (1.0 - fy) * top + fy * bot
    return out


def warp_numba(img: np.ndarray, inv: np.ndarray, fill: float) -> np.ndarray:
    return _warp_loops(img, np.ascontiguousarray(inv, dtype=np.float64), float(fill))


# --------------------------------------------------------------------------
# hue rotation through HSV (channels in 0..255, float)


def hue_shift_numpy(img: np.ndarray, shift: float) -> np.ndarray:
    x = img.astype(np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = mx - mn
    safe_d = np.where(d > 0.0, d, 1.0)
    hr = ((g - b) / safe_d) % 6.0
    hg = (b - r) / safe_d + 2.0
    hb = (r - g) / safe_d + 4.0
    hue = np.where(mx == r, hr, np.where(mx == g, hg, hb))
    hue = np.where(d > 0.0, hue / 6.0, 0.0)
    sat = np.where(mx > 0.0, d / np.where(mx > 0.0, mx, 1.0), 0.0)
    val = mx

    hue = (hue + shift) % 1.0
    h6 = hue * 6.0
    sector = np.floor(h6)
    f = h6 - sector
    p = val * (1.0 - sat)
    q = val * (1.0 - sat * f)
    t = val * (1.0 - sat * (1.0 - f))
    sector = sector.astype(np.int64) % 6
    choices_r = [val, q, p, p, t, val]
    choices_g = [t, val, val, q, p, p]
    choices_b = [p, p, t, val, val, q]
    out = np.empty_like(x)
    out[..., 0] = np.choose(sector, choices_r)
    out[..., 1] = np.choose(sector, choices_g)
    out[..., 2] = np.choose(sector, choices_b)
    return (out * 255.0).astype(img.dtype)


@_njit
def _hue_loops(img, shift):
    h, w, _ = img.shape
    out = np.empty_like(img)
    for y in range(h):
        for x in range(w):
            r = np.float64(img[y, x, 0]) / 255.0
            g = np.float64(img[y, x, 1]) / 255.0
            b = np.float64(img[y, x, 2]) / 255.0
            mx = max(max(r, g), b)
            mn = min(min(r, g), b)
            d = mx - mn
            safe_d = d if d > 0.0 else 1.0
            if mx == r:
                hue = ((g - b) / safe_d) % 6.0
            elif mx == g:
                hue = (b - r) / safe_d + 2.0
            else:
                hue = (r - g) / safe_d + 4.0
            hue = hue / 6.0 if d > 0.0 else 0.0
            sat = d / mx if mx > 0.0 else 0.0
            val = mx

            hue = (hue + shift) % 1.0
            h6 = hue * 6.0
            fsec = np.floor(h6)
            f = h6 - fsec
            p = val * (1.0 - sat)
            q = val * (1.0 - sat * f)
            t = val * (1.0 - sat * (1.0 - f))
            sec = int(fsec) % 6
            if sec == 0:
                rr, gg, bb = val, t, p
            elif sec == 1:
                rr, gg, bb = q, val, p
            elif sec == 2:
                rr, gg, bb = p, val, t
            elif sec == 3:
                rr, gg, bb = p, q, val
            elif sec == 4:
                rr, gg, bb = t, p, val
            else:
                rr, gg, bb = val, p, q
            out[y, x, 0] = rr * 255.0
            out[y, x, 1] = gg * 255.0
            out[y, x, 2] = bb * 255.0
    return out


def hue_shift_numba(img: np.ndarray, shift: float) -> np.ndarray:
    return _hue_loops(img, float(shift))


# --------------------------------------------------------------------------
# confusion counting


def confusion_numpy(true_idx: np.ndarray, pred_idx: np.ndarray, n: int) -> np.ndarray:
    flat = np.bincount(true_idx.astype(np.int64) * n + pred_idx.astype(np.int64), minlength=n * n)
    return flat.reshape(n, n)


@_njit
def _confusion_loops(true_idx, pred_idx, n):
    out = np.zeros((n, n), dtype=np.int64)
    for i in range(true_idx.shape[0]):
        out[true_idx[i], pred_idx[i]] += 1
    return out


def confusion_numba(true_idx: np.ndarray, pred_idx: np.ndarray, n: int) -> np.ndarray:
    return _confusion_loops(true_idx.astype(np.int64), pred_idx.astype(np.int64), int(n))


# --------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    blur, warp, hue_shift, confusion_counts = blur_numba, warp_numba, hue_shift_numba, confusion_numba
else:
    blur, warp, hue_shift, confusion_counts = blur_numpy, warp_numpy, hue_shift_numpy, confusion_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
