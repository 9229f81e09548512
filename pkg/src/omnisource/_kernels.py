"""Hot pixel loops: bilinear inverse warping and grid pooling.

Each kernel has a numba ``@njit`` version and a vectorised numpy version with
the same arithmetic.  The numba path is used when numba imports and the
environment variable ``OMNI_DISABLE_NUMBA`` is unset (or ``0``).
"""

from __future__ import annotations

import os

import numpy as np

FILL_CONSTANT = 0
FILL_EDGE = 1

# source coordinates this close to an integer are snapped onto it, so integer
# translations survive the pixel <-> normalised coordinate round trip exactly
SNAP_EPS = 1e-9

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _numba_requested() -> bool:
    return os.environ.get("OMNI_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations


def warp_bilinear_numpy(img, hinv, fill_mode, fill_value):
    """Inverse-warp ``img`` (H, W, C) by the pixel-space matrix ``hinv``.

    Output pixel (x, y) samples the input at ``hinv @ (x, y, 1)``.
    """
    h, w, c = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.astype(np.float64)
    ys = ys.astype(np.float64)
    px = hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]
    py = hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]
    pw = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    valid = pw > 1e-12
    safe_w = np.where(valid, pw, 1.0)
    sx = px / safe_w
    sy = py / safe_w
    rx = np.round(sx)
    ry = np.round(sy)
    sx = np.where(np.abs(sx - rx) < SNAP_EPS, rx, sx)
    sy = np.where(np.abs(sy - ry) < SNAP_EPS, ry, sy)
    sx = np.clip(sx, -2.0, w + 1.0)
    sy = np.clip(sy, -2.0, h + 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]

    def fetch(xi, yi):
        if fill_mode == FILL_EDGE:
            return img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(inside[..., None], vals, fill_value)

    a = fetch(x0, y0)
    b = fetch(x0 + 1, y0)
    cc = fetch(x0, y0 + 1)
    d = fetch(x0 + 1, y0 + 1)
    top = (1.0 - fx) * a + fx * b
    bot = (1.0 - fx) * cc + fx * d
    out = (1.0 - fy) * top + fy * bot
    out[~valid] = fill_value
    return out


def _bin_edges(n, g):
    starts = (np.arange(g) * n) // g
    ends = (np.arange(1, g + 1) * n) // g
    return starts, ends


def grid_features_numpy(img, grid):
    """Grid-averaged intensities (C*grid*grid) followed by 4 pooled statistics."""
    h, w, c = img.shape
    ys, ye = _bin_edges(h, grid)
    xs, xe = _bin_edges(w, grid)
    rows = np.add.reduceat(img, ys, axis=0)
    cells = np.add.reduceat(rows, xs, axis=1)
    counts = np.maximum(ye - ys, 1)[:, None] * np.maximum(xe - xs, 1)[None, :]
    # reduceat on an empty bin returns the single element at its start
    cells = cells / counts[..., None]
    pooled = np.empty(4)
    pooled[0] = img.mean()
    pooled[1] = img.std()
    pooled[2] = np.abs(np.diff(img, axis=1)).mean() if w > 1 else 0.0
    pooled[3] = np.abs(np.diff(img, axis=0)).mean() if h > 1 else 0.0
    return np.concatenate([np.transpose(cells, (2, 0, 1)).ravel(), pooled])


# ---------------------------------------------------------------------------
# numba versions

if _HAVE_NUMBA:

    @njit(cache=True)
    def _fetch(img, xi, yi, fill_mode, fill_value, ch):
        h = img.shape[0]
        w = img.shape[1]
        if xi >= 0 and xi < w and yi >= 0 and yi < h:
            return img[yi, xi, ch]
        if fill_mode == FILL_EDGE:
            xi = min(max(xi, 0), w - 1)
            yi = min(max(yi, 0), h - 1)
            return img[yi, xi, ch]
        return fill_value

    @njit(cache=True)
    def warp_bilinear_numba(img, hinv, fill_mode, fill_value):
        h, w, c = img.shape
        out = np.empty((h, w, c))
        for y in range(h):
            for x in range(w):
                px = hinv[0, 0] * x + hinv[0, 1] * y + hinv[0, 2]
                py = hinv[1, 0] * x + hinv[1, 1] * y + hinv[1, 2]
                pw = hinv[2, 0] * x + hinv[2, 1] * y + hinv[2, 2]
                if not pw > 1e-12:
                    for ch in range(c):
                        out[y, x, ch] = fill_value
                    continue
                sx = px / pw
                sy = py / pw
                rx = np.round(sx)
                ry = np.round(sy)
                if abs(sx - rx) < SNAP_EPS:
                    sx = rx
                if abs(sy - ry) < SNAP_EPS:
                    sy = ry
                sx = min(max(sx, -2.0), w + 1.0)
                sy = min(max(sy, -2.0), h + 1.0)
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                fx = sx - x0
                fy = sy - y0
                for ch in range(c):
                    a = _fetch(img, x0, y0, fill_mode, fill_value, ch)
                    b = _fetch(img, x0 + 1, y0, fill_mode, fill_value, ch)
                    cc = _fetch(img, x0, y0 + 1, fill_mode, fill_value, ch)
                    d = _fetch(img, x0 + 1, y0 + 1, fill_mode, fill_value, ch)
                    top = (1.0 - fx) * a + fx * b
                    bot = (1.0 - fx) * cc + fx * d
                    out[y, x, ch] = (1.0 - fy) * top + fy * bot
        return out

    @njit(cache=True)
    def grid_features_numba(img, grid):
        h, w, c = img.shape
        out = np.zeros(c * grid * grid + 4)
        for ch in range(c):
            for gy in range(grid):
                y0 = (gy * h) // grid
                y1 = max((gy + 1) * h // grid, y0 + 1)
                for gx in range(grid):
                    x0 = (gx * w) // grid
                    x1 = max((gx + 1) * w // grid, x0 + 1)
                    s = 0.0
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            s += img[y, x, ch]
                    out[ch * grid * grid + gy * grid + gx] = s / ((y1 - y0) * (x1 - x0))
        n = h * w * c
        total = 0.0
        for y in range(h):
            for x in range(w):
                for ch in range(c):
                    total += img[y, x, ch]
        mean = total / n
        var = 0.0
        for y in range(h):
            for x in range(w):
                for ch in range(c):
                    dv = img[y, x, ch] - mean
                    var += dv * dv
        gx_sum = 0.0
        for y in range(h):
            for x in range(w - 1):
                for ch in range(c):
                    gx_sum += abs(img[y, x + 1, ch] - img[y, x, ch])
        gy_sum = 0.0
        for y in range(h - 1):
            for x in range(w):
                for ch in range(c):
                    gy_sum += abs(img[y + 1, x, ch] - img[y, x, ch])
        base = c * grid * grid
        out[base] = mean
        out[base + 1] = np.sqrt(var / n)
        out[base + 2] = gx_sum / (h * (w - 1) * c) if w > 1 else 0.0
        out[base + 3] = gy_sum / ((h - 1) * w * c) if h > 1 else 0.0
        return out

else:  # pragma: no cover
    warp_bilinear_numba = None
    grid_features_numba = None


def warp_bilinear(img: np.ndarray, hinv: np.ndarray, fill_mode: int, fill_value: float) -> np.ndarray:
    img = np.ascontiguousarray(img, dtype=np.float64)
    hinv = np.ascontiguousarray(hinv, dtype=np.float64)
    if USE_NUMBA:
        return warp_bilinear_numba(img, hinv, int(fill_mode), float(fill_value))
    return warp_bilinear_numpy(img, hinv, int(fill_mode), float(fill_value))


def grid_features(img: np.ndarray, grid: int) -> np.ndarray:
    img = np.ascontiguousarray(img, dtype=np.float64)
    if USE_NUMBA:
        return grid_features_numba(img, int(grid))
    return grid_features_numpy(img, int(grid))
