"""Point sampling on 3-D grids: Catmull-Rom cubic and nearest-neighbor.

Cubic interpolation throughout the package means the Catmull-Rom cubic
convolution kernel (Keys, a = -0.5). It interpolates exactly at grid
points, so sampling a grid at its own coordinates is the identity.
Out-of-domain taps are edge-clamped.
"""

import numpy as np

__all__ = [
    "reflect_index",
    "round_half_away",
    "sample_cubic",
    "sample_nearest",
]


def round_half_away(x):
    """Round half away from zero (np.round uses banker's rounding)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def reflect_index(idx, n):
    """Map out-of-range indices by mirror reflection without edge repeat.

    Index -1 maps to 1 and index n to n-2, repeating for arbitrarily
    distant indices. A single-voxel axis maps everything to 0.
    """
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _catmull_rom_weights(frac):
    """Weights for the 4 taps at offsets (-1, 0, 1, 2) from floor(u)."""
    f = np.asarray(frac, dtype=np.float64)
    f2 = f * f
    f3 = f2 * f
    w0 = -0.5 * f3 + f2 - 0.5 * f
    w1 = 1.5 * f3 - 2.5 * f2 + 1.0
    w2 = -1.5 * f3 + 2.0 * f2 + 0.5 * f
    w3 = 0.5 * f3 - 0.5 * f2
    return w0, w1, w2, w3


def sample_cubic(data, coords):
    """Sample `data` at fractional index coordinates with Catmull-Rom.

    coords has shape (3,) + out_shape, in index space of `data`.
    Taps outside the grid are clamped to the nearest edge sample.
    """
    data = np.asarray(data, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    out_shape = coords.shape[1:]
    flat = coords.reshape(3, -1)

    base = np.floor(flat).astype(np.int64)
    frac = flat - base

    taps = []  # per axis: list of 4 clamped index arrays
    weights = []  # per axis: list of 4 weight arrays
    for ax in range(3):
        n = data.shape[ax]
        w = _catmull_rom_weights(frac[ax])
        idx = [np.clip(base[ax] + o, 0, n - 1) for o in (-1, 0, 1, 2)]
        taps.append(idx)
        weights.append(w)

    strides = (data.shape[1] * data.shape[2], data.shape[2], 1)
    ravel = data.ravel()
    out = np.zeros(flat.shape[1], dtype=np.float64)
    for i in range(4):
        for j in range(4):
            wij = weights[0][i] * weights[1][j]
            lin_ij = taps[0][i] * strides[0] + taps[1][j] * strides[1]
            for k in range(4):
                lin = lin_ij + taps[2][k]
                out += wij * weights[2][k] * ravel[lin]
    return out.reshape(out_shape)


def sample_nearest(data, coords):
    """Sample `data` at the nearest grid point (half rounds up), edge-clamped."""
    data = np.asarray(data)
    coords = np.asarray(coords, dtype=np.float64)
    out_shape = coords.shape[1:]
    flat = coords.reshape(3, -1)
    idx = [
        np.clip(np.floor(flat[ax] + 0.5).astype(np.int64), 0, data.shape[ax] - 1)
        for ax in range(3)
    ]
    return data[idx[0], idx[1], idx[2]].reshape(out_shape)
