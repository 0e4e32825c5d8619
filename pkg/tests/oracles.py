"""Independent reference implementations used to check the package.

Everything here is written the slow, obvious way (loops, enumeration,
struct-packed byte layouts) on purpose: these functions share no code
with the package so agreement between the two is meaningful.
"""

import itertools
import math
import struct

import numpy as np


# ---------------------------------------------------------------- NIfTI


def reference_nifti_bytes(data, spacing, origin, byteorder="<"):
    """Serialize a 3-D array as a single-file NIfTI-1 blob.

    Builds the whole 348-byte header as one struct format string, so it
    shares nothing with the package writer beyond the file format.
    """
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        code, np_dtype = 4, np.int16
    else:
        code, np_dtype = 16, np.float32
    payload = data.astype(np.dtype(np_dtype).newbyteorder(byteorder)).tobytes(order="F")
    itemsize = np.dtype(np_dtype).itemsize

    sx, sy, sz = (float(s) for s in spacing)
    ox, oy, oz = (float(o) for o in origin)
    fmt = (
        "i"  # sizeof_hdr
        "10s18s"  # data_type, db_name
        "i h 2s"  # extents, session_error, regular+dim_info
        "8h"  # dim
        "3f"  # intent_p1..p3
        "h h h h"  # intent_code, datatype, bitpix, slice_start
        "8f"  # pixdim
        "f f f"  # vox_offset, scl_slope, scl_inter
        "h 2s"  # slice_end, slice_code+xyzt_units
        "f f f f"  # cal_max, cal_min, slice_duration, toffset
        "i i"  # glmax, glmin
        "80s24s"  # descrip, aux_file
        "h h"  # qform_code, sform_code
        "3f 3f"  # quatern_b/c/d, qoffset_x/y/z
        "4f 4f 4f"  # srow_x, srow_y, srow_z
        "16s4s"  # intent_name, magic
    )
    hdr = struct.pack(
        byteorder + fmt,
        348,
        b"", b"",
        0, 0, b"\x00\x00",
        3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1,
        0.0, 0.0, 0.0,
        0, code, itemsize * 8, 0,
        1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0,
        352.0, 1.0, 0.0,
        0, b"\x00\x00",
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"", b"",
        0, 1,
        0.0, 0.0, 0.0, ox, oy, oz,
        sx, 0.0, 0.0, ox,
        0.0, sy, 0.0, oy,
        0.0, 0.0, sz, oz,
        b"", b"n+1\x00",
    )
    assert len(hdr) == 348
    return hdr + b"\x00\x00\x00\x00" + payload


# ------------------------------------------------------- interpolation


def mirror_index_slow(i, n):
    """Reflect an index into [0, n) without repeating edge samples."""
    if n == 1:
        return 0
    while i < 0 or i >= n:
        if i < 0:
            i = -i
        if i >= n:
            i = 2 * (n - 1) - i
    return i


def catmull_rom_point(samples1d, u):
    """Catmull-Rom interpolation of a 1-D sequence at coordinate u."""
    base = math.floor(u)
    f = u - base
    pts = [samples1d[min(max(base + o, 0), len(samples1d) - 1)] for o in (-1, 0, 1, 2)]
    return (
        pts[0] * (-0.5 * f**3 + f**2 - 0.5 * f)
        + pts[1] * (1.5 * f**3 - 2.5 * f**2 + 1.0)
        + pts[2] * (-1.5 * f**3 + 2.0 * f**2 + 0.5 * f)
        + pts[3] * (0.5 * f**3 - 0.5 * f**2)
    )


def resample_axis_coords(n_out, spacing, target):
    """Edge-aligned source coordinates of output voxel centers."""
    return [(j + 0.5) * (target / spacing) - 0.5 for j in range(n_out)]


# ------------------------------------------------------------- network


def naive_conv3d_valid(x, w, b=None):
    """Direct 7-loop valid convolution. x: (Ci,D,H,W), w: (Co,Ci,k,k,k)."""
    ci, d, h, wd = x.shape
    co, ci2, k, _, _ = w.shape
    assert ci == ci2
    out = np.zeros((co, d - k + 1, h - k + 1, wd - k + 1))
    for o in range(co):
        for z in range(out.shape[1]):
            for y in range(out.shape[2]):
                for xx in range(out.shape[3]):
                    acc = 0.0
                    for c in range(ci):
                        for dz in range(k):
                            for dy in range(k):
                                for dx in range(k):
                                    acc += x[c, z + dz, y + dy, xx + dx] * w[o, c, dz, dy, dx]
                    out[o, z, y, xx] = acc + (0.0 if b is None else b[o])
    return out


def naive_maxpool2(x):
    """2x2x2 max pooling with stride 2 over (C,D,H,W)."""
    c, d, h, w = x.shape
    out = np.zeros((c, d // 2, h // 2, w // 2))
    for ch in range(c):
        for z in range(d // 2):
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[ch, z, y, xx] = x[ch, 2 * z : 2 * z + 2, 2 * y : 2 * y + 2, 2 * xx : 2 * xx + 2].max()
    return out


def fd_gradient(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return g


# ---------------------------------------------------------- morphology


def bfs_components(mask, connectivity=26):
    """Connected components by BFS. Returns a label array and count."""
    mask = np.asarray(mask, dtype=bool)
    if connectivity == 26:
        offs = [
            (dz, dy, dx)
            for dz in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
            if (dz, dy, dx) != (0, 0, 0)
        ]
    else:
        offs = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    labels = np.zeros(mask.shape, dtype=np.int64)
    count = 0
    for seed in zip(*np.nonzero(mask)):
        if labels[seed]:
            continue
        count += 1
        queue = [seed]
        labels[seed] = count
        while queue:
            z, y, x = queue.pop()
            for dz, dy, dx in offs:
                p = (z + dz, y + dy, x + dx)
                if all(0 <= p[i] < mask.shape[i] for i in range(3)):
                    if mask[p] and not labels[p]:
                        labels[p] = count
                        queue.append(p)
    return labels, count


def brute_dilate(mask, iterations=1):
    """Binary dilation with the full 3x3x3 element, by brute force."""
    mask = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        out = mask.copy()
        for z, y, x in zip(*np.nonzero(mask)):
            z0, z1 = max(z - 1, 0), min(z + 2, mask.shape[0])
            y0, y1 = max(y - 1, 0), min(y + 2, mask.shape[1])
            x0, x1 = max(x - 1, 0), min(x + 2, mask.shape[2])
            out[z0:z1, y0:y1, x0:x1] = True
        mask = out
    return mask


def touches_26(mask_a, mask_b):
    """True if any voxel of mask_a is 26-adjacent to (or shares) mask_b."""
    return bool(np.logical_and(brute_dilate(mask_a, 1), mask_b).any())


# ------------------------------------------------------------- metrics


def dice_ref(a, b):
    """Set Dice of two binary masks; both empty gives 1, one empty 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def mwu_enumerate(a, b):
    """Exact Mann-Whitney U and two-tailed p by full enumeration.

    U is the midrank statistic of the first sample. The p-value doubles
    the smaller tail of the permutation distribution of U, capped at 1.
    """
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    pooled = a + b
    n1 = len(a)

    def u_stat(first_idx):
        first = set(first_idx)
        u = 0.0
        for i in first:
            for j in range(len(pooled)):
                if j in first:
                    continue
                if pooled[i] > pooled[j]:
                    u += 1.0
                elif pooled[i] == pooled[j]:
                    u += 0.5
        return u

    u_obs = u_stat(range(n1))
    us = [u_stat(c) for c in itertools.combinations(range(len(pooled)), n1)]
    total = len(us)
    lo = sum(1 for u in us if u <= u_obs + 1e-12) / total
    hi = sum(1 for u in us if u >= u_obs - 1e-12) / total
    return u_obs, min(1.0, 2.0 * min(lo, hi))
