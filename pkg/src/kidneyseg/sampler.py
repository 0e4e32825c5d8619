"""Patch grids, mirror-context extraction, weight maps, augmentation.

Patches are cut around output-tile corners: the network input extends
the output tile by half the valid-convolution margin per side, and any
context falling outside the volume is filled by boundary reflection
without repeating the edge voxel (index -1 reads voxel 1).

Training grids place output corners every `stride` voxels plus one
end-aligned tail corner; inference grids place disjoint output tiles
whose corners stay divisible by the network's pooling period so tiled
and whole-volume passes agree exactly.

Augmentation draws up to three of {scale, rotate, blur, intensity,
elastic}, where elastic only ever appears together with blur and
intensity. All geometric pieces compose into a single warp defined in
physical coordinates around the sample center, applied cubically to
intensities and by nearest neighbor to labels and weights.
"""

import itertools
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import GridError, LabelError
from .interp import reflect_index, sample_cubic, sample_nearest
from .volume import CLIP_HI, CLIP_LO, Volume

DEFAULT_CLASS_WEIGHTS = (0.05, 0.10, 0.99)
FORMAT1_CLASS_WEIGHTS = (0.05, 0.10)


# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class PatchGrid:
    """Per-axis output-tile corner coordinates plus tile geometry."""

    corners: tuple  # three tuples of corner coordinates
    input_size: int
    output_size: int
    stride: int

    def tiles(self):
        """Iterate all 3-D corner combinations."""
        return itertools.product(*self.corners)

    def __len__(self):
        return int(np.prod([len(c) for c in self.corners]))


def _as_triple(extent):
    if np.isscalar(extent):
        return (int(extent),) * 3
    return tuple(int(e) for e in extent)


def training_grid(extent, output_size=20, stride=10, input_size=None, jitter=0):
    """Corner-anchored sampling grid with an end-aligned tail corner.

    `jitter` shifts the interior corners (used for optional per-epoch
    offsets); corner 0 and the tail stay so coverage is preserved.
    """
    extent = _as_triple(extent)
    if stride < 1:
        raise GridError(f"stride must be >= 1, got {stride}")
    axes = []
    for n in extent:
        if n < output_size:
            raise GridError(f"extent {n} smaller than the output tile {output_size}")
        last = n - output_size
        corners = [0]
        c = (jitter % stride) or stride
        while c <= last:
            corners.append(c)
            c += stride
        if corners[-1] < last:
            corners.append(last)
        axes.append(tuple(corners))
    return PatchGrid(tuple(axes), input_size or output_size, output_size, stride)


def inference_grid(extent, output_size, input_size=None, alignment=1):
    """Disjoint-coverage grid whose corners are multiples of `alignment`.

    Corner spacing is the largest multiple of the alignment that fits in
    the output size; the final corner is the last tile start rounded up
    to the alignment, so its tile may overhang the volume (the stitcher
    reads mirrored context and discards overhanging output).
    """
    extent = _as_triple(extent)
    if alignment < 1 or output_size < alignment:
        raise GridError(f"alignment {alignment} incompatible with output {output_size}")
    step = output_size - (output_size % alignment)
    axes = []
    for n in extent:
        last = n - output_size
        corners = [0]
        c = step
        while c <= last:
            corners.append(c)
            c += step
        if corners[-1] < last:
            tail = -(-last // alignment) * alignment
            while tail - corners[-1] > output_size:  # safety net
                corners.append(corners[-1] + step)
            corners.append(tail)
        axes.append(tuple(corners))
    return PatchGrid(tuple(axes), input_size or output_size, output_size, step)


def owned_regions(grid: PatchGrid, extent):
    """Per-axis [start, stop) slices each tile exclusively writes."""
    extent = _as_triple(extent)
    out = []
    for corners, n in zip(grid.corners, extent):
        stops = list(corners[1:]) + [n]
        out.append(tuple((c, min(s, c + grid.output_size)) for c, s in zip(corners, stops)))
    return tuple(out)


# ----------------------------------------------------------- extraction


def extract_block(vol, corner, size):
    """Read a block at `corner` (any coords) with mirror reflection."""
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    size = _as_triple(size)
    idx = [
        reflect_index(np.arange(c, c + s), n)
        for c, s, n in zip(corner, size, data.shape)
    ]
    return data[np.ix_(idx[0], idx[1], idx[2])]


def extract_patch(vol, corner, input_size, output_size):
    """Network input block around the output tile at `corner`.

    The output tile must lie inside the volume; the surrounding input
    context may exceed it and is mirrored in.
    """
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    corner = tuple(int(c) for c in corner)
    for c, n in zip(corner, data.shape):
        if c < 0 or c + output_size > n:
            raise GridError(
                f"output tile at {corner} size {output_size} outside volume {data.shape}"
            )
    half = (input_size - output_size) // 2
    return extract_block(data, tuple(c - half for c in corner), input_size)


def weight_map(target, class_weights=DEFAULT_CLASS_WEIGHTS):
    """Per-voxel loss weights: elementwise class-weight lookup."""
    target = np.asarray(target)
    table = np.asarray(class_weights, dtype=np.float64)
    bad = np.setdiff1d(np.unique(target), np.arange(table.size))
    if bad.size:
        raise LabelError(f"target contains labels {bad.tolist()} outside the weight table")
    return table[target]


# -------------------------------------------------------------- samples


@dataclass(frozen=True)
class PatchSample:
    """One training sample: network input(s), target tile, weights.

    `high_in` is the primary input patch; `low_in` is the coarse-grid
    context patch and is None when training a single sub-network. The
    target and weights live on the output tile of the high grid. All
    arrays carry their physical geometry so augmentation can warp them
    consistently in millimeter space.
    """

    high_in: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    high_origin: tuple
    high_spacing: tuple
    target_origin: tuple
    center_mm: tuple
    low_in: np.ndarray = None
    low_origin: tuple = None
    low_spacing: tuple = None
    case_id: str = ""

    def __post_init__(self):
        if self.target.shape != self.weights.shape:
            raise GridError(f"target {self.target.shape} vs weights {self.weights.shape}")
        if not np.issubdtype(self.target.dtype, np.integer):
            raise LabelError(f"target must be integer labels, got {self.target.dtype}")


def _patch_center_mm(vol: Volume, corner, output_size):
    return tuple(
        o + (c + (output_size - 1) / 2.0) * s
        for o, s, c in zip(vol.origin, vol.spacing, corner)
    )


def cut_sample(ct: Volume, labels: Volume, corner, input_size, output_size,
               low_ct: Volume = None, low_input_size=None,
               class_weights=DEFAULT_CLASS_WEIGHTS, case_id="") -> PatchSample:
    """Cut an aligned training sample at an output-grid corner.

    When `low_ct` is given, a coarse context block is extracted around
    the same physical center (its corner rounded to the coarse grid).
    """
    target = np.array(
        labels.data[tuple(slice(c, c + output_size) for c in corner)]
    )
    if target.shape != (output_size,) * 3:
        raise GridError(f"output tile at {corner} outside volume {labels.shape}")
    high_in = extract_patch(ct, corner, input_size, output_size)
    half = (input_size - output_size) // 2
    high_origin = tuple(
        o + (c - half) * s for o, s, c in zip(ct.origin, ct.spacing, corner)
    )
    target_origin = tuple(o + c * s for o, s, c in zip(ct.origin, ct.spacing, corner))
    center = _patch_center_mm(ct, corner, output_size)

    low_in = low_origin = low_spacing = None
    if low_ct is not None:
        size = low_input_size or input_size
        low_corner = tuple(
            int(np.rint((c - o) / s - (size - 1) / 2.0))
            for c, o, s in zip(center, low_ct.origin, low_ct.spacing)
        )
        low_in = extract_block(low_ct, low_corner, size)
        low_origin = tuple(
            o + c * s for o, s, c in zip(low_ct.origin, low_ct.spacing, low_corner)
        )
        low_spacing = low_ct.spacing
    return PatchSample(
        high_in=high_in,
        target=target,
        weights=weight_map(target, class_weights),
        high_origin=high_origin,
        high_spacing=ct.spacing,
        target_origin=target_origin,
        center_mm=center,
        low_in=low_in,
        low_origin=low_origin,
        low_spacing=low_spacing,
        case_id=case_id,
    )


# ---------------------------------------------------------- augmentation

SCALE = "scale"
ROTATE = "rotate"
BLUR = "blur"
INTENSITY = "intensity"
ELASTIC = "elastic"

# All legal transform sets: sizes 1..3 over the four free transforms,
# plus the single elastic set (elastic requires blur and intensity).
_FREE = (SCALE, ROTATE, BLUR, INTENSITY)
LEGAL_SETS = tuple(
    frozenset(c)
    for r in (1, 2, 3)
    for c in itertools.combinations(_FREE, r)
) + (frozenset((ELASTIC, BLUR, INTENSITY)),)

_PLANES = ((0, 1), (0, 2), (1, 2))
_PLANE_CHOICES = tuple(
    [(p,) for p in _PLANES] + [pair for pair in itertools.combinations(_PLANES, 2)]
)


@dataclass(frozen=True)
class AugmentPlan:
    """A drawn transform set with all of its parameters."""

    transforms: frozenset
    scale: float = None
    rotations: tuple = ()  # ((axis_a, axis_b, angle_rad), ...)
    blur_sigma: float = None
    intensity_shift: float = None
    elastic: np.ndarray = None  # (3, P, P, P) control offsets in mm

    @property
    def geometric(self):
        return bool(self.transforms & {SCALE, ROTATE, ELASTIC})


def draw_plan(rng, probability=0.7, scale_range=(0.95, 1.05), rot_max_deg=5.0,
              blur_range=(0.2, 1.0), shift_max_hu=20.0, elastic_points=10,
              elastic_amp_mm=5.0):
    """Draw None (identity, 1-probability) or a uniformly chosen legal plan."""
    if rng.random() >= probability:
        return None
    chosen = LEGAL_SETS[rng.integers(len(LEGAL_SETS))]
    scale = rotations = blur = shift = elastic = None
    if SCALE in chosen:
        scale = float(rng.uniform(*scale_range))
    if ROTATE in chosen:
        planes = _PLANE_CHOICES[rng.integers(len(_PLANE_CHOICES))]
        rotations = tuple(
            (a, b, float(np.deg2rad(rng.uniform(-rot_max_deg, rot_max_deg))))
            for a, b in planes
        )
    if BLUR in chosen:
        blur = float(rng.uniform(*blur_range))
    if INTENSITY in chosen:
        shift = float(rng.uniform(-shift_max_hu, shift_max_hu))
    if ELASTIC in chosen:
        p = elastic_points
        elastic = rng.uniform(-elastic_amp_mm, elastic_amp_mm, size=(3, p, p, p))
    return AugmentPlan(
        transforms=chosen,
        scale=scale,
        rotations=rotations or (),
        blur_sigma=blur,
        intensity_shift=shift,
        elastic=elastic,
    )


def _linear_map(plan):
    """Source-coordinate linear map (about the sample center)."""
    m = np.eye(3)
    for a, b, angle in plan.rotations:
        r = np.eye(3)
        c, s = np.cos(angle), np.sin(angle)
        r[a, a], r[a, b], r[b, a], r[b, b] = c, -s, s, c
        m = r @ m
    if plan.scale is not None:
        m = m / plan.scale  # content magnified by the drawn factor
    return m


def _elastic_offsets(plan, points_mm, lo, hi):
    """Evaluate the control grid as cubic B-spline coefficients."""
    p = plan.elastic.shape[1]
    coords = np.stack(
        [
            (points_mm[ax] - lo[ax]) / max(hi[ax] - lo[ax], 1e-9) * (p - 1)
            for ax in range(3)
        ]
    )
    return np.stack(
        [
            map_coordinates(plan.elastic[ax], coords, order=3, prefilter=False,
                            mode="nearest")
            for ax in range(3)
        ]
    )


def _warp_array(data, origin, spacing, plan, center, footprint, mode):
    """Resample one array through the composed geometric transform."""
    shape = data.shape
    axes = [o + np.arange(n) * s for o, s, n in zip(origin, spacing, shape)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"))  # (3, D, H, W) in mm
    flat = pts.reshape(3, -1)
    centered = flat - np.asarray(center)[:, None]
    src = _linear_map(plan) @ centered + np.asarray(center)[:, None]
    if plan.elastic is not None:
        src = src + _elastic_offsets(plan, flat, *footprint)
    src_idx = np.stack(
        [(src[ax] - origin[ax]) / spacing[ax] for ax in range(3)]
    ).reshape((3,) + shape)
    if mode == "nearest":
        return sample_nearest(data, src_idx)
    return sample_cubic(data, src_idx)


def _footprint(sample):
    """Physical bounding box of the sample (largest available patch)."""
    if sample.low_in is not None:
        data, origin, spacing = sample.low_in, sample.low_origin, sample.low_spacing
    else:
        data, origin, spacing = sample.high_in, sample.high_origin, sample.high_spacing
    lo = tuple(origin)
    hi = tuple(o + (n - 1) * s for o, s, n in zip(origin, spacing, data.shape))
    return lo, hi


def apply_plan(sample: PatchSample, plan, clip_lo=CLIP_LO, clip_hi=CLIP_HI):
    """Apply a drawn plan; plan=None is the identity."""
    if plan is None:
        return sample
    high = sample.high_in
    low = sample.low_in
    target = sample.target
    weights = sample.weights

    if plan.geometric:
        fp = _footprint(sample)
        c = sample.center_mm
        high = _warp_array(high, sample.high_origin, sample.high_spacing, plan, c, fp, "cubic")
        if low is not None:
            low = _warp_array(low, sample.low_origin, sample.low_spacing, plan, c, fp, "cubic")
        target = _warp_array(
            target, sample.target_origin, sample.high_spacing, plan, c, fp, "nearest"
        ).astype(sample.target.dtype)
        weights = _warp_array(
            weights, sample.target_origin, sample.high_spacing, plan, c, fp, "nearest"
        )
    if plan.blur_sigma is not None:
        high = gaussian_filter(high, plan.blur_sigma)
        if low is not None:
            low = gaussian_filter(low, plan.blur_sigma)
    if plan.intensity_shift is not None:
        high = np.clip(high + plan.intensity_shift, clip_lo, clip_hi)
        if low is not None:
            low = np.clip(low + plan.intensity_shift, clip_lo, clip_hi)
    return replace(sample, high_in=high, low_in=low, target=target, weights=weights)


def augment(sample: PatchSample, rng, clip_lo=CLIP_LO, clip_hi=CLIP_HI, **draw_kw):
    """Randomly augment a sample (70% of draws get a transform plan)."""
    return apply_plan(sample, draw_plan(rng, **draw_kw), clip_lo, clip_hi)
