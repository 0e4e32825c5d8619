"""Tiled whole-volume inference, stitching, ensembling, post-processing.

Output tiles never overlap: each tile owns the half-open region up to
the next tile corner and writes exactly those voxels. Tile corners stay
divisible by the network's pooling period and all context is read from
the volume through mirror reflection, which together make the stitched
result equal a single whole-volume pass through the same network.

Post-processing follows a three-stage chain: threshold the coarse
foreground map at 0.5 and nearest-upsample it, dilate it five times
with a full 3x3x3 neighborhood to form a gate, zero fine-grid argmax
labels outside the gate, then drop abnormality components that are not
26-adjacent to any parenchyma voxel.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation
from scipy.ndimage import label as cc_label

from .autodiff import Tensor
from .errors import AlignmentError
from .nifti import read_nifti, write_nifti
from .sampler import extract_block, inference_grid, owned_regions
from .unet import CascadeModel, UNet
from .volume import (
    ABNORMALITY,
    BACKGROUND,
    PARENCHYMA,
    Volume,
    check_same_geometry,
    merge_format1,
)

_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class ProbabilityMaps:
    """Per-class probability Volumes, fine grid plus optional coarse grid."""

    high: tuple  # one Volume per class
    low: tuple = None  # one Volume per class on the coarse grid, or None

    def __post_init__(self):
        object.__setattr__(self, "high", tuple(self.high))
        if self.low is not None:
            object.__setattr__(self, "low", tuple(self.low))
        for group in (self.high, self.low or ()):
            total = None
            for v in group:
                check_same_geometry(group[0], v)
                total = v.data if total is None else total + v.data
            if group and np.abs(total - 1.0).max() > 1e-5:
                raise AlignmentError("class probabilities do not sum to 1")


@dataclass(frozen=True)
class SegmentationResult:
    labels: Volume  # three-class label volume
    merged: Volume  # binary union of parenchyma and abnormality
    provenance: dict = field(default_factory=dict)


# ------------------------------------------------------------- tiling


def _tile_alignment(net: UNet):
    return 2 ** (net.cfg.levels - 1)


def _forward_probs(net: UNet, block, input_scale):
    x = Tensor(block[None] * input_scale)
    return net.forward(None, x).data


def predict_net(net: UNet, vol: Volume, input_scale=1.0):
    """Stitched tiled prediction of a single sub-network over a volume."""
    cfg = net.cfg
    out_size = cfg.output_size
    half = (cfg.input_size - out_size) // 2
    grid = inference_grid(vol.shape, out_size, cfg.input_size,
                          alignment=_tile_alignment(net))
    owned = owned_regions(grid, vol.shape)
    index = [{c: k for k, c in enumerate(ax)} for ax in grid.corners]
    probs = np.zeros((cfg.out_classes,) + vol.shape)
    for corner in grid.tiles():
        block = extract_block(vol.data, tuple(c - half for c in corner),
                              cfg.input_size)
        tile = _forward_probs(net, block, input_scale)
        target = []
        local = []
        for ax, c in enumerate(corner):
            start, stop = owned[ax][index[ax][c]]
            target.append(slice(start, stop))
            local.append(slice(start - c, stop - c))
        probs[(slice(None),) + tuple(target)] = tile[(slice(None),) + tuple(local)]
    return probs


def predict_net_whole(net: UNet, vol: Volume, input_scale=1.0):
    """Single whole-volume pass (the tiling-equivalence reference)."""
    cfg = net.cfg
    d = _tile_alignment(net)
    half = (cfg.input_size - cfg.output_size) // 2
    out_shape = tuple(-(-n // d) * d for n in vol.shape)
    block = extract_block(vol.data, (-half,) * 3,
                          tuple(o + 2 * half for o in out_shape))
    full = _forward_probs(net, block, input_scale)
    return full[(slice(None),) + tuple(slice(0, n) for n in vol.shape)]


def _paired_low_corner(center_mm, low: Volume, size):
    return tuple(
        int(np.rint((c - o) / s - (size - 1) / 2.0))
        for c, o, s in zip(center_mm, low.origin, low.spacing)
    )


def predict_cascade_high(model: CascadeModel, ct_high: Volume, ct_low: Volume,
                         input_scale=1.0):
    """Tiled prediction of the cascade's fine-grid output."""
    cfg = model.highres.cfg
    out_size = cfg.output_size
    half = (cfg.input_size - out_size) // 2
    low_cfg = model.lowres.cfg
    grid = inference_grid(ct_high.shape, out_size, cfg.input_size,
                          alignment=_tile_alignment(model.highres))
    owned = owned_regions(grid, ct_high.shape)
    index = [{c: k for k, c in enumerate(ax)} for ax in grid.corners]
    probs = np.zeros((cfg.out_classes,) + ct_high.shape)
    for corner in grid.tiles():
        block = extract_block(ct_high.data, tuple(c - half for c in corner),
                              cfg.input_size)
        center = tuple(
            o + (c + (out_size - 1) / 2.0) * s
            for o, s, c in zip(ct_high.origin, ct_high.spacing, corner)
        )
        low_corner = _paired_low_corner(center, ct_low, low_cfg.input_size)
        low_block = extract_block(ct_low.data, low_corner, low_cfg.input_size)
        _, high_probs = model.forward(
            None,
            Tensor(low_block[None] * input_scale),
            Tensor(block[None] * input_scale),
        )
        tile = high_probs.data
        target = []
        local = []
        for ax, c in enumerate(corner):
            start, stop = owned[ax][index[ax][c]]
            target.append(slice(start, stop))
            local.append(slice(start - c, stop - c))
        probs[(slice(None),) + tuple(target)] = tile[(slice(None),) + tuple(local)]
    return probs


def _class_volumes(probs, ref: Volume):
    return tuple(
        Volume(probs[c], ref.spacing, ref.origin, "probability")
        for c in range(probs.shape[0])
    )


def predict_volume(model, ct_high: Volume, ct_low: Volume = None,
                   input_scale=1.0) -> ProbabilityMaps:
    """Full-volume probability maps for a cascade or a single network.

    Inputs must already be clipped and resampled to the model's grids.
    For a cascade the coarse maps come from a stitched pass of the
    coarse sub-network alone; the fine maps use the in-network bridge
    tile by tile.
    """
    if isinstance(model, CascadeModel):
        if ct_low is None:
            raise AlignmentError("cascade prediction needs the coarse-grid volume")
        low = _class_volumes(predict_net(model.lowres, ct_low, input_scale), ct_low)
        high = _class_volumes(
            predict_cascade_high(model, ct_high, ct_low, input_scale), ct_high
        )
        return ProbabilityMaps(high=high, low=low)
    high = _class_volumes(predict_net(model, ct_high, input_scale), ct_high)
    return ProbabilityMaps(high=high, low=None)


# ---------------------------------------------------------- ensembling


def ensemble(maps_a: ProbabilityMaps, maps_b: ProbabilityMaps) -> ProbabilityMaps:
    """Elementwise mean of two systems' probability maps."""
    if len(maps_a.high) != len(maps_b.high) or (maps_a.low is None) != (maps_b.low is None):
        raise AlignmentError("ensemble inputs carry different class sets")

    def mean_group(group_a, group_b):
        out = []
        for va, vb in zip(group_a, group_b):
            check_same_geometry(va, vb)
            out.append(Volume((va.data + vb.data) / 2.0, va.spacing, va.origin,
                              "probability"))
        return tuple(out)

    low = None
    if maps_a.low is not None:
        if len(maps_a.low) != len(maps_b.low):
            raise AlignmentError("ensemble inputs carry different class sets")
        low = mean_group(maps_a.low, maps_b.low)
    return ProbabilityMaps(high=mean_group(maps_a.high, maps_b.high), low=low)


# ------------------------------------------------------ post-processing


def _upsample_gate(mask_low, high_shape, ratio):
    idx = [np.minimum(np.arange(n) // ratio, mask_low.shape[ax] - 1)
           for ax, n in enumerate(high_shape)]
    return mask_low[np.ix_(idx[0], idx[1], idx[2])]


def gate_mask(low_fg, high_shape, ratio, threshold=0.5, iterations=5):
    """Threshold, nearest-upsample and dilate the coarse foreground map."""
    seed = low_fg >= threshold
    grown = _upsample_gate(seed, high_shape, ratio)
    if iterations > 0 and grown.any():
        grown = binary_dilation(grown, _STRUCT_26, iterations=iterations)
    return grown


def _prune_detached_abnormalities(labels):
    abn = labels == ABNORMALITY
    if not abn.any():
        return labels
    grown_par = binary_dilation(labels == PARENCHYMA, _STRUCT_26)
    comps, count = cc_label(abn, structure=_STRUCT_26)
    out = labels.copy()
    for i in range(1, count + 1):
        comp = comps == i
        if not (comp & grown_par).any():
            out[comp] = BACKGROUND
    return out


def postprocess(maps: ProbabilityMaps, ratio=4, threshold=0.5, iterations=5,
                provenance=None) -> SegmentationResult:
    """Gate argmax labels by the coarse map and prune detached abnormalities.

    Without coarse maps (single-network pipeline) the gate stage is
    skipped and only the component pruning applies.
    """
    ref = maps.high[0]
    stack = np.stack([v.data for v in maps.high])
    labels = np.argmax(stack, axis=0).astype(np.int64)
    gated = maps.low is not None
    if gated:
        gate = gate_mask(maps.low[1].data, ref.shape, ratio, threshold, iterations)
        labels[~gate] = BACKGROUND
    labels = _prune_detached_abnormalities(labels)
    vol = Volume(labels, ref.spacing, ref.origin, "labels")
    prov = dict(provenance or {})
    prov["postprocess"] = {
        "gated": gated,
        "ratio": ratio,
        "threshold": threshold,
        "iterations": iterations,
    }
    return SegmentationResult(labels=vol, merged=merge_format1(vol), provenance=prov)


# --------------------------------------------------------- left / right


def split_left_right(mask: Volume):
    """Split a binary kidney mask into (left, right) Volumes.

    Components are assigned by centroid position along the first axis
    relative to the volume's mid-plane; the patient's left kidney sits
    on the high-coordinate side. Centroids exactly on the plane go
    opposite the largest off-plane component, defaulting to left.
    """
    data = mask.data != 0
    left = np.zeros(mask.shape, dtype=np.int64)
    right = np.zeros(mask.shape, dtype=np.int64)
    comps, count = cc_label(data, structure=_STRUCT_26)
    mid = (mask.shape[0] - 1) / 2.0
    sides = {}
    sizes = {}
    centroids = {}
    for i in range(1, count + 1):
        xs = np.nonzero(comps == i)[0]
        sizes[i] = xs.size
        centroids[i] = xs.mean()
        if centroids[i] > mid:
            sides[i] = "left"
        elif centroids[i] < mid:
            sides[i] = "right"
    undecided = [i for i in range(1, count + 1) if i not in sides]
    for i in undecided:
        off_plane = [j for j in sides if sides[j] in ("left", "right")]
        if off_plane:
            largest = max(off_plane, key=lambda j: (sizes[j], -j))
            sides[i] = "right" if sides[largest] == "left" else "left"
        else:
            sides[i] = "left"
    for i, side in sides.items():
        (left if side == "left" else right)[comps == i] = 1
    mk = lambda d: Volume(d, mask.spacing, mask.origin, "labels")
    return mk(left), mk(right)


# ------------------------------------------------------------ map files


def save_probability_maps(maps: ProbabilityMaps, out_dir, case_id):
    """Write per-class probability NIfTI files for one case."""
    os.makedirs(out_dir, exist_ok=True)
    for c, v in enumerate(maps.high):
        write_nifti(v, os.path.join(out_dir, f"{case_id}_prob_c{c}.nii"))
    if maps.low is not None:
        for c, v in enumerate(maps.low):
            write_nifti(v, os.path.join(out_dir, f"{case_id}_problow_c{c}.nii"))


def load_probability_maps(in_dir, case_id) -> ProbabilityMaps:
    """Read the per-class files written by save_probability_maps."""
    high = []
    c = 0
    while True:
        path = os.path.join(in_dir, f"{case_id}_prob_c{c}.nii")
        if not os.path.exists(path):
            break
        high.append(read_nifti(path, kind="probability"))
        c += 1
    low = []
    c = 0
    while True:
        path = os.path.join(in_dir, f"{case_id}_problow_c{c}.nii")
        if not os.path.exists(path):
            break
        low.append(read_nifti(path, kind="probability"))
        c += 1
    return ProbabilityMaps(high=tuple(high), low=tuple(low) or None)
