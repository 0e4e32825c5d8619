"""Volume data model: 3-D scalar grids with physical spacing and origin.

A Volume carries CT intensities, integer label maps, or per-class
probabilities on an axis-aligned grid in (x, y, z) index order. Voxel i
is centered at ``origin + i * spacing`` (mm) per axis. Volumes are
immutable after construction and safe to share across threads.

Label conventions: 0 background, 1 kidney parenchyma, 2 kidney
abnormality ("format 2"). "Format 1" merges classes 1 and 2 into a
single foreground class.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, InvalidMode, InvalidRange, LabelError
from .interp import round_half_away, sample_cubic, sample_nearest

BACKGROUND = 0
PARENCHYMA = 1
ABNORMALITY = 2
LABEL_VALUES = (BACKGROUND, PARENCHYMA, ABNORMALITY)

KINDS = ("intensity", "labels", "probability")

# Default Hounsfield clipping window.
CLIP_LO = -500.0
CLIP_HI = 400.0


@dataclass(frozen=True)
class Volume:
    """Immutable 3-D scalar grid with physical geometry."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    kind: str = "intensity"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got {data.ndim}-D")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin must have 3 components")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind == "labels":
            if not np.issubdtype(data.dtype, np.integer):
                raise LabelError(f"label volume must be integer, got {data.dtype}")
            bad = np.setdiff1d(np.unique(data), LABEL_VALUES)
            if bad.size:
                raise LabelError(f"label volume contains unknown values {bad.tolist()}")
        elif self.kind == "probability":
            if data.size and (data.min() < -1e-6 or data.max() > 1 + 1e-6):
                raise ValueError("probability volume values outside [0, 1]")
        view = data.view()
        view.setflags(write=False)
        object.__setattr__(self, "data", view)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self):
        return self.data.shape

    @property
    def extent_mm(self):
        """Physical edge length per axis (size * spacing)."""
        return tuple(n * s for n, s in zip(self.data.shape, self.spacing))

    def with_data(self, data, kind=None):
        """New volume sharing this geometry."""
        return Volume(data, self.spacing, self.origin, kind or self.kind)


def check_same_geometry(a: Volume, b: Volume, atol=1e-6):
    """Raise AlignmentError unless the two volumes share grid geometry."""
    if a.shape != b.shape:
        raise AlignmentError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not np.allclose(a.spacing, b.spacing, atol=atol):
        raise AlignmentError(f"spacing mismatch: {a.spacing} vs {b.spacing}")
    if not np.allclose(a.origin, b.origin, atol=atol):
        raise AlignmentError(f"origin mismatch: {a.origin} vs {b.origin}")


def clip_hu(vol: Volume, lo=CLIP_LO, hi=CLIP_HI) -> Volume:
    """Clamp CT intensities to the Hounsfield window [lo, hi]."""
    if lo >= hi:
        raise InvalidRange(f"empty clipping range [{lo}, {hi}]")
    if vol.kind != "intensity":
        raise InvalidMode(f"clip_hu applies to intensity volumes, got {vol.kind}")
    return vol.with_data(np.clip(vol.data, lo, hi))


def resample(vol: Volume, target_spacing, mode="cubic") -> Volume:
    """Resample onto an isotropic-or-not target grid with the same extent.

    Output size per axis is round(size * spacing / target), half away
    from zero; grids are edge-aligned so the physical extent is
    preserved within one target voxel. `mode` is "cubic" (Catmull-Rom)
    or "nearest"; label volumes must use nearest.
    """
    if np.isscalar(target_spacing):
        target_spacing = (target_spacing,) * 3
    target = tuple(float(t) for t in target_spacing)
    if any(t <= 0 for t in target):
        raise InvalidRange(f"target spacing must be positive, got {target}")
    if mode not in ("cubic", "nearest"):
        raise InvalidMode(f"unknown interpolation mode {mode!r}")
    if vol.kind == "labels" and mode != "nearest":
        raise InvalidMode("label volumes must be resampled with nearest mode")

    out_shape = tuple(
        max(1, int(round_half_away(n * s / t)))
        for n, s, t in zip(vol.shape, vol.spacing, target)
    )
    # Voxel j of the output sits at (j + 0.5) * t - 0.5 in input index
    # space, which aligns the outer edges of both grids.
    axes = [
        (np.arange(m, dtype=np.float64) + 0.5) * (t / s) - 0.5
        for m, s, t in zip(out_shape, vol.spacing, target)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))

    if mode == "nearest":
        data = sample_nearest(vol.data, coords)
    else:
        data = sample_cubic(vol.data, coords)
        if vol.kind == "probability":
            data = np.clip(data, 0.0, 1.0)

    origin = tuple(o + (t - s) / 2.0 for o, s, t in zip(vol.origin, vol.spacing, target))
    return Volume(data, target, origin, vol.kind)


def merge_format1(labels: Volume) -> Volume:
    """Collapse parenchyma and abnormality into one foreground class."""
    if labels.kind != "labels":
        raise LabelError(f"merge_format1 expects a label volume, got {labels.kind}")
    merged = np.where(labels.data > 0, 1, 0).astype(labels.data.dtype)
    return labels.with_data(merged)
