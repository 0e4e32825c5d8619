"""Synthetic CT-like volumes with paired reference labels.

Volumes hold up to two kidney ellipsoids (label 1) and up to three
abnormality spheres (label 2, rasterized on top of the kidneys).
Intensities are drawn inside the clip window: kidneys around 20..45 HU,
abnormalities around -10..15 HU, background tissue at -60 HU, with
Gaussian noise added everywhere. Shapes are rasterized analytically by
testing each voxel center against the surface.

Attached spheres must end up 26-adjacent to remaining kidney voxels;
detached spheres must stay at least 5 voxels away from any kidney.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, distance_transform_edt

from .errors import ConfigError, GeometryError
from .nifti import write_nifti
from .volume import ABNORMALITY, CLIP_HI, CLIP_LO, PARENCHYMA, Volume

BACKGROUND_HU = -60.0
NOISE_SIGMA = 10.0
DETACH_MIN_VOXELS = 5.0


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple
    semi_axes_mm: tuple
    intensity_hu: float


@dataclass(frozen=True)
class Sphere:
    center_mm: tuple
    radius_mm: float
    intensity_hu: float
    attached: bool = True


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple  # voxels per axis
    spacing: tuple = (1.0, 1.0, 1.0)
    kidneys: tuple = ()
    abnormalities: tuple = ()
    background_hu: float = BACKGROUND_HU
    noise_sigma: float = NOISE_SIGMA
    seed: int = 0

    def __post_init__(self):
        size = (self.size,) * 3 if np.isscalar(self.size) else tuple(int(n) for n in self.size)
        spacing = (
            (float(self.spacing),) * 3
            if np.isscalar(self.spacing)
            else tuple(float(s) for s in self.spacing)
        )
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "kidneys", tuple(self.kidneys))
        object.__setattr__(self, "abnormalities", tuple(self.abnormalities))
        if len(self.kidneys) > 2:
            raise GeometryError(f"at most 2 kidneys, got {len(self.kidneys)}")
        if len(self.abnormalities) > 3:
            raise GeometryError(f"at most 3 abnormalities, got {len(self.abnormalities)}")


def _axes_mm(spec):
    return [np.arange(n) * s for n, s in zip(spec.size, spec.spacing)]


def _check_bounds(spec, center, reach, what):
    for ax in range(3):
        lo = center[ax] - reach[ax]
        hi = center[ax] + reach[ax]
        limit = (spec.size[ax] - 1) * spec.spacing[ax]
        if lo < 0.0 or hi > limit:
            raise GeometryError(f"{what} spans [{lo:.1f}, {hi:.1f}]mm outside [0, {limit:.1f}] on axis {ax}")


def _along(values, axis):
    shape = [1, 1, 1]
    shape[axis] = -1
    return np.asarray(values).reshape(shape)


def _ellipsoid_mask(spec, e: Ellipsoid):
    _check_bounds(spec, e.center_mm, e.semi_axes_mm, "kidney ellipsoid")
    ax = _axes_mm(spec)
    q = sum(
        _along(((ax[i] - e.center_mm[i]) / e.semi_axes_mm[i]) ** 2, i)
        for i in range(3)
    )
    return q <= 1.0


def _sphere_mask(spec, s: Sphere):
    _check_bounds(spec, s.center_mm, (s.radius_mm,) * 3, "abnormality sphere")
    ax = _axes_mm(spec)
    q = sum(_along((ax[i] - s.center_mm[i]) ** 2, i) for i in range(3))
    return q <= s.radius_mm ** 2


def generate(spec: PhantomSpec):
    """Rasterize a spec into a (ct, labels) Volume pair."""
    labels = np.zeros(spec.size, dtype=np.int64)
    base = np.full(spec.size, spec.background_hu, dtype=np.float64)
    for k in spec.kidneys:
        m = _ellipsoid_mask(spec, k)
        labels[m] = PARENCHYMA
        base[m] = k.intensity_hu
    sphere_masks = []
    for s in spec.abnormalities:
        m = _sphere_mask(spec, s)
        labels[m] = ABNORMALITY
        base[m] = s.intensity_hu
        sphere_masks.append(m)
    _check_attachment(spec, labels, sphere_masks)

    rng = np.random.default_rng(spec.seed)
    ct = np.clip(base + rng.normal(0.0, spec.noise_sigma, spec.size), CLIP_LO, CLIP_HI)
    return (
        Volume(ct, spec.spacing, (0.0, 0.0, 0.0), "intensity"),
        Volume(labels, spec.spacing, (0.0, 0.0, 0.0), "labels"),
    )


def _check_attachment(spec, labels, sphere_masks):
    kidney = labels == PARENCHYMA
    grown = binary_dilation(kidney, np.ones((3, 3, 3), dtype=bool)) if kidney.any() else kidney
    if any(not s.attached for s in spec.abnormalities):
        # voxel distance from every voxel to the nearest kidney voxel
        dist = distance_transform_edt(~kidney) if kidney.any() else None
    for s, m in zip(spec.abnormalities, sphere_masks):
        if not m.any():
            raise GeometryError(f"abnormality at {s.center_mm} rasterized to zero voxels")
        if s.attached:
            if not (grown & m).any():
                raise GeometryError(f"attached abnormality at {s.center_mm} does not touch a kidney")
        elif dist is not None and dist[m].min() < DETACH_MIN_VOXELS:
            raise GeometryError(f"detached abnormality at {s.center_mm} lies closer than {DETACH_MIN_VOXELS} voxels to a kidney")


# ------------------------------------------------------------- cohorts


@dataclass(frozen=True)
class CohortCase:
    case_id: str
    split: str  # train | val | test
    has_abnormality: bool
    spec: PhantomSpec = field(repr=False)


def _place_kidney(rng, extent, x_frac):
    jitter = lambda: float(rng.uniform(-0.06, 0.06)) * extent
    center = (x_frac * extent + jitter(), 0.5 * extent + jitter(), 0.5 * extent + jitter())
    semi = tuple(float(rng.uniform(0.15, 0.21)) * extent for _ in range(3))
    intensity = float(rng.uniform(20.0, 45.0))
    return Ellipsoid(center, semi, intensity)


def _place_attached_sphere(rng, kidney: Ellipsoid, extent, spacing):
    for _ in range(200):
        d = rng.normal(size=3)
        d = d / np.linalg.norm(d)
        t = 1.0 / np.sqrt(sum((d[i] / kidney.semi_axes_mm[i]) ** 2 for i in range(3)))
        shift = float(rng.uniform(0.5, 0.85)) * t
        center = tuple(kidney.center_mm[i] + d[i] * shift for i in range(3))
        radius = float(rng.uniform(2.5, 4.0))
        limit = extent
        if all(center[i] - radius >= 0 and center[i] + radius <= limit for i in range(3)):
            return Sphere(center, radius, float(rng.uniform(-10.0, 15.0)), attached=True)
    raise GeometryError("could not place an attached abnormality inside the volume")


def make_cohort(n, seed, size=48, spacing=1.0, abnormal_fraction=0.5,
                test_fraction=0.2, val_fraction=0.2):
    """Deterministic cohort of phantom cases with split assignments.

    Exactly round(abnormal_fraction * n) cases carry one attached
    abnormality. Split sizes: round(test_fraction * n) test cases (at
    least one), then round(val_fraction * remaining) validation cases
    (at least one), rest train.
    """
    if n < 3:
        raise ConfigError(f"cohort needs at least 3 cases, got {n}")
    rng = np.random.default_rng(seed)
    spacing3 = (float(spacing),) * 3 if np.isscalar(spacing) else tuple(spacing)
    size3 = (int(size),) * 3 if np.isscalar(size) else tuple(int(v) for v in size)
    extent = min((sz - 1) * sp for sz, sp in zip(size3, spacing3))

    n_abn = int(round(abnormal_fraction * n))
    flags = np.zeros(n, dtype=bool)
    flags[:n_abn] = True
    flags = flags[rng.permutation(n)]

    n_test = max(1, int(round(test_fraction * n)))
    n_val = max(1, int(round(val_fraction * (n - n_test))))
    n_train = n - n_test - n_val
    if n_train < 1:
        raise ConfigError(f"split fractions leave no training cases for n={n}")
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    cases = []
    for i in range(n):
        kidneys = (
            _place_kidney(rng, extent, 0.28),
            _place_kidney(rng, extent, 0.72),
        )
        abnormalities = ()
        if flags[i]:
            pick = int(rng.integers(2))
            abnormalities = (_place_attached_sphere(rng, kidneys[pick], extent, spacing3),)
        spec = PhantomSpec(
            size=size3,
            spacing=spacing3,
            kidneys=kidneys,
            abnormalities=abnormalities,
            seed=int(rng.integers(2 ** 31)),
        )
        cases.append(CohortCase(f"case_{i:03d}", splits[i], bool(flags[i]), spec))
    return cases


MANIFEST_NAME = "manifest.csv"


def write_cohort(out_dir, cases):
    """Emit <id>_ct.nii / <id>_seg.nii pairs plus the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    for case in cases:
        ct, labels = generate(case.spec)
        write_nifti(ct, os.path.join(out_dir, f"{case.case_id}_ct.nii"))
        write_nifti(labels, os.path.join(out_dir, f"{case.case_id}_seg.nii"))
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "split", "has_abnormality"])
        for case in cases:
            writer.writerow([case.case_id, case.split, int(case.has_abnormality)])


def read_manifest(cohort_dir):
    """Manifest rows as a list of (case_id, split, has_abnormality)."""
    path = os.path.join(cohort_dir, MANIFEST_NAME)
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((rec["case_id"], rec["split"], bool(int(rec["has_abnormality"]))))
    return rows
