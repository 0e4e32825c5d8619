"""Dice scoring, rank statistics, bootstrap summaries, cohort evaluation.

Dice uses the volumetric overlap form 2|X n Y| / (|X| + |Y|) with the
conventions both-empty = 1.0 and one-empty = 0.0. The Mann-Whitney U
statistic is reported for the first sample with midrank ties; the
two-tailed p-value is exact (full enumeration of label assignments)
for combined sizes up to 16 and a tie-corrected normal approximation
beyond that. Confidence intervals come from a seeded percentile
bootstrap, so summaries are bitwise reproducible.
"""

import csv
import math
import os
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.stats import rankdata

from .errors import AlignmentError, MissingCase, StatError
from .inference import split_left_right
from .nifti import read_nifti
from .volume import Volume, check_same_geometry, merge_format1

EXACT_LIMIT = 16


def dice(x, y):
    """Overlap score of two binary masks (Volumes or arrays)."""
    if isinstance(x, Volume) and isinstance(y, Volume):
        check_same_geometry(x, y)
        a, b = x.data != 0, y.data != 0
    else:
        a = np.asarray(x.data if isinstance(x, Volume) else x) != 0
        b = np.asarray(y.data if isinstance(y, Volume) else y) != 0
        if a.shape != b.shape:
            raise AlignmentError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int((a & b).sum())
    return 2.0 * inter / (na + nb)


# -------------------------------------------------------- Mann-Whitney


def _u_first(ranks, n1):
    return float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)


def mann_whitney_u(a, b):
    """U for the first sample plus the two-tailed p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise StatError("both samples must be nonempty")
    n1, n2 = a.size, b.size
    combined = np.concatenate([a, b])
    ranks = rankdata(combined)
    u = _u_first(ranks, n1)
    n = n1 + n2
    if n <= EXACT_LIMIT:
        sorted_ranks = rankdata(np.sort(combined))
        lo = hi = total = 0
        for pick in combinations(range(n), n1):
            total += 1
            u_k = float(sorted_ranks[list(pick)].sum() - n1 * (n1 + 1) / 2.0)
            if u_k <= u + 1e-12:
                lo += 1
            if u_k >= u - 1e-12:
                hi += 1
        p = min(1.0, 2.0 * min(lo, hi) / total)
        return u, p
    mu = n1 * n2 / 2.0
    _, counts = np.unique(combined, return_counts=True)
    tie_term = (counts.astype(np.float64) ** 3 - counts).sum()
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0.0:
        return u, 1.0
    z = (u - mu) / math.sqrt(var)
    return u, math.erfc(abs(z) / math.sqrt(2.0))


# ------------------------------------------------------------ summaries


@dataclass(frozen=True)
class SummaryRow:
    metric: str
    n: int
    mean: float
    sd: float
    ci_lo: float
    ci_hi: float


def summarize(scores, metric="dice", ci_level=0.95, resamples=10000, seed=0):
    """Mean, sample SD and a seeded percentile-bootstrap CI."""
    values = np.asarray(list(scores), dtype=np.float64)
    if values.size == 0:
        raise StatError("cannot summarize an empty score list")
    mean = float(values.mean())
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(resamples, values.size))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - ci_level) / 2.0
    lo, hi = np.percentile(means, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return SummaryRow(metric, int(values.size), mean, sd, float(lo), float(hi))


# ---------------------------------------------------------- case reports


METRIC_COLUMNS = ("parenchyma", "abnormality", "merged", "left", "right")


@dataclass(frozen=True)
class CaseReport:
    case_id: str
    parenchyma: float
    abnormality: float  # None when not applicable
    merged: float
    left: float
    right: float
    volume_pred_mm3: float  # merged foreground volume of the prediction
    volume_ref_mm3: float

    def value(self, column):
        return getattr(self, column)


def score_case(case_id, pred: Volume, ref: Volume, empty_abnormality="exclude"):
    """All Dice columns for one prediction/reference pair."""
    check_same_geometry(pred, ref)
    abn = dice(pred.data == 2, ref.data == 2)
    if empty_abnormality == "exclude" and not (ref.data == 2).any():
        abn = None
    pred_merged = merge_format1(pred)
    ref_merged = merge_format1(ref)
    pred_lr = split_left_right(pred_merged)
    ref_lr = split_left_right(ref_merged)
    voxel_mm3 = float(np.prod(pred.spacing))
    return CaseReport(
        case_id=case_id,
        parenchyma=dice(pred.data == 1, ref.data == 1),
        abnormality=abn,
        merged=dice(pred_merged, ref_merged),
        left=dice(pred_lr[0], ref_lr[0]),
        right=dice(pred_lr[1], ref_lr[1]),
        volume_pred_mm3=float(pred_merged.data.sum()) * voxel_mm3,
        volume_ref_mm3=float(ref_merged.data.sum()) * voxel_mm3,
    )


def _seg_cases(directory):
    suffix = "_seg.nii"
    return {
        name[: -len(suffix)]: os.path.join(directory, name)
        for name in sorted(os.listdir(directory))
        if name.endswith(suffix)
    }


def evaluate_cohort(pred_dir, ref_dir, empty_abnormality="exclude",
                    resamples=10000, seed=0):
    """Score every matched case and aggregate per metric.

    Returns (case reports, {metric: SummaryRow}). Case ids are the
    <id>_seg.nii stems; both directories must contain the same set.
    """
    preds = _seg_cases(pred_dir)
    refs = _seg_cases(ref_dir)
    if not refs:
        raise MissingCase(f"no *_seg.nii cases under {ref_dir}")
    for case_id in sorted(set(preds) ^ set(refs)):
        where = "prediction" if case_id in refs else "reference"
        raise MissingCase(f"case {case_id} has no {where} counterpart")
    reports = []
    for case_id in sorted(refs):
        pred = read_nifti(preds[case_id], kind="labels")
        ref = read_nifti(refs[case_id], kind="labels")
        reports.append(score_case(case_id, pred, ref, empty_abnormality))
    summary = {}
    for col in METRIC_COLUMNS:
        values = [r.value(col) for r in reports if r.value(col) is not None]
        if values:
            summary[col] = summarize(values, col, resamples=resamples, seed=seed)
    return reports, summary


def compare_systems(reports_a, reports_b):
    """Per-column Mann-Whitney U of two systems' case scores."""
    out = {}
    for col in METRIC_COLUMNS:
        a = [r.value(col) for r in reports_a if r.value(col) is not None]
        b = [r.value(col) for r in reports_b if r.value(col) is not None]
        if a and b:
            out[col] = mann_whitney_u(a, b)
    return out


# --------------------------------------------------------------- reports


def write_case_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("case_id",) + METRIC_COLUMNS + ("volume_pred_mm3", "volume_ref_mm3"))
        for r in reports:
            row = [r.case_id]
            for col in METRIC_COLUMNS:
                v = r.value(col)
                row.append("" if v is None else f"{v:.6f}")
            row.append(f"{r.volume_pred_mm3:.3f}")
            row.append(f"{r.volume_ref_mm3:.3f}")
            writer.writerow(row)


def format_summary(summary, p_values=None):
    """Human-readable table of per-metric mean, SD and CI."""
    lines = [f"{'metric':<12} {'n':>4} {'mean':>8} {'sd':>8} {'95% CI':>19}"]
    for col in METRIC_COLUMNS:
        row = summary.get(col)
        if row is None:
            lines.append(f"{col:<12} {'-':>4} {'n/a':>8}")
            continue
        ci = f"[{row.ci_lo:.3f}, {row.ci_hi:.3f}]"
        text = f"{col:<12} {row.n:>4} {row.mean:>8.4f} {row.sd:>8.4f} {ci:>19}"
        if p_values and col in p_values:
            text += f"  p={p_values[col][1]:.4f}"
        lines.append(text)
    return "\n".join(lines)
