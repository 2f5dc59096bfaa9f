"""Overlap and surface-distance metrics, per patient and aggregated per fold.

Conventions: Dice of two empty masks is 1.0 and of one empty mask 0.0; the
Hausdorff distance is undefined when either mask is empty. Surfaces are the
voxels of a mask with at least one 6-neighbour outside it (the volume border
counts as outside); distances are between voxel centres in millimetres.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import UndefinedMetricError
from .validation import check_binary_pair, check_same_shape
from .volume import VoxelMask

_SIX = ndimage.generate_binary_structure(3, 1)


def dice(x, y) -> float:
    x, y = check_binary_pair(x, y)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / total


def boundary(mask) -> np.ndarray:
    """Voxels of ``mask`` that expose at least one face (6-connectivity)."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return mask & ~interior


def surface_points(mask, spacing) -> np.ndarray:
    return np.argwhere(boundary(mask)) * np.asarray(spacing, dtype=np.float64)


def _sq_dist(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Squared distance with the difference taken before scaling and a fixed summation order."""
    d = (a - b) * np.asarray(spacing, dtype=np.float64)
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _directed(x_pts: np.ndarray, y_pts: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    sp = np.asarray(spacing, dtype=np.float64)
    k = min(8, len(y_pts))
    _, idx = cKDTree(y_pts * sp).query(x_pts * sp, k=k)
    idx = idx.reshape(len(x_pts), k)
    # the tree only picks candidates; near-ties are settled with the exact expression
    sq = _sq_dist(x_pts[:, None, :], y_pts[idx], sp).min(axis=1)
    if k < len(y_pts):
        kth = _sq_dist(x_pts, y_pts[idx[:, -1]], sp)
        for i in np.flatnonzero(kth <= sq * (1 + 1e-9) + 1e-300):
            sq[i] = _sq_dist(x_pts[i], y_pts, sp).min()
    return math.sqrt(float(sq.max()))


def directed_hausdorff(x_pts: np.ndarray, y_pts: np.ndarray) -> float:
    """max over x of the distance to its nearest y (points already in mm)."""
    return _directed(np.asarray(x_pts, dtype=np.float64), np.asarray(y_pts, dtype=np.float64))


def hausdorff(x, y, spacing=(1.0, 1.0, 1.0)) -> float:
    x, y = check_binary_pair(x, y)
    if not x.any() or not y.any():
        raise UndefinedMetricError("Hausdorff distance is undefined for an empty mask")
    xi, yi = np.argwhere(boundary(x)).astype(np.float64), np.argwhere(boundary(y)).astype(np.float64)
    return max(_directed(xi, yi, spacing), _directed(yi, xi, spacing))


def false_positive_rate(pred, ref) -> float:
    """FP / (FP + TP) over the given binary lesion masks; 0 when nothing is predicted."""
    pred, ref = check_binary_pair(pred, ref)
    tp = int(np.logical_and(pred, ref).sum())
    fp = int(np.logical_and(pred, ~ref).sum())
    return fp / (fp + tp) if fp + tp else 0.0


@dataclass
class MetricReport:
    patient_id: str
    dsc_liver: float
    dsc_lesion: float
    hd_liver: float
    hd_lesion: float
    fp_rate: float

    def as_row(self) -> dict:
        return asdict(self)


def _hd_or_nan(x, y, spacing) -> float:
    try:
        return hausdorff(x, y, spacing)
    except UndefinedMetricError:
        return float("nan")


def patient_report(pred: VoxelMask, ref: VoxelMask, patient_id: str = "") -> MetricReport:
    """Liver counts lesion voxels as liver; undefined distances are reported as NaN."""
    check_same_shape(pred.shape, ref.shape)
    if not np.allclose(pred.spacing, ref.spacing):
        raise ValueError(f"spacing mismatch {pred.spacing} vs {ref.spacing}")
    sp = ref.spacing
    return MetricReport(
        patient_id=patient_id,
        dsc_liver=dice(pred.liver, ref.liver),
        dsc_lesion=dice(pred.lesion, ref.lesion),
        hd_liver=_hd_or_nan(pred.liver, ref.liver, sp),
        hd_lesion=_hd_or_nan(pred.lesion, ref.lesion, sp),
        fp_rate=false_positive_rate(pred.lesion, ref.lesion),
    )


METRIC_FIELDS = ("dsc_liver", "dsc_lesion", "hd_liver", "hd_lesion", "fp_rate")


def summarize(reports: list[MetricReport]) -> dict:
    """Mean and (population) std per metric, ignoring undefined (NaN) entries."""
    out = {}
    for f in METRIC_FIELDS:
        vals = np.array([getattr(r, f) for r in reports], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        out[f] = (float(vals.mean()), float(vals.std()), int(vals.size)) if vals.size else (float("nan"), float("nan"), 0)
    return out


def format_reports_tsv(reports: list[MetricReport], fold_of: dict | None = None) -> str:
    head = ["fold", "patient_id", *METRIC_FIELDS]
    lines = ["\t".join(head)]
    for r in reports:
        fold = "" if fold_of is None else str(fold_of.get(r.patient_id, ""))
        lines.append("\t".join([fold, r.patient_id] + [f"{getattr(r, f):.6f}" for f in METRIC_FIELDS]))
    return "\n".join(lines) + "\n"


def format_summary(per_fold: dict, title: str = "SWTR-Unet") -> str:
    """Table-style text: one row per fold plus the overall mean +- std."""
    def cell(stat, pct):
        m, s, n = stat
        if n == 0:
            return "n/a"
        return f"{100 * m:.1f} +- {100 * s:.1f} %" if pct else f"{m:.2f} +- {s:.2f} mm"

    lines = [f"{'Network':<12}{'fold':<8}{'DSC liver':<20}{'DSC lesion':<20}{'HD liver':<20}{'HD lesion':<20}{'FP rate':<20}"]
    all_reports = [r for reports in per_fold.values() for r in reports]
    for fold, reports in per_fold.items() if len(per_fold) > 1 else ():
        s = summarize(reports)
        lines.append(f"{title:<12}{str(fold):<8}{cell(s['dsc_liver'], 1):<20}{cell(s['dsc_lesion'], 1):<20}"
                     f"{cell(s['hd_liver'], 0):<20}{cell(s['hd_lesion'], 0):<20}{cell(s['fp_rate'], 1):<20}")
    s = summarize(all_reports)
    lines.append(f"{title:<12}{'all':<8}{cell(s['dsc_liver'], 1):<20}{cell(s['dsc_lesion'], 1):<20}"
                 f"{cell(s['hd_liver'], 0):<20}{cell(s['hd_lesion'], 0):<20}{cell(s['fp_rate'], 1):<20}")
    return "\n".join(lines) + "\n"
