"""Per-lesion shape, size and location statistics and stratified accuracy.

Surface area for the sphericity ``pi**(1/3) * (6V)**(2/3) / A`` comes from a
marching-cubes mesh. The binary component is Gaussian-smoothed (sigma = 1
voxel) and the iso-level is chosen so the mesh encloses exactly the voxel
volume ``V``; a raw 0.5 iso-surface of a binary mask keeps the staircase and
overestimates the area of round objects by 5-10 %. Single voxels fall back
to the area of their exposed faces.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, optimize
from skimage import measure

from .errors import DegenerateInputError
from .metrics import boundary, dice
from .volume import VoxelMask

SPHERICAL_THRESHOLD = 0.9
SURFACE_NEAR_MM = 10.0
SIZE_CLASSES = ("<1", "1-5", "5-10", ">10")  # cm^3
SHAPE_CLASSES = ("spherical", "irregular")
LOCATION_CLASSES = ("surface_near", "centered")
_TWENTY_SIX = np.ones((3, 3, 3), dtype=bool)
_SMOOTHING_SIGMA = 1.0


def label_components(mask) -> tuple[np.ndarray, int]:
    """26-connected labels ordered by each component's first voxel in C scan order."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_TWENTY_SIX)
    if n > 1:
        flat = labels.ravel()
        nz = np.flatnonzero(flat)
        first = np.full(n + 1, flat.size)
        np.minimum.at(first, flat[nz], nz)
        order = np.argsort(first[1:], kind="stable") + 1
        remap = np.zeros(n + 1, dtype=labels.dtype)
        remap[order] = np.arange(1, n + 1)
        labels = remap[labels]
    return labels, n


def connected_components(mask) -> list[np.ndarray]:
    labels, n = label_components(mask)
    return [labels == i for i in range(1, n + 1)]


def sphericity_from(volume: float, area: float) -> float:
    return math.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / area


def _mesh_volume(verts: np.ndarray, faces: np.ndarray) -> float:
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    return abs(float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum()) / 6.0)


def face_area(component, spacing) -> float:
    """Area of the exposed voxel faces (closed voxel hull)."""
    m = np.pad(np.asarray(component, dtype=bool), 1)
    sx, sy, sz = spacing
    areas = (sy * sz, sx * sz, sx * sy)
    total = 0.0
    for axis, a in enumerate(areas):
        total += a * int(np.count_nonzero(np.diff(m.astype(np.int8), axis=axis)))
    return total


def surface_area(component, spacing) -> float:
    """Volume-matched smoothed marching-cubes surface area in mm^2."""
    comp = np.asarray(component, dtype=bool)
    count = int(comp.sum())
    if count == 0:
        raise DegenerateInputError("surface area of an empty component")
    if count == 1:
        return face_area(comp, spacing)
    idx = np.argwhere(comp)
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    crop = comp[tuple(slice(a, b) for a, b in zip(lo, hi))]
    field = ndimage.gaussian_filter(np.pad(crop, 4).astype(np.float64), _SMOOTHING_SIGMA)
    target = count * float(np.prod(spacing))

    def excess(level):
        v, f, _, _ = measure.marching_cubes(field, level, spacing=tuple(spacing))
        return _mesh_volume(v, f) - target

    top = float(field.max())
    try:
        level = optimize.brentq(excess, 1e-3 * top, top * (1 - 1e-6), xtol=1e-9 * top)
        verts, faces, _, _ = measure.marching_cubes(field, level, spacing=tuple(spacing))
        return float(measure.mesh_surface_area(verts, faces))
    except (ValueError, RuntimeError):
        return face_area(comp, spacing)


def sphericity(component, spacing) -> float:
    comp = np.asarray(component, dtype=bool)
    volume = int(comp.sum()) * float(np.prod(spacing))
    return sphericity_from(volume, surface_area(comp, spacing))


def surface_distance(component, liver, spacing) -> float:
    """Closest distance (mm) between the lesion outline and the liver surface."""
    liver = np.asarray(liver, dtype=bool)
    comp = np.asarray(component, dtype=bool)
    if not liver.any():
        raise DegenerateInputError("surface distance needs a non-empty liver")
    if (comp & ~liver).any():
        warnings.warn("lesion extends outside the liver region", RuntimeWarning, stacklevel=2)
    dist = ndimage.distance_transform_edt(~boundary(liver), sampling=spacing)
    return float(dist[boundary(comp)].min())


def size_class(volume_mm3: float) -> str:
    cm3 = volume_mm3 / 1000.0
    if cm3 < 1:
        return "<1"
    if cm3 < 5:
        return "1-5"
    if cm3 <= 10:
        return "5-10"
    return ">10"


def shape_class(psi: float) -> str:
    return "spherical" if psi > SPHERICAL_THRESHOLD else "irregular"


def location_class(d_mm: float) -> str:
    return "surface_near" if d_mm < SURFACE_NEAR_MM else "centered"


@dataclass
class LesionStats:
    patient_id: str
    lesion_id: int
    voxel_count: int
    volume_mm3: float
    surface_area_mm2: float
    sphericity: float
    surface_distance_mm: float
    shape_class: str
    size_class: str
    location_class: str
    dice: float = float("nan")


def lesion_stats(ref: VoxelMask, patient_id: str = "") -> list[LesionStats]:
    stats = []
    for i, comp in enumerate(connected_components(ref.lesion), start=1):
        count = int(comp.sum())
        vol = count * ref.voxel_volume
        area = surface_area(comp, ref.spacing)
        psi = sphericity_from(vol, area)
        d = surface_distance(comp, ref.liver, ref.spacing)
        stats.append(LesionStats(patient_id, i, count, vol, area, psi, d,
                                 shape_class(psi), size_class(vol), location_class(d)))
    return stats


def match_lesions(ref_lesion, pred_lesion) -> list[tuple[int, int, float]]:
    """Max-overlap matching of reference to predicted components.

    Returns ``(ref id, matched predicted id or 0, dice)`` per reference lesion;
    unmatched lesions score 0.
    """
    ref_lab, n_ref = label_components(ref_lesion)
    pred_lab, _ = label_components(pred_lesion)
    out = []
    for i in range(1, n_ref + 1):
        comp = ref_lab == i
        hits = pred_lab[comp]
        hits = hits[hits > 0]
        if hits.size == 0:
            out.append((i, 0, 0.0))
            continue
        counts = np.bincount(hits)
        j = int(np.argmax(counts))  # ties -> lowest predicted id
        out.append((i, j, dice(comp, pred_lab == j)))
    return out


def analyze_patient(pred: VoxelMask, ref: VoxelMask, patient_id: str = "") -> list[LesionStats]:
    stats = lesion_stats(ref, patient_id)
    for s, (_, _, d) in zip(stats, match_lesions(ref.lesion, pred.lesion)):
        s.dice = d
    return stats


AXES = {
    "shape": ("shape_class", SHAPE_CLASSES),
    "size": ("size_class", SIZE_CLASSES),
    "location": ("location_class", LOCATION_CLASSES),
}


@dataclass
class Stratum:
    axis: str
    label: str
    n: int
    mean_dice: float | None
    std_dice: float | None


def stratify(stats: list[LesionStats], dices: list[float] | None = None) -> list[Stratum]:
    """Mean +- std per-lesion Dice within each class of the shape, size and location axes."""
    if dices is None:
        dices = [s.dice for s in stats]
    if len(dices) != len(stats):
        raise ValueError(f"{len(stats)} lesions but {len(dices)} Dice values")
    dices = np.asarray(dices, dtype=np.float64)
    out = []
    for axis, (attr, classes) in AXES.items():
        labels = np.array([getattr(s, attr) for s in stats], dtype=object)
        for c in classes:
            sel = dices[labels == c] if len(stats) else dices[:0]
            if sel.size:
                out.append(Stratum(axis, c, int(sel.size), float(sel.mean()), float(sel.std())))
            else:
                out.append(Stratum(axis, c, 0, None, None))
    return out


def format_strata_tsv(strata: list[Stratum]) -> str:
    lines = ["axis\tclass\tn\tmean_dice\tstd_dice"]
    for s in strata:
        m = "" if s.mean_dice is None else f"{s.mean_dice:.6f}"
        sd = "" if s.std_dice is None else f"{s.std_dice:.6f}"
        lines.append(f"{s.axis}\t{s.label}\t{s.n}\t{m}\t{sd}")
    return "\n".join(lines) + "\n"


def format_lesions_tsv(stats: list[LesionStats]) -> str:
    if not stats:
        return "\t".join(LesionStats.__dataclass_fields__) + "\n"
    rows = [asdict(s) for s in stats]
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in r.values()))
    return "\n".join(lines) + "\n"
