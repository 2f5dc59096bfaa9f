"""Deterministic synthetic abdominal phantoms: body, liver with a perturbed
surface, and spherical or lobulated lesions inside the liver.

Geometry of the body and liver is given as fractions of the field of view so a
spec can be rescaled by changing ``dims``/``spacing`` alone; lesion radii are in
millimetres. The radius of a lobulated lesion is its circumscribed radius, so
lobulated lesions are never larger than a sphere drawn with the same radius.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError
from .lesions import SPHERICAL_THRESHOLD, sphericity
from .volume import LESION, LIVER, VolumeImage, VoxelMask, write_volume

_TWENTY_SIX = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (224, 224, 32)
    spacing: tuple = (1.5, 1.5, 5.0)
    body_axes: tuple = (0.46, 0.40)            # in-plane semi-axes, fraction of FOV
    liver_center: tuple = (0.40, 0.45, 0.5)     # fraction of FOV
    liver_axes: tuple = (0.26, 0.22, 0.42)      # semi-axes, fraction of FOV
    liver_perturbation: float = 0.08
    lesion_count: tuple = (1, 4)
    lesion_radius_mm: tuple = (4.0, 25.0)
    lobulated_fraction: float = 0.4
    background_mean: float = 0.0
    body_mean: float = 0.3
    liver_mean: float = 0.55
    lesion_mean: float = 0.85
    modulation: float = 0.1
    noise_sigma: float = 0.05
    cnr_floor: float = 2.0
    modality: str = "MR"
    max_retries: int = 200
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ConfigError(f"PhantomSpec.dims {self.dims} needs three extents >= 4")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"PhantomSpec.spacing {self.spacing} must be positive")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"PhantomSpec.lesion_count {self.lesion_count} invalid")
        rlo, rhi = self.lesion_radius_mm
        if rlo <= 0 or rhi < rlo:
            raise ConfigError(f"PhantomSpec.lesion_radius_mm {self.lesion_radius_mm} invalid")
        if not 0.0 <= self.lobulated_fraction <= 1.0:
            raise ConfigError("PhantomSpec.lobulated_fraction must be a probability")
        if self.lesion_mean == self.liver_mean:
            raise ConfigError("lesion/liver contrast must be non-zero")
        if self.noise_sigma < 0 or not 0 <= self.liver_perturbation < 1:
            raise ConfigError("noise_sigma must be >= 0 and liver_perturbation in [0, 1)")
        if self.modality not in ("MR", "CT"):
            raise ConfigError(f"PhantomSpec.modality {self.modality!r} must be MR or CT")

    def replace(self, **changes) -> "PhantomSpec":
        return dataclasses.replace(self, **changes)

    @property
    def fov(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * np.asarray(self.spacing, dtype=float)


@dataclass
class LesionRecord:
    center_mm: tuple
    radius_mm: float
    shape: str  # "spherical" | "lobulated"
    voxels: int


def _coords(spec: PhantomSpec):
    """Voxel-centre coordinates in mm, one broadcastable array per axis."""
    return [(np.arange(n) * s).reshape([-1 if i == a else 1 for i in range(3)])
            for a, (n, s) in enumerate(zip(spec.dims, spec.spacing))]


def _smooth_field(rng: np.random.Generator, dims, sigma_vox) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma_vox, mode="wrap")
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def _ellipsoid(coords, center, axes, rot=None) -> np.ndarray:
    d = [c - x0 for c, x0 in zip(coords, center)]
    if rot is not None:
        d = [rot[i, 0] * d[0] + rot[i, 1] * d[1] + rot[i, 2] * d[2] for i in range(3)]
    return sum((di / a) ** 2 for di, a in zip(d, axes))


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _lesion_shape(rng, coords, center, radius, lobulated: bool) -> np.ndarray:
    if not lobulated:
        return _ellipsoid(coords, center, (radius,) * 3) <= 1.0
    # a core plus 1-3 lobes, all within the circumscribed sphere of ``radius``
    core = 0.4 * radius
    mask = _ellipsoid(coords, center, (core,) * 3) <= 1.0
    for _ in range(int(rng.integers(1, 4))):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        lobe = radius * rng.uniform(0.32, 0.42)
        offset = radius - lobe
        axes = lobe * np.array([1.0, rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0)])
        c = np.asarray(center) + offset * direction
        mask |= _ellipsoid(coords, c, axes, _random_rotation(rng)) <= 1.0
    return mask


def contrast_to_noise(image: VolumeImage, mask: VoxelMask) -> float:
    """|mean(lesion) - mean(liver parenchyma)| / std(liver parenchyma)."""
    les = image.data[mask.labels == LESION]
    liv = image.data[mask.labels == LIVER]
    if les.size == 0 or liv.size < 2:
        return float("inf")
    sd = float(liv.std())
    return abs(float(les.mean()) - float(liv.mean())) / sd if sd > 0 else float("inf")


def _place_lesions(spec: PhantomSpec, rng, coords, liver: np.ndarray):
    sp = np.asarray(spec.spacing, dtype=float)
    depth = ndimage.distance_transform_edt(np.pad(liver, 1), sampling=sp)[1:-1, 1:-1, 1:-1]
    inner = ndimage.binary_erosion(liver, structure=_TWENTY_SIX, border_value=0)
    n = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    labels = np.zeros(spec.dims, dtype=np.uint8)
    taken = np.zeros(spec.dims, dtype=bool)
    records = []
    retries = 0
    while len(records) < n:
        if retries > spec.max_retries:
            raise GenerationError(f"could not place lesion {len(records) + 1} of {n} "
                                  f"after {spec.max_retries} retries (seed {spec.seed})")
        retries += 1
        radius = float(rng.uniform(*spec.lesion_radius_mm))
        lobulated = bool(rng.random() < spec.lobulated_fraction)
        candidates = np.flatnonzero((depth > radius + sp.max()) & ~taken)
        if candidates.size == 0:
            continue
        idx = np.unravel_index(candidates[rng.integers(candidates.size)], spec.dims)
        center = tuple(float(i) * s for i, s in zip(idx, sp))
        shape = _lesion_shape(rng, coords, center, radius, lobulated)
        if not shape.any() or (shape & ~inner).any() or (shape & taken).any():
            continue
        psi = sphericity(shape, spec.spacing)
        if (psi > SPHERICAL_THRESHOLD) == lobulated:
            continue  # keep the two shape arms on their side of the threshold
        labels[shape] = LESION
        taken |= ndimage.binary_dilation(shape, structure=_TWENTY_SIX)
        records.append(LesionRecord(center, radius, "lobulated" if lobulated else "spherical", int(shape.sum())))
    return labels, records


def generate_with_records(spec: PhantomSpec) -> tuple[VolumeImage, VoxelMask, list]:
    rng = np.random.default_rng(spec.seed)
    coords = _coords(spec)
    fov = spec.fov
    body = _ellipsoid(coords[:2], fov[:2] / 2, np.asarray(spec.body_axes) * fov[:2]) <= 1.0
    body = np.broadcast_to(body, spec.dims)
    rho = _ellipsoid(coords, np.asarray(spec.liver_center) * fov, np.asarray(spec.liver_axes) * fov)
    bumps = _smooth_field(rng, spec.dims, np.asarray(spec.dims) / 6.0)
    liver = (np.sqrt(rho) < 1.0 + spec.liver_perturbation * bumps) & body
    if not liver.any():
        raise GenerationError("liver ellipsoid falls outside the body")
    labels, records = _place_lesions(spec, rng, coords, liver)
    labels[liver & (labels == 0)] = LIVER

    means = np.where(body, spec.body_mean, spec.background_mean)
    means = np.where(labels == LIVER, spec.liver_mean, means)
    means = np.where(labels == LESION, spec.lesion_mean, means)
    modulation = 1.0 + spec.modulation * _smooth_field(rng, spec.dims, np.asarray(spec.dims) / 4.0)
    data = means * modulation + rng.normal(0.0, spec.noise_sigma, spec.dims)
    image = VolumeImage(data.astype(np.float32), spec.spacing, spec.modality)
    mask = VoxelMask(labels, spec.spacing)
    cnr = contrast_to_noise(image, mask)
    if cnr < spec.cnr_floor:
        raise GenerationError(f"lesion contrast-to-noise {cnr:.2f} below floor {spec.cnr_floor}")
    return image, mask, records


def generate(spec: PhantomSpec) -> tuple[VolumeImage, VoxelMask]:
    image, mask, _ = generate_with_records(spec)
    return image, mask


def patient_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def patient_id(index: int) -> str:
    return f"ph{index:03d}"


def generate_patient(spec: PhantomSpec, index: int):
    """Patient ``index`` of the cohort seeded by ``spec.seed``; independent of the others."""
    image, mask = generate(spec.replace(seed=patient_seed(spec.seed, index)))
    return patient_id(index), image, mask


def generate_cohort(n: int, spec: PhantomSpec) -> list[tuple[str, VolumeImage, VoxelMask]]:
    if n < 0:
        raise ConfigError("cohort size must be >= 0")
    return [generate_patient(spec, i) for i in range(n)]


def write_cohort(directory, cohort, spec: PhantomSpec | None = None) -> Path:
    """Raw volume/mask pairs plus ``cohort_manifest.tsv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["patient_id\tseed\timage\tmask\tlesion_voxels\tliver_voxels"]
    for i, (pid, image, mask) in enumerate(cohort):
        write_volume(directory / f"{pid}_img.raw", image)
        write_volume(directory / f"{pid}_mask.raw", mask)
        seed = "" if spec is None else str(patient_seed(spec.seed, i))
        lines.append(f"{pid}\t{seed}\t{pid}_img.raw\t{pid}_mask.raw\t"
                     f"{int(mask.lesion.sum())}\t{int(mask.liver.sum())}")
    manifest = directory / "cohort_manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_cohort(directory) -> list[tuple[str, VolumeImage, VoxelMask]]:
    from .volume import read_volume

    directory = Path(directory)
    manifest = directory / "cohort_manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no cohort manifest in {directory}")
    rows = manifest.read_text().splitlines()[1:]
    out = []
    for row in rows:
        if not row.strip():
            continue
        pid, _, img, msk, *_ = row.split("\t")
        out.append((pid, read_volume(directory / img), read_volume(directory / msk)))
    return out


def equivalent_radius_mm(voxels: int, spacing) -> float:
    return (3.0 * voxels * float(np.prod(spacing)) / (4.0 * math.pi)) ** (1.0 / 3.0)
