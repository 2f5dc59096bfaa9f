"""Offline augmentation: each volume is expanded into ``copies`` randomized variants.

Geometric transforms (flips, in-plane rotation, translation) are applied
identically to image (bilinear) and mask (nearest); gamma and Gaussian noise
touch the image only. Order: affine -> gamma -> noise. Every (patient, copy)
pair draws from its own RNG stream derived from the master seed, so the
result does not depend on generation order. With ``include_original`` copy 0
of every volume is the untouched input.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .volume import VolumeImage, VoxelMask, write_volume


@dataclass
class AugmentSpec:
    flip_overall_p: float = 0.6
    flip_per_axis_p: float = 0.5
    rotation_deg: tuple = (-20.0, 20.0)
    translation_vox: tuple = (32, 32, 16)
    gamma_p: float = 0.5
    gamma_range: tuple = (0.7, 1.5)
    noise_p: float = 0.5
    noise_sigma_range: tuple = (0.0, 0.05)
    copies: int = 20
    seed: int = 0
    fill_value: float = 0.0
    include_original: bool = False

    def __post_init__(self):
        for name in ("flip_overall_p", "flip_per_axis_p", "gamma_p", "noise_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"AugmentSpec.{name}={p} is not a probability")
        for name in ("rotation_deg", "gamma_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"AugmentSpec.{name}={getattr(self, name)} is not ordered")
        if self.gamma_range[0] <= 0 or self.noise_sigma_range[0] < 0:
            raise ConfigError("gamma must be positive and noise sigma non-negative")
        if len(self.translation_vox) != 3 or min(self.translation_vox) < 0:
            raise ConfigError("translation_vox needs three non-negative extents")
        if self.copies < 1:
            raise ConfigError("copies must be >= 1")

    @classmethod
    def identity(cls, **kw) -> "AugmentSpec":
        base = dict(flip_overall_p=0.0, rotation_deg=(0.0, 0.0), translation_vox=(0, 0, 0),
                    gamma_p=0.0, noise_p=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class AugmentParams:
    flip_axes: tuple = ()
    angle_deg: float = 0.0
    shift: tuple = (0, 0, 0)
    gamma: float | None = None
    noise_sigma: float | None = None
    flip_event: bool = False  # the overall flip draw fired (it may still select no axis)


def sample_params(spec: AugmentSpec, rng: np.random.Generator) -> AugmentParams:
    flip_axes = ()
    flip_event = bool(rng.random() < spec.flip_overall_p)
    if flip_event:
        flip_axes = tuple(ax for ax in range(3) if rng.random() < spec.flip_per_axis_p)
    angle = float(rng.uniform(*spec.rotation_deg)) if spec.rotation_deg[1] > spec.rotation_deg[0] else float(spec.rotation_deg[0])
    shift = tuple(int(rng.integers(-t, t + 1)) for t in spec.translation_vox)
    gamma = float(rng.uniform(*spec.gamma_range)) if rng.random() < spec.gamma_p else None
    sigma = float(rng.uniform(*spec.noise_sigma_range)) if rng.random() < spec.noise_p else None
    return AugmentParams(flip_axes, angle, shift, gamma, sigma, flip_event)


def _shift_exact(a: np.ndarray, shift, fill) -> np.ndarray:
    out = np.full_like(a, fill)
    src, dst = [], []
    for n, s in zip(a.shape, shift):
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = a[tuple(src)]
    return out


def _warp(a: np.ndarray, angle_deg: float, shift, order: int, fill) -> np.ndarray:
    if angle_deg == 0.0:
        return _shift_exact(a, shift, fill)
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th), 0.0], [np.sin(th), np.cos(th), 0.0], [0.0, 0.0, 1.0]])
    centre = np.array([(a.shape[0] - 1) / 2.0, (a.shape[1] - 1) / 2.0, 0.0])
    inv = rot.T
    offset = centre - inv @ (centre + np.asarray(shift, dtype=float))
    return ndimage.affine_transform(a, inv, offset=offset, order=order, mode="constant", cval=fill)


def apply_augmentation(v: VolumeImage, m: VoxelMask, p: AugmentParams, rng: np.random.Generator,
                       fill_value: float = 0.0) -> tuple[VolumeImage, VoxelMask]:
    img = v.data.astype(np.float64)
    lab = m.labels
    if p.flip_axes:
        img = np.flip(img, p.flip_axes)
        lab = np.flip(lab, p.flip_axes)
    if p.angle_deg != 0.0 or any(p.shift):
        img = _warp(img, p.angle_deg, p.shift, 1, fill_value)
        lab = _warp(lab, p.angle_deg, p.shift, 0, 0)
    if p.gamma is not None:
        lo, hi = img.min(), img.max()
        if hi > lo:
            img = lo + (hi - lo) * ((img - lo) / (hi - lo)) ** p.gamma
    if p.noise_sigma is not None and p.noise_sigma > 0:
        span = img.max() - img.min()
        img = img + rng.normal(0.0, p.noise_sigma * (span if span > 0 else 1.0), img.shape)
    return v.replace(data=np.ascontiguousarray(img)), VoxelMask(np.ascontiguousarray(lab), m.spacing)


def copy_rng(seed: int, patient_id, copy: int) -> np.random.Generator:
    key = zlib.crc32(str(patient_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, int(copy)]))


def augment_volume(v: VolumeImage, m: VoxelMask, spec: AugmentSpec,
                   rng: np.random.Generator) -> tuple[VolumeImage, VoxelMask]:
    if v.shape != m.shape:
        raise ValueError(f"image {v.shape} and mask {m.shape} differ")
    return apply_augmentation(v, m, sample_params(spec, rng), rng, spec.fill_value)


@dataclass
class Case:
    patient_id: str
    image: VolumeImage
    mask: VoxelMask


def as_cases(volumes) -> list[Case]:
    cases = []
    for i, item in enumerate(volumes):
        if isinstance(item, Case):
            cases.append(item)
        elif len(item) == 3:
            cases.append(Case(str(item[0]), item[1], item[2]))
        else:
            cases.append(Case(f"p{i:03d}", item[0], item[1]))
    return cases


@dataclass
class AugmentedSet:
    """Lazily generated ``copies x cases`` augmented volumes with a slice index."""

    cases: list
    spec: AugmentSpec

    def __len__(self) -> int:
        return len(self.cases) * self.spec.copies

    def provenance(self, i: int) -> tuple[str, int]:
        case = self.cases[i // self.spec.copies]
        return case.patient_id, i % self.spec.copies

    def __getitem__(self, i: int) -> tuple[str, int, VolumeImage, VoxelMask]:
        if not 0 <= i < len(self):
            raise IndexError(i)
        case = self.cases[i // self.spec.copies]
        copy = i % self.spec.copies
        if copy == 0 and self.spec.include_original:
            return case.patient_id, copy, case.image, case.mask
        v, m = augment_volume(case.image, case.mask, self.spec, copy_rng(self.spec.seed, case.patient_id, copy))
        return case.patient_id, copy, v, m

    def __iter__(self) -> Iterator:
        return (self[i] for i in range(len(self)))

    def slice_index(self) -> list[tuple[str, int, int]]:
        """(patient id, copy id, slice id) for every axial slice of every copy."""
        return [(c.patient_id, copy, z)
                for c in self.cases for copy in range(self.spec.copies) for z in range(c.image.shape[2])]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for pid, copy, v, m in self:
            h.update(f"{pid}/{copy}".encode())
            h.update(v.data.tobytes())
            h.update(m.labels.tobytes())
        return h.hexdigest()

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = ["patient_id\tcopy\tslices\timage\tmask"]
        for pid, copy, v, m in self:
            stem = f"{pid}_c{copy:03d}"
            write_volume(directory / f"{stem}_img.raw", v)
            write_volume(directory / f"{stem}_mask.raw", m)
            lines.append(f"{pid}\t{copy}\t{v.shape[2]}\t{stem}_img.raw\t{stem}_mask.raw")
        manifest = directory / "augmented_manifest.tsv"
        manifest.write_text("\n".join(lines) + "\n")
        return manifest


def augment_dataset(volumes: Sequence, spec: AugmentSpec) -> AugmentedSet:
    cases = as_cases(volumes)
    if not cases:
        raise ValueError("augment_dataset needs at least one volume")
    return AugmentedSet(cases, spec)
