"""Intensity preprocessing and in-plane resampling for MR and CT volumes.

MR chain: adaptive histogram equalization -> resample -> z-score -> N4 (no-op).
CT chain: HU window [-100, 400] + 5th/95th foreground percentile scaling ->
adaptive histogram equalization -> resample. HU clipping has to run first for
CT because equalization discards the Hounsfield scale.

Masks only ever go through :func:`resample_mask`.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from skimage import exposure
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline

from .errors import ConfigError, DegenerateInputError
from .validation import check_volumes
from .volume import VolumeImage, VoxelMask

HU_WINDOW = (-100.0, 400.0)
FOREGROUND_PERCENTILES = (5.0, 95.0)


def adaptive_hist_eq(v: VolumeImage, tiles=(8, 8), clip_limit: float = 0.01) -> VolumeImage:
    """Contrast-limited adaptive equalization, slice by slice with shared settings."""
    if not 0 < clip_limit <= 1:
        raise ConfigError(f"clip_limit must lie in (0, 1], got {clip_limit}")
    tiles = tuple(int(t) for t in np.broadcast_to(tiles, (2,)))
    nx, ny, _ = v.shape
    if min(tiles) < 1 or tiles[0] > nx // 2 or tiles[1] > ny // 2:
        raise ConfigError(f"tiles {tiles} degenerate for {nx}x{ny} slices (need >= 2 pixels per tile)")
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi <= lo:
        return v.replace(data=np.zeros_like(v.data))
    scaled = (v.data.astype(np.float64) - lo) / (hi - lo)
    kernel = (-(-nx // tiles[0]), -(-ny // tiles[1]))
    out = np.empty_like(scaled)
    for k in range(v.shape[2]):
        out[..., k] = exposure.equalize_adapthist(scaled[..., k], kernel_size=kernel, clip_limit=clip_limit)
    return v.replace(data=np.clip(out, 0.0, 1.0))


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    # pixel centres aligned (align_corners=False)
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _resample(arr: np.ndarray, target_hw, order: int) -> np.ndarray:
    nx, ny, nz = arr.shape
    tx, ty = (int(t) for t in target_hw)
    if tx < 1 or ty < 1:
        raise ConfigError(f"target extents must be >= 1, got {target_hw}")
    if (tx, ty) == (nx, ny):
        return arr.copy()
    cx, cy, cz = np.meshgrid(_source_coords(nx, tx), _source_coords(ny, ty), np.arange(nz), indexing="ij")
    return ndimage.map_coordinates(arr, [cx, cy, cz], order=order, mode="nearest")


def _resampled_spacing(spacing, shape, target_hw):
    sx, sy, sz = spacing
    return (sx * shape[0] / target_hw[0], sy * shape[1] / target_hw[1], sz)


def resample(v: VolumeImage, target_hw=(224, 224)) -> VolumeImage:
    """Bilinear in-plane resampling; slice count is unchanged."""
    data = _resample(v.data.astype(np.float64), target_hw, order=1)
    return v.replace(data=data, spacing=_resampled_spacing(v.spacing, v.shape, target_hw))


def resample_mask(m: VoxelMask, target_hw=(224, 224)) -> VoxelMask:
    """Nearest-neighbour counterpart of :func:`resample` for label volumes."""
    labels = _resample(m.labels, target_hw, order=0)
    return VoxelMask(labels, _resampled_spacing(m.spacing, m.shape, target_hw))


def zscore_normalize(v: VolumeImage) -> VolumeImage:
    data = v.data.astype(np.float64)
    std = data.std()
    if not std > 0:
        raise DegenerateInputError("z-score normalization of a constant volume")
    return v.replace(data=(data - data.mean()) / std)


def ct_window_normalize(v: VolumeImage) -> VolumeImage:
    """Clip to the HU window, then map foreground p5..p95 onto [0, 1]."""
    if v.modality != "CT":
        raise ConfigError(f"HU windowing needs a CT volume, got {v.modality}")
    clipped = np.clip(v.data.astype(np.float64), *HU_WINDOW)
    fg = clipped[clipped > HU_WINDOW[0]]
    if fg.size == 0:
        raise DegenerateInputError("CT volume has no foreground above the lower HU bound")
    p_lo, p_hi = np.percentile(fg, FOREGROUND_PERCENTILES)
    if not p_hi > p_lo:
        raise DegenerateInputError(f"foreground percentiles coincide ({p_lo}); cannot normalize")
    return v.replace(data=np.clip((clipped - p_lo) / (p_hi - p_lo), 0.0, 1.0))


def n4_bias_correction(v: VolumeImage) -> VolumeImage:
    """Placeholder stage: bias-field correction is delegated to external tools."""
    return v


def preprocess_volume(v: VolumeImage, target_hw=(224, 224), tiles=(8, 8), clip_limit=0.01) -> VolumeImage:
    if v.modality == "CT":
        v = ct_window_normalize(v)
        v = adaptive_hist_eq(v, tiles, clip_limit)
        return resample(v, target_hw)
    v = adaptive_hist_eq(v, tiles, clip_limit)
    v = resample(v, target_hw)
    v = zscore_normalize(v)
    return n4_bias_correction(v)


def preprocess_pair(v: VolumeImage, m: VoxelMask, target_hw=(224, 224), tiles=(8, 8),
                    clip_limit=0.01) -> tuple[VolumeImage, VoxelMask]:
    return preprocess_volume(v, target_hw, tiles, clip_limit), resample_mask(m, target_hw)


# -- estimator wrappers ---------------------------------------------------------

class _VolumeTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer over a list of volumes."""

    def fit(self, X, y=None):
        check_volumes(X)
        return self

    def transform(self, X):
        return [self._apply(v) for v in check_volumes(X)]

    def _apply(self, v):  # pragma: no cover - overridden
        raise NotImplementedError


class AdaptiveHistEq(_VolumeTransformer):
    def __init__(self, tiles=(8, 8), clip_limit=0.01):
        self.tiles = tiles
        self.clip_limit = clip_limit

    def _apply(self, v):
        return adaptive_hist_eq(v, self.tiles, self.clip_limit)


class Resample(_VolumeTransformer):
    def __init__(self, target_hw=(224, 224)):
        self.target_hw = target_hw

    def _apply(self, v):
        return resample(v, self.target_hw)


class ZScoreNormalize(_VolumeTransformer):
    def _apply(self, v):
        return zscore_normalize(v)


class CTWindowNormalize(_VolumeTransformer):
    def _apply(self, v):
        return ct_window_normalize(v)


class N4BiasCorrection(_VolumeTransformer):
    def _apply(self, v):
        return n4_bias_correction(v)


def make_preprocessing_pipeline(modality: str = "MR", target_hw=(224, 224), tiles=(8, 8),
                                clip_limit: float = 0.01) -> Pipeline:
    if modality == "CT":
        steps = [("hu_window", CTWindowNormalize()),
                 ("clahe", AdaptiveHistEq(tiles, clip_limit)),
                 ("resample", Resample(target_hw))]
    elif modality == "MR":
        steps = [("clahe", AdaptiveHistEq(tiles, clip_limit)),
                 ("resample", Resample(target_hw)),
                 ("zscore", ZScoreNormalize()),
                 ("n4", N4BiasCorrection())]
    else:
        raise ConfigError(f"unknown modality {modality!r}")
    return Pipeline(steps)
