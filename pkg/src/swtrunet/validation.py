"""Input coercion and checks used by the estimator-style front ends."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .volume import VolumeImage, VoxelMask


def check_volume(x, modality: str = "MR") -> VolumeImage:
    """Accept a VolumeImage or a 3D array (unit spacing) and return a VolumeImage."""
    if isinstance(x, VolumeImage):
        return x
    return VolumeImage(np.asarray(x, dtype=np.float32), (1.0, 1.0, 1.0), modality)


def check_volumes(X, modality: str = "MR") -> list[VolumeImage]:
    if isinstance(X, (VolumeImage, np.ndarray)) and getattr(X, "ndim", 3) == 3:
        X = [X]
    vols = [check_volume(x, modality) for x in X]
    if not vols:
        raise ValueError("expected at least one volume")
    return vols


def check_mask(y, spacing=None) -> VoxelMask:
    if isinstance(y, VoxelMask):
        return y
    return VoxelMask(np.asarray(y), spacing or (1.0, 1.0, 1.0))


def check_masks(Y, volumes: list[VolumeImage] | None = None) -> list[VoxelMask]:
    if isinstance(Y, (VoxelMask, np.ndarray)) and getattr(Y, "ndim", 3) == 3:
        Y = [Y]
    masks = [check_mask(y, None if volumes is None else volumes[i].spacing) for i, y in enumerate(Y)]
    if volumes is not None:
        if len(masks) != len(volumes):
            raise ValueError(f"got {len(volumes)} volumes but {len(masks)} masks")
        for v, m in zip(volumes, masks):
            check_same_shape(v.shape, m.shape)
    return masks


def check_same_shape(a, b) -> None:
    a, b = tuple(np.shape(a) if not isinstance(a, tuple) else a), tuple(np.shape(b) if not isinstance(b, tuple) else b)
    if a != b:
        raise DimensionError(f"shape mismatch: {a} vs {b}")


def check_binary_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=bool), np.asarray(y, dtype=bool)
    check_same_shape(x.shape, y.shape)
    return x, y
