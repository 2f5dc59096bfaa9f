"""Volume and mask containers plus the raw on-disk volume format.

Arrays are indexed ``[x, y, z]`` with spacing ``(sx, sy, sz)`` in millimetres;
axial slices are ``data[:, :, k]``.

Raw file layout::

    SWTRVOL 1
    dims 224 224 32
    spacing 0.98 0.98 3
    modality MR
    dtype f32
    end
    <little-endian voxel payload, C order>

Masks use the same layout with ``dtype u8`` and ``modality none``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, LengthError, MagicError, VersionError

LABELS = (0, 1, 2)
BACKGROUND, LIVER, LESION = LABELS
_VOLUME_MAGIC = "SWTRVOL"
_VOLUME_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive finite values, got {spacing}")
    return spacing


@dataclass
class VolumeImage:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    modality: str = "MR"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"volume must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        self.spacing = _check_spacing(self.spacing)
        if self.modality not in ("MR", "CT"):
            raise ValueError(f"modality must be 'MR' or 'CT', got {self.modality!r}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def replace(self, data=None, spacing=None) -> "VolumeImage":
        return VolumeImage(self.data if data is None else data,
                           self.spacing if spacing is None else spacing, self.modality)


@dataclass
class VoxelMask:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise DimensionError(f"mask must be 3D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > LESION):
            raise ValueError(f"mask labels must lie in {set(LABELS)}, got {sorted(np.unique(labels))}")
        self.labels = labels.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    @property
    def liver(self) -> np.ndarray:
        """Liver region including the lesions it contains."""
        return self.labels >= LIVER

    @property
    def lesion(self) -> np.ndarray:
        return self.labels == LESION

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))


def write_volume(path, item: VolumeImage | VoxelMask) -> None:
    if isinstance(item, VolumeImage):
        arr, dtype, modality = item.data, "f32", item.modality
    else:
        arr, dtype, modality = item.labels, "u8", "none"
    header = (
        f"{_VOLUME_MAGIC} {_VOLUME_VERSION}\n"
        f"dims {' '.join(str(n) for n in arr.shape)}\n"
        f"spacing {' '.join(repr(float(s)) for s in item.spacing)}\n"
        f"modality {modality}\n"
        f"dtype {dtype}\n"
        "end\n"
    )
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def read_volume(path) -> VolumeImage | VoxelMask:
    raw = Path(path).read_bytes()
    fields, pos = {}, 0
    for lineno in range(8):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise LengthError(f"{path}: header truncated")
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if lineno == 0:
            parts = line.split()
            if len(parts) != 2 or parts[0] != _VOLUME_MAGIC:
                raise MagicError(f"{path}: not a raw volume file (magic {line[:16]!r})")
            if parts[1] != str(_VOLUME_VERSION):
                raise VersionError(f"{path}: unsupported volume version {parts[1]}")
            continue
        if line == "end":
            break
        key, _, value = line.partition(" ")
        fields[key] = value.split()
    else:
        raise FormatError(f"{path}: header has no 'end' line")
    try:
        dims = tuple(int(v) for v in fields["dims"])
        spacing = tuple(float(v) for v in fields["spacing"])
        modality = fields["modality"][0]
        dtype = _DTYPES[fields["dtype"][0]]
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed header field ({exc})") from None
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - pos != expected:
        raise LengthError(f"{path}: payload has {len(raw) - pos} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=dtype, offset=pos).reshape(dims)
    if dtype == _DTYPES["u8"]:
        return VoxelMask(arr.copy(), spacing)
    return VolumeImage(arr.astype(np.float32), spacing, modality)
