"""Core volume containers and deterministic file IO.

Volumes are multi-channel 3D intensity grids (typically t1w/t2w/pdw) with an
explicit interior-brain mask; label volumes hold one tissue code per voxel.

File format (shared by every stage of the pipeline):
    <name>.f32raw   little-endian float32 payload, x-fastest (i,j,k) voxel
                    order, channels contiguous per voxel
    <name>.u8raw    little-endian uint8 payload, same voxel order (masks,
                    labels)
    <name>.json     sidecar header {"dims": [M1,M2,M3], "channels": C,
                    "mask_file": "..."}

The format is deliberately dependency-free and byte-inspectable; round trips
are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Tissue state space.
CSF = 1
GM = 2
WM = 3
BG = 4
TISSUE_LABELS = (CSF, GM, WM)
ALL_LABELS = (CSF, GM, WM, BG)


class VolumeFormatError(ValueError):
    """Raised when an on-disk volume violates its header or value contract."""


@dataclass(frozen=True)
class MultiChannelVolume:
    """3D grid of per-voxel intensity vectors plus an interior mask.

    data has shape (M1, M2, M3, channels) float32; mask has shape
    (M1, M2, M3) bool. Instances are treated as immutable after
    construction and are safe for concurrent reads.
    """

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise VolumeFormatError(f"data must be 4D (M1,M2,M3,C), got shape {self.data.shape}")
        if self.mask.shape != self.data.shape[:3]:
            raise VolumeFormatError(
                f"mask shape {self.mask.shape} does not match dims {self.data.shape[:3]}")
        if self.data.dtype != np.float32:
            object.__setattr__(self, "data", self.data.astype(np.float32))
        if self.mask.dtype != bool:
            object.__setattr__(self, "mask", self.mask.astype(bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True)
class LabelVolume:
    """Per-voxel tissue label in {1 CSF, 2 GM, 3 WM, 4 BG}."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise VolumeFormatError(f"labels must be 3D, got shape {self.labels.shape}")
        if self.labels.dtype != np.uint8:
            object.__setattr__(self, "labels", self.labels.astype(np.uint8))
        bad = (self.labels < CSF) | (self.labels > BG)
        if bad.any():
            idx = tuple(int(v) for v in np.argwhere(bad)[0])
            raise VolumeFormatError(
                f"label {int(self.labels[idx])} at voxel {idx} outside state space {ALL_LABELS}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


def check_mask_consistency(lv: LabelVolume, mask: np.ndarray) -> bool:
    """True iff BG sits exactly off-mask and tissue labels exactly on-mask."""
    on = lv.labels[mask]
    off = lv.labels[~mask]
    return bool(np.all(off == BG)) and bool(np.all((on >= CSF) & (on <= WM)))


# ---------------------------------------------------------------------------
# IO helpers
# ---------------------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _to_disk_order(arr: np.ndarray) -> np.ndarray:
    # (M1,M2,M3,...) -> payload with i fastest among voxel coordinates;
    # trailing axes (channels) stay contiguous per voxel.
    if arr.ndim == 4:
        return np.ascontiguousarray(np.transpose(arr, (2, 1, 0, 3)))
    return np.ascontiguousarray(np.transpose(arr, (2, 1, 0)))


def _from_disk_order(flat: np.ndarray, dims, channels: int | None) -> np.ndarray:
    m1, m2, m3 = dims
    if channels is None:
        return np.transpose(flat.reshape(m3, m2, m1), (2, 1, 0)).copy()
    return np.transpose(flat.reshape(m3, m2, m1, channels), (2, 1, 0, 3)).copy()


def _flat_to_voxel(flat_index: int, dims) -> tuple[int, int, int]:
    # inverse of the x-fastest payload order
    m1, m2, _ = dims
    k, rem = divmod(flat_index, m1 * m2)
    j, i = divmod(rem, m1)
    return (i, j, k)


def save_volume(vol: MultiChannelVolume, path) -> None:
    """Write <path>.f32raw + JSON sidecar + <stem>_mask.u8raw.

    Payload bytes reproduce the float32 data exactly; load_volume(path)
    returns a bit-identical volume.
    """
    path = Path(path)
    if path.suffix != ".f32raw":
        path = path.with_suffix(".f32raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    mask_name = path.stem + "_mask.u8raw"
    header = {
        "dims": list(vol.dims),
        "channels": vol.channels,
        "mask_file": mask_name,
    }
    _sidecar_path(path).write_text(json.dumps(header, sort_keys=True))
    _to_disk_order(vol.data).astype("<f4").tofile(path)
    _to_disk_order(vol.mask.astype(np.uint8)).tofile(path.parent / mask_name)


def load_volume(path) -> MultiChannelVolume:
    """Load a volume written by save_volume.

    Raises VolumeFormatError on header/payload size mismatch or
    non-finite values (diagnostic names the first offending voxel),
    FileNotFoundError on missing files.
    """
    path = Path(path)
    if path.suffix != ".f32raw":
        path = path.with_suffix(".f32raw")
    if not path.exists():
        raise FileNotFoundError(f"volume payload not found: {path}")
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"volume sidecar not found: {sidecar}")
    header = json.loads(sidecar.read_text())
    dims = tuple(int(d) for d in header["dims"])
    channels = int(header["channels"])
    if len(dims) != 3 or any(d <= 0 for d in dims) or channels < 1:
        raise VolumeFormatError(f"bad header {header} in {sidecar}")

    payload = np.fromfile(path, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2] * channels
    if payload.size != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {payload.size} floats, header implies {expected}")
    finite = np.isfinite(payload)
    if not finite.all():
        first = int(np.argmax(~finite))
        voxel = _flat_to_voxel(first // channels, dims)
        raise VolumeFormatError(
            f"{path}: non-finite value {payload[first]} at voxel {voxel}, "
            f"channel {first % channels}")

    mask_path = path.parent / header["mask_file"]
    if not mask_path.exists():
        raise FileNotFoundError(f"mask payload not found: {mask_path}")
    mask_payload = np.fromfile(mask_path, dtype=np.uint8)
    if mask_payload.size != dims[0] * dims[1] * dims[2]:
        raise VolumeFormatError(
            f"{mask_path}: mask holds {mask_payload.size} bytes, header implies "
            f"{dims[0] * dims[1] * dims[2]}")

    data = _from_disk_order(payload, dims, channels)
    mask = _from_disk_order(mask_payload, dims, None).astype(bool)
    return MultiChannelVolume(data=data, mask=mask)


def save_labels(lv: LabelVolume, path) -> None:
    """Write <path>.u8raw + JSON sidecar; round trip is bit-exact."""
    path = Path(path)
    if path.suffix != ".u8raw":
        path = path.with_suffix(".u8raw")
    path.parent.mkdir(parents=True, exist_ok=True)
    _sidecar_path(path).write_text(json.dumps({"dims": list(lv.dims)}, sort_keys=True))
    _to_disk_order(lv.labels).tofile(path)


def load_labels(path) -> LabelVolume:
    """Load labels written by save_labels; rejects out-of-range label bytes."""
    path = Path(path)
    if path.suffix != ".u8raw":
        path = path.with_suffix(".u8raw")
    if not path.exists():
        raise FileNotFoundError(f"label payload not found: {path}")
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"label sidecar not found: {sidecar}")
    dims = tuple(int(d) for d in json.loads(sidecar.read_text())["dims"])
    payload = np.fromfile(path, dtype=np.uint8)
    if payload.size != dims[0] * dims[1] * dims[2]:
        raise VolumeFormatError(
            f"{path}: payload holds {payload.size} bytes, header implies "
            f"{dims[0] * dims[1] * dims[2]}")
    bad = (payload < CSF) | (payload > BG)
    if bad.any():
        first = int(np.argmax(bad))
        raise VolumeFormatError(
            f"{path}: label byte {int(payload[first])} at voxel "
            f"{_flat_to_voxel(first, dims)} outside state space {ALL_LABELS}")
    return LabelVolume(labels=_from_disk_order(payload, dims, None))


# ---------------------------------------------------------------------------
# Intensity normalization
# ---------------------------------------------------------------------------

def normalize_intensities(vol: MultiChannelVolume) -> MultiChannelVolume:
    """Affinely map each channel's masked intensities onto [0, 1].

    Per channel, masked min -> 0 and masked max -> 1; unmasked voxels are
    zeroed; a constant channel maps to 0 everywhere (it carries no
    discriminative information). Idempotent. Raises ValueError on an
    empty mask.
    """
    if not vol.mask.any():
        raise ValueError("cannot normalize a volume with an empty mask")
    out = np.zeros_like(vol.data, dtype=np.float64)
    masked = vol.mask
    for c in range(vol.channels):
        chan = vol.data[..., c].astype(np.float64)
        vals = chan[masked]
        lo, hi = vals.min(), vals.max()
        if hi > lo:
            out[..., c][masked] = (vals - lo) / (hi - lo)
    return MultiChannelVolume(data=out.astype(np.float32), mask=vol.mask.copy())
