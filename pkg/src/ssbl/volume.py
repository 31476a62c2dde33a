"""Volumes, masks and deformation fields, plus the header/raw file format.

Arrays are held in memory indexed ``[x, y, z]`` (fields ``[c, x, y, z]``).
On disk every channel is written x-fastest, i.e. voxel ``(x, y, z)`` sits at
linear index ``x + nx * (y + ny * z)``, channels one after another.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    """A header/raw pair that cannot be decoded into a valid object."""


def _check_finite(data: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"{what} contains a non-finite value at index {idx}")


def _dims3(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


def _spacing3(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    return spacing


@dataclass(frozen=True)
class VolumeGrid:
    """A 3D scalar image with voxel spacing in millimetres."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        _check_finite(data, "volume")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _spacing3(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def linear(self) -> np.ndarray:
        """Intensities in x-fastest linear order."""
        return self.data.ravel(order="F")

    @classmethod
    def from_linear(cls, values, dims, spacing=(1.0, 1.0, 1.0)) -> "VolumeGrid":
        dims = _dims3(dims)
        values = np.asarray(values, dtype=np.float32)
        if values.size != math.prod(dims):
            raise ValueError(f"{values.size} values do not fill dims {dims}")
        return cls(values.reshape(dims, order="F"), spacing)


@dataclass(frozen=True)
class DeformationField:
    """Per-voxel displacement ``(u_x, u_y, u_z)`` in voxel units, shape (3, X, Y, Z)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ValueError(f"field data must have shape (3, X, Y, Z), got {data.shape}")
        _check_finite(data, "deformation field")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _spacing3(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


@dataclass(frozen=True)
class LabelMask:
    """One uint8 class label per voxel."""

    data: np.ndarray
    num_classes: int = 2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {data.shape}")
        if data.dtype != np.uint8:
            if data.size and (data.min() < 0 or data.max() > 255):
                raise ValueError("labels must fit in uint8")
            data = data.astype(np.uint8)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if data.size and int(data.max()) >= self.num_classes:
            raise ValueError(f"label {int(data.max())} out of range for {self.num_classes} classes")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _spacing3(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-voxel class probabilities, shape (num_classes, X, Y, Z)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[0] < 2:
            raise ValueError(f"probability data must have shape (C>=2, X, Y, Z), got {data.shape}")
        _check_finite(data, "probability map")
        if (data < 0).any():
            raise ValueError("probabilities must be non-negative")
        worst = float(np.abs(data.sum(axis=0, dtype=np.float64) - 1.0).max())
        if worst > 1e-5:
            raise ValueError(f"probabilities do not sum to 1 (max deviation {worst:.3g})")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    def argmax(self) -> LabelMask:
        # np.argmax picks the first maximum, so ties resolve to background (class 0).
        return LabelMask(np.argmax(self.data, axis=0).astype(np.uint8), self.num_classes)


@dataclass
class StudyManifest:
    """Time-ordered volume references for one study, paths relative to ``root``."""

    study_id: str
    volumes: list[str]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    masks: list[str] | None = None
    fields: dict[str, str] = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        if len(self.volumes) < 2:
            raise ValueError("a study needs at least two time points")
        if self.masks is not None and len(self.masks) != len(self.volumes):
            raise ValueError("mask list must match the volume list")
        self.spacing = _spacing3(self.spacing)

    @property
    def num_phases(self) -> int:
        return len(self.volumes)

    def path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def to_json(self) -> dict:
        return {
            "study_id": self.study_id,
            "spacing": list(self.spacing),
            "volumes": list(self.volumes),
            "masks": None if self.masks is None else list(self.masks),
            "fields": dict(self.fields),
        }


# ---------------------------------------------------------------------------
# Raw file format
# ---------------------------------------------------------------------------

def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path


def write_raw(path, array: np.ndarray, spacing, dtype: str = "f32", extra: dict | None = None) -> None:
    """Write ``array`` (X,Y,Z) or (C,X,Y,Z) as ``<stem>.json`` + ``<stem>.raw``."""
    stem = _stem(path)
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"cannot store array of shape {np.shape(array)}")
    header = {
        "dims": [int(d) for d in arr.shape[1:]],
        "spacing": [float(s) for s in _spacing3(spacing)],
        "channels": int(arr.shape[0]),
        "dtype": dtype,
    }
    if extra:
        header.update(extra)
    raw = np.concatenate([c.ravel(order="F") for c in arr]).astype(_DTYPES[dtype], copy=False)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_name(stem.name + ".json").write_text(json.dumps(header, indent=1) + "\n")
    stem.with_name(stem.name + ".raw").write_bytes(raw.tobytes())


def read_raw(path) -> tuple[np.ndarray, dict]:
    """Read a header/raw pair; returns an array of shape (C, X, Y, Z) and the header."""
    stem = _stem(path)
    hpath = stem.with_name(stem.name + ".json")
    rpath = stem.with_name(stem.name + ".raw")
    for p in (hpath, rpath):
        if not p.exists():
            raise FileNotFoundError(f"missing volume file {p}")
    header = json.loads(hpath.read_text())
    try:
        dims = _dims3(header["dims"])
        channels = int(header.get("channels", 1))
        dt = _DTYPES[header.get("dtype", "f32")]
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"bad header {hpath}: {exc}") from exc
    buf = np.frombuffer(rpath.read_bytes(), dtype=np.uint8)
    expected = channels * math.prod(dims)
    if buf.size != expected * dt.itemsize:
        raise VolumeFormatError(
            f"{rpath} holds {buf.size} bytes, header {dims}x{channels} needs {expected * dt.itemsize}"
        )
    flat = buf.view(dt)
    arr = np.stack([flat[c * math.prod(dims):(c + 1) * math.prod(dims)].reshape(dims, order="F")
                    for c in range(channels)])
    if dt.kind == "f":
        bad = ~np.isfinite(arr)
        if bad.any():
            c, x, y, z = (int(i) for i in np.argwhere(bad)[0])
            raise VolumeFormatError(f"{rpath}: non-finite value at voxel {(x, y, z)} channel {c}")
        arr = arr.astype(np.float32)
    return arr, header


def save_volume(obj, path) -> None:
    """Persist a VolumeGrid, DeformationField or LabelMask."""
    if isinstance(obj, VolumeGrid):
        write_raw(path, obj.data, obj.spacing, "f32")
    elif isinstance(obj, DeformationField):
        write_raw(path, obj.data, obj.spacing, "f32")
    elif isinstance(obj, LabelMask):
        write_raw(path, obj.data, obj.spacing, "u8", {"num_classes": obj.num_classes})
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")


def load_volume(path) -> VolumeGrid:
    arr, header = read_raw(path)
    if arr.shape[0] != 1 or header.get("dtype", "f32") != "f32":
        raise VolumeFormatError(f"{path} is not a single-channel f32 volume")
    return VolumeGrid(arr[0], header["spacing"])


def load_field(path) -> DeformationField:
    arr, header = read_raw(path)
    if arr.shape[0] != 3:
        raise VolumeFormatError(f"{path} has {arr.shape[0]} channels, a field needs 3")
    return DeformationField(arr, header["spacing"])


def load_mask(path) -> LabelMask:
    arr, header = read_raw(path)
    if header.get("dtype") != "u8" or arr.shape[0] != 1:
        raise VolumeFormatError(f"{path} is not a single-channel u8 mask")
    num_classes = int(header.get("num_classes", max(2, int(arr.max()) + 1)))
    return LabelMask(arr[0], num_classes, header["spacing"])


def save_manifest(manifest: StudyManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


def load_manifest(path) -> StudyManifest:
    """Read a manifest and check that every referenced volume agrees on dims and spacing."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    manifest = StudyManifest(
        study_id=doc["study_id"],
        volumes=list(doc["volumes"]),
        spacing=tuple(doc["spacing"]),
        masks=doc.get("masks"),
        fields=dict(doc.get("fields") or {}),
        root=path.parent,
    )
    refs = manifest.volumes + (manifest.masks or [])
    first = None
    for rel in refs:
        stem = _stem(manifest.path(rel))
        header = json.loads(stem.with_name(stem.name + ".json").read_text())
        key = (tuple(header["dims"]), tuple(float(s) for s in header["spacing"]))
        if first is None:
            first = key
        elif key != first:
            raise VolumeFormatError(f"{rel} does not share dims/spacing with {refs[0]}")
    if first is not None and first[1] != manifest.spacing:
        raise VolumeFormatError("manifest spacing disagrees with its volumes")
    return manifest


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def top_quantile_value(values: np.ndarray, top_fraction: float) -> float:
    """Nearest-rank value below which all but the top ``top_fraction`` of samples lie."""
    flat = np.sort(np.asarray(values).ravel(), kind="stable")
    n = flat.size
    m = int(math.floor(top_fraction * n + 1e-9))
    return float(flat[n - 1 - min(m, n - 1)])


def clip_intensities(v: VolumeGrid, top_fraction: float = 0.005) -> VolumeGrid:
    """Clamp the brightest ``top_fraction`` of voxels to the nearest-rank quantile."""
    if not 0.0 <= top_fraction < 1.0:
        raise ValueError(f"top_fraction must lie in [0, 1), got {top_fraction}")
    if top_fraction == 0.0:
        return v
    ceiling = top_quantile_value(v.data, top_fraction)
    return VolumeGrid(np.minimum(v.data, np.float32(ceiling)), v.spacing)


def normalize(v: VolumeGrid) -> VolumeGrid:
    """Min-max rescale to [0, 1]; a constant volume maps to zeros."""
    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi <= lo:
        return VolumeGrid(np.zeros_like(v.data), v.spacing)
    return VolumeGrid(((data - lo) / (hi - lo)).astype(np.float32), v.spacing)


def preprocess(v: VolumeGrid, top_fraction: float = 0.005) -> VolumeGrid:
    return normalize(clip_intensities(v, top_fraction))
