"""Dense 3D volume/label containers, patch gridding, and reassembly.

Layout convention (fixed so file and wire formats are unambiguous):
intensity volumes are (H, W, D) arrays, label fields are channel-major
(C, H, W, D) arrays, both C-contiguous row-major.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, DimensionError

Dims = tuple[int, int, int]

LABEL_SUM_TOL = 1e-5


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Volume:
    """A scan: scalar intensities in [0, 1] on an (H, W, D) grid plus identity metadata."""

    data: np.ndarray
    subject_id: str = ""
    scan_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DimensionError(f"volume data must be (H, W, D), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError(
                f"intensities must lie in [0, 1], got [{data.min():.4g}, {data.max():.4g}]"
            )
        object.__setattr__(self, "data", _frozen(data))

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    @classmethod
    def normalized(cls, raw: np.ndarray, subject_id: str = "", scan_id: str = "") -> "Volume":
        """Min-max rescale arbitrary finite intensities into [0, 1]."""
        raw = np.asarray(raw, dtype=np.float64)
        lo, hi = raw.min(), raw.max()
        scaled = np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo)
        return cls(scaled, subject_id=subject_id, scan_id=scan_id)


@dataclass(frozen=True)
class LabelField:
    """Per-voxel class probabilities on a (C, H, W, D) grid; channel vectors sum to 1."""

    data: np.ndarray
    validate: bool = True

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise DimensionError(f"label data must be (C, H, W, D), got shape {data.shape}")
        if self.validate:
            if data.min() < -LABEL_SUM_TOL:
                raise ValueError("label probabilities must be non-negative")
            sums = data.sum(axis=0)
            if np.abs(sums - 1.0).max() > LABEL_SUM_TOL:
                raise ValueError(
                    f"channel sums must be 1 +- {LABEL_SUM_TOL}, worst deviation "
                    f"{np.abs(sums - 1.0).max():.3g}"
                )
        object.__setattr__(self, "data", _frozen(data))

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> Dims:
        return self.data.shape[1:]  # type: ignore[return-value]

    @classmethod
    def from_classes(cls, classes: np.ndarray, num_classes: int) -> "LabelField":
        """One-hot encode an (H, W, D) integer class map."""
        classes = np.asarray(classes)
        if classes.ndim != 3:
            raise DimensionError(f"class map must be (H, W, D), got shape {classes.shape}")
        if classes.min() < 0 or classes.max() >= num_classes:
            raise ValueError("class indices out of range")
        data = np.zeros((num_classes,) + classes.shape, dtype=np.float64)
        h, w, d = np.indices(classes.shape)
        data[classes, h, w, d] = 1.0
        return cls(data)

    def argmax_classes(self) -> np.ndarray:
        """Harden to an (H, W, D) class map; ties break toward the lower class index."""
        return np.argmax(self.data, axis=0)

    def is_one_hot(self) -> bool:
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))


def _axis_positions(dim: int, patch: int, stride: int) -> list[int]:
    # Final position shifts inward so every patch lies fully inside the parent.
    positions = []
    k = 0
    while True:
        pos = min(k * stride, dim - patch)
        if not positions or pos != positions[-1]:
            positions.append(pos)
        if k * stride >= dim - patch:
            break
        k += 1
    return positions


@dataclass(frozen=True)
class PatchGrid:
    """Deterministic row-major gridding of a parent volume into equally sized patches."""

    parent_dims: Dims
    patch_dims: Dims
    stride: Dims
    origins: tuple[Dims, ...] = field(default=())

    def __post_init__(self):
        for p, d in zip(self.patch_dims, self.parent_dims):
            if p > d:
                raise DimensionError(
                    f"patch dims {self.patch_dims} exceed parent dims {self.parent_dims}"
                )
            if p < 1:
                raise DimensionError("patch dims must be positive")
        if any(s < 1 for s in self.stride):
            raise DimensionError("stride must be positive")
        if not self.origins:
            per_axis = [
                _axis_positions(d, p, s)
                for d, p, s in zip(self.parent_dims, self.patch_dims, self.stride)
            ]
            origins = tuple(itertools.product(*per_axis))
            object.__setattr__(self, "origins", origins)

    @classmethod
    def cover(cls, parent_dims: Dims, patch_dims: Dims, stride: Dims | None = None) -> "PatchGrid":
        return cls(tuple(parent_dims), tuple(patch_dims), tuple(stride or patch_dims))

    def __len__(self) -> int:
        return len(self.origins)

    def patch_slice(self, origin: Dims) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch_dims))  # type: ignore


@dataclass(frozen=True)
class Patch:
    """A patch payload together with its origin in the parent volume."""

    origin: Dims
    data: np.ndarray


def extract_patches(vol: Volume, grid: PatchGrid) -> list[Patch]:
    """Cut a volume into grid patches, in deterministic row-major grid order."""
    if grid.parent_dims != vol.dims:
        raise DimensionError(f"grid for dims {grid.parent_dims} applied to volume {vol.dims}")
    return [Patch(o, vol.data[grid.patch_slice(o)].copy()) for o in grid.origins]


def extract_label_patches(labels: LabelField, grid: PatchGrid) -> list[Patch]:
    """Cut a label field into (C, h, w, d) patches matching ``extract_patches`` order."""
    if grid.parent_dims != labels.dims:
        raise DimensionError(f"grid for dims {grid.parent_dims} applied to labels {labels.dims}")
    return [Patch(o, labels.data[(slice(None),) + grid.patch_slice(o)].copy()) for o in grid.origins]


def reassemble(patches: list[Patch], parent_dims: Dims) -> LabelField:
    """Fuse label patches back into a full field.

    Overlapping voxels are averaged with uniform weights, then channel sums are
    renormalized to 1. Raises ``CoverageError`` if any voxel is left uncovered.
    """
    if not patches:
        raise CoverageError("no patches given")
    first = patches[0].data
    if first.ndim != 4:
        raise DimensionError("label patches must be (C, h, w, d)")
    num_classes = first.shape[0]
    acc = np.zeros((num_classes,) + tuple(parent_dims), dtype=np.float64)
    count = np.zeros(parent_dims, dtype=np.int64)
    for patch in patches:
        if patch.data.ndim != 4 or patch.data.shape[0] != num_classes:
            raise DimensionError("inconsistent patch channel counts")
        sl = tuple(slice(o, o + s) for o, s in zip(patch.origin, patch.data.shape[1:]))
        if any(s.stop > d for s, d in zip(sl, parent_dims)):
            raise DimensionError(f"patch at {patch.origin} exceeds parent dims {parent_dims}")
        acc[(slice(None),) + sl] += patch.data
        count[sl] += 1
    if (count == 0).any():
        missing = int((count == 0).sum())
        raise CoverageError(f"{missing} voxels uncovered by the patch set")
    mean = acc / count
    sums = mean.sum(axis=0)
    mean = mean / np.where(sums > 0, sums, 1.0)
    return LabelField(mean)
