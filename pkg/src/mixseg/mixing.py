"""The privacy codec: convex mixing with client-private references and its inversion.

A target patch is blended with a private reference patch, ``alpha * x_target +
(1 - alpha) * x_ref``. The reference pair and the coefficient act as the
client's key: with them, label mixtures invert exactly; without them, recovery
is an under-determined source-separation problem.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UnstableAlphaError
from .volume import LABEL_SUM_TOL, LabelField, PatchGrid, Volume

DEFAULT_ALPHA_BOUNDS = (0.2, 0.8)

# Inverting the mix divides by alpha; below this floor the amplification of
# prediction error (1/alpha) is considered unusable.
ALPHA_STABILITY_FLOOR = 0.05


def sample_alpha(rng: np.random.Generator, bounds: tuple[float, float] = DEFAULT_ALPHA_BOUNDS) -> float:
    """Uniform draw from [alpha_min, alpha_max] sub (0, 1)."""
    lo, hi = bounds
    if not (0.0 < lo <= hi < 1.0):
        raise ConfigError(f"alpha bounds must satisfy 0 < lo <= hi < 1, got {bounds}")
    return float(rng.uniform(lo, hi))


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what} shapes differ: {a.shape} vs {b.shape}")


def mix_image(x_target: np.ndarray, x_ref: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination ``alpha * x_target + (1 - alpha) * x_ref``."""
    x_target = np.asarray(x_target, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    _check_same_shape(x_target, x_ref, "image patch")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    return alpha * x_target + (1.0 - alpha) * x_ref


def mix_labels(y_target: np.ndarray, y_ref: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination of two probability label patches; preserves channel sums."""
    y_target = np.asarray(y_target, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    _check_same_shape(y_target, y_ref, "label patch")
    for name, y in (("target", y_target), ("reference", y_ref)):
        if np.abs(y.sum(axis=0) - 1.0).max() > LABEL_SUM_TOL:
            raise ValueError(f"{name} label patch is not a probability field")
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    return alpha * y_target + (1.0 - alpha) * y_ref


def naive_unmix(
    y_mix_hat: np.ndarray,
    y_ref: np.ndarray,
    alpha: float,
    alpha_min: float = ALPHA_STABILITY_FLOOR,
) -> np.ndarray:
    """Closed-form inversion ``(y_mix_hat - (1 - alpha) * y_ref) / alpha``.

    The raw inverse can leave the probability simplex when ``y_mix_hat`` is a
    network prediction, so the result is clamped to [0, 1] and renormalized to
    channel-sum 1.
    """
    if alpha < alpha_min:
        raise UnstableAlphaError(f"alpha {alpha} below stability floor {alpha_min}")
    y_mix_hat = np.asarray(y_mix_hat, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    _check_same_shape(y_mix_hat, y_ref, "label patch")
    raw = (y_mix_hat - (1.0 - alpha) * y_ref) / alpha
    clipped = np.clip(raw, 0.0, 1.0)
    sums = clipped.sum(axis=0)
    # A voxel can clamp to all-zero only if the prediction was badly off simplex;
    # fall back to uniform there rather than dividing by zero.
    uniform = 1.0 / clipped.shape[0]
    return np.where(sums > 0, clipped / np.where(sums > 0, sums, 1.0), uniform)


@dataclass(frozen=True)
class MixedPatchPair:
    """One encoded patch: the mixture, the coefficient, and which reference made it."""

    x_mix: np.ndarray
    alpha: float
    ref_index: int
    y_mix: np.ndarray | None = None   # training only


@dataclass(frozen=True)
class MixKey:
    """Client-private key: K reference pairs, the mixing coefficient, and its seed."""

    alpha: float
    references: tuple[tuple[np.ndarray, np.ndarray], ...]
    rng_seed: int
    alpha_bounds: tuple[float, float] = DEFAULT_ALPHA_BOUNDS

    def __post_init__(self):
        lo, hi = self.alpha_bounds
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError(f"alpha bounds must lie inside (0, 1), got {self.alpha_bounds}")
        if not lo <= self.alpha <= hi:
            raise ConfigError(f"alpha {self.alpha} outside bounds {self.alpha_bounds}")
        if not self.references:
            raise ConfigError("key needs at least one reference pair")
        dims = self.references[0][0].shape
        for x_ref, y_ref in self.references:
            if x_ref.shape != dims:
                raise DimensionError("reference patches must share dims")
            if y_ref.shape[1:] != dims:
                raise DimensionError("reference labels must spatially match their patch")
            if not np.all((y_ref == 0.0) | (y_ref == 1.0)):
                raise ValueError("reference labels must be one-hot")
            if np.abs(y_ref.sum(axis=0) - 1.0).max() > LABEL_SUM_TOL:
                raise ValueError("reference labels must be one-hot probability fields")

    @property
    def k(self) -> int:
        return len(self.references)

    @property
    def patch_dims(self) -> tuple[int, ...]:
        return self.references[0][0].shape

    def key_material(self) -> list[bytes]:
        """Byte images of everything that must never appear on the wire."""
        blobs = [np.float64(self.alpha).tobytes()]
        for x_ref, y_ref in self.references:
            blobs.append(np.ascontiguousarray(x_ref, dtype=np.float64).tobytes())
            blobs.append(np.ascontiguousarray(y_ref, dtype=np.float64).tobytes())
        return blobs


def build_mix_key(
    pool: list[tuple[Volume, LabelField]],
    patch_dims: tuple[int, int, int],
    k: int,
    rng_seed: int,
    alpha_bounds: tuple[float, float] = DEFAULT_ALPHA_BOUNDS,
    alpha: float | None = None,
) -> MixKey:
    """Sample K distinct reference pairs (without replacement) from a private pool.

    References come from arbitrary spatial locations of the pool scans, not
    necessarily the target's anatomical region.
    """
    from .rng import substream

    if not pool:
        raise ConfigError("reference pool is empty")
    if k < 1:
        raise ConfigError("k must be >= 1")
    rng = substream(rng_seed, "mixkey")
    if alpha is None:
        alpha = sample_alpha(rng, alpha_bounds)

    candidates: list[tuple[int, tuple[int, int, int]]] = []
    for idx, (vol, _) in enumerate(pool):
        h, w, d = vol.dims
        ph, pw, pd = patch_dims
        if ph > h or pw > w or pd > d:
            raise DimensionError(f"patch dims {patch_dims} exceed pool volume dims {vol.dims}")

    seen: set[tuple[int, tuple[int, int, int]]] = set()
    refs = []
    attempts = 0
    while len(refs) < k:
        attempts += 1
        if attempts > 100 * k:
            raise ConfigError("could not sample distinct references; pool too small")
        idx = int(rng.integers(0, len(pool)))
        vol, labels = pool[idx]
        origin = tuple(
            int(rng.integers(0, dim - p + 1)) for dim, p in zip(vol.dims, patch_dims)
        )
        if (idx, origin) in seen:
            continue
        seen.add((idx, origin))
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_dims))
        refs.append((vol.data[sl].copy(), labels.data[(slice(None),) + sl].copy()))
        candidates.append((idx, origin))

    return MixKey(alpha=alpha, references=tuple(refs), rng_seed=rng_seed, alpha_bounds=alpha_bounds)


def tta_encode(x_target: np.ndarray, key: MixKey) -> list[MixedPatchPair]:
    """Encode one target patch against every reference in the key, sharing one alpha."""
    if key.k < 1:
        raise ConfigError("key has no references")
    pairs = []
    for i, (x_ref, _) in enumerate(key.references):
        pairs.append(MixedPatchPair(x_mix=mix_image(x_target, x_ref, key.alpha), alpha=key.alpha, ref_index=i))
    return pairs


def tta_decode(per_reference_predictions: list[np.ndarray]) -> np.ndarray:
    """Voxelwise arithmetic mean of the per-reference decoded predictions."""
    if not per_reference_predictions:
        raise ConfigError("no predictions to ensemble")
    first = np.asarray(per_reference_predictions[0], dtype=np.float64)
    for p in per_reference_predictions[1:]:
        _check_same_shape(first, np.asarray(p), "prediction")
    return np.mean([np.asarray(p, dtype=np.float64) for p in per_reference_predictions], axis=0)


def grid_for_key(parent_dims, key: MixKey, stride=None) -> PatchGrid:
    return PatchGrid.cover(tuple(parent_dims), tuple(key.patch_dims), stride)
