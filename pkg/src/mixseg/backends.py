"""Server-side segmentation backends.

Three variants sit behind the same interface: an oracle that returns the exact
mixed ground truth (isolates codec correctness from learning quality), a noisy
oracle (controlled imperfection for ensemble studies), and the trained CNN.
The oracle variants exist for the test harness only; building their
ground-truth handle requires an explicit grant flag.
"""
from __future__ import annotations

import numpy as np

from .errors import AccessError, DimensionError
from .mixing import mix_labels
from .nets import Sequential, unmix_input
from .rng import substream
from .volume import LABEL_SUM_TOL
from . import tensorio

_ALPHA_KEY = "__alpha__"


class GroundTruthAccess:
    """Test-harness handle mapping a wire patch_index to its ground truths.

    patch_index encodes (patch id, reference id) as patch_id * K + ref_id,
    matching how the client numbers its requests.
    """

    def __init__(self, target_labels, reference_labels, alpha: float, *, allow_ground_truth: bool = False):
        if not allow_ground_truth:
            raise AccessError("ground-truth access must be granted explicitly (test harness only)")
        if not target_labels or not reference_labels:
            raise AccessError("ground-truth handle needs target and reference labels")
        self.target_labels = tuple(np.asarray(y, dtype=np.float64) for y in target_labels)
        self.reference_labels = tuple(np.asarray(y, dtype=np.float64) for y in reference_labels)
        self.alpha = float(alpha)

    @property
    def k(self) -> int:
        return len(self.reference_labels)

    def lookup(self, patch_index: int):
        pid, rid = divmod(int(patch_index), self.k)
        if pid >= len(self.target_labels):
            raise AccessError(f"patch_index {patch_index} outside ground-truth table")
        return self.target_labels[pid], self.reference_labels[rid], self.alpha

    def save(self, path) -> None:
        tensors = {_ALPHA_KEY: np.array([self.alpha, float(self.k)])}
        for i, y in enumerate(self.target_labels):
            tensors[f"target.{i:05d}"] = y
        for i, y in enumerate(self.reference_labels):
            tensors[f"ref.{i:05d}"] = y
        tensorio.save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path, *, allow_ground_truth: bool = False) -> "GroundTruthAccess":
        tensors = tensorio.load_checkpoint(path)
        alpha = float(tensors[_ALPHA_KEY][0])
        targets = [tensors[k] for k in sorted(tensors) if k.startswith("target.")]
        refs = [tensors[k] for k in sorted(tensors) if k.startswith("ref.")]
        return cls(targets, refs, alpha, allow_ground_truth=allow_ground_truth)


def _assert_simplex(probs: np.ndarray) -> np.ndarray:
    if np.abs(probs.sum(axis=0) - 1.0).max() > LABEL_SUM_TOL:
        raise ValueError("backend produced a non-simplex field")
    return probs


def oracle_segment(x_mix: np.ndarray, access) -> np.ndarray:
    """Ideal segmenter: returns exactly alpha*y_target + (1-alpha)*y_ref."""
    if access is None:
        raise AccessError("oracle backend requires ground-truth access")
    y_target, y_ref, alpha = access
    if y_target is None or y_ref is None:
        raise AccessError("oracle backend is missing a ground-truth label field")
    if y_target.shape[1:] != np.asarray(x_mix).shape:
        raise DimensionError(
            f"ground-truth labels {y_target.shape[1:]} do not match patch {np.asarray(x_mix).shape}"
        )
    return _assert_simplex(mix_labels(y_target, y_ref, alpha))


def noisy_oracle_segment(x_mix: np.ndarray, access, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Oracle output with i.i.d. Gaussian logit noise, re-softmaxed."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    ideal = oracle_segment(x_mix, access)
    if noise_std == 0.0:
        return ideal
    logits = np.log(np.clip(ideal, 1e-12, None))
    logits = logits + rng.normal(0.0, noise_std, size=logits.shape)
    from .nets import softmax_channels

    return _assert_simplex(softmax_channels(logits))


def tiny_cnn_segment(x_mix: np.ndarray, net: Sequential) -> np.ndarray:
    """CNN segmenter on one (H,W,D) patch; returns a (C,H,W,D) simplex field."""
    x = np.asarray(x_mix, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected a 3-D patch, got shape {x.shape}")
    return _assert_simplex(net.predict_patch(x[None]))


def unmix_net_apply(net: Sequential, y_mix_hat: np.ndarray, y_ref: np.ndarray, alpha: float) -> np.ndarray:
    """Learned unmixing: D(y_mix_hat, y_ref, alpha) -> simplex target prediction."""
    return _assert_simplex(net.predict_patch(unmix_input(y_mix_hat, y_ref, alpha)))


class OracleBackend:
    variant = "oracle"

    def __init__(self, access: GroundTruthAccess):
        self.access = access

    def segment(self, x_mix: np.ndarray, session_id: int, patch_index: int) -> np.ndarray:
        return oracle_segment(x_mix, self.access.lookup(patch_index))


class NoisyOracleBackend:
    variant = "noisy-oracle"

    def __init__(self, access: GroundTruthAccess, noise_std: float, seed: int = 0):
        self.access = access
        self.noise_std = float(noise_std)
        self.seed = int(seed)

    def segment(self, x_mix: np.ndarray, session_id: int, patch_index: int) -> np.ndarray:
        # Seeding by (session, patch) makes responses deterministic per request,
        # independent of arrival order and retries.
        rng = substream(self.seed, "noisy-oracle", int(session_id), int(patch_index))
        return noisy_oracle_segment(x_mix, self.access.lookup(patch_index), self.noise_std, rng)


class CnnBackend:
    variant = "tiny-cnn"

    def __init__(self, net: Sequential):
        self.net = net

    def segment(self, x_mix: np.ndarray, session_id: int, patch_index: int) -> np.ndarray:
        return tiny_cnn_segment(x_mix, self.net)
