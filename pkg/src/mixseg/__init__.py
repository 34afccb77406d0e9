"""Privacy-preserving patch segmentation by convex mixing with private references.

A client blends each image patch with a private reference patch and ships only
the mixture; the server segments mixtures; the client inverts the mixing on
the returned label fields, either in closed form or with a small learned
unmixer, and can average several reference encodings of the same patch for a
more stable result. Includes synthetic labeled phantoms, evaluation metrics,
and an adversary harness for measuring what an attacker recovers without the
key.
"""

from .errors import (
    AccessError,
    AttackDiverged,
    ConfigError,
    CoverageError,
    DegenerateDataError,
    DimensionError,
    MixsegError,
    PairingError,
    SessionError,
    TrainingDiverged,
    UnstableAlphaError,
)
from .mixing import (
    DEFAULT_ALPHA_BOUNDS,
    MixKey,
    MixedPatchPair,
    build_mix_key,
    mix_image,
    mix_labels,
    naive_unmix,
    sample_alpha,
    tta_decode,
    tta_encode,
)
from .volume import (
    LabelField,
    Patch,
    PatchGrid,
    Volume,
    extract_label_patches,
    extract_patches,
    reassemble,
)

__version__ = "0.1.0"

__all__ = [
    "AccessError",
    "AttackDiverged",
    "ConfigError",
    "CoverageError",
    "DEFAULT_ALPHA_BOUNDS",
    "DegenerateDataError",
    "DimensionError",
    "LabelField",
    "MixKey",
    "MixedPatchPair",
    "MixsegError",
    "Patch",
    "PatchGrid",
    "PairingError",
    "SessionError",
    "TrainingDiverged",
    "UnstableAlphaError",
    "Volume",
    "build_mix_key",
    "extract_label_patches",
    "extract_patches",
    "mix_image",
    "mix_labels",
    "naive_unmix",
    "reassemble",
    "sample_alpha",
    "tta_decode",
    "tta_encode",
    "__version__",
]
