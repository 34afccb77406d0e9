"""Deterministic multi-subject, multi-scan labeled phantoms standing in for brain MRI.

Anatomy is a set of nested superellipsoid shells (background + 3 tissue classes)
whose radius is modulated by a low-order angular perturbation. The shell
parameters are the subject's identity and persist across scans; each scan adds a
small parameter warp, smooth intra-class texture, and voxel noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import substream
from .volume import Dims, LabelField, Volume

NUM_CLASSES = 4


@dataclass(frozen=True)
class SubjectSpec:
    """Per-subject anatomy parameters; equal seeds give bit-identical specs."""

    subject_id: str
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    exponent: float
    quad: tuple[float, ...]           # flat 3x3 symmetric traceless radius modulation
    skew_dir: tuple[float, float, float]
    skew: float
    shells: tuple[float, float, float]  # outer, middle, inner boundary fractions
    num_classes: int = NUM_CLASSES

    def params_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.center,
                self.radii,
                [self.exponent],
                self.quad,
                self.skew_dir,
                [self.skew],
                self.shells,
            ]
        )


@dataclass(frozen=True)
class ScanConfig:
    """Acquisition model: intensities per class, texture, noise, and repeat-scan warp."""

    dims: Dims = (48, 48, 48)
    class_means: tuple[float, ...] = (0.05, 0.85, 0.45, 0.65)
    texture_std: tuple[float, ...] = (0.01, 0.05, 0.05, 0.05)
    texture_sigma: float = 2.5
    noise_std: float = 0.02
    perturbation: float = 0.02   # scan-level warp, fraction of the anatomy scale

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for m in self.class_means:
            if not 0.0 <= m <= 1.0:
                raise ValueError("class means must lie in [0, 1]")


def generate_subject(seed: int) -> SubjectSpec:
    """Draw a subject anatomy; deterministic in the seed."""
    rng = substream(seed, "subject")
    center = rng.uniform(-0.08, 0.08, 3)
    radii = rng.uniform(0.62, 0.85, 3)
    exponent = rng.uniform(1.9, 3.0)
    q = rng.uniform(-0.12, 0.12, (3, 3))
    q = 0.5 * (q + q.T)
    q -= np.eye(3) * np.trace(q) / 3.0
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    skew = rng.uniform(-0.08, 0.08)
    shells = (1.0, rng.uniform(0.74, 0.82), rng.uniform(0.50, 0.60))
    return SubjectSpec(
        subject_id=f"S{seed:04d}",
        center=tuple(center),
        radii=tuple(radii),
        exponent=float(exponent),
        quad=tuple(q.ravel()),
        skew_dir=tuple(d),
        skew=float(skew),
        shells=shells,
    )


def _rasterize_classes(spec: SubjectSpec, dims: Dims) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, n) for n in dims]
    grid = np.meshgrid(*axes, indexing="ij")
    w = [(g - c) / r for g, c, r in zip(grid, spec.center, spec.radii)]

    p = spec.exponent
    r_se = (np.abs(w[0]) ** p + np.abs(w[1]) ** p + np.abs(w[2]) ** p) ** (1.0 / p)

    norm = np.sqrt(w[0] ** 2 + w[1] ** 2 + w[2] ** 2)
    norm = np.where(norm > 1e-12, norm, 1.0)
    u = [wi / norm for wi in w]

    q = np.asarray(spec.quad).reshape(3, 3)
    mod = 1.0 + sum(q[i, j] * u[i] * u[j] for i in range(3) for j in range(3))
    mod += spec.skew * (spec.skew_dir[0] * u[0] + spec.skew_dir[1] * u[1] + spec.skew_dir[2] * u[2]) ** 3
    rho = r_se / np.clip(mod, 0.7, 1.3)

    b1, b2, b3 = spec.shells
    classes = np.zeros(dims, dtype=np.int64)
    classes[rho <= b1] = 1
    classes[rho <= b2] = 2
    classes[rho <= b3] = 3
    return classes


def _warped_spec(spec: SubjectSpec, magnitude: float, rng: np.random.Generator) -> SubjectSpec:
    if magnitude == 0.0:
        return spec
    center = np.asarray(spec.center) + magnitude * rng.uniform(-1, 1, 3) * np.mean(spec.radii)
    radii = np.asarray(spec.radii) * (1.0 + magnitude * rng.uniform(-1, 1, 3))
    shells = np.asarray(spec.shells) * np.concatenate([[1.0], 1.0 + magnitude * rng.uniform(-1, 1, 2)])
    return replace(
        spec,
        center=tuple(center),
        radii=tuple(radii),
        shells=tuple(shells),
    )


def render_scan(spec: SubjectSpec, cfg: ScanConfig, scan_seed: int) -> tuple[Volume, LabelField]:
    """Render one acquisition of a subject; pure in (spec, cfg, scan_seed)."""
    rng = substream(scan_seed, "scan", spec.subject_id)
    warped = _warped_spec(spec, cfg.perturbation, rng)
    classes = _rasterize_classes(warped, cfg.dims)

    means = np.asarray(cfg.class_means, dtype=np.float64)
    intensity = means[classes]

    tex_std = np.asarray(cfg.texture_std, dtype=np.float64)
    if np.any(tex_std > 0):
        field_ = gaussian_filter(rng.standard_normal(cfg.dims), sigma=cfg.texture_sigma)
        std = field_.std()
        if std > 0:
            field_ /= std
        intensity = intensity + tex_std[classes] * field_

    if cfg.noise_std > 0:
        intensity = intensity + cfg.noise_std * rng.standard_normal(cfg.dims)

    intensity = np.clip(intensity, 0.0, 1.0)
    vol = Volume(intensity, subject_id=spec.subject_id, scan_id=f"{spec.subject_id}-t{scan_seed}")
    labels = LabelField.from_classes(classes, spec.num_classes)
    return vol, labels


def generate_dataset(
    num_subjects: int,
    scans_per_subject: int,
    seed: int,
    cfg: ScanConfig | None = None,
) -> list[tuple[Volume, LabelField]]:
    """Render ``num_subjects * scans_per_subject`` labeled scans from one root seed."""
    cfg = cfg or ScanConfig()
    scans = []
    for s in range(num_subjects):
        sub_seed = int(substream(seed, "phantom", s).integers(0, 2**31 - 1))
        spec = generate_subject(sub_seed)
        for t in range(scans_per_subject):
            scan_seed = int(substream(seed, "phantom", s, "scan", t).integers(0, 2**31 - 1))
            scans.append(render_scan(spec, cfg, scan_seed))
    return scans


MANIFEST_NAME = "manifest.txt"


def save_dataset(out_dir: str | Path, scans: list[tuple[Volume, LabelField]]) -> Path:
    """Write MXSG tensors plus the plain-text manifest; returns the manifest path."""
    from .tensorio import write_tensor

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for vol, labels in scans:
        vol_name = f"{vol.scan_id}_vol.mxsg"
        lab_name = f"{vol.scan_id}_lab.mxsg"
        write_tensor(out / vol_name, vol.data, dtype="float32")
        write_tensor(out / lab_name, labels.data, dtype="float32")
        lines.append(f"{vol.subject_id}\t{vol.scan_id}\t{vol_name}\t{lab_name}")
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(in_dir: str | Path) -> list[tuple[Volume, LabelField]]:
    from .tensorio import read_tensor

    in_path = Path(in_dir)
    scans = []
    for line in (in_path / MANIFEST_NAME).read_text().splitlines():
        if not line.strip():
            continue
        subject_id, scan_id, vol_name, lab_name = line.split("\t")
        vol = Volume(read_tensor(in_path / vol_name), subject_id=subject_id, scan_id=scan_id)
        labels = LabelField(read_tensor(in_path / lab_name))
        scans.append((vol, labels))
    return scans
