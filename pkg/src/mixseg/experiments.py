"""End-to-end experiment orchestration: data prep, training, the three study
analogues (accuracy table, ensemble-size curve, privacy suite), and artifact
manifests.

Every stochastic stage draws from a named substream of one root seed, so a
(config, seed) pair reproduces a run bit-for-bit with deterministic backends.
"""
from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np

from .backends import CnnBackend, GroundTruthAccess, NoisyOracleBackend, OracleBackend, unmix_net_apply
from .errors import ConfigError
from .metrics import DiceReport, MetricReport, dice_report, icc_test_retest, ms_ssim, reid_retrieval, write_csv
from .mixing import MixKey, build_mix_key, naive_unmix, tta_decode, tta_encode
from .nets import Sequential, tiny_cnn, unmix_net
from .phantom import ScanConfig, generate_dataset
from .protocol import segment_volume_local
from .rng import substream
from .training import TrainConfig, plain_sampler, quad_sampler, train_end_to_end, train_segmenter
from .volume import LabelField, PatchGrid, Volume, extract_label_patches, extract_patches, reassemble
from . import attacks as attacks_mod

# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    num_subjects: int = 26
    scans_per_subject: int = 2
    dims: tuple[int, int, int] = (48, 48, 48)
    patch: tuple[int, int, int] = (16, 16, 16)
    noise_std: float = 0.02
    texture_sigma: float = 2.5
    alpha: float = 0.5
    alpha_lo: float = 0.2
    alpha_hi: float = 0.8
    key_k: int = 10
    tta_k: tuple[int, ...] = (1, 5, 10, 30)
    table_tta_k: int = 10
    backend: str = "tiny-cnn"
    backend_noise_std: float = 0.5
    train_iterations: int = 900
    train_batch: int = 4
    learning_rate: float = 1e-2
    momentum: float = 0.9
    holdout_subjects: int = 6
    attack_alphas: tuple[float, ...] = (0.2, 0.4, 0.6)
    attack_samples: int = 3
    tv_iterations: int = 150
    library_size: int = 12
    reid_subjects: int = 10

    def __post_init__(self):
        if not 0 < self.alpha_lo <= self.alpha_hi < 1:
            raise ConfigError("alpha bounds must satisfy 0 < lo <= hi < 1")
        if self.holdout_subjects >= self.num_subjects:
            raise ConfigError("holdout split must leave training subjects")
        if self.backend not in ("oracle", "noisy-oracle", "tiny-cnn"):
            raise ConfigError(f"unknown backend {self.backend!r}")

    @property
    def alpha_bounds(self) -> tuple[float, float]:
        return (self.alpha_lo, self.alpha_hi)

    def train_config(self, seed_name: str = "train") -> TrainConfig:
        return TrainConfig(
            iterations=self.train_iterations,
            batch_size=self.train_batch,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            alpha_bounds=self.alpha_bounds,
            seed=_derived_seed(self.seed, seed_name),
        )


_TUPLE_INT = ("dims", "patch", "tta_k")
_TUPLE_FLOAT = ("attack_alphas",)

_KEYMAP = {
    "seeds.root": "seed",
    "phantom.subjects": "num_subjects",
    "phantom.scans_per_subject": "scans_per_subject",
    "phantom.dims": "dims",
    "phantom.noise_std": "noise_std",
    "phantom.texture_sigma": "texture_sigma",
    "grid.patch": "patch",
    "mix.alpha": "alpha",
    "mix.alpha_lo": "alpha_lo",
    "mix.alpha_hi": "alpha_hi",
    "mix.k": "key_k",
    "tta.k_list": "tta_k",
    "tta.table_k": "table_tta_k",
    "backend.variant": "backend",
    "backend.noise_std": "backend_noise_std",
    "train.iterations": "train_iterations",
    "train.batch": "train_batch",
    "train.lr": "learning_rate",
    "train.momentum": "momentum",
    "split.holdout_subjects": "holdout_subjects",
    "attack.alphas": "attack_alphas",
    "attack.samples": "attack_samples",
    "attack.tv_iterations": "tv_iterations",
    "attack.library_size": "library_size",
    "reid.subjects": "reid_subjects",
}
_FIELD_TO_KEY = {v: k for k, v in _KEYMAP.items()}


def parse_config(path) -> ExperimentConfig:
    """Flat key=value config with section prefixes, e.g. ``train.lr=0.01``."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, text = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key = key.strip()
            if key not in _KEYMAP:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[_KEYMAP[key]] = _parse_value(_KEYMAP[key], text.strip())
    return ExperimentConfig(**values)


def _parse_value(field_name: str, text: str):
    if field_name in _TUPLE_INT:
        return tuple(int(v) for v in text.split(",") if v)
    if field_name in _TUPLE_FLOAT:
        return tuple(float(v) for v in text.split(",") if v)
    for fld in fields(ExperimentConfig):
        if fld.name == field_name:
            if fld.type == "int":
                return int(text)
            if fld.type == "float":
                return float(text)
            return text
    raise ConfigError(f"no such config field {field_name}")


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        for fld in fields(ExperimentConfig):
            value = getattr(cfg, fld.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            fh.write(f"{_FIELD_TO_KEY[fld.name]}={value}\n")


def _derived_seed(root: int, name: str) -> int:
    return int(substream(root, name).integers(0, 2**31))


# ---------------------------------------------------------------------------
# Data preparation


@dataclass
class ExperimentData:
    train_scans: list
    holdout: list                       # (subject_id, Volume, LabelField)
    train_pairs: list                   # (x patch, y patch) from train scans
    reference_pool: list                # (Volume, LabelField), client-private


def _scan_config(cfg: ExperimentConfig) -> ScanConfig:
    return ScanConfig(dims=cfg.dims, noise_std=cfg.noise_std, texture_sigma=cfg.texture_sigma)


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    dataset = generate_dataset(
        cfg.num_subjects, cfg.scans_per_subject,
        seed=_derived_seed(cfg.seed, "phantom"), cfg=_scan_config(cfg),
    )
    by_subject: dict[str, list] = {}
    for vol, labels in dataset:
        by_subject.setdefault(vol.subject_id, []).append((vol, labels))
    subjects = sorted(by_subject)
    holdout_ids = subjects[-cfg.holdout_subjects:]
    train_ids = subjects[: len(subjects) - cfg.holdout_subjects]

    train_scans = [pair for s in train_ids for pair in by_subject[s]]
    holdout = [(s, vol, labels) for s in holdout_ids for vol, labels in by_subject[s]]

    grid = PatchGrid.cover(cfg.dims, cfg.patch)
    train_pairs = []
    for vol, labels in train_scans:
        xs = extract_patches(vol, grid)
        ys = extract_label_patches(labels, grid)
        train_pairs.extend((x.data, y.data) for x, y in zip(xs, ys))

    return ExperimentData(
        train_scans=train_scans,
        holdout=holdout,
        train_pairs=train_pairs,
        reference_pool=list(train_scans),
    )


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainedPipeline:
    segmenter: Sequential
    unmixer: Sequential
    segmenter_raw: Sequential | None
    history_total: list
    history_raw: list


def train_pipeline(cfg: ExperimentConfig, data: ExperimentData, with_raw_baseline: bool = True) -> TrainedPipeline:
    num_classes = data.train_scans[0][1].num_classes
    segmenter = tiny_cnn(num_classes, seed=_derived_seed(cfg.seed, "init-seg"))
    unmixer = unmix_net(num_classes, seed=_derived_seed(cfg.seed, "init-unmix"))
    sampler = quad_sampler(data.train_pairs, data.train_pairs)
    history = train_end_to_end(segmenter, unmixer, sampler, cfg.train_config("train-e2e"))

    segmenter_raw = None
    history_raw = []
    if with_raw_baseline:
        segmenter_raw = tiny_cnn(num_classes, seed=_derived_seed(cfg.seed, "init-raw"))
        history_raw = train_segmenter(
            segmenter_raw, plain_sampler(data.train_pairs), cfg.train_config("train-raw")
        )
    return TrainedPipeline(segmenter, unmixer, segmenter_raw, history.total, history_raw)


def segment_plain(vol: Volume, net: Sequential, patch_dims) -> LabelField:
    """No-privacy reference path: segment raw patches directly."""
    grid = PatchGrid.cover(vol.dims, tuple(patch_dims))
    patches = extract_patches(vol, grid)
    decoded = [(p.origin, net.predict_patch(p.data[None])) for p in patches]
    return reassemble(decoded, vol.dims)


# ---------------------------------------------------------------------------
# Decoder evaluation (shared by the table and the ensemble curve)


def evaluate_decoders(vol, labels, key: MixKey, backend, unmixer, k_list, session_id: int = 0):
    """Dice of naive and learned decoding at every K, reusing one backend pass.

    Returns {(decoder, k): DiceReport}. The K per-reference mixture
    predictions are computed once; ensembles are nested prefixes, which is
    exactly what a client reusing one key would do.
    """
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list:
        return {}
    kmax = k_list[-1]
    if kmax > key.k:
        raise ConfigError(f"K={kmax} exceeds key references {key.k}")
    grid = PatchGrid.cover(vol.dims, key.patch_dims)
    patches = extract_patches(vol, grid)

    naive_per_patch = []
    learned_per_patch = []
    for pid, patch in enumerate(patches):
        pairs = tta_encode(patch.data, key)[:kmax]
        naive_refs = []
        learned_refs = []
        for rid, pair in enumerate(pairs):
            y_mix_hat = backend.segment(pair.x_mix, session_id, pid * key.k + rid)
            y_ref = key.references[rid][1]
            naive_refs.append(naive_unmix(y_mix_hat, y_ref, key.alpha))
            if unmixer is not None:
                learned_refs.append(unmix_net_apply(unmixer, y_mix_hat, y_ref, key.alpha))
        naive_per_patch.append(naive_refs)
        learned_per_patch.append(learned_refs)

    out = {}
    for k in k_list:
        for name, per_patch in (("naive", naive_per_patch), ("learned", learned_per_patch)):
            if not per_patch[0]:
                continue
            decoded = [(p.origin, tta_decode(refs[:k])) for p, refs in zip(patches, per_patch)]
            out[(name, k)] = dice_report(reassemble(decoded, vol.dims), labels)
    return out


def _holdout_key(cfg: ExperimentConfig, data: ExperimentData, index: int, kmax: int,
                 pool=None, alpha: float | None = None) -> MixKey:
    pool = data.reference_pool if pool is None else pool
    return build_mix_key(
        pool, cfg.patch, k=kmax,
        rng_seed=_derived_seed(cfg.seed, f"holdout-key-{index}"),
        alpha_bounds=cfg.alpha_bounds,
        alpha=cfg.alpha if alpha is None else alpha,
    )


# ---------------------------------------------------------------------------
# Study analogues


_TABLE_ROWS = ("baseline_raw", "naive", "naive_tta", "learned", "learned_tta")


def run_table1_analogue(cfg: ExperimentConfig, pipeline: TrainedPipeline | None = None,
                        data: ExperimentData | None = None, out_dir=None) -> MetricReport:
    """Accuracy table: raw baseline, naive and learned decoding, each with TTA."""
    data = prepare_data(cfg) if data is None else data
    pipeline = train_pipeline(cfg, data) if pipeline is None else pipeline
    backend = CnnBackend(pipeline.segmenter)
    k_list = [1] + ([cfg.table_tta_k] if cfg.table_tta_k else [])

    num_classes = data.holdout[0][2].num_classes
    sums: dict[str, np.ndarray] = {row: np.zeros(num_classes + 1) for row in _TABLE_ROWS}
    counts: dict[str, int] = {row: 0 for row in _TABLE_ROWS}
    per_case = []

    def add(row: str, report: DiceReport, case: str):
        sums[row] += np.array(report.per_class + (report.macro,))
        counts[row] += 1
        per_case.append([case, row] + [f"{v:.6f}" for v in report.per_class] + [f"{report.macro:.6f}"])

    for idx, (subject, vol, labels) in enumerate(data.holdout):
        case = f"{subject}:{vol.scan_id}"
        if pipeline.segmenter_raw is not None:
            add("baseline_raw", dice_report(segment_plain(vol, pipeline.segmenter_raw, cfg.patch), labels), case)
        key = _holdout_key(cfg, data, idx, max(k_list))
        results = evaluate_decoders(vol, labels, key, backend, pipeline.unmixer, k_list)
        add("naive", results[("naive", 1)], case)
        add("learned", results[("learned", 1)], case)
        if cfg.table_tta_k:
            add("naive_tta", results[("naive", cfg.table_tta_k)], case)
            add("learned_tta", results[("learned", cfg.table_tta_k)], case)

    report = MetricReport()
    report.set("table1.alpha", cfg.alpha)
    report.set("table1.tta_k", cfg.table_tta_k)
    report.set("table1.holdout_scans", len(data.holdout))
    for row in _TABLE_ROWS:
        if counts[row] == 0:
            continue
        mean = sums[row] / counts[row]
        for c in range(num_classes):
            report.set(f"table1.{row}.class{c}", float(mean[c]))
        report.set(f"table1.{row}.macro", float(mean[-1]))

    if out_dir is not None:
        report.write(os.path.join(out_dir, "table1.txt"))
        header = ["case", "row"] + [f"class{c}" for c in range(num_classes)] + ["macro"]
        write_csv(os.path.join(out_dir, "table1_cases.csv"), header, per_case)
    return report


def run_fig3_analogue(cfg: ExperimentConfig, k_list=None, pipeline: TrainedPipeline | None = None,
                      data: ExperimentData | None = None, out_dir=None, decoder: str = "learned"):
    """Ensemble-size curve: mean macro Dice per K; returns [(k, dice), ...]."""
    data = prepare_data(cfg) if data is None else data
    pipeline = train_pipeline(cfg, data, with_raw_baseline=False) if pipeline is None else pipeline
    ks = list(cfg.tta_k if k_list is None else k_list)
    deduped = sorted(set(int(k) for k in ks))
    if len(deduped) != len(ks):
        warnings.warn("duplicate K values removed from ensemble sweep", stacklevel=2)
    backend = CnnBackend(pipeline.segmenter)

    per_k = {k: [] for k in deduped}
    for idx, (subject, vol, labels) in enumerate(data.holdout):
        key = _holdout_key(cfg, data, idx, max(deduped))
        results = evaluate_decoders(vol, labels, key, backend, pipeline.unmixer, deduped)
        for k in deduped:
            per_k[k].append(results[(decoder, k)].macro)

    rows = [(k, float(np.mean(per_k[k]))) for k in deduped]
    if out_dir is not None:
        write_csv(os.path.join(out_dir, "fig3.csv"), ["k", "dice"], rows)
    return rows


def _independent_scans(cfg: ExperimentConfig, name: str, count: int):
    """Phantoms generated outside the main dataset (attacker side, mixing pool)."""
    dataset = generate_dataset(count, 1, seed=_derived_seed(cfg.seed, name), cfg=_scan_config(cfg))
    return dataset


def run_privacy_suite(cfg: ExperimentConfig, pipeline: TrainedPipeline | None = None,
                      data: ExperimentData | None = None, out_dir=None) -> MetricReport:
    """Privacy report: attack recovery, re-identification drop, decode reliability."""
    data = prepare_data(cfg) if data is None else data
    report = MetricReport()

    # Re-identification and attacks share one gallery of subjects with >= 2 scans.
    by_subject: dict[str, list[Volume]] = {}
    for vol, _ in data.train_scans:
        by_subject.setdefault(vol.subject_id, []).append(vol)
    gallery_subjects = sorted(by_subject)[: cfg.reid_subjects]
    scans = [(vol, s) for s in gallery_subjects for vol in by_subject[s]]

    mix_pool = [vol for vol, _ in _independent_scans(cfg, "privacy-mix-pool", 6)]
    library = [vol.data for vol, _ in _independent_scans(cfg, "attack-library", cfg.library_size)]

    raw = reid_retrieval(scans)
    report.set("reid.raw.map", raw.mean_ap)
    report.set("reid.raw.f1", raw.f1_score)

    rows = attacks_mod.privacy_sweep(
        scans, mix_pool, cfg.attack_alphas,
        attacks=("tv", "dictionary"),
        attack_samples=cfg.attack_samples,
        library=library,
        seed=_derived_seed(cfg.seed, "privacy-sweep"),
        tv_iterations=cfg.tv_iterations,
    )
    for row in rows:
        prefix = f"privacy.alpha_{row.alpha:g}.{row.attack}"
        report.set(f"{prefix}.mean_msssim", row.mean_ms_ssim)
        report.set(f"{prefix}.reid_map", row.reid_map)

    # Keyed inversion sanity: with the true reference and alpha the mixture
    # inverts exactly.
    vol0 = scans[0][0].data
    ref0 = mix_pool[0].data
    x_mix = cfg.alpha * vol0 + (1 - cfg.alpha) * ref0
    keyed = (x_mix - (1 - cfg.alpha) * ref0) / cfg.alpha
    report.set("privacy.keyed_inverse.msssim", ms_ssim(np.clip(keyed, 0, 1), vol0))

    # Test-retest reliability of the learned decoder under disjoint reference pools.
    if pipeline is not None:
        half = len(data.reference_pool) // 2
        pool_a = data.reference_pool[:half]
        pool_b = data.reference_pool[half:]
        backend = CnnBackend(pipeline.segmenter)
        run_a, run_b = [], []
        seen = set()
        for idx, (subject, vol, labels) in enumerate(data.holdout):
            if subject in seen:
                continue
            seen.add(subject)
            scores = []
            for tag, pool in (("a", pool_a), ("b", pool_b)):
                key = build_mix_key(
                    pool, cfg.patch, k=cfg.table_tta_k,
                    rng_seed=_derived_seed(cfg.seed, f"icc-{tag}-{idx}"),
                    alpha_bounds=cfg.alpha_bounds, alpha=cfg.alpha,
                )
                pred = segment_volume_local(vol, key, backend, decoder="learned",
                                            unmixer=pipeline.unmixer)
                scores.append(dice_report(pred, labels).macro)
            run_a.append(scores[0])
            run_b.append(scores[1])
        icc = icc_test_retest(run_a, run_b)
        report.set("icc.estimate", icc.estimate)
        report.set("icc.lower", icc.lower)
        report.set("icc.upper", icc.upper)
        report.set("icc.subjects", len(run_a))

    if out_dir is not None:
        report.write(os.path.join(out_dir, "privacy.txt"))
    return report


# ---------------------------------------------------------------------------
# Full run + manifest


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, paths) -> str:
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        for path in sorted(paths):
            rel = os.path.relpath(path, out_dir)
            fh.write(f"{sha256_file(path)}  {rel}\n")
    return manifest


def run_all(cfg: ExperimentConfig, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    data = prepare_data(cfg)
    pipeline = train_pipeline(cfg, data)

    seg_path = os.path.join(out_dir, "segmenter.ckpt")
    unmix_path = os.path.join(out_dir, "unmixer.ckpt")
    pipeline.segmenter.save(seg_path)
    pipeline.unmixer.save(unmix_path)

    run_table1_analogue(cfg, pipeline, data, out_dir=out_dir)
    run_fig3_analogue(cfg, pipeline=pipeline, data=data, out_dir=out_dir)
    run_privacy_suite(cfg, pipeline, data, out_dir=out_dir)
    cfg_path = os.path.join(out_dir, "config.txt")
    save_config(cfg, cfg_path)

    artifacts = [
        seg_path, unmix_path, cfg_path,
        os.path.join(out_dir, "table1.txt"),
        os.path.join(out_dir, "table1_cases.csv"),
        os.path.join(out_dir, "fig3.csv"),
        os.path.join(out_dir, "privacy.txt"),
    ]
    manifest = write_manifest(out_dir, artifacts)
    return {"manifest": manifest, "out_dir": out_dir}
