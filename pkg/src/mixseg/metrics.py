"""Evaluation measures: per-class Dice, slice-wise MS-SSIM, ICC test-retest
reliability, and similarity-retrieval identification (F1 / mAP).

MS-SSIM doubles as the attack-success score and the re-identification
similarity, so it lives here and everything else imports it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d
from scipy.stats import f as f_dist

from .errors import DegenerateDataError, DimensionError, PairingError
from .volume import LabelField, Volume

# ---------------------------------------------------------------------------
# Dice


def _as_label_array(x) -> np.ndarray:
    if isinstance(x, LabelField):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _harden(probs: np.ndarray) -> np.ndarray:
    # argmax breaks ties toward the lower class index, which keeps hardening
    # deterministic
    return np.argmax(probs, axis=0)


def dice(pred, gt, class_index: int) -> float:
    """Hard Dice 2|A&B| / (|A|+|B|) for one class; 1.0 when both masks are empty."""
    p = _as_label_array(pred)
    g = _as_label_array(gt)
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ")
    if not 0 <= class_index < p.shape[0]:
        raise IndexError(f"class {class_index} out of range for {p.shape[0]} channels")
    a = _harden(p) == class_index
    b = _harden(g) == class_index
    top = 2.0 * np.count_nonzero(a & b)
    bottom = float(np.count_nonzero(a) + np.count_nonzero(b))
    if bottom == 0.0:
        return 1.0
    return top / bottom


@dataclass(frozen=True)
class DiceReport:
    """Per-class Dice plus the macro average over foreground classes.

    The background class is listed in per_class but excluded from the macro
    mean, matching how tissue segmentation scores are usually reported.
    """

    per_class: tuple[float, ...]
    macro: float

    def __post_init__(self):
        for d in self.per_class + (self.macro,):
            if not 0.0 <= d <= 1.0:
                raise ValueError(f"Dice value {d} outside [0,1]")


def dice_report(pred, gt) -> DiceReport:
    p = _as_label_array(pred)
    num_classes = p.shape[0]
    per_class = tuple(dice(pred, gt, c) for c in range(num_classes))
    fg = per_class[1:] if num_classes > 1 else per_class
    return DiceReport(per_class=per_class, macro=float(np.mean(fg)))


# ---------------------------------------------------------------------------
# MS-SSIM

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_K1, _K2 = 0.01, 0.03
_WINDOW = 11
_SIGMA = 1.5


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


_KERNEL = _gaussian_kernel(_WINDOW, _SIGMA)


def _ssim_cs_2d(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term of one 2-D slice pair."""
    c1 = _K1**2
    c2 = _K2**2
    mu_a = convolve2d(a, _KERNEL, mode="valid")
    mu_b = convolve2d(b, _KERNEL, mode="valid")
    var_a = convolve2d(a * a, _KERNEL, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, _KERNEL, mode="valid") - mu_b**2
    cov = convolve2d(a * b, _KERNEL, mode="valid") - mu_a * mu_b
    cs_map = (2.0 * cov + c2) / (var_a + var_b + c2)
    lum_map = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return float(np.mean(lum_map * cs_map)), float(np.mean(cs_map))


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2]) / 4.0


def _usable_scales(shape: tuple[int, int]) -> int:
    m = 0
    size = min(shape)
    while m < len(MSSSIM_WEIGHTS) and size >= _WINDOW:
        m += 1
        size //= 2
    return m


def ms_ssim_2d(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale SSIM of one slice pair; scale count shrinks for small inputs."""
    if a.shape != b.shape:
        raise DimensionError(f"slice shapes differ: {a.shape} vs {b.shape}")
    scales = _usable_scales(a.shape)
    if scales == 0:
        raise DimensionError(f"slice {a.shape} smaller than the {_WINDOW}x{_WINDOW} window")
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    if scales < len(MSSSIM_WEIGHTS):
        warnings.warn(
            f"slice {a.shape} supports only {scales} of {len(MSSSIM_WEIGHTS)} scales; "
            "weights renormalized",
            stacklevel=2,
        )
        weights = weights / weights.sum()
    score = 1.0
    for level in range(scales):
        ssim_mean, cs_mean = _ssim_cs_2d(a, b)
        if level == scales - 1:
            score *= max(ssim_mean, 0.0) ** weights[level]
        else:
            score *= max(cs_mean, 0.0) ** weights[level]
            a = _downsample2(a)
            b = _downsample2(b)
    return float(score)


def _central_slices(vol: np.ndarray):
    h, w, d = vol.shape
    return (vol[:, :, d // 2], vol[:, w // 2, :], vol[h // 2, :, :])


def ms_ssim(a, b) -> float:
    """MS-SSIM between two volumes: mean over the three central orthogonal slices."""
    va = a.data if isinstance(a, Volume) else np.asarray(a, dtype=np.float64)
    vb = b.data if isinstance(b, Volume) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionError(f"volume shapes differ: {va.shape} vs {vb.shape}")
    if va.ndim != 3:
        raise DimensionError(f"expected 3-D volumes, got {va.ndim}-D")
    scores = [ms_ssim_2d(sa, sb) for sa, sb in zip(_central_slices(va), _central_slices(vb))]
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# ICC(2,1) test-retest reliability


@dataclass(frozen=True)
class IccReport:
    estimate: float
    lower: float
    upper: float
    confidence: float = 0.95

    def __post_init__(self):
        if not (-1.0 <= self.lower <= self.estimate <= self.upper <= 1.0):
            raise ValueError(
                f"ICC bounds must satisfy -1 <= lower <= estimate <= upper <= 1, "
                f"got ({self.lower}, {self.estimate}, {self.upper})"
            )


def icc_test_retest(run_a, run_b, confidence: float = 0.95) -> IccReport:
    """ICC(2,1): two-way random effects, absolute agreement, single measurement.

    Computed from ANOVA mean squares of the n-subjects x 2-runs table; the CI
    is the standard F-interval with Satterthwaite denominator df.
    """
    a = np.asarray(run_a, dtype=np.float64)
    b = np.asarray(run_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise PairingError(f"paired 1-D runs required, got {a.shape} and {b.shape}")
    if a.size < 5:
        raise PairingError(f"need at least 5 paired measurements, got {a.size}")
    ratings = np.stack([a, b], axis=1)
    n, k = ratings.shape

    grand = ratings.mean()
    ss_total = float(np.sum((ratings - grand) ** 2))
    if ss_total == 0.0:
        raise DegenerateDataError("all measurements identical; ICC undefined")

    ms_rows = np.var(ratings.mean(axis=1), ddof=1) * k
    ms_cols = np.var(ratings.mean(axis=0), ddof=1) * n
    ms_err = (ss_total - ms_rows * (n - 1) - ms_cols * (k - 1)) / ((n - 1) * (k - 1))

    denom = ms_rows + (k - 1) * ms_err + (k / n) * (ms_cols - ms_err)
    if denom == 0.0:
        raise DegenerateDataError("zero ANOVA variance; ICC undefined")
    estimate = float((ms_rows - ms_err) / denom)

    # Satterthwaite df for the absolute-agreement interval (two-way random).
    alpha = 1.0 - confidence
    mse_safe = max(ms_err, 1e-30)
    fj = ms_cols / mse_safe
    vn = (k - 1) * (n - 1) * (k * estimate * fj + n * (1 + (k - 1) * estimate) - k * estimate) ** 2
    vd = (n - 1) * k**2 * estimate**2 * fj**2 + (n * (1 + (k - 1) * estimate) - k * estimate) ** 2
    v = vn / vd
    f_lower = f_dist.ppf(1 - alpha / 2, n - 1, v)
    f_upper = f_dist.ppf(1 - alpha / 2, v, n - 1)
    cross = (k * n - k - n) * ms_err
    lower = n * (ms_rows - f_lower * ms_err) / (f_lower * (k * ms_cols + cross) + n * ms_rows)
    upper = n * (f_upper * ms_rows - ms_err) / (k * ms_cols + cross + n * f_upper * ms_rows)

    lower = float(np.clip(lower, -1.0, estimate))
    upper = float(np.clip(upper, estimate, 1.0))
    return IccReport(estimate=float(np.clip(estimate, -1.0, 1.0)), lower=lower, upper=upper,
                     confidence=confidence)


# ---------------------------------------------------------------------------
# Re-identification retrieval


@dataclass(frozen=True)
class RetrievalReport:
    f1_score: float
    mean_ap: float
    table: tuple[tuple[int, str, str, float], ...]  # (query idx, predicted, true, top score)
    num_queries: int

    def __post_init__(self):
        if not 0.0 <= self.f1_score <= 1.0 or not 0.0 <= self.mean_ap <= 1.0:
            raise ValueError("retrieval scores must lie in [0,1]")


def expected_average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    """Average precision with ties resolved in expectation over random orderings.

    For distinct scores this is ordinary AP; for tied blocks it returns the
    exact expectation, so constant scores give the random-ranking baseline.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    total_pos = int(positive.sum())
    if total_pos == 0:
        raise DegenerateDataError("query has no positives")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order]
    ap = 0.0
    before = 0
    pos_before = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        t = j - i
        p = int(pos[i:j].sum())
        if p:
            frac = (p - 1) / (t - 1) if t > 1 else 0.0
            for jj in range(1, t + 1):
                expected_precision = (pos_before + 1 + (jj - 1) * frac) / (before + jj)
                ap += (p / t) * expected_precision
        before += t
        pos_before += p
        i = j
    return ap / total_pos


def reid_retrieval(scans, similarity=ms_ssim) -> RetrievalReport:
    """Identity retrieval: rank every other scan by similarity, top-1 predicts
    the subject.

    `scans` is a sequence of (volume, subject_id). Scans whose subject appears
    only once are excluded as queries (no positive exists) but stay in the
    gallery as distractors. F1 is micro-averaged over queries, which for
    single-label top-1 prediction equals accuracy; ties contribute their
    expected hit rate. mAP averages tie-aware expected AP over queries.
    """
    volumes = [v for v, _ in scans]
    subjects = [str(s) for _, s in scans]
    n = len(scans)
    if n < 2:
        raise PairingError("need at least two scans")
    counts = {}
    for s in subjects:
        counts[s] = counts.get(s, 0) + 1
    query_idx = [i for i in range(n) if counts[subjects[i]] >= 2]
    if not query_idx:
        raise PairingError("no subject has two or more scans")

    sim = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = similarity(volumes[i], volumes[j])

    hits = 0.0
    aps = []
    table = []
    for q in query_idx:
        others = [j for j in range(n) if j != q]
        scores = sim[q, others]
        positive = np.array([subjects[j] == subjects[q] for j in others])
        aps.append(expected_average_precision(scores, positive))
        top = scores.max()
        tied = scores == top
        hits += positive[tied].sum() / tied.sum()
        best = others[int(np.argmax(scores))]
        table.append((q, subjects[best], subjects[q], float(top)))

    f1 = hits / len(query_idx)
    return RetrievalReport(
        f1_score=float(f1),
        mean_ap=float(np.mean(aps)),
        table=tuple(table),
        num_queries=len(query_idx),
    )


# ---------------------------------------------------------------------------
# Key=value metric reports


@dataclass
class MetricReport:
    """Flat machine-parseable report: one `key=value` line per metric."""

    values: dict = field(default_factory=dict)

    def set(self, key: str, value) -> None:
        if "=" in key or "\n" in key:
            raise ValueError(f"illegal report key {key!r}")
        self.values[key] = value

    def lines(self) -> list[str]:
        out = []
        for key, value in self.values.items():
            if isinstance(value, float):
                out.append(f"{key}={value!r}")
            else:
                out.append(f"{key}={value}")
        return out

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    @classmethod
    def parse(cls, path) -> "MetricReport":
        report = cls()
        with open(path) as fh:
            for raw in fh:
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, text = line.partition("=")
                report.values[key] = _coerce(text)
        return report


def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def write_csv(path, header: list[str], rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
