"""Losses, optimizer, and training loops for the segmenter and the unmixer.

The end-to-end objective supervises both stages: the server-side network on the
mixed label field and the client-side unmixer on the clean target labels,

    loss = w_ce*CE(y_mix_hat, y_mix) + w_dice*DiceLoss(y_mix_hat, y_mix)
         + w_ce*CE(y_tgt_hat, y_tgt) + w_dice*DiceLoss(y_tgt_hat, y_tgt).

Everything is float64 and single-threaded, so runs are bit-reproducible from
(seed, config, data order).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .mixing import DEFAULT_ALPHA_BOUNDS
from .nets import Sequential, softmax_backward, softmax_channels, unmix_input
from .rng import substream

_LOG_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 300
    batch_size: int = 4
    learning_rate: float = 1e-2
    momentum: float = 0.9
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    dice_smooth: float = 1e-5
    alpha_bounds: tuple[float, float] = DEFAULT_ALPHA_BOUNDS
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")


def cross_entropy(probs: np.ndarray, target: np.ndarray):
    """Mean multi-class cross-entropy and its gradient w.r.t. the logits."""
    n_vox = probs.shape[0] * np.prod(probs.shape[2:])
    loss = -np.sum(target * np.log(np.clip(probs, _LOG_EPS, None))) / n_vox
    g_logits = (probs - target) / n_vox
    return float(loss), g_logits


def soft_dice_loss(probs: np.ndarray, target: np.ndarray, smooth: float = 1e-5):
    """Soft Dice loss (1 - mean per-sample per-class overlap) and grad w.r.t. probs."""
    axes = tuple(range(2, probs.ndim))
    inter = 2.0 * np.sum(probs * target, axis=axes) + smooth     # (B,C)
    denom = np.sum(probs, axis=axes) + np.sum(target, axis=axes) + smooth
    loss = 1.0 - float(np.mean(inter / denom))
    shape = inter.shape + (1,) * len(axes)
    inter_b = inter.reshape(shape)
    denom_b = denom.reshape(shape)
    g_probs = -(2.0 * target * denom_b - inter_b) / denom_b**2 / inter.size
    return loss, g_probs


def segmentation_loss(probs: np.ndarray, target: np.ndarray, cfg: TrainConfig):
    """Weighted CE + soft-Dice; returns (loss, gradient w.r.t. logits)."""
    ce, g_ce_logits = cross_entropy(probs, target)
    dl, g_dl_probs = soft_dice_loss(probs, target, cfg.dice_smooth)
    loss = cfg.ce_weight * ce + cfg.dice_weight * dl
    g_logits = cfg.ce_weight * g_ce_logits + cfg.dice_weight * softmax_backward(probs, g_dl_probs)
    return loss, g_logits


class SgdMomentum:
    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * grads[name]
            p += v


def _check_finite(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at iteration {step}")


def _mix_batches(x_t, y_t, x_r, y_r, alphas):
    a_x = alphas[:, None, None, None, None]
    a_y = alphas[:, None, None, None, None]
    x_mix = a_x[:, 0] * x_t + (1.0 - a_x[:, 0]) * x_r          # (B,H,W,D)
    y_mix = a_y * y_t + (1.0 - a_y) * y_r                       # (B,C,H,W,D)
    return x_mix, y_mix


def train_segmenter(net: Sequential, sampler, cfg: TrainConfig) -> list[float]:
    """Generic supervised loop: sampler(rng, batch) -> (x (B,1,H,W,D), y (B,C,H,W,D))."""
    rng = substream(cfg.seed, "train-segmenter")
    opt = SgdMomentum(net.params(), cfg.learning_rate, cfg.momentum)
    history = []
    for step in range(cfg.iterations):
        x, y = sampler(rng, cfg.batch_size)
        net.zero_grads()
        logits = net.forward(x, train=True)
        probs = softmax_channels(logits)
        loss, g_logits = segmentation_loss(probs, y, cfg)
        _check_finite(loss, step)
        net.backward(g_logits)
        opt.step(net.grads())
        history.append(loss)
    return history


def plain_sampler(pairs: list[tuple[np.ndarray, np.ndarray]]):
    """Sampler over fixed (x (H,W,D), y (C,H,W,D)) pairs, with replacement."""
    if not pairs:
        raise ConfigError("no training pairs")

    def sample(rng, batch):
        idx = rng.integers(0, len(pairs), size=batch)
        x = np.stack([pairs[i][0] for i in idx])[:, None]
        y = np.stack([pairs[i][1] for i in idx])
        return x, y

    return sample


def mixture_sampler(targets, references, alpha_bounds=DEFAULT_ALPHA_BOUNDS):
    """Sampler emitting (x_mix, y_mix) from random target/reference pairs.

    Used to train a segmenter that only ever sees mixtures, as the inference
    protocol implies.
    """
    quad = quad_sampler(targets, references)

    def sample(rng, batch):
        x_t, y_t, x_r, y_r = quad(rng, batch)
        alphas = rng.uniform(*alpha_bounds, size=batch)
        x_mix, y_mix = _mix_batches(x_t[:, 0], y_t, x_r[:, 0], y_r, alphas)
        return x_mix[:, None], y_mix

    return sample


def quad_sampler(targets, references):
    """Sampler over (x_target, y_target, x_ref, y_ref) tuples from two patch pools."""
    if not targets or not references:
        raise ConfigError("target and reference pools must be non-empty")

    def sample(rng, batch):
        ti = rng.integers(0, len(targets), size=batch)
        ri = rng.integers(0, len(references), size=batch)
        x_t = np.stack([targets[i][0] for i in ti])[:, None]
        y_t = np.stack([targets[i][1] for i in ti])
        x_r = np.stack([references[i][0] for i in ri])[:, None]
        y_r = np.stack([references[i][1] for i in ri])
        return x_t, y_t, x_r, y_r

    return sample


@dataclass
class EndToEndHistory:
    total: list[float] = field(default_factory=list)
    mixture: list[float] = field(default_factory=list)
    target: list[float] = field(default_factory=list)


def end_to_end_step(segmenter: Sequential, unmixer: Sequential, batch, alphas, cfg: TrainConfig):
    """One forward/backward pass of the joint objective; grads left on the nets.

    Returns (total, mixture-term, target-term) losses. Split out from the loop
    so gradient checks can call it directly.
    """
    x_t, y_t, x_r, y_r = batch
    x_mix, y_mix = _mix_batches(x_t[:, 0], y_t, x_r[:, 0], y_r, alphas)
    x_mix = x_mix[:, None]

    segmenter.zero_grads()
    unmixer.zero_grads()

    logits_s = segmenter.forward(x_mix, train=True)
    probs_s = softmax_channels(logits_s)
    loss_mix, g_logits_s = segmentation_loss(probs_s, y_mix, cfg)

    d_in = np.stack([
        unmix_input(probs_s[b], y_r[b], float(alphas[b])) for b in range(x_mix.shape[0])
    ])
    logits_d = unmixer.forward(d_in, train=True)
    probs_d = softmax_channels(logits_d)
    loss_tgt, g_logits_d = segmentation_loss(probs_d, y_t, cfg)

    g_d_in = unmixer.backward(g_logits_d)
    c = probs_s.shape[1]
    g_logits_s = g_logits_s + softmax_backward(probs_s, g_d_in[:, :c])
    segmenter.backward(g_logits_s)

    return loss_mix + loss_tgt, loss_mix, loss_tgt


def train_end_to_end(segmenter: Sequential, unmixer: Sequential, sampler, cfg: TrainConfig) -> EndToEndHistory:
    """Joint training; sampler(rng, batch) -> (x_t, y_t, x_r, y_r) batches."""
    rng = substream(cfg.seed, "train-end-to-end")
    opt_s = SgdMomentum(segmenter.params(), cfg.learning_rate, cfg.momentum)
    opt_d = SgdMomentum(unmixer.params(), cfg.learning_rate, cfg.momentum)
    history = EndToEndHistory()
    for step in range(cfg.iterations):
        batch = sampler(rng, cfg.batch_size)
        alphas = rng.uniform(*cfg.alpha_bounds, size=cfg.batch_size)
        total, mix, tgt = end_to_end_step(segmenter, unmixer, batch, alphas, cfg)
        _check_finite(total, step)
        opt_s.step(segmenter.grads())
        opt_d.step(unmixer.grads())
        history.total.append(total)
        history.mixture.append(mix)
        history.target.append(tgt)
    return history


def train_unmixer(segmenter: Sequential, unmixer: Sequential, sampler, cfg: TrainConfig) -> list[float]:
    """Train only the unmixer against a frozen segmenter."""
    rng = substream(cfg.seed, "train-unmixer")
    opt_d = SgdMomentum(unmixer.params(), cfg.learning_rate, cfg.momentum)
    history = []
    for step in range(cfg.iterations):
        x_t, y_t, x_r, y_r = sampler(rng, cfg.batch_size)
        alphas = rng.uniform(*cfg.alpha_bounds, size=cfg.batch_size)
        x_mix, _ = _mix_batches(x_t[:, 0], y_t, x_r[:, 0], y_r, alphas)
        probs_s = segmenter.predict_probs(x_mix[:, None])
        d_in = np.stack([
            unmix_input(probs_s[b], y_r[b], float(alphas[b])) for b in range(len(alphas))
        ])
        unmixer.zero_grads()
        logits_d = unmixer.forward(d_in, train=True)
        probs_d = softmax_channels(logits_d)
        loss, g_logits_d = segmentation_loss(probs_d, y_t, cfg)
        _check_finite(loss, step)
        unmixer.backward(g_logits_d)
        opt_d.step(unmixer.grads())
        history.append(loss)
    return history
