"""Small 3-D convolutional networks in plain numpy.

Layout is channels-first throughout: activations are (N, C, H, W, D) and
kernels are (C_out, C_in, k, k, k) with stride 1 and same padding, so spatial
dims never change. Forward convolution is a strided-window tensordot; the
backward pass reuses the same primitive with flipped kernels.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from . import tensorio

# Largest batch convolved in one shot; the window view expands memory by k^3.
CONV_CHUNK = 8


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 3-D convolution of (N,Cin,H,W,D) with (Cout,Cin,k,k,k)."""
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError("conv3d expects (N,C,H,W,D) input and 5-D kernel")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    win = _windows(x, w.shape[2])                              # (N,Cin,H,W,D,k,k,k)
    y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # (N,H,W,D,Cout)
    return np.moveaxis(y, -1, 1) + b[None, :, None, None, None]


def conv3d_backward(x: np.ndarray, w: np.ndarray, g_out: np.ndarray):
    """Gradients of a same-padded conv: returns (g_x, g_w, g_b)."""
    k = w.shape[2]
    win = _windows(x, k)
    g_w = np.tensordot(g_out, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # (Cout,Cin,k,k,k)
    g_b = g_out.sum(axis=(0, 2, 3, 4))
    w_flip = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)        # (Cin,Cout,k,k,k)
    gwin = _windows(g_out, k)
    g_x = np.tensordot(gwin, w_flip, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.moveaxis(g_x, -1, 1), g_w, g_b


class Conv3d:
    def __init__(self, c_in: int, c_out: int, ksize: int, rng: np.random.Generator, name: str):
        limit = np.sqrt(6.0 / ((c_in + c_out) * ksize**3))
        self.w = rng.uniform(-limit, limit, size=(c_out, c_in, ksize, ksize, ksize))
        self.b = np.zeros(c_out)
        self.name = name
        self.g_w = np.zeros_like(self.w)
        self.g_b = np.zeros_like(self.b)
        self._x = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._x = x
        return conv3d_forward(x, self.w, self.b)

    def backward(self, g_out: np.ndarray) -> np.ndarray:
        g_x, g_w, g_b = conv3d_backward(self._x, self.w, g_out)
        self.g_w += g_w
        self.g_b += g_b
        return g_x

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.w": self.g_w, f"{self.name}.b": self.g_b}


class Tanh:
    def __init__(self):
        self._y = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        y = np.tanh(x)
        if train:
            self._y = y
        return y

    def backward(self, g_out: np.ndarray) -> np.ndarray:
        return g_out * (1.0 - self._y**2)

    def params(self):
        return {}

    def grads(self):
        return {}


def softmax_channels(z: np.ndarray) -> np.ndarray:
    """Stable softmax over the channel axis of (N,C,H,W,D) or (C,H,W,D)."""
    axis = 1 if z.ndim == 5 else 0
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, g_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. probabilities back through the channel softmax."""
    axis = 1 if probs.ndim == 5 else 0
    dot = (g_probs * probs).sum(axis=axis, keepdims=True)
    return probs * (g_probs - dot)


class Sequential:
    """Stack of layers ending in logits; softmax is applied by the caller."""

    def __init__(self, layers: list, in_channels: int, out_channels: int):
        self.layers = layers
        self.in_channels = in_channels
        self.out_channels = out_channels

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 5:
            raise DimensionError("network input must be (N,C,H,W,D)")
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g_logits: np.ndarray) -> np.ndarray:
        g = g_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grads(self) -> None:
        for layer in self.layers:
            for g in layer.grads().values():
                g[...] = 0.0

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.grads())
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        current = self.params()
        if set(values) != set(current):
            missing = set(current) ^ set(values)
            raise KeyError(f"parameter names do not match network: {sorted(missing)}")
        for name, arr in values.items():
            if current[name].shape != arr.shape:
                raise DimensionError(f"shape mismatch for {name}: {current[name].shape} vs {arr.shape}")
            current[name][...] = arr

    def predict_probs(self, x: np.ndarray, chunk: int = CONV_CHUNK) -> np.ndarray:
        """Softmax predictions for a batch, convolving at most `chunk` items at once."""
        outs = []
        for start in range(0, x.shape[0], chunk):
            logits = self.forward(x[start:start + chunk], train=False)
            outs.append(softmax_channels(logits))
        return np.concatenate(outs, axis=0)

    def predict_patch(self, x: np.ndarray) -> np.ndarray:
        """Softmax prediction for one (C,H,W,D) patch."""
        return self.predict_probs(x[None])[0]

    def save(self, path) -> None:
        tensorio.save_checkpoint(path, self.params())

    def load(self, path) -> None:
        self.set_params(tensorio.load_checkpoint(path))


def tiny_cnn(num_classes: int, in_channels: int = 1, width: int = 16, seed: int = 0) -> Sequential:
    """Three 3x3x3 conv layers with tanh between, no downsampling, logits out."""
    from .rng import substream

    rng = substream(seed, "tiny-cnn-init")
    layers = [
        Conv3d(in_channels, width, 3, rng, "conv1"), Tanh(),
        Conv3d(width, width, 3, rng, "conv2"), Tanh(),
        Conv3d(width, num_classes, 3, rng, "conv3"),
    ]
    return Sequential(layers, in_channels, num_classes)


def unmix_net(num_classes: int, width: int = 16, seed: int = 0) -> Sequential:
    """Learned unmixer: sees (y_mix_hat, y_ref, alpha map) and emits target logits.

    Input is 2C+1 channels: the server's mixture prediction, the key-side
    reference labels, and a constant channel holding alpha.
    """
    from .rng import substream

    c_in = 2 * num_classes + 1
    rng = substream(seed, "unmix-net-init")
    layers = [
        Conv3d(c_in, width, 3, rng, "unmix1"), Tanh(),
        Conv3d(width, num_classes, 3, rng, "unmix2"),
    ]
    return Sequential(layers, c_in, num_classes)


def unmix_input(y_mix_hat: np.ndarray, y_ref: np.ndarray, alpha: float) -> np.ndarray:
    """Stack the unmixer's conditioning channels for one patch."""
    if y_mix_hat.shape != y_ref.shape:
        raise DimensionError(f"prediction/reference shapes differ: {y_mix_hat.shape} vs {y_ref.shape}")
    alpha_map = np.full((1,) + y_mix_hat.shape[1:], alpha, dtype=np.float64)
    return np.concatenate([y_mix_hat, y_ref, alpha_map], axis=0)
