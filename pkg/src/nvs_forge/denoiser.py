"""A small convolutional residual denoiser with hand-rolled backprop.

The network predicts injected noise from the concatenation of the noisy
latent, the conditioning latent and a sinusoidal timestep embedding
broadcast over the spatial grid. Frames are processed independently with
shared weights (the batch axis is frames). The final convolution is
zero-initialized so an untrained model predicts exactly zero noise.

Everything is plain numpy so gradients can be verified against central
finite differences in float64; training runs in float32 for speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters; the parameter layout derives from these.

    `dilations` sets the tap spacing of each residual block's convolutions;
    the default (1, 2, 4) stretches the receptive field across a 32x32 frame
    at unchanged cost, which matters for inpainting large hidden regions.
    """

    latent_channels: int = 4
    hidden: int = 40
    blocks: int = 3
    emb_dim: int = 8
    dilations: tuple = (1, 2, 4)
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.dilations) != self.blocks:
            object.__setattr__(self, "dilations",
                               tuple(self.dilations[i % len(self.dilations)]
                                     for i in range(self.blocks)))
        else:
            object.__setattr__(self, "dilations", tuple(self.dilations))

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels + self.emb_dim

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def param_shapes(self) -> list:
        """Declared (name, shape) layout; checkpoints serialize in this order."""
        c = self.in_channels
        f = self.hidden
        shapes = [("conv_in.w", (3, 3, c, f)), ("conv_in.b", (f,))]
        for i in range(self.blocks):
            shapes += [(f"block{i}.conv1.w", (3, 3, f, f)), (f"block{i}.conv1.b", (f,)),
                       (f"block{i}.conv2.w", (3, 3, f, f)), (f"block{i}.conv2.b", (f,))]
        shapes += [("conv_out.w", (3, 3, f, self.latent_channels)),
                   ("conv_out.b", (self.latent_channels,))]
        return shapes

    def to_dict(self) -> dict:
        return {"latent_channels": self.latent_channels, "hidden": self.hidden,
                "blocks": self.blocks, "emb_dim": self.emb_dim,
                "dilations": list(self.dilations), "dtype": self.dtype}

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        d = dict(d)
        if "dilations" in d:
            d["dilations"] = tuple(d["dilations"])
        return DenoiserConfig(**d)


def init_params(config: DenoiserConfig, rng_seed: int) -> dict:
    """He-normal weights, zero biases, zero-initialized output convolution."""
    rng = np.random.default_rng(rng_seed)
    params = {}
    for name, shape in config.param_shapes():
        if name.endswith(".b") or name == "conv_out.w":
            params[name] = np.zeros(shape, dtype=config.np_dtype)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            std = math.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(config.np_dtype)
    return params


def param_count(config: DenoiserConfig) -> int:
    return sum(int(np.prod(s)) for _, s in config.param_shapes())


def timestep_embedding(k: int, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Classic sinusoidal embedding of an integer diffusion step."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    ang = k * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(1)])
    return emb


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int = 1) -> np.ndarray:
    """3x3 same-padding convolution, NHWC, stride 1, optional dilation."""
    n, h, wd, cin = x.shape
    cout = w.shape[-1]
    d = dilation
    xp = np.pad(x, ((0, 0), (d, d), (d, d), (0, 0)))
    y = np.empty((n, h, wd, cout), dtype=x.dtype)
    y[:] = b
    yf = y.reshape(-1, cout)
    for ky in range(3):
        for kx in range(3):
            tap = xp[:, ky * d:ky * d + h, kx * d:kx * d + wd, :].reshape(-1, cin)
            yf += tap @ w[ky, kx]
    return y


def conv2d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray, dilation: int = 1):
    """Gradients of conv2d: returns (dx, dw, db)."""
    n, h, wd, cin = x.shape
    cout = w.shape[-1]
    d = dilation
    xp = np.pad(x, ((0, 0), (d, d), (d, d), (0, 0)))
    dyf = dy.reshape(-1, cout)
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for ky in range(3):
        for kx in range(3):
            tap = xp[:, ky * d:ky * d + h, kx * d:kx * d + wd, :].reshape(-1, cin)
            dw[ky, kx] = tap.T @ dyf
            dxp[:, ky * d:ky * d + h, kx * d:kx * d + wd, :] += \
                (dyf @ w[ky, kx].T).reshape(n, h, wd, cin)
    db = dyf.sum(axis=0)
    return dxp[:, d:-d, d:-d, :], dw, db


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

def forward(params: dict, config: DenoiserConfig, x: np.ndarray,
            want_cache: bool = False):
    """Run the denoiser on a batch (N, H, W, in_channels).

    Returns the prediction (N, H, W, latent_channels), plus the cache of
    layer inputs when `want_cache` so backward() can reuse them.
    """
    if x.shape[-1] != config.in_channels:
        raise ValueError(f"input has {x.shape[-1]} channels, config wants "
                         f"{config.in_channels}")
    cache = {"x": x} if want_cache else None
    h = conv2d(x, params["conv_in.w"], params["conv_in.b"])
    for i in range(config.blocks):
        d = config.dilations[i]
        if want_cache:
            cache[f"b{i}.h_in"] = h
        a1 = silu(h)
        c1 = conv2d(a1, params[f"block{i}.conv1.w"], params[f"block{i}.conv1.b"], d)
        a2 = silu(c1)
        c2 = conv2d(a2, params[f"block{i}.conv2.w"], params[f"block{i}.conv2.b"], d)
        if want_cache:
            cache[f"b{i}.a1"] = a1
            cache[f"b{i}.c1"] = c1
            cache[f"b{i}.a2"] = a2
        h = h + c2
    if want_cache:
        cache["h_out"] = h
    a_out = silu(h)
    if want_cache:
        cache["a_out"] = a_out
    y = conv2d(a_out, params["conv_out.w"], params["conv_out.b"])
    if want_cache:
        return y, cache
    return y


def backward(params: dict, config: DenoiserConfig, cache: dict,
             dy: np.ndarray) -> dict:
    """Parameter gradients for forward(), given d(loss)/d(output)."""
    grads = {}
    da_out, grads["conv_out.w"], grads["conv_out.b"] = conv2d_backward(
        cache["a_out"], params["conv_out.w"], dy)
    dh = silu_backward(cache["h_out"], da_out)
    for i in reversed(range(config.blocks)):
        d = config.dilations[i]
        dc2 = dh
        da2, grads[f"block{i}.conv2.w"], grads[f"block{i}.conv2.b"] = conv2d_backward(
            cache[f"b{i}.a2"], params[f"block{i}.conv2.w"], dc2, d)
        dc1 = silu_backward(cache[f"b{i}.c1"], da2)
        da1, grads[f"block{i}.conv1.w"], grads[f"block{i}.conv1.b"] = conv2d_backward(
            cache[f"b{i}.a1"], params[f"block{i}.conv1.w"], dc1, d)
        dh = dh + silu_backward(cache[f"b{i}.h_in"], da1)
    _, grads["conv_in.w"], grads["conv_in.b"] = conv2d_backward(
        cache["x"], params["conv_in.w"], dh)
    return grads


def loss_and_grads(params: dict, config: DenoiserConfig, x: np.ndarray,
                   target: np.ndarray):
    """Mean-squared-error loss against `target` and its parameter gradients."""
    y, cache = forward(params, config, x, want_cache=True)
    diff = y - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dy = (2.0 / diff.size) * diff
    grads = backward(params, config, cache, dy.astype(y.dtype))
    return loss, grads
