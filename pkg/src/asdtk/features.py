"""The three-channel classifier input: Tgram, Sgram, and the attended TAgram.

The temporal channel comes from a small 1-D conv net over the raw waveform
whose front kernel/stride equal the STFT's n_fft/hop, so its output frame
grid always matches the spectrogram. The attention channel is
parameter-free: a per-frame sigmoid gate driven by average- plus
max-pooling over the spectral axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import MelConfig, Waveform, log_mel
from .errors import ShapeMismatchError

NORM_EPS = 1e-5
LEAKY_SLOPE = 0.01


def channel_norm(x: Tensor, axes) -> Tensor:
    """Zero-mean unit-variance per channel over `axes` (no affine terms)."""
    centered = ad.sub(x, ad.mean(x, axis=axes, keepdims=True))
    var = ad.mean(ad.mul(centered, centered), axis=axes, keepdims=True)
    return ad.div(centered, ad.sqrt(ad.add(var, NORM_EPS)))


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class TgramParams:
    """Weights of the temporal-feature extractor.

    Front conv: (channels, 1, kernel) with stride `stride`, then
    `len(blocks)` pre-activation blocks of (channel norm over time,
    leaky rectifier, 3-tap same-padded conv).
    """

    front_w: Tensor
    front_b: Tensor
    blocks: list  # [(w, b), ...] with w (channels, channels, 3)
    kernel: int
    stride: int

    @property
    def channels(self) -> int:
        return self.front_w.shape[0]

    def named(self, prefix="tgram") -> dict:
        out = {f"{prefix}.front.w": self.front_w, f"{prefix}.front.b": self.front_b}
        for i, (w, b) in enumerate(self.blocks):
            out[f"{prefix}.block{i}.w"] = w
            out[f"{prefix}.block{i}.b"] = b
        return out


def init_tgram_params(rng: np.random.Generator, channels=128, kernel=1024, stride=512,
                      n_blocks=3, dtype=np.float64) -> TgramParams:
    front_w = glorot_uniform(rng, (channels, 1, kernel), kernel, channels * kernel).astype(dtype)
    front_b = np.zeros(channels, dtype=dtype)
    blocks = []
    for _ in range(n_blocks):
        w = glorot_uniform(rng, (channels, channels, 3), channels * 3, channels * 3).astype(dtype)
        blocks.append((Tensor(w, requires_grad=True), Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)))
    return TgramParams(
        Tensor(front_w, requires_grad=True),
        Tensor(front_b, requires_grad=True),
        blocks,
        kernel,
        stride,
    )


def tgram(wave, params: TgramParams) -> Tensor:
    """Temporal features from the raw waveform.

    Accepts (D,) or (B, D); returns (channels, T) or (B, channels, T) with
    T = D // stride + 1, matching the spectrogram frame count.
    """
    x = wave if isinstance(wave, Tensor) else Tensor(wave)
    single = x.data.ndim == 1
    if single:
        x = ad.reshape(x, (1, 1, x.data.size))
    elif x.data.ndim == 2:
        x = ad.reshape(x, (x.shape[0], 1, x.shape[1]))
    else:
        raise ShapeMismatchError(f"tgram: expected a (D,) or (B, D) waveform, got shape {x.shape}")
    out = ad.conv1d(x, params.front_w, params.front_b, stride=params.stride, padding=params.kernel // 2)
    for w, b in params.blocks:
        out = channel_norm(out, axes=-1)
        out = ad.leaky_relu(out, LEAKY_SLOPE)
        out = ad.conv1d(out, w, b, stride=1, padding=1)
    return ad.reshape(out, out.shape[1:]) if single else out


def temporal_attention(x_mel):
    """Per-frame sigmoid gate from spectral average+max pooling.

    Returns (weights, x_ta): weights has one entry in (0, 1) per time
    frame and x_ta = weights * x_mel broadcast over the spectral axis.
    Accepts (F, T) or (B, F, T).
    """
    x = x_mel if isinstance(x_mel, Tensor) else Tensor(x_mel)
    if x.data.ndim not in (2, 3):
        raise ShapeMismatchError(f"temporal_attention: expected (F, T) or (B, F, T), got {x.shape}")
    pooled = ad.add(ad.mean(x, axis=-2, keepdims=True), ad.tensor_max(x, axis=-2, keepdims=True))
    weights = ad.sigmoid(pooled)
    x_ta = ad.mul(weights, x)
    return ad.reshape(weights, weights.shape[:-2] + weights.shape[-1:]), x_ta


def stack_features(x_ta, x_mel, x_t) -> Tensor:
    """Concatenate (TAgram, Sgram, Tgram) along a new channel axis.

    (F, T) inputs give (3, F, T); (B, F, T) inputs give (B, 3, F, T).
    """
    ts = [t if isinstance(t, Tensor) else Tensor(t) for t in (x_ta, x_mel, x_t)]
    shapes = {t.data.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"stack_features: channel shapes differ: {[t.shape for t in ts]}")
    ndim = ts[0].data.ndim
    if ndim == 2:
        parts = [ad.reshape(t, (1,) + t.data.shape) for t in ts]
        return ad.concat(parts, axis=0)
    if ndim == 3:
        b, f, frames = ts[0].data.shape
        parts = [ad.reshape(t, (b, 1, f, frames)) for t in ts]
        return ad.concat(parts, axis=1)
    raise ShapeMismatchError(f"stack_features: expected 2-D or 3-D channels, got {ts[0].shape}")


def extract_channels(waveform: Waveform, cfg: MelConfig):
    """Per-clip constant channels: (sgram, tagram) as float32 (F, T) arrays.

    Neither depends on trainable weights, so they are computed once and
    cached; only the Tgram channel is recomputed during training.
    """
    sgram = log_mel(waveform, cfg).values
    _, x_ta = temporal_attention(Tensor(sgram))
    return sgram.astype(np.float32), x_ta.data.astype(np.float32)
