"""Audio ingestion and the log-mel spectrogram front end.

The STFT convention is frozen here and recorded in every checkpoint header:
Hann window (periodic), centered frames with reflect padding, power
spectrogram, HTK mel scale with area-normalized triangular filters, and
log(power + log_floor). Defaults reproduce a 128x313 spectrogram for a
10-second clip at 16 kHz.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DspError, WavFormatError

# Clips at other rates are rejected rather than resampled; resampling is
# out of scope and silent drift would be worse than an error.
EXPECTED_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    """Mono audio clip; samples are floats in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size == 0:
            raise DspError("waveform must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise DspError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.isfinite(samples).all():
            raise DspError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 1024
    hop: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int) -> None:
        if not 0 < self.hop <= self.n_fft:
            raise DspError(f"require 0 < hop <= n_fft, got hop={self.hop}, n_fft={self.n_fft}")
        if not 0 <= self.fmin < self.fmax <= sample_rate / 2:
            raise DspError(
                f"require 0 <= fmin < fmax <= sr/2, got fmin={self.fmin}, fmax={self.fmax}, sr={sample_rate}"
            )
        if self.n_mels < 1:
            raise DspError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.log_floor <= 0:
            raise DspError(f"log_floor must be positive, got {self.log_floor}")

    def frames(self, n_samples: int) -> int:
        return n_samples // self.hop + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MelConfig":
        return cls(**d)


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (n_mels, frames)
    mel_config: MelConfig

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------------
# WAV container I/O (16-bit PCM only, which is all the corpus writer emits)


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file: 16-bit PCM, multi-channel averaged to mono."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise WavFormatError("file too short for a RIFF header", offset=0)
    if raw[0:4] != b"RIFF":
        raise WavFormatError("missing RIFF magic", offset=0)
    if raw[8:12] != b"WAVE":
        raise WavFormatError("missing WAVE form type", offset=8)

    fmt = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = pos + 8
        if body + size > len(raw):
            raise WavFormatError(
                f"chunk {chunk_id!r} claims {size} bytes but file ends early", offset=pos
            )
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk too short", offset=pos)
            audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", raw, body)
            if audio_format != 1 or bits != 16:
                raise WavFormatError(
                    f"unsupported codec (format={audio_format}, bits={bits}); only 16-bit PCM is supported",
                    offset=pos,
                )
            if channels < 1:
                raise WavFormatError("fmt chunk declares zero channels", offset=pos)
            fmt = (channels, rate)
        elif chunk_id == b"data":
            if fmt is None:
                raise WavFormatError("data chunk before fmt chunk", offset=pos)
            channels, rate = fmt
            frame_bytes = 2 * channels
            if size % frame_bytes:
                raise WavFormatError("data chunk size is not a whole number of frames", offset=pos)
            pcm = np.frombuffer(raw, dtype="<i2", count=size // 2, offset=body)
            samples = pcm.reshape(-1, channels).mean(axis=1) / 32768.0
            return Waveform(samples, rate)
        pos = body + size + (size & 1)  # chunks are word-aligned
    raise WavFormatError("no data chunk found", offset=pos)


def write_wav(path, waveform: Waveform) -> None:
    """Write mono 16-bit PCM."""
    pcm = np.clip(np.round(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    rate = waveform.sample_rate
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(data))
    Path(path).write_bytes(header + data)


# ---------------------------------------------------------------------------
# mel spectrogram


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig, sample_rate: int) -> np.ndarray:
    """Triangular filters on the HTK mel scale, area-normalized per band.

    Returns a (n_mels, n_fft//2 + 1) matrix. Raises if any band has empty
    support, which happens when n_mels outruns the FFT resolution.
    """
    cfg.validate(sample_rate)
    n_bins = cfg.n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * (sample_rate / cfg.n_fft)
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)

    fb = np.zeros((cfg.n_mels, n_bins))
    for i in range(cfg.n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - center, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        fb[i] *= 2.0 / (hi - lo)  # unit area in Hz
    if not (fb.sum(axis=1) > 0).all():
        raise DspError(
            f"n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft} at {sample_rate} Hz: empty filter"
        )
    return fb


def filter_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel band."""
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return _mel_to_hz(mel_pts)[1:-1]


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Power STFT with centered frames (reflect padding) and a Hann window."""
    x = np.asarray(samples, dtype=np.float64)
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = x.size // hop + 1
    s = xp.strides[0]
    frames = as_strided(xp, shape=(n_frames, n_fft), strides=(s * hop, s))
    spec = np.fft.rfft(frames * _hann(n_fft), axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T  # (n_fft//2+1, frames)


def log_mel(waveform: Waveform, cfg: MelConfig = MelConfig()) -> Spectrogram:
    """log(mel power + floor); shape (n_mels, n_samples//hop + 1)."""
    if waveform.sample_rate != EXPECTED_SAMPLE_RATE:
        raise DspError(
            f"sample rate {waveform.sample_rate} != {EXPECTED_SAMPLE_RATE}; resampling is not supported"
        )
    cfg.validate(waveform.sample_rate)
    if len(waveform) < cfg.n_fft:
        raise DspError(f"clip of {len(waveform)} samples shorter than n_fft={cfg.n_fft}")
    power = stft_power(waveform.samples, cfg.n_fft, cfg.hop)
    mel = mel_filterbank(cfg, waveform.sample_rate) @ power
    return Spectrogram(np.log(mel + cfg.log_floor), cfg)


# ---------------------------------------------------------------------------
# raw export for golden files


def save_spectrogram_raw(spec: Spectrogram, path) -> None:
    """Write little-endian float32 raw (row-major) plus a JSON sidecar."""
    path = Path(path)
    path.write_bytes(spec.values.astype("<f4").tobytes())
    sidecar = {"shape": list(spec.values.shape), "dtype": "<f4", "mel_config": spec.mel_config.to_dict()}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_spectrogram_raw(path) -> Spectrogram:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    values = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(sidecar["shape"]).astype(np.float64)
    return Spectrogram(values, MelConfig.from_dict(sidecar["mel_config"]))
