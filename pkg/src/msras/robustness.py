"""Training-time augmentations and evaluation-time distortions.

All functions accept either a :class:`Waveform` or a tensor shaped
``[..., channels, length]`` and draw randomness from an explicit
``numpy.random.Generator``. Tensor paths stay differentiable.
"""

from __future__ import annotations

import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import signal

from .audio import AudioError, Waveform, read_wav, write_wav

LOWPASS_TAPS = 255
EQ_EDGES_HZ = (200.0, 800.0, 3000.0, 10000.0)
REFERENCE_RATE = 44100
KINDS = ("channel_mask", "gaussian_noise", "random_lowpass", "channel_drop", "five_band_eq",
         "compression_surrogate", "external_codec")

WaveLike = Union[Waveform, torch.Tensor]


class DistortionError(ValueError):
    pass


def _unwrap(wave: WaveLike):
    if isinstance(wave, Waveform):
        return wave.samples, wave.sample_rate
    return wave, None


def _rewrap(samples: torch.Tensor, rate: Optional[int]):
    return Waveform(samples, rate) if rate is not None else samples


def channel_mask(wave: WaveLike, rng: np.random.Generator) -> WaveLike:
    """Zero a contiguous half-length segment of one randomly chosen channel."""
    x, rate = _unwrap(wave)
    channels, length = x.shape[-2:]
    if channels < 2:
        raise DistortionError("channel masking needs at least two channels")
    span = math.ceil(length / 2)
    lead = x.shape[:-2]
    mask = torch.ones_like(x)
    flat = mask.reshape(-1, channels, length)
    for item in flat:
        ch = int(rng.integers(channels))
        start = int(rng.integers(0, length - span + 1))
        item[ch, start:start + span] = 0
    return _rewrap(x * flat.reshape(*lead, channels, length), rate)


def add_gaussian_noise(wave: WaveLike, sigma: float, rng: np.random.Generator) -> WaveLike:
    if sigma < 0:
        raise DistortionError(f"sigma must be non-negative, got {sigma}")
    x, rate = _unwrap(wave)
    if sigma == 0:
        return _rewrap(x, rate)
    noise = torch.from_numpy(rng.normal(0.0, sigma, size=tuple(x.shape))).to(x.dtype)
    return _rewrap(x + noise, rate)


def lowpass_taps(cutoff: float, sample_rate: int, taps: int = LOWPASS_TAPS) -> np.ndarray:
    """Linear-phase Hamming-windowed-sinc low-pass FIR."""
    return signal.firwin(taps, cutoff, window="hamming", fs=sample_rate)


def fir_filter(x: torch.Tensor, taps: np.ndarray) -> torch.Tensor:
    """Zero-phase ('same', centred) FIR filtering along the last axis."""
    k = torch.as_tensor(np.asarray(taps)[::-1].copy(), dtype=x.dtype).reshape(1, 1, -1)
    lead, length = x.shape[:-1], x.shape[-1]
    pad = (k.shape[-1] - 1) // 2
    y = F.conv1d(F.pad(x.reshape(-1, 1, length), (pad, pad)), k)
    return y.reshape(*lead, length)


def random_lowpass(wave: WaveLike, cutoff_low: float, cutoff_high: float, rng: np.random.Generator,
                   sample_rate: Optional[int] = None) -> WaveLike:
    """Low-pass at a cutoff drawn uniformly from ``[cutoff_low, cutoff_high]``."""
    x, rate = _unwrap(wave)
    rate = rate or sample_rate
    if rate is None:
        raise DistortionError("sample rate required for tensor input")
    if not 0 < cutoff_low <= cutoff_high or cutoff_high >= rate / 2:
        raise DistortionError(f"invalid cutoff range [{cutoff_low}, {cutoff_high}] at {rate} Hz")
    cutoff = float(rng.uniform(cutoff_low, cutoff_high))
    y = fir_filter(x, lowpass_taps(cutoff, rate))
    return _rewrap(y, rate if isinstance(wave, Waveform) else None)


def scaled_hz(hz: float, sample_rate: int) -> float:
    """Map a frequency given at 44.1 kHz onto ``sample_rate`` proportionally."""
    return hz * sample_rate / REFERENCE_RATE


def eq_band_filters(sample_rate: int, taps: int = LOWPASS_TAPS) -> np.ndarray:
    """Five complementary linear-phase bands whose sum is a centred unit impulse."""
    edges = [scaled_hz(e, sample_rate) for e in EQ_EDGES_HZ]
    lows = [lowpass_taps(e, sample_rate, taps) for e in edges]
    delta = np.zeros(taps)
    delta[taps // 2] = 1.0
    bands = [lows[0]] + [lows[i + 1] - lows[i] for i in range(len(lows) - 1)] + [delta - lows[-1]]
    return np.stack(bands)


def five_band_eq(wave: WaveLike, gains_db: Sequence[float], sample_rate: Optional[int] = None) -> WaveLike:
    x, rate = _unwrap(wave)
    rate = rate or sample_rate
    if len(gains_db) != 5:
        raise DistortionError("five_band_eq needs five gains")
    bands = eq_band_filters(rate)
    taps = (10.0 ** (np.asarray(gains_db) / 20.0))[:, None] * bands
    return _rewrap(fir_filter(x, taps.sum(0)), rate if isinstance(wave, Waveform) else None)


def mu_law_roundtrip(x: torch.Tensor, bits: int = 8, mu: float = 255.0) -> torch.Tensor:
    """Compand, quantise to ``bits`` bits and expand (stand-in for a lossy codec)."""
    levels = 2 ** bits - 1
    y = torch.sign(x) * torch.log1p(mu * x.abs().clamp(max=1.0)) / math.log1p(mu)
    q = torch.round((y + 1) / 2 * levels) / levels * 2 - 1
    return torch.sign(q) * ((1 + mu) ** q.abs() - 1) / mu


def external_codec(wave: Waveform, command: Sequence[str]) -> Waveform:
    """Round-trip through an external encoder/decoder.

    ``command`` is a template; ``{input}`` and ``{output}`` are replaced by WAV
    paths, e.g. ``["sh", "-c", "lame -b 128 {input} t.mp3 && lame --decode t.mp3 {output}"]``.
    """
    if shutil.which(command[0]) is None:
        raise DistortionError(f"external codec {command[0]!r} not found")
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = Path(tmp) / "in.wav", Path(tmp) / "out.wav"
        write_wav(src, wave, "pcm16")
        argv = [part.format(input=src, output=dst) for part in command]
        subprocess.run(argv, check=True, capture_output=True, cwd=tmp)
        out = read_wav(dst)
    n = wave.length
    samples = out.samples[:, :n]
    if samples.shape[1] < n:
        samples = F.pad(samples, (0, n - samples.shape[1]))
    return Waveform(samples, wave.sample_rate)


@dataclass
class DistortionSpec:
    kind: str
    sigma: float = 0.001
    cutoff_low: float = 15000.0
    cutoff_high: float = 20000.0
    gain_db: float = 3.0
    bits: int = 8
    command: Optional[list] = None
    apply_probability: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DistortionError(f"unknown distortion kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise DistortionError("apply_probability must lie in [0, 1]")
        if self.sigma < 0 or self.gain_db < 0 or not 1 <= self.bits <= 24:
            raise DistortionError("distortion parameters out of range")

    @classmethod
    def parse(cls, text: str) -> "DistortionSpec":
        """``kind[:key=value,...]``, e.g. ``compression_surrogate:bits=6``."""
        kind, _, rest = text.partition(":")
        kwargs = {}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            if key not in cls.__dataclass_fields__:
                raise DistortionError(f"unknown distortion parameter {key!r}")
            if key == "command":
                kwargs[key] = value.split()
            else:
                kwargs[key] = int(value) if key == "bits" else float(value)
        return cls(kind=kind, **kwargs)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def apply_eval_distortion(mixture: WaveLike, spec: DistortionSpec, rng: np.random.Generator,
                          sample_rate: Optional[int] = None) -> WaveLike:
    """Distort a mixture as done at evaluation time."""
    x, rate = _unwrap(mixture)
    rate = rate or sample_rate
    if spec.apply_probability < 1.0 and rng.random() >= spec.apply_probability:
        return mixture
    kind = spec.kind
    if kind == "channel_drop":
        channels = x.shape[-2]
        if channels < 2:
            raise DistortionError("channel drop needs at least two channels")
        keep = torch.ones(channels, 1, dtype=x.dtype)
        keep[int(rng.integers(channels))] = 0
        y = x * keep
    elif kind == "channel_mask":
        y = channel_mask(x, rng)
    elif kind == "gaussian_noise":
        y = add_gaussian_noise(x, spec.sigma, rng)
    elif kind == "random_lowpass":
        low, high = scaled_hz(spec.cutoff_low, rate), scaled_hz(spec.cutoff_high, rate)
        y = random_lowpass(x, low, high, rng, sample_rate=rate)
    elif kind == "five_band_eq":
        gains = rng.uniform(-spec.gain_db, spec.gain_db, size=5) if spec.gain_db else np.zeros(5)
        y = five_band_eq(x, gains, sample_rate=rate)
    elif kind == "compression_surrogate":
        y = mu_law_roundtrip(x, spec.bits)
    elif kind == "external_codec":
        if not spec.command:
            raise DistortionError("external_codec needs a command")
        if x.ndim != 2:
            raise DistortionError("external_codec works on single waveforms")
        y = external_codec(Waveform(x, rate), spec.command).samples
    else:  # pragma: no cover - guarded by DistortionSpec
        raise DistortionError(kind)
    return _rewrap(y, rate if isinstance(mixture, Waveform) else None)


@dataclass
class AugmentationConfig:
    """Training-time augmentation applied to decoder inputs (step 5 only)."""

    channel_mask: bool = True
    noise_sigma: float = 0.001
    lowpass: bool = True
    lowpass_cutoff_hz: tuple = (15000.0, 20000.0)
    lowpass_fraction: float = 0.5
    channel_mask_probability: float = 1.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def augment_batch(x: torch.Tensor, config: AugmentationConfig, rng: np.random.Generator,
                  sample_rate: int) -> torch.Tensor:
    """Channel mask, white noise and a random low-pass on a fraction of the batch."""
    if config.channel_mask and x.shape[-2] >= 2:
        chosen = rng.random(x.shape[0]) < config.channel_mask_probability
        if chosen.any():
            masked = channel_mask(x, rng)
            sel = torch.as_tensor(chosen, dtype=x.dtype).reshape(-1, *[1] * (x.ndim - 1))
            x = sel * masked + (1 - sel) * x
    if config.noise_sigma:
        x = add_gaussian_noise(x, config.noise_sigma, rng)
    if config.lowpass:
        low, high = (scaled_hz(f, sample_rate) for f in config.lowpass_cutoff_hz)
        count = int(round(x.shape[0] * config.lowpass_fraction))
        chosen = rng.permutation(x.shape[0])[:count]
        if count:
            rows = list(x.unbind(0))
            for i in chosen:
                rows[i] = random_lowpass(rows[i], low, high, rng, sample_rate=sample_rate)
            x = torch.stack(rows)
    return x
