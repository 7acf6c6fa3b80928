"""Waveform containers and the signal math shared by every other module."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
from scipy.io import wavfile

ArrayLike = Union[np.ndarray, torch.Tensor, Sequence]

# snr_db returns this when the noise has exactly zero energy.
SNR_INF = math.inf


class AudioError(ValueError):
    """Raised for malformed audio or incompatible waveforms."""


def _to_tensor(samples: ArrayLike) -> torch.Tensor:
    if isinstance(samples, torch.Tensor):
        t = samples
    else:
        t = torch.as_tensor(np.asarray(samples))
    if not t.is_floating_point():
        t = t.to(torch.float32)
    return t


@dataclass(frozen=True)
class Waveform:
    """Multi-channel audio, ``samples`` shaped ``[channels, length]``."""

    samples: torch.Tensor
    sample_rate: int

    def __post_init__(self):
        t = _to_tensor(self.samples)
        if t.ndim == 1:
            t = t.unsqueeze(0)
        if t.ndim != 2:
            raise AudioError(f"expected [channels, length] samples, got shape {tuple(t.shape)}")
        if t.shape[0] < 1 or t.shape[1] < 1:
            raise AudioError(f"empty waveform of shape {tuple(t.shape)}")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        if not torch.isfinite(t.detach()).all():
            raise AudioError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", t)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    def with_samples(self, samples: torch.Tensor) -> "Waveform":
        return Waveform(samples, self.sample_rate)

    def numpy(self) -> np.ndarray:
        return self.samples.detach().cpu().numpy()

    def __neg__(self) -> "Waveform":
        return self.with_samples(-self.samples)

    def __mul__(self, k: float) -> "Waveform":
        return self.with_samples(self.samples * k)

    __rmul__ = __mul__

    def __sub__(self, other: "Waveform") -> "Waveform":
        _check_compatible([self, other])
        return self.with_samples(self.samples - other.samples)

    def __add__(self, other: "Waveform") -> "Waveform":
        return mix([self, other])


@dataclass(frozen=True)
class Spectrogram:
    """Non-negative STFT magnitudes shaped ``[channels, bins, frames]``."""

    magnitudes: torch.Tensor
    window_length: int
    hop_length: int

    @property
    def frequency_bins(self) -> int:
        return self.magnitudes.shape[-2]

    @property
    def time_frames(self) -> int:
        return self.magnitudes.shape[-1]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


_WINDOWS: dict = {}


def hann_window(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    key = (n, dtype, device)
    if key not in _WINDOWS:
        _WINDOWS[key] = torch.hann_window(n, periodic=True, dtype=dtype, device=device)
    return _WINDOWS[key]


def stft(x: torch.Tensor, window_length: int, hop_length: int | None = None) -> torch.Tensor:
    """Complex STFT of ``x`` (``[..., length]``) -> ``[..., bins, frames]``.

    Hann window, centred frames with zero padding at the edges. Inputs shorter
    than one window are zero-padded up to ``window_length``.
    """
    if not is_power_of_two(window_length):
        raise AudioError(f"window length must be a power of two, got {window_length}")
    hop_length = hop_length or window_length // 4
    if not 1 <= hop_length <= window_length:
        raise AudioError(f"hop length {hop_length} outside [1, {window_length}]")
    length = x.shape[-1]
    if length < window_length:
        x = torch.nn.functional.pad(x, (0, window_length - length))
        length = window_length
    batch_shape = x.shape[:-1]
    spec = torch.stft(
        x.reshape(-1, length),
        n_fft=window_length,
        hop_length=hop_length,
        window=hann_window(window_length, x.dtype, x.device),
        center=True,
        pad_mode="constant",
        return_complex=True,
    )
    return spec.reshape(*batch_shape, *spec.shape[-2:])


def istft(spec: torch.Tensor, window_length: int, hop_length: int | None, length: int) -> torch.Tensor:
    """Inverse of :func:`stft` for inputs at least one window long."""
    hop_length = hop_length or window_length // 4
    batch_shape = spec.shape[:-2]
    out = torch.istft(
        spec.reshape(-1, *spec.shape[-2:]),
        n_fft=window_length,
        hop_length=hop_length,
        window=hann_window(window_length, spec.real.dtype, spec.device),
        center=True,
        length=length,
    )
    return out.reshape(*batch_shape, length)


def magnitude(x: torch.Tensor, window_length: int, hop_length: int | None = None) -> torch.Tensor:
    """Tensor-level STFT magnitude; differentiable in ``x``."""
    return stft(x, window_length, hop_length).abs()


def stft_magnitude(wave: Waveform, window_length: int, hop_length: int | None = None) -> Spectrogram:
    hop_length = hop_length or window_length // 4
    return Spectrogram(magnitude(wave.samples, window_length, hop_length), window_length, hop_length)


def _check_compatible(waves: Sequence[Waveform]) -> None:
    first = waves[0]
    for w in waves[1:]:
        if w.samples.shape != first.samples.shape:
            raise AudioError(f"shape mismatch: {tuple(first.samples.shape)} vs {tuple(w.samples.shape)}")
        if w.sample_rate != first.sample_rate:
            raise AudioError(f"sample rate mismatch: {first.sample_rate} vs {w.sample_rate}")


def mix(sources: Sequence[Waveform]) -> Waveform:
    """Sample-wise sum of the sources, without normalisation or clipping."""
    if not sources:
        raise AudioError("cannot mix an empty list of sources")
    _check_compatible(sources)
    total = sources[0].samples
    for s in sources[1:]:
        total = total + s.samples
    return Waveform(total, sources[0].sample_rate)


def snr_db(reference: Union[Waveform, torch.Tensor], noise: Union[Waveform, torch.Tensor]) -> float:
    """``10 log10(sum(reference^2) / sum(noise^2))`` pooled over channels and samples."""
    ref = reference.samples if isinstance(reference, Waveform) else _to_tensor(reference)
    nse = noise.samples if isinstance(noise, Waveform) else _to_tensor(noise)
    if ref.shape != nse.shape:
        raise AudioError(f"shape mismatch: {tuple(ref.shape)} vs {tuple(nse.shape)}")
    ref_energy = float(ref.detach().double().pow(2).sum())
    noise_energy = float(nse.detach().double().pow(2).sum())
    if ref_energy == 0.0:
        raise AudioError("reference has zero energy; SNR is undefined")
    if noise_energy == 0.0:
        return SNR_INF
    return 10.0 * math.log10(ref_energy / noise_energy)


def mean_db(values: Sequence[float]) -> float:
    """Average of dB values; any infinite entry makes the mean infinite."""
    values = list(values)
    if not values:
        return float("nan")
    if any(math.isinf(v) for v in values):
        return SNR_INF
    return float(np.mean(values))


def read_wav(path: Union[str, Path]) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float32) - 128.0) / 128.0
    else:
        samples = data.astype(np.float32)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] == 0:
        raise AudioError(f"{path}: zero-length audio")
    return Waveform(torch.from_numpy(np.ascontiguousarray(samples.T)), rate)


def write_wav(path: Union[str, Path], wave: Waveform, subtype: str = "float32") -> None:
    """Write ``wave`` atomically (temp file + rename)."""
    path = Path(path)
    data = wave.numpy().T
    if subtype == "pcm16":
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    elif subtype == "float32":
        data = data.astype(np.float32)
    else:
        raise AudioError(f"unknown WAV subtype {subtype!r}")
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        wavfile.write(fh, wave.sample_rate, data)
    tmp.replace(path)
