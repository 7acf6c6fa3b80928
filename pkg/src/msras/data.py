"""Stem datasets: on-disk song folders or synthetic toy mixtures."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import torch
from scipy import signal

from .audio import AudioError, Waveform, mix, read_wav
from .separation import DEFAULT_STEMS

logger = logging.getLogger(__name__)

TOY_DURATION = 3.0
CLICK_LEVEL = 0.3
FLOOR_LEVEL = 0.01


class DatasetError(AudioError):
    pass


@dataclass
class StemDataset:
    clips: List[Dict[str, Waveform]]
    stem_names: tuple = DEFAULT_STEMS
    split: str = "train"
    source: str = "toy"
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.stem_names = tuple(self.stem_names)
        for i, clip in enumerate(self.clips):
            missing = [s for s in self.stem_names if s not in clip]
            if missing:
                raise DatasetError(f"clip {i} lacks stems {missing}")
            first = clip[self.stem_names[0]]
            for s in self.stem_names[1:]:
                w = clip[s]
                if w.samples.shape != first.samples.shape or w.sample_rate != first.sample_rate:
                    raise DatasetError(f"clip {i}: stem {s!r} does not match {self.stem_names[0]!r}")
        if not self.names:
            self.names = [f"clip{i:03d}" for i in range(len(self.clips))]

    def __len__(self):
        return len(self.clips)

    @property
    def sample_rate(self) -> int:
        return self.clips[0][self.stem_names[0]].sample_rate

    def mixture(self, index: int) -> Waveform:
        return mix([self.clips[index][s] for s in self.stem_names])

    def stems_tensor(self, index: int, length: int | None = None) -> torch.Tensor:
        """``[N, C, L]`` stack of one clip's stems, cropped to ``length``."""
        t = torch.stack([self.clips[index][s].samples for s in self.stem_names])
        return t[..., :length] if length else t

    def min_length(self) -> int:
        return min(c[self.stem_names[0]].length for c in self.clips)

    def sample_batch(self, rng: np.random.Generator, batch: int, crop_length: int) -> torch.Tensor:
        """Random clips and random crops, ``[B, N, C, crop_length]``."""
        out = []
        for _ in range(batch):
            i = int(rng.integers(len(self.clips)))
            stems = self.stems_tensor(i)
            length = stems.shape[-1]
            if length < crop_length:
                stems = torch.nn.functional.pad(stems, (0, crop_length - length))
                start = 0
            else:
                start = int(rng.integers(0, length - crop_length + 1))
            out.append(stems[..., start:start + crop_length])
        return torch.stack(out)


def load_stem_dataset(directory, stem_names: Sequence[str] = DEFAULT_STEMS, split: str = "test") -> StemDataset:
    """Load ``directory/<song>/<stem>.wav`` folders; the mixture is always recomputed."""
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    clips, names = [], []
    for song in sorted(p for p in root.iterdir() if p.is_dir()):
        stems = {}
        for name in stem_names:
            path = song / f"{name}.wav"
            if not path.exists():
                raise DatasetError(f"song {song.name!r} is missing stem {name!r} ({path})")
            try:
                stems[name] = read_wav(path)
            except AudioError as exc:
                raise DatasetError(f"song {song.name!r}, stem {name!r}: {exc}") from exc
        rates = {w.sample_rate for w in stems.values()}
        if len(rates) != 1:
            raise DatasetError(f"song {song.name!r}: stems have differing sample rates {sorted(rates)}")
        chans = {w.channels for w in stems.values()}
        if len(chans) != 1:
            raise DatasetError(f"song {song.name!r}: stems have differing channel counts {sorted(chans)}")
        length = min(w.length for w in stems.values())
        if length == 0:
            raise DatasetError(f"song {song.name!r}: zero-length clip")
        stems = {k: Waveform(w.samples[:, :length], w.sample_rate) for k, w in stems.items()}
        mix_path = song / "mixture.wav"
        if mix_path.exists():
            given = read_wav(mix_path)
            ours = mix(list(stems.values()))
            n = min(given.length, length)
            if given.channels != ours.channels or float((given.samples[:, :n] - ours.samples[:, :n]).abs().max()) > 1e-3:
                warnings.warn(f"song {song.name!r}: mixture.wav differs from the sum of its stems", stacklevel=2)
        clips.append(stems)
        names.append(song.name)
    if not clips:
        raise DatasetError(f"no song folders found in {root}")
    return StemDataset(clips, tuple(stem_names), split, "stem-directory", names)


def _bandpass_noise(rng, n, lo, hi, sr):
    sos = signal.butter(6, [lo, hi], btype="bandpass", fs=sr, output="sos")
    return signal.sosfiltfilt(sos, rng.standard_normal(n))


def _rms_normalise(x, target):
    return x * (target / (np.sqrt(np.mean(x ** 2)) + 1e-12))


def _pan(rng, mono, spread=0.3):
    """Pan a mono tone stem to stereo over a faint white floor, as in any real recording.

    Without the floor most spectral bands are empty and spectral-ratio losses blow up.
    """
    p = rng.uniform(-spread, spread)
    stereo = np.stack([mono * np.sqrt(0.5 - p / 2), mono * np.sqrt(0.5 + p / 2)]) * np.sqrt(2)
    return stereo + rng.standard_normal(stereo.shape) * FLOOR_LEVEL * np.sqrt(np.mean(mono ** 2))


def _toy_bass(rng, t, sr, scale):
    out = np.zeros_like(t)
    seg = int(0.5 * sr)
    for start in range(0, len(t), seg):
        f0 = rng.uniform(55, 110) * scale
        sl = slice(start, start + seg)
        for k, amp in ((1, 1.0), (2, 0.5), (3, 0.25)):
            if k * f0 < 260 * scale:
                out[sl] += amp * np.sin(2 * np.pi * k * f0 * t[sl] + rng.uniform(0, 2 * np.pi))
    return _pan(rng, _rms_normalise(out, 0.08), 0.1)


def _toy_vocals(rng, t, sr, scale):
    out = np.zeros_like(t)
    seg = int(0.75 * sr)
    for start in range(0, len(t), seg):
        sl = slice(start, start + seg)
        f0 = rng.uniform(360, 470) * scale
        rate, depth = rng.uniform(4, 6), rng.uniform(0.01, 0.02)
        phase = 2 * np.pi * np.cumsum(f0 * (1 + depth * np.sin(2 * np.pi * rate * t[sl]))) / sr
        out[sl] = np.sin(phase) + 0.4 * np.sin(2 * phase)
    return _pan(rng, _rms_normalise(out, 0.07))


def _toy_other(rng, t, sr, scale):
    out = np.zeros_like(t)
    seg = int(1.0 * sr)
    for start in range(0, len(t), seg):
        sl = slice(start, start + seg)
        for f in rng.uniform(1150, 1750, size=3) * scale:
            out[sl] += np.sin(2 * np.pi * f * t[sl] + rng.uniform(0, 2 * np.pi))
    out += 0.3 * _rms_normalise(_bandpass_noise(rng, len(t), 1200 * scale, 1700 * scale, sr), 1.0)
    return _pan(rng, _rms_normalise(out, 0.06))


def _toy_drums(rng, t, sr, scale):
    """Percussive train: band-noise hits that decay to a faint floor, each starting a broadband click.

    The clicks and a faint white floor keep every frequency band non-silent,
    as in real percussion, so spectral-ratio losses stay bounded.
    """
    n = len(t)
    lo, hi = 2100 * scale, min(3800 * scale, 0.475 * sr)
    env = np.zeros(n)
    clicks = np.zeros(n)
    step = int(rng.uniform(0.12, 0.25) * sr)
    decay = np.exp(-np.arange(step) / (0.03 * sr))
    click = np.exp(-np.arange(step) / (0.002 * sr))
    for start in range(int(rng.integers(step)), n, step):
        seg = min(step, n - start)
        amp = rng.uniform(0.6, 1.0)
        env[start:start + seg] += amp * decay[:seg]
        clicks[start:start + seg] += amp * click[:seg]
    common = _bandpass_noise(rng, n, lo, hi, sr)
    chans = []
    for _ in range(2):
        bed = _rms_normalise(env * (0.8 * common + 0.6 * _bandpass_noise(rng, n, lo, hi, sr)), 1.0)
        broadband = clicks * rng.standard_normal(n) * CLICK_LEVEL + rng.standard_normal(n) * FLOOR_LEVEL
        chans.append(_rms_normalise(bed + broadband, 0.08))
    return np.stack(chans)


_TOY_STEMS = {"bass": _toy_bass, "drums": _toy_drums, "other": _toy_other, "vocals": _toy_vocals}


def make_toy_dataset(seed: int, clips: int, sample_rate: int = 8000, duration: float = TOY_DURATION,
                     stem_names: Sequence[str] = DEFAULT_STEMS, split: str = "train") -> StemDataset:
    """Synthetic stereo stems occupying disjoint frequency bands.

    bass: low harmonic notes; vocals: vibrato tones; other: tone clusters over
    band noise; drums: decaying band-noise hits on a grid.
    Frequencies are laid out for 8 kHz and scaled with the sample rate.
    """
    if clips <= 0:
        raise DatasetError("clip count must be positive")
    unknown = [s for s in stem_names if s not in _TOY_STEMS]
    if unknown or not 2 <= len(stem_names) <= 4:
        raise DatasetError(f"toy stems must be 2-4 of {sorted(_TOY_STEMS)}")
    scale = sample_rate / 8000
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(clips):
        clip = {}
        for name in stem_names:
            x = _TOY_STEMS[name](rng, t, sample_rate, scale)
            clip[name] = Waveform(torch.from_numpy(x.astype(np.float32)), sample_rate)
        out.append(clip)
    return StemDataset(out, tuple(stem_names), split, "toy")
