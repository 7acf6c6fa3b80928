"""Differentiable source separators behind one interface.

Three in-process kinds are provided (``identity``, ``oracle_mask`` and
``learned``) plus :class:`ExternalSeparator`, a file-based adapter for
inference-only evaluation with any third-party tool.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import AudioError, Waveform, istft, read_wav, snr_db, stft, write_wav

logger = logging.getLogger(__name__)

DEFAULT_STEMS = ("bass", "drums", "other", "vocals")
MASK_EPS = 1e-8


class SeparationError(RuntimeError):
    pass


@dataclass(frozen=True)
class StemLayout:
    stem_names: tuple = DEFAULT_STEMS

    def __post_init__(self):
        names = tuple(self.stem_names)
        if not names:
            raise SeparationError("a stem layout needs at least one stem")
        if len(set(names)) != len(names):
            raise SeparationError(f"duplicate stem names in {names}")
        object.__setattr__(self, "stem_names", names)

    def __len__(self):
        return len(self.stem_names)

    def index(self, name: str) -> int:
        try:
            return self.stem_names.index(name)
        except ValueError:
            raise SeparationError(f"stem {name!r} not in layout {self.stem_names}") from None


class Separator:
    """Maps a mixture to one estimate per stem of ``layout``.

    ``separate_tensor`` works on batches ``[B, C, L]`` and returns
    ``[B, N, C, L]``; it must be differentiable with respect to the mixture.
    """

    kind = "base"

    def __init__(self, layout: StemLayout):
        self.layout = layout
        self.frozen = True

    def separate_tensor(self, mixture: torch.Tensor, references: Optional[torch.Tensor] = None) -> torch.Tensor:
        raise NotImplementedError

    def separate(self, mixture: Waveform) -> List[Waveform]:
        out = self.separate_tensor(mixture.samples[None], self._registered())[0]
        return [Waveform(s, mixture.sample_rate) for s in out]

    def _registered(self):
        return None

    def parameters(self):
        return iter(())


class IdentitySeparator(Separator):
    """Every stem estimate is the mixture itself."""

    kind = "identity"

    def separate_tensor(self, mixture, references=None):
        return mixture.unsqueeze(1).expand(-1, len(self.layout), -1, -1)


class OracleMaskSeparator(Separator):
    """Ideal-ratio masks computed from reference stems, applied to the mixture STFT.

    ``mask_i = (|S(ref_i)| + eps/N) / (sum_j |S(ref_j)| + eps)`` so masks sum to
    one everywhere and fall back to ``1/N`` in bins where every reference is
    silent. The mixture phase is kept.
    """

    kind = "oracle_mask"

    def __init__(self, layout: StemLayout, stft_window: int = 2048, references: Optional[Sequence[Waveform]] = None):
        super().__init__(layout)
        self.stft_window = stft_window
        self.references = None
        if references is not None:
            self.register(references)

    def register(self, references: Sequence[Waveform]) -> None:
        if not references:
            raise SeparationError("oracle separator needs at least one reference stem")
        if len(references) != len(self.layout):
            raise SeparationError(f"{len(references)} references for a {len(self.layout)}-stem layout")
        shapes = {tuple(r.samples.shape) for r in references}
        if len(shapes) != 1:
            raise SeparationError(f"reference stems differ in shape: {shapes}")
        self.references = torch.stack([r.samples for r in references])

    def _registered(self):
        if self.references is None:
            raise SeparationError("oracle separator has no registered reference stems for this clip")
        return self.references[None]

    def masks(self, references: torch.Tensor) -> torch.Tensor:
        mags = stft(references, self.stft_window).abs()
        n = references.shape[1]
        return (mags + MASK_EPS / n) / (mags.sum(dim=1, keepdim=True) + MASK_EPS)

    def separate_tensor(self, mixture, references=None):
        if references is None:
            raise SeparationError("oracle separator needs reference stems")
        if references.shape[1] != len(self.layout) or references.shape[2:] != mixture.shape[1:]:
            raise SeparationError(f"references {tuple(references.shape)} do not match mixture {tuple(mixture.shape)}")
        with torch.no_grad():
            masks = self.masks(references.to(mixture.dtype))
        spec = stft(mixture, self.stft_window).unsqueeze(1)
        return istft(masks * spec, self.stft_window, None, mixture.shape[-1])


def make_oracle_mask_separator(reference_stems: Sequence[Waveform], stft_window: int = 2048,
                               layout: Optional[StemLayout] = None) -> OracleMaskSeparator:
    if not reference_stems:
        raise SeparationError("empty stem list")
    layout = layout or StemLayout(tuple(f"stem{i}" for i in range(len(reference_stems))))
    return OracleMaskSeparator(layout, stft_window, reference_stems)


class MaskNet(nn.Module):
    """Small convolutional mask estimator on log-magnitude spectrogram frames."""

    def __init__(self, bins: int, stems: int, hidden: int = 128, depth: int = 3):
        super().__init__()
        layers = [nn.Conv1d(bins, hidden, 3, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(depth - 1):
            layers += [nn.Conv1d(hidden, hidden, 3, padding=1), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv1d(hidden, stems * bins, 1))
        self.net = nn.Sequential(*layers)
        self.stems = stems
        self.bins = bins

    def forward(self, mag):
        # mag: [B, bins, frames] -> masks [B, stems, bins, frames]
        logits = self.net(torch.log1p(mag))
        logits = logits.reshape(mag.shape[0], self.stems, self.bins, -1)
        return torch.softmax(logits, dim=1)


class LearnedSeparator(Separator):
    kind = "learned"

    def __init__(self, layout: StemLayout, stft_window: int = 512, hidden: int = 128, seed: int = 0):
        super().__init__(layout)
        self.stft_window = stft_window
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = MaskNet(stft_window // 2 + 1, len(layout), hidden)
        self.freeze()

    def freeze(self) -> None:
        self.frozen = True
        self.net.eval()
        self.net.requires_grad_(False)

    def parameters(self):
        return self.net.parameters()

    def separate_tensor(self, mixture, references=None):
        b, c, length = mixture.shape
        spec = stft(mixture.reshape(b * c, length), self.stft_window)
        masks = self.net(spec.abs().to(next(self.net.parameters()).dtype)).to(mixture.dtype)
        est = istft(masks * spec.unsqueeze(1), self.stft_window, None, length)
        return est.reshape(b, c, len(self.layout), length).transpose(1, 2)

    def state_dict(self) -> dict:
        return {"kind": self.kind, "layout": list(self.layout.stem_names), "stft_window": self.stft_window,
                "hidden": self.net.net[0].out_channels, "net": self.net.state_dict()}

    @classmethod
    def from_state_dict(cls, blob: dict) -> "LearnedSeparator":
        sep = cls(StemLayout(tuple(blob["layout"])), blob["stft_window"], blob["hidden"])
        sep.net.load_state_dict(blob["net"])
        sep.freeze()
        return sep

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".part")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "LearnedSeparator":
        return cls.from_state_dict(torch.load(path, map_location="cpu", weights_only=False))


@dataclass
class SeparatorTrainConfig:
    stft_window: int = 512
    hidden: int = 128
    iterations: int = 400
    batch_size: int = 8
    crop_length: int = 8192
    learning_rate: float = 1e-3


def train_learned_separator(dataset, config: SeparatorTrainConfig = SeparatorTrainConfig(), seed: int = 0,
                            log_every: int = 0) -> LearnedSeparator:
    """Fit a :class:`LearnedSeparator` to ``dataset`` by per-stem L1 waveform error."""
    layout = StemLayout(tuple(dataset.stem_names))
    sep = LearnedSeparator(layout, config.stft_window, config.hidden, seed)
    sep.frozen = False
    sep.net.train()
    sep.net.requires_grad_(True)
    opt = torch.optim.Adam(sep.net.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    for it in range(config.iterations):
        stems = dataset.sample_batch(rng, config.batch_size, config.crop_length)
        mixture = stems.sum(dim=1)
        est = sep.separate_tensor(mixture)
        loss = (est - stems).abs().mean()
        if not torch.isfinite(loss):
            raise SeparationError(f"separator training diverged at iteration {it} (loss={float(loss)})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and it % log_every == 0:
            logger.info("separator iter %d  l1 %.5f", it, float(loss))
    sep.freeze()
    return sep


def stem_snrs(separator: Separator, clips, references: bool = False) -> np.ndarray:
    """Per-clip, per-stem ``snr_db(stem, stem - estimate)`` matrix."""
    out = []
    for clip in clips:
        stems = torch.stack([clip[name].samples for name in separator.layout.stem_names])
        mixture = stems.sum(0, keepdim=True)
        with torch.no_grad():
            est = separator.separate_tensor(mixture, stems[None] if references else None)[0]
        out.append([snr_db(stems[i], stems[i] - est[i]) for i in range(len(stems))])
    return np.asarray(out)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class ExternalSeparator(Separator):
    """File-based adapter for a separator running outside this process.

    Protocol, in ``workdir``: we write ``mixture.wav`` and ``mixture.sha256``,
    then (optionally) run ``command`` with the workdir appended. The external
    tool must produce ``{stem}.wav`` for every stem plus ``stems.json`` holding
    ``{"mixture_sha256": ..., "stems": {name: sha256}}``; both digests are
    checked. Not differentiable: evaluation only.
    """

    kind = "external"

    def __init__(self, layout: StemLayout, workdir, command: Optional[Sequence[str]] = None,
                 timeout: float = 600.0, poll: float = 0.2):
        super().__init__(layout)
        self.workdir = Path(workdir)
        self.command = list(command) if command else None
        self.timeout = timeout
        self.poll = poll

    def separate(self, mixture: Waveform) -> List[Waveform]:
        self.workdir.mkdir(parents=True, exist_ok=True)
        for name in self.layout.stem_names:
            (self.workdir / f"{name}.wav").unlink(missing_ok=True)
        (self.workdir / "stems.json").unlink(missing_ok=True)
        mix_path = self.workdir / "mixture.wav"
        write_wav(mix_path, mixture)
        digest = _sha256(mix_path)
        (self.workdir / "mixture.sha256").write_text(digest + "\n")
        if self.command:
            try:
                subprocess.run(self.command + [str(self.workdir)], check=True, timeout=self.timeout)
            except (subprocess.CalledProcessError, subprocess.TimeoutExpired, OSError) as exc:
                raise SeparationError(f"external separator failed: {exc}") from exc
        manifest_path = self.workdir / "stems.json"
        deadline = time.monotonic() + self.timeout
        while not manifest_path.exists():
            if time.monotonic() > deadline:
                raise SeparationError(f"timed out waiting for {manifest_path}")
            time.sleep(self.poll)
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("mixture_sha256") != digest:
            raise SeparationError("external stems were produced from a different mixture")
        out = []
        for name in self.layout.stem_names:
            path = self.workdir / f"{name}.wav"
            if not path.exists():
                raise SeparationError(f"external separator did not write {path.name}")
            if manifest.get("stems", {}).get(name) != _sha256(path):
                raise SeparationError(f"checksum mismatch for {path.name}")
            wave = read_wav(path)
            if wave.samples.shape != mixture.samples.shape or wave.sample_rate != mixture.sample_rate:
                raise SeparationError(f"{path.name} does not match the mixture shape/rate")
            out.append(wave)
        return out

    def separate_tensor(self, mixture, references=None):
        rate = getattr(self, "sample_rate", None)
        if rate is None:
            raise SeparationError("set sample_rate on the external separator before tensor use")
        outs = []
        for item in mixture:
            stems = self.separate(Waveform(item.detach(), rate))
            outs.append(torch.stack([s.samples.to(mixture.dtype) for s in stems]))
        return torch.stack(outs)
