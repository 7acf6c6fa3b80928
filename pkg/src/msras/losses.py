"""Training objectives: MDS, MDSR, message cross-entropy and their weighted sums."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch
import torch.nn.functional as F

from .audio import AudioError, Waveform, is_power_of_two, magnitude
from .codec import MessageFrames

DEFAULT_WINDOWS = (1024, 2048, 4096, 8192)
POOL = 32
MDSR_EPS = 1e-8

Tensorish = Union[Waveform, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.lambda1 * k, self.lambda2 * k, self.lambda3 * k)


def scaled_windows(sample_rate: int, base=DEFAULT_WINDOWS, reference_rate: int = 44100) -> tuple:
    """Window set scaled by ``sample_rate / reference_rate``, rounded to powers of two."""
    out = []
    for w in base:
        exact = w * sample_rate / reference_rate
        out.append(max(2, 2 ** round(math.log2(exact))))
    return tuple(out)


def _tensor(x: Tensorish) -> torch.Tensor:
    return x.samples if isinstance(x, Waveform) else x


def downsampled_spectrogram(x: torch.Tensor, window: int) -> torch.Tensor:
    """Average-pool STFT magnitudes over frequency (kernel 32, stride 32); time untouched."""
    mag = magnitude(x, window, window // 4)
    lead = mag.shape[:-2]
    bins, frames = mag.shape[-2:]
    pooled = F.avg_pool2d(mag.reshape(-1, 1, bins, frames), kernel_size=(POOL, 1))
    return pooled.reshape(*lead, *pooled.shape[-2:])


def _check(c: torch.Tensor, c_hat: torch.Tensor, windows: Sequence[int]) -> None:
    if c.shape != c_hat.shape:
        raise AudioError(f"shape mismatch: {tuple(c.shape)} vs {tuple(c_hat.shape)}")
    for w in windows:
        if not is_power_of_two(w) or w // 2 + 1 < POOL:
            raise AudioError(f"window {w} must be a power of two with at least {POOL} bins")


def _per_item(t: torch.Tensor, batched: bool) -> torch.Tensor:
    # [B, ..., bins, frames] -> one value per batch item
    return t.flatten(1) if batched else t.flatten().unsqueeze(0)


def mds(c: Tensorish, c_hat: Tensorish, windows: Sequence[int] = DEFAULT_WINDOWS) -> torch.Tensor:
    """Multi-resolution downsampled spectral distance (sum of squared errors).

    Batched ``[B, C, L]`` inputs give the mean over the batch of per-item sums.
    """
    c, c_hat = _tensor(c), _tensor(c_hat)
    _check(c, c_hat, windows)
    batched = c.ndim == 3
    total = 0.0
    for w in windows:
        diff = downsampled_spectrogram(c, w) - downsampled_spectrogram(c_hat, w)
        total = total + _per_item(diff, batched).pow(2).sum(-1)
    return total.mean()


def mdsr(c: Tensorish, c_hat: Tensorish, windows: Sequence[int] = DEFAULT_WINDOWS,
         eps: float = MDSR_EPS) -> torch.Tensor:
    """Multi-resolution downsampled spectrogram ratio of perturbation to carrier.

    Sum over windows of the Frobenius norm of ``DS(S(c - c_hat)) / (DS(S(c)) + eps)``.
    """
    c, c_hat = _tensor(c), _tensor(c_hat)
    _check(c, c_hat, windows)
    if not bool(c.detach().abs().amax() > 0):
        raise AudioError("carrier is silent; the spectral ratio is undefined")
    batched = c.ndim == 3
    total = 0.0
    for w in windows:
        ratio = downsampled_spectrogram(c - c_hat, w) / (downsampled_spectrogram(c, w) + eps)
        sq = _per_item(ratio, batched).pow(2).sum(-1)
        # sqrt has an infinite slope at 0; route exact zeros around it
        safe = torch.where(sq > 0, sq, torch.ones_like(sq))
        total = total + torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))
    return total.mean()


def carrier_distance(metric: str, c: Tensorish, c_hat: Tensorish, windows=DEFAULT_WINDOWS) -> torch.Tensor:
    metric = metric.upper()
    if metric == "MDS":
        return mds(c, c_hat, windows)
    if metric == "MDSR":
        return mdsr(c, c_hat, windows)
    raise ValueError(f"unknown carrier metric {metric!r}")


def message_loss(truth: Union[MessageFrames, torch.Tensor], logits: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy over frames (and batch items)."""
    if isinstance(truth, MessageFrames):
        truth = torch.as_tensor(truth.indices)
    truth = truth.long()
    if logits.shape[:-1] != truth.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match truth {tuple(truth.shape)}")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), truth.reshape(-1))


def steg_loss(c, c_hat, m, m_hat_logits, weights: LossWeights, metric: str = "MDS",
              windows=DEFAULT_WINDOWS) -> torch.Tensor:
    """Carrier distortion plus embedded-message loss; no separation term."""
    total = 0.0
    if weights.lambda1:
        total = total + weights.lambda1 * carrier_distance(metric, c, c_hat, windows)
    if weights.lambda2:
        total = total + weights.lambda2 * message_loss(m, m_hat_logits)
    return torch.as_tensor(total) if not isinstance(total, torch.Tensor) else total


def msras_loss(c, c_hat, m, m_hat_logits, m_tilde_logits, weights: LossWeights, metric: str = "MDS",
               windows=DEFAULT_WINDOWS) -> torch.Tensor:
    """Per-source loss: carrier term + embedded-message term + separated-message term."""
    total = steg_loss(c, c_hat, m, m_hat_logits, weights, metric, windows)
    if weights.lambda3:
        total = total + weights.lambda3 * message_loss(m, m_tilde_logits)
    return total
