"""Time-domain concealer and decoder (TCD) networks.

The concealer turns a carrier waveform and a one-hot message into an embedded
waveform ``alpha * carrier + g(carrier, message)``; the decoder maps any
waveform back to per-frame class logits.
"""

from __future__ import annotations

import contextlib
import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import Waveform
from .codec import NUM_CLASSES, FramePosteriors, MessageFrames

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TcdConfig:
    h: int = 128
    conv_block_depth: int = 3
    concealer_upsample_factors: List[int] = field(default_factory=lambda: [8, 8, 4, 4])
    decoder_pool_factors: List[int] = field(default_factory=lambda: [4, 4, 4, 4, 2, 2])
    base_channels: int = 256
    decoder_channels: Union[int, List[int]] = field(default_factory=lambda: [32, 64, 128, 128, 128, 128])
    carrier_stft_window: int = 1024
    channels_out: int = 2
    kernel_size: int = 3
    residual: bool = False
    embedding_std: float = 1.0

    def __post_init__(self):
        self.concealer_upsample_factors = [int(f) for f in self.concealer_upsample_factors]
        self.decoder_pool_factors = [int(f) for f in self.decoder_pool_factors]
        if len(self.concealer_upsample_factors) != 4:
            raise ConfigError("the concealer needs exactly 4 upsampling stages")
        if len(self.decoder_pool_factors) != 6:
            raise ConfigError("the decoder needs exactly 6 pooling stages")
        up = math.prod(self.concealer_upsample_factors)
        down = math.prod(self.decoder_pool_factors)
        if up != down:
            raise ConfigError(f"upsampling product {up} != pooling product {down}")
        if any(f < 1 for f in self.concealer_upsample_factors + self.decoder_pool_factors):
            raise ConfigError("factors must be positive")
        if any(f % 2 and f != 1 for f in self.concealer_upsample_factors):
            raise ConfigError("upsampling factors must be even (or 1)")
        if self.base_channels % 16:
            raise ConfigError("base_channels must be divisible by 16 (halved four times)")
        if self.carrier_stft_window < up or (self.carrier_stft_window - up) % 2:
            raise ConfigError("carrier_stft_window must be >= samples_per_frame with an even difference")
        if isinstance(self.decoder_channels, int):
            self.decoder_channels = [self.decoder_channels] * 6
        self.decoder_channels = [int(c) for c in self.decoder_channels]
        if len(self.decoder_channels) != 6 or min(self.decoder_channels) < 1:
            raise ConfigError("decoder_channels needs one positive width per pooling stage")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd for same-padding")
        if not self.embedding_std > 0:
            raise ConfigError("embedding_std must be positive")

    @property
    def samples_per_frame(self) -> int:
        return math.prod(self.decoder_pool_factors)

    def to_dict(self) -> dict:
        return asdict(self)


class GatedConv1d(nn.Module):
    """``conv_a(x) * sigmoid(conv_b(x))`` with same padding."""

    def __init__(self, channels: int, kernel_size: int = 3, out_channels: int | None = None):
        super().__init__()
        pad = kernel_size // 2
        out_channels = out_channels or channels
        self.conv_a = nn.Conv1d(channels, out_channels, kernel_size, padding=pad)
        self.conv_b = nn.Conv1d(channels, out_channels, kernel_size, padding=pad)

    def forward(self, x):
        return self.conv_a(x) * torch.sigmoid(self.conv_b(x))


class ConvBlock(nn.Module):
    """Stack of (batch norm -> gated convolution); time length is preserved.

    The first gated convolution may change the width to ``out_channels``.
    """

    def __init__(self, channels: int, depth: int = 3, kernel_size: int = 3, out_channels: int | None = None,
                 residual: bool = False):
        super().__init__()
        out_channels = out_channels or channels
        layers = []
        for k in range(depth):
            width = channels if k == 0 else out_channels
            layers += [nn.BatchNorm1d(width), GatedConv1d(width, kernel_size, out_channels)]
        self.layers = nn.Sequential(*layers)
        self.residual = residual

    def forward(self, x):
        if not self.residual:
            return self.layers(x)
        for norm, conv in zip(self.layers[::2], self.layers[1::2]):
            y = conv(norm(x))
            x = y + x if y.shape == x.shape else y
        return x


def gated_conv_block(features: torch.Tensor, block: ConvBlock) -> torch.Tensor:
    channels = block.layers[0].num_features
    if features.shape[-2] != channels:
        raise ConfigError(f"block expects {channels} channels, got {features.shape[-2]}")
    return block(features)


class Concealer(nn.Module):
    def __init__(self, config: TcdConfig):
        super().__init__()
        c = config
        self.config = c
        self.message_embedding = nn.Linear(NUM_CLASSES, c.h, bias=False)
        # Embedding-table initialisation keeps the message path on the scale of the
        # normalised carrier features it is added to.
        nn.init.normal_(self.message_embedding.weight, 0.0, c.embedding_std)
        self.message_conv = nn.Conv1d(c.h, c.base_channels, c.kernel_size, padding=c.kernel_size // 2)
        self.carrier_proj = nn.Conv1d(c.channels_out * c.h, c.base_channels, 1)
        self.carrier_block = ConvBlock(c.base_channels, c.conv_block_depth, c.kernel_size, residual=c.residual)
        blocks, ups = [], []
        ch = c.base_channels
        for f in c.concealer_upsample_factors:
            blocks.append(ConvBlock(ch, c.conv_block_depth, c.kernel_size, residual=c.residual))
            ups.append(nn.ConvTranspose1d(ch, ch // 2, 2 * f, stride=f, padding=f // 2) if f > 1
                       else nn.Conv1d(ch, ch // 2, 1))
            ch //= 2
        self.blocks = nn.ModuleList(blocks)
        self.upsamples = nn.ModuleList(ups)
        self.output = nn.Conv1d(ch, c.channels_out, 7, padding=3)
        nn.init.zeros_(self.output.weight)
        nn.init.zeros_(self.output.bias)

    def reset_output(self, seed: int) -> None:
        """Re-draw the zero-initialised output layer with PyTorch's default init.

        Needed when training starts at alpha=0: the output is then exactly zero
        and spectral-magnitude losses have no gradient there.
        """
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.output.reset_parameters()

    def carrier_features(self, carrier: torch.Tensor) -> torch.Tensor:
        """``[B, C, L]`` -> ``[B, C*h, T]`` spectral columns, one per message frame."""
        c = self.config
        spf, win = c.samples_per_frame, c.carrier_stft_window
        b, ch, length = carrier.shape
        pad = (win - spf) // 2
        x = F.pad(carrier.reshape(b * ch, length), (pad, pad))
        spec = torch.stft(x, n_fft=win, hop_length=spf, window=torch.hann_window(win, dtype=x.dtype),
                          center=False, return_complex=True).abs()
        frames = spec.shape[-1]
        cols = spec.transpose(1, 2).reshape(b * ch * frames, 1, -1)
        cols = F.interpolate(cols, size=c.h, mode="linear", align_corners=True)
        cols = cols.reshape(b, ch, frames, c.h).permute(0, 1, 3, 2)
        return cols.reshape(b, ch * c.h, frames)

    def forward(self, carrier: torch.Tensor, message: torch.Tensor) -> torch.Tensor:
        """Generator path ``g(c, m)``; ``message`` is ``[B, T]`` class ids or ``[B, T, 27]``."""
        if message.ndim == 2:
            message = F.one_hot(message.long(), NUM_CLASSES).to(carrier.dtype)
        m = self.message_conv(self.message_embedding(message).transpose(1, 2))
        x = self.carrier_block(self.carrier_proj(self.carrier_features(carrier)))
        x = x + m
        for block, up in zip(self.blocks, self.upsamples):
            x = up(block(x))
        return self.output(x)


class Decoder(nn.Module):
    def __init__(self, config: TcdConfig):
        super().__init__()
        c = config
        widths = c.decoder_channels
        self.config = c
        self.input = nn.Conv1d(c.channels_out, widths[0], 7, padding=3)
        ins = [widths[0]] + widths[:-1]
        self.blocks = nn.ModuleList(ConvBlock(i, c.conv_block_depth, c.kernel_size, o, c.residual)
                                    for i, o in zip(ins, widths))
        self.pools = nn.ModuleList(nn.MaxPool1d(f) if f > 1 else nn.Identity()
                                   for f in c.decoder_pool_factors)
        self.norm = nn.BatchNorm1d(widths[-1])
        self.output = nn.Conv1d(widths[-1], NUM_CLASSES, 1)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        """``[B, C, L]`` -> logits ``[B, L / F, 27]``."""
        x = self.input(wave)
        for block, pool in zip(self.blocks, self.pools):
            x = pool(block(x))
        x = F.leaky_relu(self.norm(x), 0.2)
        return self.output(x).transpose(1, 2)


class TcdParams:
    """A concealer/decoder pair plus the schedule-controlled mixing ratio ``alpha``."""

    def __init__(self, config: TcdConfig, concealer: Concealer, decoder: Decoder, alpha: float = 1.0):
        self.config = config
        self.concealer = concealer
        self.decoder = decoder
        self.alpha = alpha

    @property
    def alpha(self) -> float:
        return self._alpha

    @alpha.setter
    def alpha(self, value: float) -> None:
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {value}")
        self._alpha = value

    def parameters(self) -> Iterator[nn.Parameter]:
        yield from self.concealer.parameters()
        yield from self.decoder.parameters()

    def named_tensors(self) -> dict:
        out = {f"concealer.{k}": v for k, v in self.concealer.state_dict().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        return out

    def train(self, mode: bool = True) -> "TcdParams":
        self.concealer.train(mode)
        self.decoder.train(mode)
        return self

    def eval(self) -> "TcdParams":
        return self.train(False)

    @property
    def training(self) -> bool:
        return self.concealer.training

    def requires_grad_(self, flag: bool) -> "TcdParams":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def to(self, dtype) -> "TcdParams":
        self.concealer.to(dtype)
        self.decoder.to(dtype)
        return self

    def clone(self) -> "TcdParams":
        return copy.deepcopy(self)


def init_params(config: TcdConfig, seed: int) -> TcdParams:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        concealer = Concealer(config)
        decoder = Decoder(config)
    return TcdParams(config, concealer, decoder)


@contextlib.contextmanager
def inference_mode(params: TcdParams):
    was_training = params.training
    params.eval()
    try:
        yield params
    finally:
        params.train(was_training)


def _frames_of(length: int, spf: int) -> int:
    if length % spf:
        raise ConfigError(f"length {length} is not a multiple of samples_per_frame {spf}")
    return length // spf


def conceal_tensor(params: TcdParams, carrier: torch.Tensor, message: torch.Tensor,
                   alpha: float | None = None) -> torch.Tensor:
    """Batched concealment: carrier ``[B, C, L]``, message ids ``[B, T]``."""
    frames = _frames_of(carrier.shape[-1], params.config.samples_per_frame)
    if message.shape[1] != frames:
        raise ConfigError(f"message has {message.shape[1]} frames, carrier holds {frames}")
    alpha = params.alpha if alpha is None else alpha
    g = params.concealer(carrier, message)
    return alpha * carrier + g if alpha else g


def decode_tensor(params: TcdParams, wave: torch.Tensor) -> torch.Tensor:
    """Batched decoding to logits ``[B, T, 27]``."""
    _frames_of(wave.shape[-1], params.config.samples_per_frame)
    return params.decoder(wave)


def conceal(carrier: Waveform, message: Union[MessageFrames, np.ndarray], params: TcdParams) -> Waveform:
    """Embed ``message`` into ``carrier`` (inference-mode batch norm)."""
    idx = message.indices if isinstance(message, MessageFrames) else np.asarray(message)
    if isinstance(message, MessageFrames) and message.samples_per_frame != params.config.samples_per_frame:
        raise ConfigError("message frame size does not match the model")
    dtype = next(params.concealer.parameters()).dtype
    with inference_mode(params):
        out = conceal_tensor(params, carrier.samples.to(dtype)[None],
                             torch.as_tensor(idx, dtype=torch.long)[None])
    return Waveform(out[0].to(carrier.samples.dtype), carrier.sample_rate)


def decode(wave: Waveform, params: TcdParams) -> FramePosteriors:
    dtype = next(params.decoder.parameters()).dtype
    with inference_mode(params), torch.no_grad():
        logits = decode_tensor(params, wave.samples.to(dtype)[None])[0]
    return FramePosteriors(torch.softmax(logits.double(), dim=-1).numpy())


def save_checkpoint(path: Union[str, Path], params: TcdParams, extra: dict | None = None) -> None:
    path = Path(path)
    blob = {
        "format": "msras-tcd",
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "alpha": params.alpha,
        "concealer": params.concealer.state_dict(),
        "decoder": params.decoder.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".part")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> TcdParams:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != "msras-tcd":
        raise ConfigError(f"{path}: not a TCD checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    config = TcdConfig(**blob["config"])
    params = init_params(config, 0)
    dtype = next(v.dtype for v in blob["decoder"].values() if v.is_floating_point())
    params.to(dtype)
    params.concealer.load_state_dict(blob["concealer"])
    params.decoder.load_state_dict(blob["decoder"])
    params.alpha = blob["alpha"]
    params.extra = blob.get("extra", {})
    params.eval()
    return params
