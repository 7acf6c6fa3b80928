"""Text <-> one-hot message frames, and frame-level recovery accuracy.

Letters ``a``..``z`` map to classes 0..25; class 26 is the end token. Frames
after the text are filled with end tokens.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

NUM_CLASSES = 27
END_TOKEN = 26
ALPHABET = string.ascii_lowercase


class MessageError(ValueError):
    pass


@dataclass(frozen=True)
class MessageFrames:
    """``frames`` is a ``[T, 27]`` one-hot matrix; one row per ``samples_per_frame`` samples."""

    frames: np.ndarray
    samples_per_frame: int

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 2 or f.shape[1] != NUM_CLASSES:
            raise MessageError(f"frames must be [T, {NUM_CLASSES}], got {f.shape}")
        if not (np.all((f == 0) | (f == 1)) and np.all(f.sum(axis=1) == 1)):
            raise MessageError("frames must be one-hot rows")
        object.__setattr__(self, "frames", f)

    @classmethod
    def from_indices(cls, indices, samples_per_frame: int) -> "MessageFrames":
        idx = np.asarray(indices, dtype=np.int64)
        return cls(np.eye(NUM_CLASSES, dtype=np.float32)[idx], samples_per_frame)

    @property
    def indices(self) -> np.ndarray:
        return self.frames.argmax(axis=1)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    def as_posteriors(self) -> "FramePosteriors":
        return FramePosteriors(self.frames.copy())


@dataclass(frozen=True)
class FramePosteriors:
    """Per-frame class probabilities, ``[T, 27]``, rows on the simplex."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != NUM_CLASSES:
            raise MessageError(f"posteriors must be [T, {NUM_CLASSES}], got {p.shape}")
        if np.any(p < 0) or np.any(p > 1 + 1e-6) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-5):
            raise MessageError("posterior rows must lie on the probability simplex")
        object.__setattr__(self, "probabilities", p)

    @property
    def classes(self) -> np.ndarray:
        # np.argmax breaks ties towards the lowest class index
        return self.probabilities.argmax(axis=1)


def text_to_indices(text: str, frame_count: int) -> np.ndarray:
    if len(text) >= frame_count:
        raise MessageError(
            f"message of {len(text)} characters needs more than {frame_count} frames "
            "(one end token is required)"
        )
    bad = sorted({ch for ch in text if ch not in ALPHABET})
    if bad:
        raise MessageError(f"illegal characters {''.join(bad)!r}; only a-z are allowed")
    idx = np.full(frame_count, END_TOKEN, dtype=np.int64)
    idx[: len(text)] = [ord(ch) - ord("a") for ch in text]
    return idx


def indices_to_text(indices) -> str:
    out = []
    for k in np.asarray(indices).tolist():
        if k == END_TOKEN:
            break
        out.append(ALPHABET[k])
    return "".join(out)


def encode_text(text: str, frame_count: int, samples_per_frame: int = 1024) -> MessageFrames:
    return MessageFrames.from_indices(text_to_indices(text, frame_count), samples_per_frame)


def decode_frames(post: Union[FramePosteriors, MessageFrames]) -> str:
    if isinstance(post, MessageFrames):
        post = post.as_posteriors()
    return indices_to_text(post.classes)


def frame_accuracy(truth: MessageFrames, post: Union[FramePosteriors, MessageFrames]) -> float:
    """Percentage of frames (text and end-token padding alike) whose argmax matches."""
    if isinstance(post, MessageFrames):
        post = post.as_posteriors()
    if truth.frame_count != post.probabilities.shape[0]:
        raise MessageError(f"frame count mismatch: {truth.frame_count} vs {post.probabilities.shape[0]}")
    return float(np.mean(truth.indices == post.classes) * 100.0)


def index_accuracy(truth: torch.Tensor, logits: torch.Tensor) -> float:
    """Batched variant: ``truth`` ``[..., T]`` class ids, ``logits`` ``[..., T, 27]``."""
    return float((logits.argmax(-1) == truth).double().mean() * 100.0)


def capacity_chars_per_second(sample_rate: float, samples_per_frame: int) -> float:
    if sample_rate <= 0 or samples_per_frame <= 0:
        raise MessageError("sample rate and samples per frame must be positive")
    return sample_rate / samples_per_frame


def random_text(rng: np.random.Generator, frame_count: int, length: int | None = None) -> str:
    """Uniform random letters; length uniform in ``[1, frame_count - 1]`` unless given."""
    if length is None:
        length = int(rng.integers(1, frame_count)) if frame_count > 1 else 0
    return "".join(ALPHABET[k] for k in rng.integers(0, 26, size=length))


def random_indices(rng: np.random.Generator, batch: int, frame_count: int, full: bool = False) -> np.ndarray:
    """A batch of random encoded messages, ``[batch, frame_count]``."""
    rows = []
    for _ in range(batch):
        length = frame_count - 1 if full else None
        rows.append(text_to_indices(random_text(rng, frame_count, length), frame_count))
    return np.stack(rows)
