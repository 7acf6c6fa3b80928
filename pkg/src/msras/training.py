"""Curriculum schedule and the alternating concealer/decoder training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .codec import index_accuracy, random_indices
from .losses import DEFAULT_WINDOWS, LossWeights, carrier_distance, message_loss
from .model import TcdConfig, TcdParams, conceal_tensor, decode_tensor, init_params, save_checkpoint
from .robustness import AugmentationConfig, augment_batch
from .separation import Separator

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CurriculumStep:
    step_id: int
    lambda1: float
    lambda2: float
    lambda3: float
    alpha: float = 0.0
    ramp: bool = False
    carrier_metric: str = "MDS"
    iterations: int = 1
    augmentation: bool = False

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError(f"step {self.step_id}: iterations must be positive")
        LossWeights(self.lambda1, self.lambda2, self.lambda3)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"step {self.step_id}: alpha must lie in [0, 1]")
        if self.carrier_metric.upper() not in ("MDS", "MDSR"):
            raise ValueError(f"step {self.step_id}: unknown carrier metric {self.carrier_metric!r}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)


DEFAULT_CURRICULUM = (
    CurriculumStep(1, 1.0, 0.0, 0.0, alpha=0.0, carrier_metric="MDS", iterations=500),
    CurriculumStep(2, 0.1, 1.0, 0.0, alpha=0.0, carrier_metric="MDS", iterations=2500),
    CurriculumStep(3, 0.1, 1.0, 1.0, alpha=0.0, carrier_metric="MDS", iterations=5000),
    CurriculumStep(4, 0.1, 1.0, 1.0, ramp=True, carrier_metric="MDS", iterations=2000),
    CurriculumStep(5, 0.0002, 1.0, 1.0, alpha=1.0, carrier_metric="MDSR", iterations=5000, augmentation=True),
)


def scale_curriculum(table: Sequence[CurriculumStep], factor: float) -> Tuple[CurriculumStep, ...]:
    return tuple(replace(s, iterations=max(1, int(round(s.iterations * factor)))) for s in table)


def ablate_curriculum(table: Sequence[CurriculumStep], drop: Sequence[int]) -> Tuple[CurriculumStep, ...]:
    """Remove steps, handing their iterations to the following kept step (or the last one)."""
    steps = list(table)
    kept = [s for s in steps if s.step_id not in set(drop)]
    if not kept:
        raise ValueError("cannot drop every curriculum step")
    extra = {s.step_id: 0 for s in kept}
    for pos, s in enumerate(steps):
        if s.step_id in set(drop):
            later = [t for t in steps[pos + 1:] if t in kept]
            target = later[0] if later else kept[-1]
            extra[target.step_id] += s.iterations
    return tuple(replace(s, iterations=s.iterations + extra[s.step_id]) for s in kept)


def alpha_ramp(local_iteration: int, step_iterations: int) -> float:
    if not 0 <= local_iteration <= step_iterations:
        raise ValueError(f"local iteration {local_iteration} outside [0, {step_iterations}]")
    return local_iteration / step_iterations


def curriculum_at(iteration: int, table: Sequence[CurriculumStep]) -> Tuple[CurriculumStep, float]:
    """The step covering ``iteration`` and the mixing ratio at that point."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    start = 0
    for step in table:
        if iteration < start + step.iterations:
            alpha = alpha_ramp(iteration - start, step.iterations) if step.ramp else step.alpha
            return step, alpha
        start += step.iterations
    raise ValueError(f"iteration {iteration} is beyond the {start}-iteration schedule")


def total_iterations(table: Sequence[CurriculumStep]) -> int:
    return sum(s.iterations for s in table)


@dataclass
class TrainConfig:
    model: TcdConfig = field(default_factory=TcdConfig)
    sample_rate: int = 44100
    windows: tuple = DEFAULT_WINDOWS
    batch_size: int = 12
    crop_frames: int = 129
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 5.0
    carrier_scale: tuple = (1.0, 1.0)
    norm_batches: int = 20
    embedded_stems: tuple = ("drums",)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    log_every: int = 50
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    @property
    def crop_length(self) -> int:
        return self.crop_frames * self.model.samples_per_frame

    def to_dict(self) -> dict:
        d = asdict(self)
        d["windows"] = list(self.windows)
        d["betas"] = list(self.betas)
        d["carrier_scale"] = list(self.carrier_scale)
        d["embedded_stems"] = list(self.embedded_stems)
        return d


@dataclass
class TrainResult:
    params: List[TcdParams]
    log: List[dict]
    stems: tuple

    def for_stem(self, stem: str) -> TcdParams:
        return self.params[self.stems.index(stem)]


def _finite_or_raise(loss: torch.Tensor, iteration: int, last_checkpoint: Optional[str]) -> None:
    if not torch.isfinite(loss):
        where = f"; last good checkpoint: {last_checkpoint}" if last_checkpoint else ""
        raise TrainingError(f"non-finite loss at iteration {iteration}{where}")


class Trainer:
    """Alternating training of one concealer/decoder pair per embedded stem.

    Each iteration samples stems and messages once, then for every embedded
    stem ``i`` in turn rebuilds the mixture with the current concealers and
    updates only model ``i``; all other models run frozen in inference mode.
    """

    def __init__(self, dataset, config: TrainConfig, curriculum: Sequence[CurriculumStep],
                 separator: Optional[Separator] = None, seed: int = 0,
                 params: Optional[Sequence[TcdParams]] = None):
        self.dataset = dataset
        self.config = config
        self.curriculum = tuple(curriculum)
        self.separator = separator
        self.seed = seed
        self.stems = tuple(config.embedded_stems)
        if dataset.sample_rate != config.sample_rate:
            raise TrainingError(f"dataset rate {dataset.sample_rate} != configured {config.sample_rate}")
        for s in self.stems:
            if s not in dataset.stem_names:
                raise TrainingError(f"embedded stem {s!r} not in dataset stems {dataset.stem_names}")
        self.stem_index = [dataset.stem_names.index(s) for s in self.stems]
        if separator is not None:
            missing = [s for s in self.stems if s not in separator.layout.stem_names]
            if missing:
                raise TrainingError(f"separator layout lacks stems {missing}")
            self.sep_index = [separator.layout.index(s) for s in self.stems]
        if params is None:
            params = [init_params(config.model, seed + i) for i in range(len(self.stems))]
            if curriculum_at(0, self.curriculum)[1] == 0.0:
                for i, p in enumerate(params):
                    p.concealer.reset_output(seed + 1000 + i)
        self.params = list(params)
        self.optimizers = [torch.optim.Adam(p.parameters(), lr=config.learning_rate, betas=tuple(config.betas))
                           for p in self.params]
        self.data_rng = np.random.default_rng([seed, 0])
        self.message_rng = np.random.default_rng([seed, 1])
        self.augment_rng = np.random.default_rng([seed, 2])
        self.iteration = 0
        self.log: List[dict] = []
        self.separator_calls = 0
        self.last_checkpoint: Optional[str] = None
        self.after_update: Optional[Callable[[int, int], None]] = None

    def _separate(self, mixture: torch.Tensor, references: torch.Tensor) -> torch.Tensor:
        if self.separator is None:
            raise TrainingError("this curriculum step needs a separator but none was given")
        self.separator_calls += 1
        return self.separator.separate_tensor(mixture, references)

    def _forward(self, i: int, stems: torch.Tensor, messages: List[torch.Tensor],
                 step: CurriculumStep, alpha: float, augment_rng: np.random.Generator):
        cfg = self.config
        params = self.params[i]
        for j, p in enumerate(self.params):
            p.train(j == i)
            p.alpha = alpha
        carrier = stems[:, self.stem_index[i]]
        truth = messages[i]
        c_hat = conceal_tensor(params, carrier, truth, alpha)
        w = step.weights
        augment = step.augmentation and cfg.augmentation is not None
        rec = {"iteration": self.iteration, "step": step.step_id, "stem": self.stems[i], "alpha": alpha}

        loss = 0.0
        if w.lambda1:
            dist = carrier_distance(step.carrier_metric, carrier, c_hat, cfg.windows)
            scale = self.config.carrier_scale[0 if step.carrier_metric.upper() == "MDS" else 1]
            loss = loss + w.lambda1 * scale * dist
            rec["carrier"] = float(dist.detach())
        decode_inputs = []
        if w.lambda2:
            x = augment_batch(c_hat, cfg.augmentation, augment_rng, cfg.sample_rate) if augment else c_hat
            decode_inputs.append(x)
        if w.lambda3:
            mixed = stems.clone()
            with torch.no_grad():
                for j, p in enumerate(self.params):
                    if j != i:
                        mixed[:, self.stem_index[j]] = conceal_tensor(p, stems[:, self.stem_index[j]], messages[j], alpha)
            parts = [c_hat if n == self.stem_index[i] else mixed[:, n] for n in range(stems.shape[1])]
            mixture = torch.stack(parts, 1).sum(1)
            if augment:
                mixture = augment_batch(mixture, cfg.augmentation, augment_rng, cfg.sample_rate)
            separated = self._separate(mixture, stems)[:, self.sep_index[i]]
            decode_inputs.append(separated)
        if decode_inputs:
            logits = decode_tensor(params, torch.cat(decode_inputs))
            chunks = logits.split(carrier.shape[0])
            k = 0
            if w.lambda2:
                l2 = message_loss(truth, chunks[k])
                loss = loss + w.lambda2 * l2
                rec["message"], rec["acc"] = float(l2.detach()), index_accuracy(truth, chunks[k])
                k += 1
            if w.lambda3:
                l3 = message_loss(truth, chunks[k])
                loss = loss + w.lambda3 * l3
                rec["message_sep"], rec["acc_sep"] = float(l3.detach()), index_accuracy(truth, chunks[k])
        loss = torch.as_tensor(loss) if not isinstance(loss, torch.Tensor) else loss
        return loss, rec

    def _update(self, i: int, stems: torch.Tensor, messages: List[torch.Tensor],
                step: CurriculumStep, alpha: float) -> dict:
        cfg = self.config
        params = self.params[i]
        loss, rec = self._forward(i, stems, messages, step, alpha, self.augment_rng)
        _finite_or_raise(loss, self.iteration, self.last_checkpoint)
        opt = self.optimizers[i]
        opt.zero_grad(set_to_none=True)
        if loss.requires_grad:
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(list(params.parameters()), cfg.grad_clip)
            opt.step()
        rec["loss"] = float(loss.detach())
        return rec

    def step(self) -> List[dict]:
        """Run one iteration (one update per embedded stem)."""
        step, alpha = curriculum_at(self.iteration, self.curriculum)
        cfg = self.config
        stems = self.dataset.sample_batch(self.data_rng, cfg.batch_size, cfg.crop_length)
        frames = cfg.crop_frames
        messages = [torch.as_tensor(random_indices(self.message_rng, cfg.batch_size, frames)) for _ in self.stems]
        records = []
        for i in range(len(self.stems)):
            records.append(self._update(i, stems, messages, step, alpha))
            if self.after_update is not None:
                self.after_update(self.iteration, i)
        for p in self.params:
            p.alpha = alpha
        self.log.extend(records)
        if cfg.log_every and self.iteration % cfg.log_every == 0:
            for r in records:
                logger.info("it %d step %d %s: %s", r["iteration"], r["step"], r["stem"],
                            " ".join(f"{k}={v:.4g}" for k, v in r.items() if isinstance(v, float)))
        self.iteration += 1
        if cfg.checkpoint_every and cfg.checkpoint_dir and self.iteration % cfg.checkpoint_every == 0:
            self.save(Path(cfg.checkpoint_dir))
        return records

    def run(self, until: Optional[int] = None) -> TrainResult:
        end = total_iterations(self.curriculum) if until is None else until
        while self.iteration < end:
            self.step()
        for p in self.params:
            p.alpha = curriculum_at(end - 1, self.curriculum)[1] if end else p.alpha
        self.recalibrate_norms()
        for p in self.params:
            p.eval()
        return TrainResult(self.params, self.log, self.stems)

    @torch.no_grad()
    def recalibrate_norms(self) -> None:
        """Re-estimate batch-norm running statistics with the current weights.

        Momentum-averaged statistics trail a model that is still changing, so
        they can sit far from what the final weights see. The estimate replays
        the forward pass of the current curriculum step (augmentation included)
        on fresh batches with its own rng. Training-mode passes use batch
        statistics, so this never changes the training trajectory.
        """
        cfg = self.config
        if not cfg.norm_batches or not self.iteration:
            return
        step, alpha = curriculum_at(self.iteration - 1, self.curriculum)
        rng = np.random.default_rng([self.seed, 3, self.iteration])
        layers = [m for p in self.params for net in (p.concealer, p.decoder) for m in net.modules()
                  if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
        momenta = [m.momentum for m in layers]
        for m in layers:
            m.reset_running_stats()
            m.momentum = None
        calls = self.separator_calls
        for _ in range(cfg.norm_batches):
            stems = self.dataset.sample_batch(rng, cfg.batch_size, cfg.crop_length)
            messages = [torch.as_tensor(random_indices(rng, cfg.batch_size, cfg.crop_frames)) for _ in self.stems]
            for i in range(len(self.params)):
                self._forward(i, stems, messages, step, alpha, rng)
        self.separator_calls = calls
        for m, momentum in zip(layers, momenta):
            m.momentum = momentum

    def save(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        for stem, p in zip(self.stems, self.params):
            path = directory / f"{stem}_it{self.iteration:06d}.pt"
            save_checkpoint(path, p, {"iteration": self.iteration, "stem": stem, "seed": self.seed})
            self.last_checkpoint = str(path)


def train_multi_source(dataset, config: TrainConfig, curriculum: Sequence[CurriculumStep] = DEFAULT_CURRICULUM,
                       seed: int = 0, separator: Optional[Separator] = None) -> TrainResult:
    return Trainer(dataset, config, curriculum, separator, seed).run()


def train_single_source(dataset, config: TrainConfig, curriculum: Sequence[CurriculumStep] = DEFAULT_CURRICULUM,
                        seed: int = 0, separator: Optional[Separator] = None) -> Tuple[TcdParams, List[dict]]:
    if len(config.embedded_stems) != 1:
        raise TrainingError("single-source training embeds exactly one stem")
    result = train_multi_source(dataset, config, curriculum, seed, separator)
    return result.params[0], result.log


def write_log(path, records: Sequence[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    tmp.replace(path)
