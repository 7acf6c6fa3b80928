"""End-to-end evaluation: embed, mix, (distort), separate, decode, score."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .audio import SNR_INF, mean_db, snr_db
from .codec import random_indices
from .model import TcdParams, conceal_tensor, decode_tensor, inference_mode
from .robustness import DistortionSpec, apply_eval_distortion
from .separation import SeparationError, Separator

ACCURACY_CONVENTION = "frames pooled over clips; end-token padding frames counted"


class EvaluationError(RuntimeError):
    pass


def fingerprint(obj) -> str:
    """Short stable digest of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def params_fingerprint(params: TcdParams) -> str:
    h = hashlib.sha256()
    for name, t in sorted(params.named_tensors().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    h.update(repr(params.alpha).encode())
    return h.hexdigest()[:16]


def _json_float(x: float):
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class EvalReport:
    stem: str
    seed: int
    clips: int
    frames: int
    snr_embedded: float
    snr_separated: float
    acc_embedded: float
    acc_separated: float
    distortion_accuracy: Dict[str, float] = field(default_factory=dict)
    config_fingerprint: str = ""
    accuracy_convention: str = ACCURACY_CONVENTION

    def to_dict(self) -> dict:
        keys = ("stem", "seed", "clips", "frames", "snr_embedded", "snr_separated", "acc_embedded",
                "acc_separated", "distortion_accuracy", "config_fingerprint", "accuracy_convention")
        return {k: _json_float(getattr(self, k)) for k in keys}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".part")
        tmp.write_text(self.to_json())
        tmp.replace(path)


def _clip_tensors(dataset, index: int, spf: int):
    stems = dataset.stems_tensor(index)
    usable = (stems.shape[-1] // spf) * spf
    if usable == 0:
        raise EvaluationError(f"clip {index} is shorter than one message frame")
    return stems[..., :usable]


def _distortion_name(spec: DistortionSpec) -> str:
    return spec.kind


@torch.no_grad()
def evaluate(params: TcdParams, dataset, separator: Separator, distortions: Sequence[DistortionSpec] = (),
             seed: int = 0, stem: str = "drums", full_messages: bool = True) -> EvalReport:
    """Score ``params`` on every clip of ``dataset``.

    Per clip a seeded random message is embedded into ``stem``; SNR is measured
    on the embedded stem against the carrier and on the separated stem against
    the separation of the unmodified mixture. Distortions are applied to the
    embedded mixture before separation.
    """
    if stem not in separator.layout.stem_names:
        raise EvaluationError(f"stem {stem!r} missing from separator layout {separator.layout.stem_names}")
    if stem not in dataset.stem_names:
        raise EvaluationError(f"stem {stem!r} missing from dataset stems {dataset.stem_names}")
    spf = params.config.samples_per_frame
    k_data = dataset.stem_names.index(stem)
    k_sep = separator.layout.index(stem)
    dtype = next(params.decoder.parameters()).dtype
    snr_e, snr_s = [], []
    correct_e = correct_s = total = 0
    dist_correct = {_distortion_name(d): 0 for d in distortions}
    with inference_mode(params):
        for n in range(len(dataset)):
            rng = np.random.default_rng([seed, n])
            stems = _clip_tensors(dataset, n, spf).to(dtype)
            frames = stems.shape[-1] // spf
            truth = torch.as_tensor(random_indices(rng, 1, frames, full=full_messages))
            carrier = stems[k_data][None]
            c_hat = conceal_tensor(params, carrier, truth)
            snr_e.append(snr_db(carrier, carrier - c_hat))
            correct_e += int((decode_tensor(params, c_hat).argmax(-1) == truth).sum())
            mixture = stems.sum(0)[None]
            embedded = stems.clone()
            embedded[k_data] = c_hat[0]
            mixture_hat = embedded.sum(0)[None]
            refs = stems[None]
            clean_sep = separator.separate_tensor(mixture, refs)[:, k_sep]
            sep = separator.separate_tensor(mixture_hat, refs)[:, k_sep]
            snr_s.append(snr_db(clean_sep, clean_sep - sep) if float(clean_sep.abs().max()) > 0 else float("nan"))
            correct_s += int((decode_tensor(params, sep).argmax(-1) == truth).sum())
            for d in distortions:
                distorted = apply_eval_distortion(mixture_hat, d, rng, sample_rate=dataset.sample_rate)
                d_sep = separator.separate_tensor(distorted, refs)[:, k_sep]
                dist_correct[_distortion_name(d)] += int((decode_tensor(params, d_sep).argmax(-1) == truth).sum())
            total += frames
    config = {"params": params_fingerprint(params), "separator": separator.kind,
              "distortions": [d.to_dict() for d in distortions], "stem": stem, "clips": len(dataset),
              "full_messages": full_messages}
    return EvalReport(
        stem=stem, seed=seed, clips=len(dataset), frames=total,
        snr_embedded=mean_db(snr_e), snr_separated=mean_db([s for s in snr_s if not math.isnan(s)]),
        acc_embedded=100.0 * correct_e / total, acc_separated=100.0 * correct_s / total,
        distortion_accuracy={k: 100.0 * v / total for k, v in dist_correct.items()},
        config_fingerprint=fingerprint(config),
    )


@torch.no_grad()
def evaluate_multi(models: Mapping[str, TcdParams], dataset, separator: Separator, seed: int = 0,
                   full_messages: bool = True) -> dict:
    """Embed every stem in ``models`` at once and cross-decode all separations.

    ``cross_accuracy[a][b]`` is decoder ``a`` on the separation of stem ``b``,
    scored against the message hidden in ``a``.
    """
    names = list(models)
    for s in names:
        if s not in separator.layout.stem_names or s not in dataset.stem_names:
            raise EvaluationError(f"stem {s!r} missing from dataset or separator layout")
    spf = {models[s].config.samples_per_frame for s in names}
    if len(spf) != 1:
        raise EvaluationError("all models must share samples_per_frame")
    spf = spf.pop()
    cross = {a: {b: 0 for b in names} for a in names}
    emb = {a: 0 for a in names}
    snr_e = {a: [] for a in names}
    snr_s = {a: [] for a in names}
    total = 0
    for p in models.values():
        p.eval()
    for n in range(len(dataset)):
        rng = np.random.default_rng([seed, n])
        stems = _clip_tensors(dataset, n, spf)
        frames = stems.shape[-1] // spf
        truths, embedded = {}, stems.clone()
        for s in names:
            k = dataset.stem_names.index(s)
            truths[s] = torch.as_tensor(random_indices(rng, 1, frames, full=full_messages))
            c_hat = conceal_tensor(models[s], stems[k][None], truths[s])[0]
            snr_e[s].append(snr_db(stems[k], stems[k] - c_hat))
            emb[s] += int((decode_tensor(models[s], c_hat[None]).argmax(-1) == truths[s]).sum())
            embedded[k] = c_hat
        refs = stems[None]
        clean = separator.separate_tensor(stems.sum(0)[None], refs)[0]
        seps = separator.separate_tensor(embedded.sum(0)[None], refs)[0]
        for a in names:
            ka = separator.layout.index(a)
            snr_s[a].append(snr_db(clean[ka], clean[ka] - seps[ka]))
            for b in names:
                kb = separator.layout.index(b)
                cross[a][b] += int((decode_tensor(models[a], seps[kb][None]).argmax(-1) == truths[a]).sum())
        total += frames
    return {
        "stems": names,
        "frames": total,
        "acc_embedded": {a: 100.0 * emb[a] / total for a in names},
        "snr_embedded": {a: mean_db(snr_e[a]) for a in names},
        "snr_separated": {a: mean_db(snr_s[a]) for a in names},
        "cross_accuracy": {a: {b: 100.0 * cross[a][b] / total for b in names} for a in names},
    }
