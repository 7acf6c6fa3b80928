"""Command-line interface: ``msras <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training failure. Output files are written atomically.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .audio import AudioError, Waveform, mix, read_wav, write_wav
from .codec import MessageError, decode_frames, text_to_indices
from .config import RunConfig, config_fingerprint, dump_config, load_config, toy_recipe
from .data import StemDataset, load_stem_dataset, make_toy_dataset
from .evaluation import EvaluationError, evaluate
from .model import ConfigError, TcdParams, conceal, decode, load_checkpoint, save_checkpoint
from .robustness import DistortionSpec
from .separation import (ExternalSeparator, IdentitySeparator, LearnedSeparator, OracleMaskSeparator,
                         SeparationError, Separator, StemLayout, train_learned_separator)
from .training import Trainer, TrainingError, total_iterations, write_log

logger = logging.getLogger("msras")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".part")
    tmp.write_text(text)
    tmp.replace(path)


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else toy_recipe()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "stem", None):
        cfg.train.embedded_stems = tuple(args.stem)
    if getattr(args, "separator", None):
        cfg.separator = args.separator
    return cfg


def _datasets(cfg: RunConfig):
    d = cfg.data
    if d.source == "toy":
        rate = cfg.train.sample_rate
        train = make_toy_dataset(d.seed, d.train_clips, rate, d.duration, d.stems, "train")
        test = make_toy_dataset(d.seed + 1, d.test_clips, rate, d.duration, d.stems, "test")
        return train, test
    root = Path(d.path)
    train_dir, test_dir = root / "train", root / "test"
    if train_dir.is_dir() and test_dir.is_dir():
        return load_stem_dataset(train_dir, d.stems, "train"), load_stem_dataset(test_dir, d.stems, "test")
    data = load_stem_dataset(root, d.stems, "test")
    return data, data


def build_separator(spec: str, stems: Sequence[str], window: int, sample_rate: int,
                    train_data: Optional[StemDataset] = None, seed: int = 0) -> Separator:
    """``identity`` | ``oracle`` | ``learned[:PATH]`` | ``external:DIR``."""
    layout = StemLayout(tuple(stems))
    kind, _, arg = spec.partition(":")
    if kind == "identity":
        return IdentitySeparator(layout)
    if kind == "oracle":
        return OracleMaskSeparator(layout, window)
    if kind == "learned":
        if arg:
            return LearnedSeparator.load(arg)
        if train_data is None:
            raise UsageError("--separator learned needs a checkpoint path here (learned:PATH)")
        return train_learned_separator(train_data, seed=seed)
    if kind == "external":
        if not arg:
            raise UsageError("--separator external needs a directory (external:DIR)")
        sep = ExternalSeparator(layout, arg)
        sep.sample_rate = sample_rate
        return sep
    raise UsageError(f"unknown separator {spec!r}")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = _datasets(cfg)
    sep = build_separator(cfg.separator, train.stem_names, cfg.separator_window, cfg.train.sample_rate,
                          train, cfg.seed)
    if cfg.train.checkpoint_every and not cfg.train.checkpoint_dir:
        cfg.train.checkpoint_dir = str(out / "snapshots")
    _atomic_text(out / "config.yaml", dump_config(cfg))
    trainer = Trainer(train, cfg.train, cfg.curriculum, sep, cfg.seed)
    logger.info("training %s for %d iterations", ",".join(trainer.stems), total_iterations(cfg.curriculum))
    result = trainer.run()
    fp = config_fingerprint(cfg)
    for stem, params in zip(result.stems, result.params):
        save_checkpoint(out / f"{stem}.pt", params, {"stem": stem, "seed": cfg.seed, "config_fingerprint": fp})
        report = evaluate(params, test, sep, [DistortionSpec.parse(d) for d in cfg.distortions], cfg.seed, stem)
        report.write(out / f"{stem}_report.json")
        print(report.to_json(), end="")
    write_log(out / "log.jsonl", result.log)
    return EXIT_OK


def _load_params(path) -> TcdParams:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise AudioError(f"checkpoint not found: {path}") from exc


def cmd_conceal(args) -> int:
    params = _load_params(args.checkpoint)
    carrier = read_wav(args.input)
    spf = params.config.samples_per_frame
    if carrier.channels != params.config.channels_out:
        raise AudioError(f"model expects {params.config.channels_out} channels, file has {carrier.channels}")
    usable = (carrier.length // spf) * spf
    if usable == 0:
        raise AudioError(f"carrier is shorter than one {spf}-sample frame")
    idx = text_to_indices(args.message, usable // spf)
    head = Waveform(carrier.samples[:, :usable], carrier.sample_rate)
    embedded = conceal(head, idx, params)
    samples = torch.cat([embedded.samples, carrier.samples[:, usable:]], dim=1)
    write_wav(args.out, Waveform(samples, carrier.sample_rate))
    return EXIT_OK


def cmd_decode(args) -> int:
    params = _load_params(args.checkpoint)
    wave = read_wav(args.input)
    spf = params.config.samples_per_frame
    usable = (wave.length // spf) * spf
    if usable == 0:
        raise AudioError(f"input is shorter than one {spf}-sample frame")
    text = decode_frames(decode(Waveform(wave.samples[:, :usable], wave.sample_rate), params))
    if args.out:
        _atomic_text(Path(args.out), text + "\n")
    print(text)
    return EXIT_OK


def cmd_mix(args) -> int:
    waves = [read_wav(p) for p in args.inputs]
    write_wav(args.out, mix(waves))
    return EXIT_OK


def cmd_separate(args) -> int:
    mixture = read_wav(args.input)
    stems = tuple(args.stems.split(","))
    window = args.window or max(256, 2048 * mixture.sample_rate // 44100)
    window = 1 << (window - 1).bit_length()
    sep = build_separator(args.separator or "oracle", stems, window, mixture.sample_rate)
    if isinstance(sep, OracleMaskSeparator):
        if not args.references:
            raise UsageError("the oracle separator needs --references DIR holding <stem>.wav files")
        sep.register([read_wav(Path(args.references) / f"{s}.wav") for s in stems])
    outputs = sep.separate(mixture)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, wave in zip(stems, outputs):
        write_wav(out / f"{name}.wav", wave)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    params = _load_params(args.checkpoint)
    _, test = _datasets(cfg)
    stem = args.stem[0] if args.stem else cfg.train.embedded_stems[0]
    train_for_sep = _datasets(cfg)[0] if cfg.separator == "learned" else None
    sep = build_separator(cfg.separator, test.stem_names, cfg.separator_window, test.sample_rate,
                          train_for_sep, cfg.seed)
    specs = [DistortionSpec.parse(d) for d in (args.distortion or cfg.distortions)]
    report = evaluate(params, test, sep, specs, cfg.seed, stem)
    if args.out:
        report.write(args.out)
    print(report.to_json(), end="")
    return EXIT_OK


def cmd_make_toy_data(args) -> int:
    stems = tuple(args.stems.split(","))
    data = make_toy_dataset(args.seed or 0, args.clips, args.sample_rate, args.duration, stems, "train")
    out = Path(args.out)
    for n in range(len(data)):
        song = out / f"song{n:03d}"
        song.mkdir(parents=True, exist_ok=True)
        for name in stems:
            write_wav(song / f"{name}.wav", data.clips[n][name])
        write_wav(song / "mixture.wav", data.mixture(n))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msras", description="Audio steganography that survives mixing and source separation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False, config=False, out_required=False):
        if config:
            sp.add_argument("--config", help="YAML run config (default: the toy recipe)")
            sp.add_argument("--separator", help="identity | oracle | learned[:PATH] | external:DIR")
            sp.add_argument("--stem", action="append", help="embedded stem (repeatable for train)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("train", help="run a training config")
    common(sp, config=True, out_required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("conceal", help="hide a message in a WAV carrier")
    common(sp, checkpoint=True, out_required=True)
    sp.add_argument("--message", required=True)
    sp.add_argument("input")
    sp.set_defaults(func=cmd_conceal)

    sp = sub.add_parser("decode", help="recover a message from a WAV")
    common(sp, checkpoint=True)
    sp.add_argument("input")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("mix", help="sum stem WAVs into a mixture")
    common(sp, out_required=True)
    sp.add_argument("inputs", nargs="+")
    sp.set_defaults(func=cmd_mix)

    sp = sub.add_parser("separate", help="split a mixture WAV into stems")
    common(sp, out_required=True)
    sp.add_argument("--separator", help="identity | oracle | learned:PATH | external:DIR")
    sp.add_argument("--stems", default="bass,drums,other,vocals")
    sp.add_argument("--references", help="directory of reference stems (oracle separator)")
    sp.add_argument("--window", type=int, help="STFT window for the oracle separator")
    sp.add_argument("input")
    sp.set_defaults(func=cmd_separate)

    sp = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    common(sp, checkpoint=True, config=True)
    sp.add_argument("--distortion", action="append", help="e.g. channel_drop or compression_surrogate:bits=8")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("make-toy-data", help="write a synthetic stem directory")
    common(sp, out_required=True)
    sp.add_argument("--clips", type=int, default=4)
    sp.add_argument("--sample-rate", type=int, default=8000)
    sp.add_argument("--duration", type=float, default=3.0)
    sp.add_argument("--stems", default="bass,drums,other,vocals")
    sp.set_defaults(func=cmd_make_toy_data)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"msras: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is not None:
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"msras: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"msras: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (AudioError, MessageError, SeparationError, EvaluationError, ValueError, OSError) as exc:
        print(f"msras: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
