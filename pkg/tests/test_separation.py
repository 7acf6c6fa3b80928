import json
import sys
import textwrap

import numpy as np
import pytest
import torch

from msras.audio import Waveform, mix, snr_db
from msras.data import make_toy_dataset
from msras.separation import (
    ExternalSeparator, IdentitySeparator, LearnedSeparator, OracleMaskSeparator, SeparationError,
    SeparatorTrainConfig, StemLayout, make_oracle_mask_separator, stem_snrs, train_learned_separator,
)


def _tone(freq, sr=44100, seconds=1.0, amp=0.3):
    t = np.arange(int(sr * seconds)) / sr
    x = amp * np.sin(2 * np.pi * freq * t)
    return Waveform(torch.from_numpy(np.stack([x, 0.8 * x]).astype(np.float32)), sr)


def test_layout_contract():
    layout = StemLayout()
    assert layout.index("drums") == 1
    with pytest.raises(SeparationError):
        layout.index("piano")
    with pytest.raises(SeparationError):
        StemLayout(("a", "a"))
    with pytest.raises(SeparationError):
        StemLayout(())


def test_identity_single_stem_returns_mixture():
    w = _tone(440)
    out = IdentitySeparator(StemLayout(("all",))).separate(w)
    assert len(out) == 1 and torch.equal(out[0].samples, w.samples)


def test_oracle_separates_band_disjoint_tones():
    low, high = _tone(440), _tone(8000)
    sep = make_oracle_mask_separator([low, high], stft_window=2048)
    est = sep.separate(mix([low, high]))
    for ref, e in zip((low, high), est):
        assert snr_db(ref, ref - e) >= 30.0


def test_oracle_outputs_sum_to_mixture(rng):
    stems = [Waveform(torch.from_numpy((rng.standard_normal((2, 8000)) * s).astype(np.float32)), 8000)
             for s in (0.1, 0.3, 0.05)]
    mixture = mix(stems)
    est = make_oracle_mask_separator(stems, 512).separate(mixture)
    assert float((mix(est).samples - mixture.samples).abs().max()) <= 1e-4


def test_oracle_single_stem_is_identity(rng):
    w = Waveform(torch.from_numpy(rng.standard_normal((2, 4000)).astype(np.float32) * 0.2), 8000)
    (out,) = make_oracle_mask_separator([w], 512).separate(w)
    assert float((out.samples - w.samples).abs().max()) <= 1e-4


def test_oracle_silent_references_split_evenly(rng):
    silent = Waveform(torch.zeros(2, 4000), 8000)
    mixture = Waveform(torch.from_numpy(rng.standard_normal((2, 4000)).astype(np.float32) * 0.2), 8000)
    out = make_oracle_mask_separator([silent] * 4, 512).separate(mixture)
    for o in out:
        assert float((o.samples - mixture.samples / 4).abs().max()) <= 1e-4


def test_oracle_reconstructs_toy_stems():
    ds = make_toy_dataset(5, 4)
    sep = OracleMaskSeparator(StemLayout(ds.stem_names), 512)
    snrs = stem_snrs(sep, ds.clips, references=True)
    assert snrs.min() >= 25.0


def test_oracle_errors(rng):
    w = _tone(440)
    sep = OracleMaskSeparator(StemLayout(("a", "b")), 512)
    with pytest.raises(SeparationError):
        sep.separate(w)
    with pytest.raises(SeparationError):
        sep.register([w])
    with pytest.raises(SeparationError):
        make_oracle_mask_separator([])
    with pytest.raises(SeparationError):
        sep.register([w, _tone(440, seconds=0.5)])


def test_oracle_is_differentiable_in_mixture(rng):
    stems = torch.from_numpy(rng.standard_normal((1, 2, 1, 4096)))
    mixture = stems.sum(1).clone().requires_grad_(True)
    sep = OracleMaskSeparator(StemLayout(("a", "b")), 256)
    sep.separate_tensor(mixture, stems)[:, 0].pow(2).sum().backward()
    assert torch.isfinite(mixture.grad).all() and float(mixture.grad.abs().sum()) > 0


@pytest.fixture(scope="module")
def learned():
    train = make_toy_dataset(11, 8)
    cfg = SeparatorTrainConfig(iterations=150, batch_size=4, crop_length=4096, hidden=64)
    return train, train_learned_separator(train, cfg, seed=0), cfg


def test_learned_separator_beats_its_initialisation(learned):
    _, sep, cfg = learned
    test = make_toy_dataset(12, 4)
    trained = np.median(stem_snrs(sep, test.clips))
    untrained = np.median(stem_snrs(LearnedSeparator(sep.layout, cfg.stft_window, cfg.hidden, seed=0), test.clips))
    assert trained >= 10.0
    assert untrained < trained


def test_learned_separator_is_frozen_and_deterministic(learned, tmp_path):
    train, sep, _ = learned
    assert sep.frozen and all(not p.requires_grad for p in sep.parameters())
    mixture = train.mixture(0)
    a, b = sep.separate(mixture), sep.separate(mixture)
    assert all(torch.equal(x.samples, y.samples) for x, y in zip(a, b))
    sep.save(tmp_path / "sep.pt")
    back = LearnedSeparator.load(tmp_path / "sep.pt")
    assert all(torch.equal(x.samples, y.samples) for x, y in zip(a, back.separate(mixture)))


def test_learned_separator_gradient_reaches_mixture(learned):
    train, sep, _ = learned
    mixture = train.mixture(0).samples[None].clone().requires_grad_(True)
    sep.separate_tensor(mixture)[:, 1].sum().backward()
    assert float(mixture.grad.abs().sum()) > 0


FAKE_TOOL = textwrap.dedent("""
    import hashlib, json, sys
    from pathlib import Path
    from scipy.io import wavfile
    work = Path(sys.argv[-1])
    stems = sys.argv[1].split(",")
    rate, data = wavfile.read(work / "mixture.wav")
    digests = {}
    for name in stems:
        path = work / f"{name}.wav"
        wavfile.write(path, rate, (data / len(stems)).astype(data.dtype))
        digests[name] = hashlib.sha256(path.read_bytes()).hexdigest()
    if "corrupt" in sys.argv:
        digests[stems[0]] = "0" * 64
    mix_digest = hashlib.sha256((work / "mixture.wav").read_bytes()).hexdigest()
    (work / "stems.json").write_text(json.dumps({"mixture_sha256": mix_digest, "stems": digests}))
""")


@pytest.fixture
def fake_tool(tmp_path):
    path = tmp_path / "tool.py"
    path.write_text(FAKE_TOOL)
    return path


def test_external_separator_protocol(tmp_path, fake_tool):
    w = _tone(440, sr=8000, seconds=0.25)
    layout = StemLayout(("x", "y"))
    sep = ExternalSeparator(layout, tmp_path / "work", [sys.executable, str(fake_tool), "x,y"], timeout=60)
    out = sep.separate(w)
    assert len(out) == 2
    assert float((out[0].samples - w.samples / 2).abs().max()) < 1e-6
    assert (tmp_path / "work" / "mixture.sha256").read_text().strip() == json.loads(
        (tmp_path / "work" / "stems.json").read_text())["mixture_sha256"]


def test_external_separator_rejects_bad_checksum(tmp_path, fake_tool):
    sep = ExternalSeparator(StemLayout(("x", "y")), tmp_path / "work",
                            [sys.executable, str(fake_tool), "x,y", "corrupt"], timeout=60)
    with pytest.raises(SeparationError, match="checksum"):
        sep.separate(_tone(440, sr=8000, seconds=0.25))


def test_external_separator_times_out(tmp_path):
    sep = ExternalSeparator(StemLayout(("x",)), tmp_path / "work", None, timeout=0.3, poll=0.05)
    with pytest.raises(SeparationError, match="timed out"):
        sep.separate(_tone(440, sr=8000, seconds=0.1))
