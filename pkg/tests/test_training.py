import math
from dataclasses import replace

import pytest
import torch

from msras.config import toy_recipe
from msras.data import make_toy_dataset
from msras.model import TcdConfig
from msras.separation import OracleMaskSeparator, StemLayout
from msras.training import (
    DEFAULT_CURRICULUM, CurriculumStep, Trainer, TrainConfig, TrainingError, ablate_curriculum, alpha_ramp,
    curriculum_at, scale_curriculum, total_iterations, train_multi_source, train_single_source, write_log,
)

TINY_MODEL = dict(h=8, base_channels=16, decoder_channels=[4, 4, 4, 4, 8, 8], conv_block_depth=1,
                  concealer_upsample_factors=[2, 2, 2, 2], decoder_pool_factors=[2, 2, 2, 2, 1, 1],
                  carrier_stft_window=32)


def tiny_setup(stems=("drums",), clips=4, crop_frames=8):
    data = make_toy_dataset(0, clips, duration=0.25)
    cfg = TrainConfig(model=TcdConfig(**TINY_MODEL), sample_rate=8000, windows=(64, 128), batch_size=2,
                      crop_frames=crop_frames, embedded_stems=stems, log_every=0)
    sep = OracleMaskSeparator(StemLayout(data.stem_names), 64)
    return data, cfg, sep


def short_curriculum(n=2):
    return scale_curriculum(DEFAULT_CURRICULUM, n / 500)


def unit_curriculum():
    return tuple(replace(s, iterations=1) for s in DEFAULT_CURRICULUM)


def test_table_rows_at_boundaries():
    rows = {
        0: (1, (1.0, 0.0, 0.0), 0.0, "MDS", False),
        500: (2, (0.1, 1.0, 0.0), 0.0, "MDS", False),
        3000: (3, (0.1, 1.0, 1.0), 0.0, "MDS", False),
        8000: (4, (0.1, 1.0, 1.0), 0.0, "MDS", False),
        10000: (5, (0.0002, 1.0, 1.0), 1.0, "MDSR", True),
    }
    for it, (sid, lam, alpha, metric, aug) in rows.items():
        step, a = curriculum_at(it, DEFAULT_CURRICULUM)
        assert (step.step_id, (step.lambda1, step.lambda2, step.lambda3), a, step.carrier_metric,
                step.augmentation) == (sid, lam, alpha, metric, aug)
    assert curriculum_at(499, DEFAULT_CURRICULUM)[0].step_id == 1
    assert curriculum_at(14999, DEFAULT_CURRICULUM)[0].step_id == 5
    with pytest.raises(ValueError):
        curriculum_at(15000, DEFAULT_CURRICULUM)
    assert total_iterations(DEFAULT_CURRICULUM) == 15000


def test_step4_ramp():
    assert [curriculum_at(8000 + k, DEFAULT_CURRICULUM)[1] for k in (0, 1000)] == [0.0, 0.5]
    assert alpha_ramp(2000, 2000) == 1.0 and alpha_ramp(500, 2000) == 0.25
    with pytest.raises(ValueError):
        alpha_ramp(2001, 2000)


def test_alpha_non_decreasing():
    alphas = [curriculum_at(i, DEFAULT_CURRICULUM)[1] for i in range(0, 15000, 7)]
    assert all(b >= a for a, b in zip(alphas, alphas[1:]))


def test_scaled_curriculum_boundaries():
    toy = scale_curriculum(DEFAULT_CURRICULUM, 0.2)
    assert [s.iterations for s in toy] == [100, 500, 1000, 400, 1000]


def test_ablation_hands_iterations_forward():
    table = ablate_curriculum(DEFAULT_CURRICULUM, [2])
    assert [s.step_id for s in table] == [1, 3, 4, 5]
    assert [s.iterations for s in table] == [500, 7500, 2000, 5000]
    last = ablate_curriculum(DEFAULT_CURRICULUM, [5])
    assert last[-1].step_id == 4 and last[-1].iterations == 7000
    assert total_iterations(last) == 15000
    with pytest.raises(ValueError):
        ablate_curriculum(DEFAULT_CURRICULUM, [1, 2, 3, 4, 5])


def test_step_validation():
    with pytest.raises(ValueError):
        CurriculumStep(1, 1, 0, 0, iterations=0)
    with pytest.raises(ValueError):
        CurriculumStep(1, -1, 0, 0)
    with pytest.raises(ValueError):
        CurriculumStep(1, 1, 0, 0, carrier_metric="L2")


class CountingSeparator(OracleMaskSeparator):
    def __init__(self, *a, **k):
        super().__init__(*a, **k)
        self.calls = 0

    def separate_tensor(self, mixture, references=None):
        self.calls += 1
        return super().separate_tensor(mixture, references)


def test_no_separator_calls_in_steps_1_and_2():
    data, cfg, _ = tiny_setup()
    sep = CountingSeparator(StemLayout(data.stem_names), 64)
    tr = Trainer(data, cfg, short_curriculum(2), sep, seed=0)
    tr.run(until=total_iterations(tr.curriculum[:2]))
    assert sep.calls == 0 and tr.separator_calls == 0
    tr.step()
    assert sep.calls == 1


def test_freezing_other_models_bitwise():
    data, cfg, sep = tiny_setup(stems=("drums", "vocals"))
    table = (replace(DEFAULT_CURRICULUM[2], iterations=3), replace(DEFAULT_CURRICULUM[4], iterations=3))
    tr = Trainer(data, cfg, table, sep, seed=1)

    def snapshot():
        return [{k: v.clone() for k, v in p.named_tensors().items()} for p in tr.params]

    before = snapshot()
    changed = []

    def check(iteration, i):
        nonlocal before
        after = snapshot()
        for j in range(len(tr.params)):
            same = all(torch.equal(before[j][k], after[j][k]) for k in before[j])
            if j != i:
                assert same, f"model {j} changed during update of {i} at iteration {iteration}"
            else:
                changed.append(not same)
        before = after

    tr.after_update = check
    tr.run()
    assert all(changed)


def test_k1_multi_equals_single():
    data, cfg, sep = tiny_setup()
    table = unit_curriculum()
    p1, log1 = train_single_source(data, cfg, table, seed=3, separator=sep)
    r = train_multi_source(data, cfg, table, seed=3, separator=sep)
    assert [x["loss"] for x in log1] == [x["loss"] for x in r.log]
    for k, v in p1.named_tensors().items():
        assert torch.equal(v, r.params[0].named_tensors()[k])


def test_reproducible_loss_sequence():
    data, cfg, sep = tiny_setup()
    table = (replace(DEFAULT_CURRICULUM[0], iterations=40), replace(DEFAULT_CURRICULUM[2], iterations=30),
             replace(DEFAULT_CURRICULUM[4], iterations=30))
    a = train_multi_source(data, cfg, table, seed=7, separator=sep).log
    b = train_multi_source(data, cfg, table, seed=7, separator=sep).log
    assert len(a) == 100
    assert [x["loss"] for x in a] == [x["loss"] for x in b]
    c = train_multi_source(data, cfg, table, seed=8, separator=sep).log
    assert [x["loss"] for x in a] != [x["loss"] for x in c]


def test_log_records_and_jsonl(tmp_path):
    data, cfg, sep = tiny_setup()
    _, log = train_single_source(data, cfg, unit_curriculum(), seed=0, separator=sep)
    assert [r["step"] for r in log] == [1, 2, 3, 4, 5]
    assert all(math.isfinite(r["loss"]) for r in log)
    assert "message_sep" in log[2] and "message_sep" not in log[1]
    path = tmp_path / "log.jsonl"
    write_log(path, log)
    assert len(path.read_text().splitlines()) == 5


def test_non_finite_loss_aborts():
    data, cfg, sep = tiny_setup()
    tr = Trainer(data, cfg, unit_curriculum(), sep, seed=0)
    with torch.no_grad():
        tr.params[0].concealer.output.bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="iteration 0"):
        tr.step()


def test_checkpoints_every_n(tmp_path):
    data, cfg, sep = tiny_setup()
    cfg = replace(cfg, checkpoint_every=2, checkpoint_dir=str(tmp_path))
    Trainer(data, cfg, unit_curriculum(), sep, seed=0).run()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["drums_it000002.pt", "drums_it000004.pt"]


def test_trainer_rejects_bad_setup():
    data, cfg, sep = tiny_setup()
    with pytest.raises(TrainingError):
        Trainer(data, replace(cfg, embedded_stems=("piano",)), short_curriculum(), sep)
    with pytest.raises(TrainingError):
        Trainer(data, replace(cfg, sample_rate=16000), short_curriculum(), sep)
    tr = Trainer(data, cfg, unit_curriculum()[2:], None)
    with pytest.raises(TrainingError):
        tr.step()


def test_toy_step1_reduces_mds():
    """Step 1 alone: the generator learns to reproduce the carrier."""
    recipe = toy_recipe()
    data = make_toy_dataset(0, 8)
    log = Trainer(data, recipe.train, recipe.curriculum[:1], None, seed=0).run().log
    assert len(log) == 100
    assert log[-1]["carrier"] < 0.2 * log[10]["carrier"]


@pytest.mark.parametrize("index, scale", [(0, (3.0, 1.0)), (4, (1.0, 7.0))])
def test_carrier_scale_multiplies_lambda1(index, scale):
    data, cfg, sep = tiny_setup()
    trainer = Trainer(data, replace(cfg, carrier_scale=scale, log_every=1), unit_curriculum(), sep, 0)
    trainer.run()
    rec = trainer.log[index]
    step = unit_curriculum()[index]
    factor = scale[0] if step.carrier_metric == "MDS" else scale[1]
    rest = rec["loss"] - step.lambda1 * factor * rec["carrier"]
    base = Trainer(data, replace(cfg, log_every=1), unit_curriculum(), sep, 0)
    base.run()
    ref = base.log[index]
    assert rec["carrier"] == pytest.approx(ref["carrier"])
    assert rest == pytest.approx(ref["loss"] - step.lambda1 * ref["carrier"], abs=1e-6 * rec["loss"])


def test_norm_recalibration_is_deterministic_and_leaves_weights():
    data, cfg, sep = tiny_setup()
    trainer = Trainer(data, cfg, unit_curriculum(), sep, 0)
    trainer.run()
    weights = {k: v.clone() for k, v in trainer.params[0].named_tensors().items()}
    norm = trainer.params[0].decoder.norm
    stats = norm.running_mean.clone()
    trainer.recalibrate_norms()
    assert torch.equal(norm.running_mean, stats) and norm.momentum == 0.1
    assert int(norm.num_batches_tracked) == cfg.norm_batches
    for k, v in trainer.params[0].named_tensors().items():
        if "running" not in k and "num_batches" not in k:
            assert torch.equal(v, weights[k]), k
    off = Trainer(data, replace(cfg, norm_batches=0), unit_curriculum(), sep, 0)
    off.run()
    assert not torch.equal(off.params[0].decoder.norm.running_mean, stats)
