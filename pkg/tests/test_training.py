import csv
import math

import numpy as np
import pytest
import torch

import training.training as training_module
from augment.augment import build_pairs
from datasets.datasets import synth_shapes
from errors.errors import ArgumentError, StateError, TrainingAbort
from evaluation.evaluation import evaluate
from models.models import (Ablation, BaselineVariant, CSV_COLUMNS,
                           TrainConfig)
from networks.checkpoint import load_checkpoint
from networks.networks import build_baseline, build_bundle, tensorize_pairs
from tests.conftest import SMALL_DIMS
from training.training import (CsvMetricsCallback, baseline_fit,
                               epoch_batches, fit, train_step_discriminator,
                               train_step_main)


def parameters(module) -> list[torch.Tensor]:
    return [p.detach().clone() for p in module.parameters()]


def same(before, module) -> bool:
    return all(torch.equal(a, b) for a, b in zip(before, module.parameters()))


@pytest.fixture
def batch(shape_pairs):
    train, _ = shape_pairs
    return tensorize_pairs(train[:8])


def test_discriminator_step_freezes_others(batch, small_bundle):
    config = TrainConfig(epochs=1, batch_size=8, assert_freeze=True)
    frozen = {name: parameters(module) for name, module in
              small_bundle.modules().items() if name != 'cmd'}
    cmd_before = parameters(small_bundle.cmd)
    step = train_step_discriminator(batch, small_bundle, config)
    for name, before in frozen.items():
        assert same(before, small_bundle.modules()[name]), name
    assert not same(cmd_before, small_bundle.cmd)
    assert step.count == 16
    assert 0 <= step.correct <= 16


def test_discriminator_step_keeps_encoder_statistics(batch, small_bundle,
                                                     small_config):
    encoders = (small_bundle.encoder_ts, small_bundle.encoder_img)
    buffers = [b.clone() for e in encoders for b in e.buffers()]
    small_bundle.train()
    train_step_discriminator(batch, small_bundle, small_config)
    after = [b for e in encoders for b in e.buffers()]
    assert all(torch.equal(a, b) for a, b in zip(buffers, after))
    assert all(module.training for module in small_bundle.modules().values())


def test_main_step_freezes_discriminator(batch, small_bundle):
    config = TrainConfig(epochs=1, batch_size=8, assert_freeze=True)
    cmd_before = parameters(small_bundle.cmd)
    buffers = [b.clone() for b in small_bundle.cmd.buffers()]
    encoder_before = parameters(small_bundle.encoder_ts)
    step = train_step_main(batch, small_bundle, config)
    assert same(cmd_before, small_bundle.cmd)
    assert all(torch.equal(a, b)
               for a, b in zip(buffers, small_bundle.cmd.buffers()))
    assert not same(encoder_before, small_bundle.encoder_ts)
    assert all(p.requires_grad for p in small_bundle.cmd.parameters())
    assert step.count == 8
    assert all(math.isfinite(v) for v in (step.l_cls, step.l_fd, step.l_adv))


def test_discriminator_loss_at_chance(batch, small_bundle, small_config):
    with torch.no_grad():
        last = small_bundle.cmd.layers[-1]
        last.weight.zero_()
        last.bias.zero_()
    step = train_step_discriminator(batch, small_bundle, small_config)
    assert step.l_disc == pytest.approx(math.log(2), rel=1e-6)


def test_no_cmd_ablation_skips_discriminator(batch, small_bundle):
    config = TrainConfig(epochs=1, batch_size=8, ablation=Ablation.NO_CMD)
    cmd_before = parameters(small_bundle.cmd)
    step = train_step_discriminator(batch, small_bundle, config)
    assert step.l_disc == 0.0
    main = train_step_main(batch, small_bundle, config)
    assert main.l_adv == 0.0
    assert same(cmd_before, small_bundle.cmd)


def test_steps_require_initialized_bundle(batch, small_config):
    baseline = build_baseline(BaselineVariant.TS_ONLY, 4,
                              batch.org_modality, **SMALL_DIMS)
    with pytest.raises(StateError):
        train_step_main(batch, baseline, small_config)


def test_epoch_batches_cover_permutation():
    batches = epoch_batches(10, 4, seed=3, epoch=0)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    again = epoch_batches(10, 4, seed=3, epoch=0)
    assert all((a == b).all() for a, b in zip(batches, again))
    other = epoch_batches(10, 4, seed=3, epoch=1)
    assert not all((a == b).all() for a, b in zip(batches, other))


def test_epoch_batches_drop_single_tail():
    assert [len(b) for b in epoch_batches(9, 4, seed=0, epoch=0)] == [4, 4]


def test_fit_alternates_steps_per_batch(monkeypatch, shape_pairs):
    train, _ = shape_pairs
    calls = []
    original_disc = training_module.train_step_discriminator
    original_main = training_module.train_step_main

    def disc(batch, bundle, config):
        calls.append(('disc', len(batch)))
        return original_disc(batch, bundle, config)

    def main(batch, bundle, config):
        calls.append(('main', len(batch)))
        return original_main(batch, bundle, config)

    monkeypatch.setattr(training_module, 'train_step_discriminator', disc)
    monkeypatch.setattr(training_module, 'train_step_main', main)
    config = TrainConfig(epochs=1, batch_size=5)
    fit(train[:10], config, class_count=4, **SMALL_DIMS)
    assert calls == [('disc', 5), ('main', 5), ('disc', 5), ('main', 5)]


def test_fit_records_and_csv(tmp_path, shape_pairs):
    train, _ = shape_pairs
    config = TrainConfig(epochs=2, batch_size=8)
    metrics = tmp_path / 'metrics.csv'
    bundle, records = fit(train, config, [CsvMetricsCallback(metrics)],
                          **SMALL_DIMS)
    assert [r.epoch for r in records] == [0, 1]
    assert bundle.epoch == 2
    with open(metrics, newline='', encoding='utf-8') as file:
        rows = list(csv.reader(file))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 3
    assert all(0.0 <= r.train_accuracy <= 1.0 for r in records)


def test_fit_deterministic(shape_pairs):
    train, _ = shape_pairs
    config = TrainConfig(epochs=2, batch_size=8, seed=4)
    first, records_a = fit(train, config, **SMALL_DIMS)
    second, records_b = fit(train, config, **SMALL_DIMS)
    for a, b in zip(first.main_parameters(), second.main_parameters()):
        assert torch.equal(a, b)
    for a, b in zip(records_a, records_b):
        assert a.model_dump(exclude={'seconds'}) == b.model_dump(
            exclude={'seconds'})


def test_fit_checkpoints_and_resume(tmp_path, shape_pairs):
    train, _ = shape_pairs
    config = TrainConfig(epochs=2, batch_size=8, checkpoint_every=1)
    straight, _ = fit(train, config, checkpoint_dir=tmp_path / 'ckpt',
                      **SMALL_DIMS)
    assert (tmp_path / 'ckpt' / 'epoch-0001').is_dir()
    assert (tmp_path / 'ckpt' / 'final').is_dir()
    assert not (tmp_path / 'ckpt' / 'epoch-0002').exists()

    resumed = load_checkpoint(tmp_path / 'ckpt' / 'epoch-0001')
    assert resumed.epoch == 1
    resumed, records = fit(train, config, bundle=resumed)
    assert [r.epoch for r in records] == [1]
    for a, b in zip(straight.main_parameters(), resumed.main_parameters()):
        assert torch.equal(a, b)


def test_fit_rejects_empty():
    with pytest.raises(ArgumentError):
        fit([], TrainConfig(epochs=1, batch_size=2))


def test_fit_rejects_single_pattern(shape_pairs):
    train, _ = shape_pairs
    with pytest.raises(ArgumentError):
        fit(train[:1], TrainConfig(epochs=1, batch_size=2), **SMALL_DIMS)


def test_fit_aborts_on_non_finite_loss(monkeypatch, tmp_path, shape_pairs):
    train, _ = shape_pairs
    monkeypatch.setattr(training_module, 'classification_loss',
                        lambda logits, labels: logits.sum() * float('nan'))
    metrics = tmp_path / 'metrics.csv'
    seen = []
    with pytest.raises(TrainingAbort) as info:
        fit(train, TrainConfig(epochs=3, batch_size=8),
            [CsvMetricsCallback(metrics), lambda r, b: seen.append(r)],
            **SMALL_DIMS)
    assert info.value.record.aborted
    assert info.value.record.epoch == 0
    assert [r.aborted for r in seen] == [True]
    with open(metrics, newline='', encoding='utf-8') as file:
        rows = list(csv.reader(file))
    assert len(rows) == 2 and rows[1][-1] == 'True'


@pytest.mark.parametrize('variant', list(BaselineVariant))
def test_baseline_fit(variant, shape_pairs):
    train, _ = shape_pairs
    bundle, records = baseline_fit(variant, train,
                                   TrainConfig(epochs=1, batch_size=8),
                                   **SMALL_DIMS)
    assert bundle.variant is variant
    assert records[0].l_fd == 0.0 and records[0].l_adv == 0.0
    assert records[0].l_disc == 0.0


def test_fit_byte_identical_checkpoints(tmp_path, shape_pairs):
    train, _ = shape_pairs
    config = TrainConfig(epochs=2, batch_size=8, seed=1)
    fit(train, config, checkpoint_dir=tmp_path / 'a', **SMALL_DIMS)
    fit(train, config, checkpoint_dir=tmp_path / 'b', **SMALL_DIMS)
    for name in ('tensors.bin', 'manifest.json'):
        assert ((tmp_path / 'a' / 'final' / name).read_bytes()
                == (tmp_path / 'b' / 'final' / name).read_bytes())


def test_fit_with_freeze_assertions(monkeypatch, shape_pairs):
    train, _ = shape_pairs
    checks = []
    original = training_module._assert_unchanged

    def counting(before, modules, what):
        original(before, modules, what)
        checks.append(what)

    monkeypatch.setattr(training_module, '_assert_unchanged', counting)
    config = TrainConfig(epochs=7, batch_size=4, assert_freeze=True)
    _, records = fit(train, config, **SMALL_DIMS)
    assert len(records) == 7
    assert checks.count('CMD') >= 50
    assert len(checks) - checks.count('CMD') >= 50


@pytest.mark.slow
def test_learns_synthetic_shapes():
    train, test = synth_shapes(4, 60, seed=0, noise_sigma=0.02)
    train_pairs, test_pairs = build_pairs(train).pairs, build_pairs(test).pairs
    config = TrainConfig(epochs=50, batch_size=64)
    untrained = build_bundle(4, train_pairs[0].org_modality, config=config)
    before = evaluate(untrained, test_pairs).mean_fd
    bundle, _ = fit(train_pairs, config)
    report = evaluate(bundle, test_pairs)
    assert report.accuracy >= 0.95
    assert report.mean_fd < 0.25 * before
