"""Двухшаговое попеременное обучение CMD и остальных сетей."""

import csv
import logging
import math
import time
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch

from config import TORCH_THREADS
from errors.errors import (ArgumentError, NumericError, StateError,
                           TrainingAbort)
from losses.losses import (classification_loss, cmd_discriminator_loss,
                           cmd_encoder_loss, encoder_step_total,
                           feature_distance_loss)
from models.models import (CSV_COLUMNS, Ablation, BaselineVariant,
                           EpochRecord, PairedPattern, TrainConfig)
from networks.checkpoint import save_checkpoint
from networks.networks import (BaselineBundle, Bundle, ModelBundle,
                               PairTensors, build_baseline, build_bundle,
                               one_hot, tensorize_pairs)


logger = logging.getLogger(__name__)

Callback = Callable[[EpochRecord, Bundle], None]
TrainData = Union[Sequence[PairedPattern], PairTensors]


class DiscriminatorStep(NamedTuple):
    """Итог шага дискриминатора."""
    l_disc: float
    correct: int = 0
    count: int = 0


class MainStep(NamedTuple):
    """Итог шага кодировщиков, гейта и классификатора."""
    l_cls: float
    l_fd: float
    l_adv: float
    correct: int = 0
    count: int = 0


def configure_torch(config: TrainConfig) -> None:
    """Детерминированный режим: однопоточный CPU и детерминированные ядра."""
    torch.use_deterministic_algorithms(config.deterministic)
    if config.deterministic:
        torch.set_num_threads(TORCH_THREADS)


def _state(modules) -> list[torch.Tensor]:
    return [t.detach() for m in modules
            for t in (*m.parameters(), *m.buffers())]


def _snapshot(modules) -> list[torch.Tensor]:
    return [t.clone() for t in _state(modules)]


def _assert_unchanged(before: list[torch.Tensor], modules, what: str) -> None:
    """Параметры и буферы батч-нормализации побитово не изменились."""
    if any(not torch.equal(a, b) for a, b in zip(before, _state(modules))):
        raise StateError(f'Параметры {what} изменились в замороженном шаге')
    logger.debug('Freeze check passed: %s', what)


def _require_ready(bundle) -> ModelBundle:
    if (not isinstance(bundle, ModelBundle) or bundle.optim_cmd is None
            or bundle.optim_main is None):
        raise StateError('Бандл не инициализирован для обучения')
    return bundle


def train_step_discriminator(batch: PairTensors, bundle: ModelBundle,
                             config: TrainConfig) -> DiscriminatorStep:
    """
    Шаг 1: обучение CMD при замороженных кодировщиках.

    Вложения обеих модальностей вычисляются без градиентов в режиме
    вывода (статистики батч-нормализации кодировщиков не обновляются),
    CMD получает их одним батчем с метками org -> 0, aug -> 1 и one-hot истинного
    класса. При абляции no_cmd шаг ничего не делает и возвращает 0.
    """
    bundle = _require_ready(bundle)
    if config.ablation is Ablation.NO_CMD:
        return DiscriminatorStep(l_disc=0.0)
    others = [bundle.encoder_ts, bundle.encoder_img, bundle.gating,
              bundle.classifier]
    frozen = _snapshot(others) if config.assert_freeze else None

    modes = [module.training for module in others]
    try:
        with torch.no_grad():
            bundle.encoder_ts.eval()
            bundle.encoder_img.eval()
            f_org = bundle.encoder_org(batch.x_org)
            f_aug = bundle.encoder_aug(batch.x_aug)
    finally:
        for module, mode in zip(others, modes):
            module.train(mode)
    bundle.cmd.train()
    hot = one_hot(batch.labels, bundle.class_count)
    targets = torch.cat([torch.zeros(len(batch)), torch.ones(len(batch))]
                        ).to(f_org.device)
    d_hat = bundle.cmd(torch.cat([f_org, f_aug]), torch.cat([hot, hot]))
    loss = cmd_discriminator_loss(d_hat, targets)
    if not math.isfinite(loss.item()):
        raise NumericError(f'Потеря l_disc не конечна: {loss.item()}',
                           term='l_disc')
    bundle.optim_cmd.zero_grad(set_to_none=True)
    loss.backward()
    bundle.optim_cmd.step()

    if frozen is not None:
        _assert_unchanged(frozen, others, 'кодировщиков, гейта и классификатора')
    correct = int(((d_hat.detach() >= 0.5).float() == targets).sum())
    logger.debug('CMD step: l_disc=%.6f correct=%d/%d', loss.item(), correct,
                 len(targets))
    return DiscriminatorStep(l_disc=loss.item(), correct=correct,
                             count=len(targets))


def train_step_main(batch: PairTensors, bundle: ModelBundle,
                    config: TrainConfig) -> MainStep:
    """
    Шаг 2: обучение кодировщиков, гейтинговой сети и классификатора при
    замороженном CMD.

    Потеря: w_cls * классификация + w_fd * расстояние признаков +
    w_adv * состязательная потеря по обеим модальностям.
    """
    bundle = _require_ready(bundle)
    weights = config.effective_weights()
    frozen = _snapshot([bundle.cmd]) if config.assert_freeze else None

    bundle.train()
    bundle.cmd.eval()
    bundle.cmd.requires_grad_(False)
    try:
        inference = bundle.infer(batch.x_org, batch.x_aug)
        l_cls = classification_loss(inference.logits, batch.labels)
        l_fd = feature_distance_loss(inference.f_org, inference.f_aug)
        if weights.w_adv > 0:
            hot = one_hot(batch.labels, bundle.class_count)
            d_org = bundle.cmd(inference.f_org, hot)
            d_aug = bundle.cmd(inference.f_aug, hot)
            # вероятность истинной модальности: org -> 1 - d_hat, aug -> d_hat
            l_adv = cmd_encoder_loss(torch.cat([1 - d_org, d_aug]))
        else:
            l_adv = torch.zeros((), device=l_cls.device)
        total = encoder_step_total(l_cls, l_fd, l_adv, weights)
        bundle.optim_main.zero_grad(set_to_none=True)
        total.backward()
        bundle.optim_main.step()
    finally:
        bundle.cmd.requires_grad_(True)

    if frozen is not None:
        _assert_unchanged(frozen, [bundle.cmd], 'CMD')
    correct = int((inference.logits.argmax(dim=1) == batch.labels).sum())
    logger.debug('Main step: l_cls=%.6f l_fd=%.6f l_adv=%.6f',
                 l_cls.item(), l_fd.item(), l_adv.item())
    return MainStep(l_cls=l_cls.item(), l_fd=l_fd.item(), l_adv=l_adv.item(),
                    correct=correct, count=len(batch))


def train_step_baseline(batch: PairTensors, bundle: BaselineBundle,
                        config: TrainConfig) -> MainStep:
    """Шаг базовой модели: только классификационная потеря."""
    if bundle.optim_main is None:
        raise StateError('Базовая модель не инициализирована для обучения')
    bundle.train()
    logits = bundle.infer(batch.x_org, batch.x_aug).logits
    l_cls = classification_loss(logits, batch.labels)
    if not math.isfinite(l_cls.item()):
        raise NumericError(f'Потеря l_cls не конечна: {l_cls.item()}',
                           term='l_cls')
    bundle.optim_main.zero_grad(set_to_none=True)
    (config.weights.w_cls * l_cls).backward()
    bundle.optim_main.step()
    correct = int((logits.argmax(dim=1) == batch.labels).sum())
    return MainStep(l_cls=l_cls.item(), l_fd=0.0, l_adv=0.0, correct=correct,
                    count=len(batch))


def epoch_batches(n: int, batch_size: int, seed: int,
                  epoch: int) -> list[np.ndarray]:
    """
    Перемешанные индексы батчей эпохи. Хвостовой батч из одного паттерна
    отбрасывается: батч-нормализации нужно больше одного значения.
    """
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches[-1]) < 2:
        logger.debug('Skipping trailing batch of size %d', len(batches[-1]))
        batches = batches[:-1]
    return batches


class CsvMetricsCallback:
    """Пишет по одной строке CSV на эпоху; столбцы - CSV_COLUMNS."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, 'w', newline='', encoding='utf-8') as file:
            csv.writer(file).writerow(CSV_COLUMNS)

    def __call__(self, record: EpochRecord, bundle: Bundle) -> None:
        with open(self.path, 'a', newline='', encoding='utf-8') as file:
            csv.writer(file).writerow(record.as_row())


def _prepare(train: TrainData, steps: int, side: int) -> PairTensors:
    tensors = train if isinstance(train, PairTensors) else (
        tensorize_pairs(train, steps, side) if train else None)
    if tensors is None or len(tensors) == 0:
        raise ArgumentError('Обучающая выборка пуста')
    if len(tensors) < 2:
        raise ArgumentError('Для батч-нормализации нужно не меньше 2 паттернов')
    return tensors


def _run_epochs(bundle: Bundle, tensors: PairTensors, config: TrainConfig,
                step, callbacks: Sequence[Callback],
                checkpoint_dir: Optional[Path]) -> list[EpochRecord]:
    tensors = tensors.to(config.device)
    records = []
    for epoch in range(bundle.epoch, config.epochs):
        started = time.perf_counter()
        totals = dict(l_cls=0.0, l_fd=0.0, l_adv=0.0, l_disc=0.0)
        disc_correct = disc_count = main_correct = main_count = 0
        for index in epoch_batches(len(tensors), config.batch_size,
                                   config.seed, epoch):
            batch = tensors.subset(index)
            try:
                disc, main = step(batch)
            except NumericError as ex:
                seen = max(main_count, 1)
                record = EpochRecord(
                    epoch=epoch, l_cls=totals['l_cls'] / seen,
                    l_fd=totals['l_fd'] / seen, l_adv=totals['l_adv'] / seen,
                    l_disc=totals['l_disc'] / seen, disc_accuracy=0.0,
                    train_accuracy=0.0,
                    seconds=time.perf_counter() - started,
                    deterministic=config.deterministic, aborted=True)
                for callback in callbacks:
                    callback(record, bundle)
                logger.error('Training aborted at epoch %d: %s', epoch, ex)
                raise TrainingAbort(str(ex), record) from ex
            n = main.count
            totals['l_cls'] += main.l_cls * n
            totals['l_fd'] += main.l_fd * n
            totals['l_adv'] += main.l_adv * n
            totals['l_disc'] += disc.l_disc * n
            disc_correct += disc.correct
            disc_count += disc.count
            main_correct += main.correct
            main_count += n

        record = EpochRecord(
            epoch=epoch,
            **{name: value / main_count for name, value in totals.items()},
            disc_accuracy=disc_correct / disc_count if disc_count else 0.0,
            train_accuracy=main_correct / main_count,
            seconds=time.perf_counter() - started,
            deterministic=config.deterministic)
        bundle.epoch = epoch + 1
        records.append(record)
        logger.info('epoch %d: l_cls=%.4f l_fd=%.4f l_adv=%.4f l_disc=%.4f '
                    'acc=%.3f', epoch, record.l_cls, record.l_fd,
                    record.l_adv, record.l_disc, record.train_accuracy)
        for callback in callbacks:
            callback(record, bundle)
        if (checkpoint_dir is not None and config.checkpoint_every
                and bundle.epoch % config.checkpoint_every == 0
                and bundle.epoch < config.epochs):
            save_checkpoint(bundle, Path(checkpoint_dir)
                            / f'epoch-{bundle.epoch:04d}')
    if checkpoint_dir is not None:
        save_checkpoint(bundle, Path(checkpoint_dir) / 'final')
    return records


def fit(train: TrainData, config: TrainConfig = TrainConfig(),
        callbacks: Sequence[Callback] = (), *,
        class_count: Optional[int] = None, steps: int = 50, side: int = 32,
        embedding_dim: int = 512, filters: Sequence[int] = (32, 64, 128),
        bundle: Optional[ModelBundle] = None,
        checkpoint_dir: Optional[Path] = None
        ) -> tuple[ModelBundle, list[EpochRecord]]:
    """
    Обучение предложенного метода.

    Args:

        train: Обучающие пары или готовые тензоры.
        config (TrainConfig): Параметры обучения.
        callbacks: Вызываются после каждой эпохи с (EpochRecord, bundle).
        class_count (int | None): Число классов, по умолчанию max(label) + 1.
        bundle (ModelBundle | None): Продолжить обучение с bundle.epoch.
        checkpoint_dir (Path | None): Каталог чекпоинтов.

    Returns:

        tuple[ModelBundle, list[EpochRecord]]: Обученный бандл и записи эпох.

    Raises:

        TrainingAbort: Потеря стала не конечной; запись передана колбэкам.

    Notes:

        На каждом батче сначала выполняется шаг дискриминатора, затем шаг
        остальных сетей. Порядок батчей определяется (seed, epoch), поэтому
        однопоточный запуск полностью воспроизводим.
    """
    configure_torch(config)
    tensors = _prepare(train, steps, side)
    if class_count is None:
        class_count = int(tensors.labels.max()) + 1
    if bundle is None:
        bundle = build_bundle(class_count, tensors.org_modality, steps=steps,
                              side=side, embedding_dim=embedding_dim,
                              filters=filters, config=config)
    else:
        bundle.config = config
    records = _run_epochs(
        bundle, tensors, config,
        lambda batch: (train_step_discriminator(batch, bundle, config),
                       train_step_main(batch, bundle, config)),
        callbacks, checkpoint_dir)
    return bundle, records


def baseline_fit(variant: BaselineVariant, train: TrainData,
                 config: TrainConfig = TrainConfig(),
                 callbacks: Sequence[Callback] = (), *,
                 class_count: Optional[int] = None, steps: int = 50,
                 side: int = 32, embedding_dim: int = 512,
                 filters: Sequence[int] = (32, 64, 128),
                 checkpoint_dir: Optional[Path] = None
                 ) -> tuple[BaselineBundle, list[EpochRecord]]:
    """Обучение CNN (image), CNN (time series) или CNN (concat)."""
    configure_torch(config)
    tensors = _prepare(train, steps, side)
    if class_count is None:
        class_count = int(tensors.labels.max()) + 1
    bundle = build_baseline(variant, class_count, tensors.org_modality,
                            steps=steps, side=side,
                            embedding_dim=embedding_dim, filters=filters,
                            config=config)
    records = _run_epochs(
        bundle, tensors, config,
        lambda batch: (DiscriminatorStep(l_disc=0.0),
                       train_step_baseline(batch, bundle, config)),
        callbacks, checkpoint_dir)
    return bundle, records
