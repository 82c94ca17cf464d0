"""Evaluation, ablations, alpha analysis and embedding export."""

import csv
import logging
import math
from pathlib import Path
from string import Template
from typing import NamedTuple, Optional, Sequence

import numpy as np
import orjson
import torch

from datasets.datasets import JSON_OPTIONS, write_pgm
from errors.errors import ArgumentError, NumericError, ShapeError
from losses.losses import cmd_discriminator_loss
from models.models import (ALPHA_BUCKETS, Ablation, AblationRow,
                           AblationTable, AlphaBucket, AlphaBucketReport,
                           BaselineVariant, ComparedSample, ComparisonReport,
                           EvalReport, Modality, PairedPattern, RunConfig)
from networks.networks import (Bundle, ModalityDiscriminator, ModelBundle,
                               PairTensors, make_adam, one_hot,
                               tensorize_pairs)
from training.training import (Callback, CsvMetricsCallback, baseline_fit,
                               epoch_batches, fit)


logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / 'template_report'

# (подпись строки, вариант): абляции предложенного метода и базовые CNN
ABLATION_ROWS = (
    ('Proposed', Ablation.NONE),
    ('w/o CMD', Ablation.NO_CMD),
    ('w/o L_FD', Ablation.NO_FD),
    ('CNN (image)', BaselineVariant.IMAGE_ONLY),
    ('CNN (time series)', BaselineVariant.TS_ONLY),
    ('CNN (concat)', BaselineVariant.CONCAT),
)


class Predictions(NamedTuple):
    """Результаты прямого прохода по выборке, в порядке паттернов."""
    ids: list[str]
    labels: np.ndarray
    predicted: np.ndarray
    alpha: Optional[np.ndarray] = None
    f_org: Optional[np.ndarray] = None
    f_aug: Optional[np.ndarray] = None

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.labels


class EmbeddingExport(NamedTuple):
    """Итог выгрузки вложений."""
    path: Path
    rows: int
    mean_pair_distance: float


class AblationSuite(NamedTuple):
    """Таблица абляций и обученные модели по подписям строк."""
    table: AblationTable
    bundles: dict[str, Bundle]


def write_json(path: Path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(data, option=JSON_OPTIONS))
    return path


def write_report(name: str, context: dict, path: Optional[Path] = None) -> str:
    """
    Заполняет шаблон template_report/t_<name>.txt.

    Args:

        name (str): Имя шаблона без префикса и расширения.
        context (dict): Значения для подстановки.
        path (Path | None): Куда записать текст.

    Returns:

        str: Готовый текст отчёта.
    """
    with open(TEMPLATE_DIR / f't_{name}.txt', 'r', encoding='utf-8') as file:
        text = Template(file.read()).substitute(context)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding='utf-8')
    return text


def _format_value(value: Optional[float], digits: int = 4) -> str:
    return '-' if value is None else f'{value:.{digits}f}'


def alpha_bucket(alpha) -> np.ndarray:
    """
    Индекс ближайшей корзины 0.0, 0.1, ..., 1.0; при равенстве
    расстояний выбирается меньшая корзина.
    """
    scaled = np.round(np.asarray(alpha, dtype=np.float64) * 10.0, 9)
    return np.clip(np.ceil(scaled - 0.5), 0, 10).astype(np.int64)


def _pair_tensors(bundle: Bundle, test: Sequence[PairedPattern]
                  ) -> PairTensors:
    if not test:
        raise ArgumentError('Тестовая выборка пуста')
    tensors = tensorize_pairs(test, bundle.steps, bundle.side)
    if tensors.org_modality is not bundle.org_modality:
        raise ShapeError('Исходная модальность данных не совпадает с моделью',
                         expected=bundle.org_modality.value,
                         actual=tensors.org_modality.value)
    observed = int(tensors.labels.max()) + 1
    if observed > bundle.class_count:
        raise ShapeError('Метки данных выходят за число классов модели',
                         expected=bundle.class_count, actual=observed)
    return tensors


def predict_all(bundle: Bundle, test: Sequence[PairedPattern],
                batch_size: Optional[int] = None) -> Predictions:
    """Прямой проход в режиме вывода (статистики батч-нормализации)."""
    tensors = _pair_tensors(bundle, test).to(bundle.config.device)
    batch_size = batch_size or bundle.config.eval_batch_size
    bundle.eval()
    logits, alpha, f_org, f_aug = [], [], [], []
    with torch.no_grad():
        for start in range(0, len(tensors), batch_size):
            batch = tensors.subset(range(start, min(start + batch_size,
                                                    len(tensors))))
            inference = bundle.infer(batch.x_org, batch.x_aug)
            logits.append(inference.logits.cpu())
            if inference.alpha is not None:
                alpha.append(inference.alpha.cpu())
                f_org.append(inference.f_org.cpu())
                f_aug.append(inference.f_aug.cpu())
    joined = torch.cat(logits)
    return Predictions(
        ids=tensors.ids, labels=tensors.labels.cpu().numpy(),
        predicted=joined.argmax(dim=1).numpy(),
        alpha=torch.cat(alpha).numpy() if alpha else None,
        f_org=torch.cat(f_org).numpy() if f_org else None,
        f_aug=torch.cat(f_aug).numpy() if f_aug else None)


def evaluate(bundle: Bundle, test: Sequence[PairedPattern],
             batch_size: Optional[int] = None) -> EvalReport:
    """
    Оценка точности на тестовой выборке.

    Предсказание - argmax классификатора над gate_combine(f_org, f_aug,
    alpha). Для базовых моделей поля L_FD и alpha не заполняются.

    Raises:

        ShapeError: Число классов или формы входов не совпадают с моделью.
    """
    predictions = predict_all(bundle, test, batch_size)
    count = len(predictions.ids)
    confusion = np.zeros((bundle.class_count, bundle.class_count),
                         dtype=np.int64)
    np.add.at(confusion, (predictions.labels, predictions.predicted), 1)
    rows = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / rows[c]) if rows[c] else None
                 for c in range(bundle.class_count)]

    mean_fd = mean_alpha = histogram = None
    if predictions.alpha is not None:
        difference = (predictions.f_org.astype(np.float64)
                      - predictions.f_aug.astype(np.float64))
        mean_fd = float((0.5 * (difference ** 2).sum(axis=1)).mean())
        mean_alpha = float(predictions.alpha.astype(np.float64).mean())
        histogram = np.bincount(alpha_bucket(predictions.alpha),
                                minlength=len(ALPHA_BUCKETS)).tolist()
    return EvalReport(accuracy=float(np.trace(confusion)) / count,
                      count=count, per_class_accuracy=per_class,
                      confusion=confusion.tolist(), mean_fd=mean_fd,
                      mean_alpha=mean_alpha, alpha_histogram=histogram)


def render_eval(report: EvalReport, kind: str, split: str,
                path: Optional[Path] = None) -> str:
    per_class = '\n'.join(
        f'  {label}: {_format_value(value)}'
        for label, value in enumerate(report.per_class_accuracy))
    histogram = '-' if report.alpha_histogram is None else ' '.join(
        str(n) for n in report.alpha_histogram)
    return write_report('eval', {
        'kind': kind, 'split': split, 'count': report.count,
        'accuracy': _format_value(report.accuracy),
        'mean_fd': _format_value(report.mean_fd),
        'mean_alpha': _format_value(report.mean_alpha),
        'per_class': per_class, 'histogram': histogram}, path)


def _require_alpha(bundle: Bundle) -> ModelBundle:
    if not isinstance(bundle, ModelBundle):
        raise ArgumentError(
            f'Модель {bundle.kind} не имеет гейтинговой сети')
    return bundle


def alpha_report(bundle: ModelBundle, test: Sequence[PairedPattern],
                 per_bucket: int = 20, seed: int = 0,
                 out_dir: Optional[Path] = None) -> AlphaBucketReport:
    """
    Группирует тестовые паттерны по ближайшему alpha из 0.0 ... 1.0.

    Args:

        bundle (ModelBundle): Обученная модель.
        test: Тестовые пары.
        per_bucket (int): Сколько паттернов выбрать в каждой корзине.
        seed (int): Зерно выборки.
        out_dir (Path | None): Каталог для плиток PGM и манифеста монтажа.

    Returns:

        AlphaBucketReport: 11 корзин с выбранными id и флагами ошибок.
    """
    predictions = predict_all(_require_alpha(bundle), test)
    buckets = alpha_bucket(predictions.alpha)
    misclassified = ~predictions.correct
    rng = np.random.default_rng(seed)
    order = np.argsort(np.asarray(predictions.ids), kind='stable')

    result = []
    for index, value in enumerate(ALPHA_BUCKETS):
        members = order[buckets[order] == index]
        if len(members) > per_bucket:
            chosen = rng.choice(len(members), size=per_bucket, replace=False)
            members = members[np.sort(chosen)]
        result.append(AlphaBucket(
            value=value, population=int((buckets == index).sum()),
            ids=[predictions.ids[i] for i in members],
            alphas=[float(predictions.alpha[i]) for i in members],
            misclassified=[bool(misclassified[i]) for i in members]))
    report = AlphaBucketReport(seed=seed, per_bucket=per_bucket,
                               buckets=result)
    if out_dir is not None:
        write_alpha_montage(report, test, out_dir)
    return report


def write_alpha_montage(report: AlphaBucketReport,
                        test: Sequence[PairedPattern], out_dir: Path) -> Path:
    """Плитки PGM изображений выбранных паттернов и manifest.json."""
    out_dir = Path(out_dir)
    by_id = {pair.id: pair for pair in test}
    entries = []
    for index, bucket in enumerate(report.buckets):
        bucket_dir = out_dir / 'tiles' / f'alpha-{index:02d}'
        for pattern_id, alpha, wrong in zip(bucket.ids, bucket.alphas,
                                            bucket.misclassified):
            bucket_dir.mkdir(parents=True, exist_ok=True)
            tile = bucket_dir / f'{pattern_id}.pgm'
            write_pgm(tile, by_id[pattern_id].payload_of(Modality.IMAGE).pixels)
            entries.append({'bucket': bucket.value, 'id': pattern_id,
                            'alpha': alpha, 'misclassified': wrong,
                            'path': str(tile.relative_to(out_dir))})
    return write_json(out_dir / 'manifest.json',
                      {'seed': report.seed, 'per_bucket': report.per_bucket,
                       'tiles': entries})


def render_alpha(report: AlphaBucketReport,
                 path: Optional[Path] = None) -> str:
    sections = []
    for bucket in report.buckets:
        lines = [f'alpha = {bucket.value:.1f}: паттернов {bucket.population}, '
                 f'выбрано {len(bucket.ids)}, ошибок '
                 f'{sum(bucket.misclassified)}']
        lines += [f'  {"x" if wrong else " "} {pattern_id} ({alpha:.3f})'
                  for pattern_id, alpha, wrong in zip(
                      bucket.ids, bucket.alphas, bucket.misclassified)]
        sections.append('\n'.join(lines))
    return write_report('alpha', {'seed': report.seed,
                                  'per_bucket': report.per_bucket,
                                  'sections': '\n\n'.join(sections)}, path)


def export_embeddings(bundle: ModelBundle, split: Sequence[PairedPattern],
                      path: Path) -> EmbeddingExport:
    """
    Выгружает вложения обеих модальностей в CSV.

    Одна строка на (паттерн, модальность): id, тег модальности, метка и
    embedding_dim значений; заголовок `id,modality,label,e0..`. Рядом
    пишется JSON со средним расстоянием ||f_org - f_aug|| по парам.

    Raises:

        NumericError: Среди вложений есть не конечные значения.
    """
    predictions = predict_all(_require_alpha(bundle), split)
    if not (np.all(np.isfinite(predictions.f_org))
            and np.all(np.isfinite(predictions.f_aug))):
        raise NumericError('Вложения содержат не конечные значения',
                           term='embedding')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    org, aug = bundle.org_modality.value, bundle.org_modality.other().value
    header = ['id', 'modality', 'label'] + [
        f'e{k}' for k in range(bundle.embedding_dim)]
    with open(path, 'w', newline='', encoding='utf-8') as file:
        writer = csv.writer(file)
        writer.writerow(header)
        for i, pattern_id in enumerate(predictions.ids):
            label = int(predictions.labels[i])
            writer.writerow([pattern_id, org, label]
                            + predictions.f_org[i].tolist())
            writer.writerow([pattern_id, aug, label]
                            + predictions.f_aug[i].tolist())

    distances = np.linalg.norm(predictions.f_org.astype(np.float64)
                               - predictions.f_aug.astype(np.float64), axis=1)
    export = EmbeddingExport(path=path, rows=2 * len(predictions.ids),
                             mean_pair_distance=float(distances.mean()))
    write_json(path.with_suffix('.json'),
               {'rows': export.rows, 'patterns': len(predictions.ids),
                'embedding_dim': bundle.embedding_dim,
                'mean_pair_distance': export.mean_pair_distance})
    logger.info('Exported %d embedding rows to %s', export.rows, path)
    return export


def compare_predictions(bundle_a: Bundle, bundle_b: Bundle,
                        test: Sequence[PairedPattern],
                        test_b: Optional[Sequence[PairedPattern]] = None
                        ) -> ComparisonReport:
    """
    Улучшенные (a верно, b ошибается) и ухудшенные паттерны.

    Args:

        bundle_a: Оцениваемая модель, обычно предложенный метод.
        bundle_b: Модель сравнения.
        test: Тестовые пары.
        test_b: Пары, на которых оценивается bundle_b, если отличаются.

    Raises:

        ArgumentError: Выборки двух моделей не совпадают по id и меткам.
    """
    test_b = test if test_b is None else test_b
    keys_a = [(pair.id, pair.label) for pair in test]
    keys_b = [(pair.id, pair.label) for pair in test_b]
    if keys_a != keys_b:
        raise ArgumentError('Тестовые выборки моделей не совпадают')
    a = predict_all(bundle_a, test)
    b = predict_all(bundle_b, test_b)

    improved, deteriorated = [], []
    for i in np.argsort(np.asarray(a.ids), kind='stable'):
        if a.correct[i] == b.correct[i]:
            continue
        sample = ComparedSample(
            id=a.ids[i], label=int(a.labels[i]), pred_a=int(a.predicted[i]),
            pred_b=int(b.predicted[i]),
            alpha_a=None if a.alpha is None else float(a.alpha[i]))
        (improved if a.correct[i] else deteriorated).append(sample)

    count = len(a.ids)
    error_a = float((~a.correct).sum()) / count
    error_b = float((~b.correct).sum()) / count
    small = sum(1 for s in improved
                if s.alpha_a is not None and s.alpha_a < 0.5)
    large = sum(1 for s in improved
                if s.alpha_a is not None and s.alpha_a >= 0.5)
    return ComparisonReport(
        count=count, improved=improved, deteriorated=deteriorated,
        unchanged=count - len(improved) - len(deteriorated),
        error_rate_a=error_a, error_rate_b=error_b,
        error_reduction=(error_b - error_a) / error_b if error_b > 0 else None,
        improved_small_alpha=small, improved_large_alpha=large)


def render_compare(report: ComparisonReport, kind_a: str, kind_b: str,
                   path: Optional[Path] = None) -> str:
    def lines(samples: list[ComparedSample]) -> str:
        if not samples:
            return '  -'
        return '\n'.join(
            f'  {s.id}: метка {s.label}, {kind_a} -> {s.pred_a}, '
            f'{kind_b} -> {s.pred_b}, alpha {_format_value(s.alpha_a, 3)}'
            for s in samples)

    return write_report('compare', {
        'kind_a': kind_a, 'kind_b': kind_b, 'count': report.count,
        'error_a': _format_value(report.error_rate_a),
        'error_b': _format_value(report.error_rate_b),
        'error_reduction': _format_value(report.error_reduction),
        'unchanged': report.unchanged,
        'small': report.improved_small_alpha,
        'large': report.improved_large_alpha,
        'improved': lines(report.improved),
        'deteriorated': lines(report.deteriorated)}, path)


def run_ablation_suite(train: Sequence[PairedPattern],
                       test: Sequence[PairedPattern], config: RunConfig,
                       out_dir: Optional[Path] = None,
                       callbacks: Sequence[Callback] = ()) -> AblationSuite:
    """
    Обучает и оценивает шесть вариантов с общим зерном.

    Строки: Proposed, w/o CMD, w/o L_FD, CNN (image), CNN (time series),
    CNN (concat). При заданном out_dir пишутся ablation.csv, ablation.json,
    ablation.txt и CSV метрик обучения каждого варианта.
    """
    tensors = tensorize_pairs(train, config.augment.steps, config.augment.side)
    class_count = config.model.class_count or (
        max(pair.label for pair in [*train, *test]) + 1)
    dims = dict(class_count=class_count, steps=config.augment.steps,
                side=config.augment.side,
                embedding_dim=config.model.embedding_dim,
                filters=config.model.filters)

    rows, bundles = [], {}
    for label, variant in ABLATION_ROWS:
        run_callbacks = list(callbacks)
        if out_dir is not None:
            run_callbacks.append(CsvMetricsCallback(
                Path(out_dir) / f'metrics-{variant.value}.csv'))
        logger.info('Ablation row %s', label)
        if isinstance(variant, Ablation):
            training = config.training.model_copy(update={'ablation': variant})
            bundle, _ = fit(tensors, training, run_callbacks, **dims)
        else:
            bundle, _ = baseline_fit(variant, tensors, config.training,
                                     run_callbacks, **dims)
        bundles[label] = bundle
        rows.append(AblationRow(label=label, variant=variant.value,
                                report=evaluate(bundle, test)))

    table = AblationTable(seed=config.training.seed,
                          config=config.model_dump(mode='json'), rows=rows)
    if out_dir is not None:
        write_ablation(table, Path(out_dir))
    return AblationSuite(table=table, bundles=bundles)


def write_ablation(table: AblationTable, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / 'ablation.csv', 'w', newline='',
              encoding='utf-8') as file:
        writer = csv.writer(file)
        writer.writerow(['label', 'variant', 'accuracy', 'mean_fd',
                         'mean_alpha'])
        for row in table.rows:
            writer.writerow([row.label, row.variant, row.report.accuracy,
                             row.report.mean_fd, row.report.mean_alpha])
    write_json(out_dir / 'ablation.json', table.model_dump(mode='json'))
    rows = '\n'.join(f'  {row.label:<20} {100 * row.report.accuracy:6.2f} %'
                     for row in table.rows)
    write_report('ablation', {'seed': table.seed, 'rows': rows},
                 out_dir / 'ablation.txt')
    return out_dir / 'ablation.csv'


def probe_modality(bundle: ModelBundle, pairs: Sequence[PairedPattern],
                   epochs: int = 30, seed: int = 0,
                   holdout_fraction: float = 0.3,
                   learning_rate: float = 1e-3) -> float:
    """
    Точность свежего условного дискриминатора модальности на замороженных
    вложениях.

    Паттерны делятся на обучающую и контрольную части целиком (обе
    модальности одного паттерна попадают в одну часть). Около 0.5 -
    распределения модальностей перекрываются, около 1.0 - разделимы.

    Returns:

        float: Доля верно определённых модальностей на контрольной части.
    """
    predictions = predict_all(_require_alpha(bundle), pairs)
    count = len(predictions.ids)
    holdout = int(math.floor(count * holdout_fraction + 0.5))
    if holdout < 1 or count - holdout < 1:
        raise ArgumentError('Недостаточно паттернов для проверки модальности')
    order = np.random.default_rng(seed).permutation(count)

    def part(index: np.ndarray) -> tuple[torch.Tensor, ...]:
        labels = torch.as_tensor(predictions.labels[index])
        features = torch.cat([torch.from_numpy(predictions.f_org[index]),
                              torch.from_numpy(predictions.f_aug[index])])
        hot = one_hot(labels, bundle.class_count)
        targets = torch.cat([torch.zeros(len(index)), torch.ones(len(index))])
        return features, torch.cat([hot, hot]), targets

    train_x, train_hot, train_d = part(order[holdout:])
    test_x, test_hot, test_d = part(order[:holdout])

    torch.manual_seed(seed)
    probe = ModalityDiscriminator(bundle.embedding_dim, bundle.class_count)
    optimizer = make_adam(probe.parameters(), bundle.config.model_copy(
        update={'learning_rate': learning_rate}))
    for epoch in range(epochs):
        probe.train()
        for index in epoch_batches(len(train_d), bundle.config.batch_size,
                                   seed, epoch):
            positions = torch.as_tensor(index)
            loss = cmd_discriminator_loss(
                probe(train_x[positions], train_hot[positions]),
                train_d[positions])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
    probe.eval()
    with torch.no_grad():
        guessed = (probe(test_x, test_hot) >= 0.5).float()
    accuracy = float((guessed == test_d).float().mean())
    logger.info('Modality probe accuracy %.3f on %d held-out patterns',
                accuracy, holdout)
    return accuracy
