"""Command-line interface: prepare, train, eval, ablate and reports."""

import hashlib
import logging
import shutil
from functools import wraps
from pathlib import Path
from typing import Annotated, Optional

import orjson
import pendulum
import typer
import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from augment.augment import build_pairs, pair_provenance, rotate_augment
from config import DETERMINISTIC, LOG_LEVEL, RUNS_DIR, TORCH_DEVICE
from datasets.datasets import (SHAPE_NAMES, class_names, load_dataset,
                               load_pairs, save_pairs, synth_blobs,
                               synth_shapes)
from errors.errors import (CompatibilityError, ConfigError,
                           DatasetQualityError, RefusalError, SelfAugError,
                           TrainingAbort)
from evaluation.evaluation import (alpha_report, compare_predictions,
                                   evaluate, export_embeddings, probe_modality,
                                   render_alpha, render_compare, render_eval,
                                   run_ablation_suite, write_json)
from log_tools.log_tools import init_sentry, report_exception, setup_logging
from models.models import (Ablation, DatasetSplit, Modality, PairedPattern,
                           RunConfig, TrainConfig)
from networks.checkpoint import load_checkpoint
from networks.networks import ModelBundle
from training.training import CsvMetricsCallback, fit


logger = logging.getLogger(__name__)
console = Console()
err_console = Console(stderr=True)

app = typer.Typer(help='Самоаугментированное мультимодальное обучение '
                       'признаков.', no_args_is_help=True,
                  add_completion=False)

ConfigPath = Annotated[Path, typer.Argument(help='YAML-файл конфигурации.')]
CheckpointPath = Annotated[Path, typer.Argument(help='Каталог чекпоинта.')]
Force = Annotated[bool, typer.Option('--force',
                                     help='Перезаписать результат.')]
Split = Annotated[str, typer.Option(help='Выборка: train или test.')]


def handle_errors(f):
    """
    Декоратор команд: превращает исключения проекта в код возврата.

    Args:

        f (function): Команда CLI.

    Returns:

        function: Команда, завершающаяся typer.Exit с exit_code исключения.
    """

    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except SelfAugError as ex:
            logger.debug('Command failed', exc_info=ex)
            report_exception(ex)
            err_console.print(f'[red]Ошибка:[/red] {ex}', highlight=False)
            raise typer.Exit(code=ex.exit_code)
    return decorated_function


@app.callback()
def main(verbose: Annotated[bool, typer.Option(
        '--verbose', '-v', help='Подробный лог.')] = False) -> None:
    setup_logging('DEBUG' if verbose else LOG_LEVEL)
    init_sentry()


def load_config(path: Path) -> RunConfig:
    """
    Читает и валидирует YAML-конфигурацию.

    Raises:

        ConfigError: Файл не читается или не проходит схему; в сообщении
            указан путь к полю.
    """
    try:
        data = yaml.safe_load(Path(path).read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise ConfigError(f'Файл конфигурации не найден: {path}')
    except yaml.YAMLError as ex:
        raise ConfigError(f'Неверный YAML: {ex}')
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError('Конфигурация должна быть отображением')
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as ex:
        error = ex.errors()[0]
        raise ConfigError(error['msg'],
                          field_path='.'.join(str(x) for x in error['loc']))
    if 'output_dir' not in config.model_fields_set:
        config = config.model_copy(update={'output_dir': Path(RUNS_DIR)})
    training = config.training
    updates = {}
    if 'deterministic' not in training.model_fields_set:
        updates['deterministic'] = DETERMINISTIC
    if 'device' not in training.model_fields_set:
        updates['device'] = TORCH_DEVICE
    if updates:
        config = config.model_copy(
            update={'training': training.model_copy(update=updates)})
    return config


def override_training(config: RunConfig, **fields) -> RunConfig:
    """Подставляет флаги командной строки в секцию training."""
    fields = {key: value for key, value in fields.items() if value is not None}
    if not fields:
        return config
    try:
        training = TrainConfig.model_validate(
            config.training.model_dump() | fields)
    except ValidationError as ex:
        error = ex.errors()[0]
        raise ConfigError(error['msg'], field_path='training.' + '.'.join(
            str(x) for x in error['loc']))
    return config.model_copy(update={'training': training})


def config_hash(config: RunConfig) -> str:
    dumped = orjson.dumps(config.model_dump(mode='json'),
                          option=orjson.OPT_SORT_KEYS)
    return hashlib.sha256(dumped).hexdigest()[:12]


def artifact_dir(config: RunConfig, kind: str, force: bool = False) -> Path:
    """
    Каталог результатов `<output_dir>/<kind>/<hash12>-<UTC время>`.

    Raises:

        RefusalError: Каталог уже существует, а --force не задан.
    """
    stamp = pendulum.now('UTC').format('YYYYMMDDTHHmmss')
    path = Path(config.output_dir) / kind / f'{config_hash(config)}-{stamp}'
    if path.exists():
        if not force:
            raise RefusalError(f'Каталог {path} уже существует, '
                               'используйте --force')
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def prepared_dir(config: RunConfig) -> Path:
    return Path(config.output_dir) / 'prepared'


def load_source(config: RunConfig) -> tuple[DatasetSplit, DatasetSplit,
                                            list[str]]:
    """Загружает исходный набор: (train, test, имена классов)."""
    section = config.dataset
    if section.source == 'synth':
        train, test = synth_shapes(
            section.class_count, section.per_class, section.seed,
            noise_sigma=section.noise_sigma,
            max_rotation_deg=section.max_rotation_deg,
            scale_range=section.scale_range,
            phase_jitter=section.phase_jitter,
            reverse_order_prob=section.reverse_order_prob,
            train_fraction=section.train_fraction)
        return train, test, list(SHAPE_NAMES[:section.class_count])
    if section.source == 'synth-blobs':
        train, test = synth_blobs(
            section.class_count, section.per_class, section.seed,
            side=config.augment.side, noise_sigma=section.noise_sigma,
            scale_range=section.scale_range,
            train_fraction=section.train_fraction)
        return train, test, [f'blob{k}' for k in range(section.class_count)]
    train, test = load_dataset(section.root, section.source,
                               train_fraction=section.train_fraction,
                               seed=section.seed, side=config.augment.side)
    return train, test, class_names(section.root)


def load_prepared(config: RunConfig
                  ) -> tuple[list[PairedPattern], list[PairedPattern], dict]:
    """
    Подготовленные пары и манифест; число классов сверяется с секцией
    model.
    """
    train, test, provenance = load_pairs(prepared_dir(config))
    class_count = len(provenance['class_names'])
    if config.model.class_count not in (None, class_count):
        raise ConfigError(
            f'Указано {config.model.class_count} классов, в данных '
            f'{class_count}', field_path='model.class_count')
    return train, test, provenance


def dimensions(config: RunConfig, provenance: dict) -> dict:
    return dict(class_count=len(provenance['class_names']),
                steps=config.augment.steps, side=config.augment.side,
                embedding_dim=config.model.embedding_dim,
                filters=config.model.filters)


def load_bundle(path: Path, config: RunConfig, provenance: dict):
    """
    Загружает чекпоинт и проверяет его совместимость с данными и
    конфигурацией.

    Raises:

        CompatibilityError: Модальность, число классов или архитектура
            (model.embedding_dim, model.filters, augment.steps,
            augment.side) не совпадают с запуском.
    """
    bundle = load_checkpoint(path, len(provenance['class_names']))
    org_modality = Modality(provenance['org_modality'])
    if bundle.org_modality is not org_modality:
        raise CompatibilityError(
            f'Чекпоинт обучен на {bundle.org_modality.value}, данные - '
            f'{org_modality.value}')
    expected = {'model.embedding_dim': config.model.embedding_dim,
                'model.filters': tuple(config.model.filters),
                'augment.steps': config.augment.steps,
                'augment.side': config.augment.side}
    actual = {'model.embedding_dim': bundle.embedding_dim,
              'model.filters': tuple(bundle.filters),
              'augment.steps': bundle.steps,
              'augment.side': bundle.side}
    for field, value in expected.items():
        if actual[field] != value:
            raise CompatibilityError(
                f'Чекпоинт {path}: {field} = {actual[field]}, в конфигурации '
                f'{value}')
    return bundle


def pick_split(name: str, train: list, test: list) -> list[PairedPattern]:
    if name not in ('train', 'test'):
        raise typer.BadParameter(f'Неизвестная выборка {name}')
    return train if name == 'train' else test


@app.command()
@handle_errors
def prepare(config_path: ConfigPath, force: Force = False) -> None:
    """Строит пары (x_org, x_aug) и сохраняет подготовленный набор."""
    config = load_config(config_path)
    out = prepared_dir(config)
    if out.exists():
        if not force:
            raise RefusalError(f'Подготовленный набор {out} уже существует, '
                               'используйте --force')
        shutil.rmtree(out)

    train, test, names = load_source(config)
    if not train.patterns:
        raise DatasetQualityError('Обучающая выборка пуста')
    before = len(train)
    if config.augment.rotation_copies > 1:
        train = rotate_augment(train, config.augment.rotation_copies,
                               config.augment.rotation_step_deg)
    counts, dropped, pairs = {}, {}, {}
    for split in (train, test):
        result = build_pairs(split, config.augment)
        pairs[split.name] = result.pairs
        dropped[split.name] = [list(item) for item in result.dropped]
        counts[split.name] = {'patterns': len(split),
                              'pairs': len(result.pairs),
                              'dropped': len(result.dropped)}
    org_modality = config.dataset.org_modality
    provenance = {
        'org_modality': org_modality.value,
        'pair_provenance': pair_provenance(org_modality, config.augment),
        'seed': config.dataset.seed,
        'dataset': config.dataset.model_dump(mode='json'),
        'augment': config.augment.model_dump(mode='json'),
        'rotation': {'copies': config.augment.rotation_copies,
                     'step_deg': config.augment.rotation_step_deg,
                     'expansion': len(train) / before},
        'counts': counts,
        'dropped': dropped,
    }
    save_pairs(out, pairs, names, provenance)
    for name, count in counts.items():
        console.print(f'{name}: {count["pairs"]} пар, отброшено '
                      f'{count["dropped"]}')
    typer.echo(str(out))


@app.command()
@handle_errors
def train(config_path: ConfigPath,
          ablation: Annotated[Optional[Ablation], typer.Option(
              help='Абляция: none, no_cmd или no_fd.')] = None,
          seed: Annotated[Optional[int], typer.Option(
              help='Зерно обучения.')] = None,
          resume: Annotated[Optional[Path], typer.Option(
              help='Продолжить обучение с чекпоинта.')] = None,
          force: Force = False) -> None:
    """Обучает предложенный метод на подготовленном наборе."""
    config = override_training(load_config(config_path), ablation=ablation,
                               seed=seed)
    train_pairs, _, provenance = load_prepared(config)
    bundle = None
    if resume is not None:
        bundle = load_bundle(resume, config, provenance)
        if not isinstance(bundle, ModelBundle):
            raise CompatibilityError(
                f'Чекпоинт {resume} содержит базовую модель {bundle.kind}')
    run_dir = artifact_dir(config, 'train', force)
    (run_dir / 'config.yaml').write_text(
        yaml.safe_dump(config.model_dump(mode='json'), sort_keys=True),
        encoding='utf-8')

    summary = {'config_hash': config_hash(config),
               'ablation': config.training.ablation.value,
               'seed': config.training.seed,
               'deterministic': config.training.deterministic,
               'resumed_from': None if resume is None else str(resume)}
    try:
        bundle, records = fit(
            train_pairs, config.training,
            [CsvMetricsCallback(run_dir / 'metrics.csv')],
            bundle=bundle, checkpoint_dir=run_dir / 'checkpoints',
            **dimensions(config, provenance))
    except TrainingAbort as ex:
        write_json(run_dir / 'summary.json', summary | {
            'aborted': True, 'error': str(ex),
            'final': None if ex.record is None else ex.record.model_dump()})
        raise
    final = records[-1] if records else None
    write_json(run_dir / 'summary.json', summary | {
        'aborted': False, 'epochs': bundle.epoch,
        'checkpoint': str(run_dir / 'checkpoints' / 'final'),
        'final': None if final is None else final.model_dump(
            exclude={'seconds'})})
    if final is not None:
        typer.echo(f'train_accuracy: {final.train_accuracy!r}')
    typer.echo(str(run_dir))


@app.command('eval')
@handle_errors
def eval_command(config_path: ConfigPath, checkpoint: CheckpointPath,
                 split: Split = 'test',
                 force: Force = False) -> None:
    """Оценивает модель из чекпоинта."""
    config = load_config(config_path)
    train_pairs, test_pairs, provenance = load_prepared(config)
    bundle = load_bundle(checkpoint, config, provenance)
    report = evaluate(bundle, pick_split(split, train_pairs, test_pairs))
    out = artifact_dir(config, 'eval', force)
    write_json(out / 'eval.json', report.model_dump(mode='json')
               | {'checkpoint': str(checkpoint), 'kind': bundle.kind,
                  'split': split})
    render_eval(report, bundle.kind, split, out / 'eval.txt')
    typer.echo(f'accuracy: {report.accuracy!r}')
    typer.echo(str(out))


@app.command()
@handle_errors
def ablate(config_path: ConfigPath,
           seed: Annotated[Optional[int], typer.Option(
               help='Общее зерно всех вариантов.')] = None,
           force: Force = False) -> None:
    """Обучает и оценивает шесть вариантов таблицы абляций."""
    config = override_training(load_config(config_path), seed=seed)
    train_pairs, test_pairs, provenance = load_prepared(config)
    if config.model.class_count is None:
        config = config.model_copy(update={'model': config.model.model_copy(
            update={'class_count': len(provenance['class_names'])})})
    out = artifact_dir(config, 'ablate', force)
    table = run_ablation_suite(train_pairs, test_pairs, config, out).table

    view = Table('Вариант', 'Точность, %')
    for row in table.rows:
        view.add_row(row.label, f'{100 * row.report.accuracy:.2f}')
    console.print(view)
    typer.echo(f'accuracy: {table.rows[0].report.accuracy!r}')
    typer.echo(str(out))


@app.command('report-alpha')
@handle_errors
def report_alpha(config_path: ConfigPath, checkpoint: CheckpointPath,
                 per_bucket: Annotated[int, typer.Option(
                     min=1, help='Паттернов в корзине.')] = 20,
                 seed: Annotated[int, typer.Option(
                     help='Зерно выборки паттернов.')] = 0,
                 force: Force = False) -> None:
    """Группирует тестовые паттерны по значению alpha."""
    config = load_config(config_path)
    _, test_pairs, provenance = load_prepared(config)
    bundle = load_bundle(checkpoint, config, provenance)
    out = artifact_dir(config, 'alpha', force)
    report = alpha_report(bundle, test_pairs, per_bucket, seed, out)
    write_json(out / 'alpha.json', report.model_dump(mode='json'))
    render_alpha(report, out / 'alpha.txt')
    typer.echo(f'accuracy: {evaluate(bundle, test_pairs).accuracy!r}')
    typer.echo(str(out))


@app.command('export-embeddings')
@handle_errors
def export_embeddings_command(config_path: ConfigPath,
                              checkpoint: CheckpointPath,
                              split: Split = 'test',
                              force: Force = False) -> None:
    """Выгружает вложения обеих модальностей в CSV."""
    config = load_config(config_path)
    train_pairs, test_pairs, provenance = load_prepared(config)
    bundle = load_bundle(checkpoint, config, provenance)
    pairs = pick_split(split, train_pairs, test_pairs)
    out = artifact_dir(config, 'embeddings', force)
    export = export_embeddings(bundle, pairs, out / f'embeddings-{split}.csv')
    console.print(f'Строк: {export.rows}, среднее ||f_org - f_aug||: '
                  f'{export.mean_pair_distance:.4f}')
    typer.echo(f'accuracy: {evaluate(bundle, pairs).accuracy!r}')
    typer.echo(str(out))


@app.command()
@handle_errors
def compare(config_path: ConfigPath, checkpoint_a: CheckpointPath,
            checkpoint_b: CheckpointPath,
            force: Force = False) -> None:
    """Сравнивает предсказания двух моделей на тестовой выборке."""
    config = load_config(config_path)
    _, test_pairs, provenance = load_prepared(config)
    bundle_a = load_bundle(checkpoint_a, config, provenance)
    bundle_b = load_bundle(checkpoint_b, config, provenance)
    report = compare_predictions(bundle_a, bundle_b, test_pairs)
    out = artifact_dir(config, 'compare', force)
    write_json(out / 'compare.json', report.model_dump(mode='json'))
    render_compare(report, bundle_a.kind, bundle_b.kind, out / 'compare.txt')
    console.print(f'Улучшено: {len(report.improved)}, ухудшено: '
                  f'{len(report.deteriorated)}')
    typer.echo(str(out))


@app.command()
@handle_errors
def probe(config_path: ConfigPath, checkpoint: CheckpointPath,
          epochs: Annotated[int, typer.Option(min=1)] = 30,
          seed: Annotated[int, typer.Option()] = 0) -> None:
    """Точность нового дискриминатора модальности на вложениях модели."""
    config = load_config(config_path)
    _, test_pairs, provenance = load_prepared(config)
    bundle = load_bundle(checkpoint, config, provenance)
    accuracy = probe_modality(bundle, test_pairs, epochs=epochs, seed=seed)
    typer.echo(f'modality_accuracy: {accuracy!r}')


@app.command()
def schema() -> None:
    """Печатает JSON-схему файла конфигурации."""
    typer.echo(orjson.dumps(RunConfig.model_json_schema(),
                            option=orjson.OPT_INDENT_2).decode())
