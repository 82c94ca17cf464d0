"""Dataset module: loading, generation, normalization and persistence."""

import logging
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import orjson
from PIL import Image
from pydantic import ValidationError

from errors.errors import (ArgumentError, DegenerateInputError, LoadError,
                           SchemaError, SplitError)
from models.models import (DatasetSplit, ImageSample, LabeledPattern,
                           Modality, PairedPattern, TrajectorySample)


logger = logging.getLogger(__name__)

JSON_OPTIONS = (orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS
                | orjson.OPT_SERIALIZE_NUMPY)

SHAPE_NAMES = ('line', 'circle', 'zigzag', 'spiral', 'l_shape', 's_shape',
               'cross', 'triangle', 'u_shape', 'figure_eight')
CLOSED_SHAPES = {'circle', 'triangle', 'figure_eight'}

# (число лепестков, амплитуда лепестков, сжатие по вертикали)
BLOB_CLASSES = ((0, 0.0, 1.0), (0, 0.0, 0.55), (3, 0.3, 1.0), (4, 0.3, 1.0),
                (5, 0.28, 1.0), (6, 0.25, 1.0), (2, 0.35, 1.0),
                (3, 0.3, 0.6), (8, 0.2, 1.0), (4, 0.2, 0.6))

FORMATS = {'trajectory-json': '.json', 'image-dir': '.pgm'}


def normalize_trajectory(t: TrajectorySample) -> TrajectorySample:
    """
    Центрирует траекторию в центроиде и масштабирует так, что
    max(|x|, |y|) = 1. Пропорции и структура штрихов сохраняются.

    Args:

        t (TrajectorySample): Исходная траектория.

    Returns:

        TrajectorySample: Нормализованная траектория.

    Raises:

        DegenerateInputError: Все точки совпадают.
    """
    centroid = t.points.mean(axis=0)
    centered = [stroke - centroid for stroke in t.strokes]
    extent = max(float(np.abs(stroke).max()) for stroke in centered)
    if extent < 1e-12:
        raise DegenerateInputError('Траектория имеет нулевую протяжённость')
    return TrajectorySample(strokes=[stroke / extent for stroke in centered])


def _arc_lengths(points: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate(([0.0], np.cumsum(steps)))


def resample_polyline(points: np.ndarray, steps: int,
                      closed: bool = False) -> np.ndarray:
    """
    Равномерная передискретизация ломаной по длине дуги.

    Для замкнутой кривой точки берутся с шагом L/steps, последняя точка
    не дублирует первую.
    """
    points = np.asarray(points, dtype=np.float64)
    if closed:
        points = np.vstack([points, points[:1]])
    cumulative = _arc_lengths(points)
    total = cumulative[-1]
    if total <= 0:
        raise DegenerateInputError('Ломаная имеет нулевую длину')
    if closed:
        targets = np.arange(steps) * (total / steps)
    else:
        targets = np.linspace(0.0, total, steps)
    return np.stack([np.interp(targets, cumulative, points[:, 0]),
                     np.interp(targets, cumulative, points[:, 1])], axis=1)


def to_tensor(t: TrajectorySample, steps: int = 50) -> np.ndarray:
    """
    Превращает нормализованную траекторию в массив (3, steps).

    Каналы: x, y и флаг касания пера. Штрихи склеиваются и
    передискретизуются по суммарной длине дуги (переходы между штрихами
    длины не имеют). Флаг равен 0 на первом отсчёте каждого штриха,
    кроме первого, иначе 1.

    Args:

        t (TrajectorySample): Нормализованная траектория.
        steps (int): Число временных шагов.

    Returns:

        np.ndarray: Массив float32 формы (3, steps).
    """
    if steps < 2:
        raise ArgumentError(f'steps должно быть не меньше 2, получено {steps}')
    cumulatives = [_arc_lengths(stroke) for stroke in t.strokes]
    lengths = np.array([cumulative[-1] for cumulative in cumulatives])
    offsets = np.concatenate(([0.0], np.cumsum(lengths)[:-1]))
    ends = offsets + lengths
    total = ends[-1]
    if total <= 0:
        raise DegenerateInputError('Траектория имеет нулевую длину дуги')

    targets = np.linspace(0.0, total, steps)
    owner = np.minimum(np.searchsorted(ends, targets, side='left'),
                       len(t.strokes) - 1)
    out = np.ones((3, steps), dtype=np.float64)
    for k, (stroke, cumulative) in enumerate(zip(t.strokes, cumulatives)):
        mask = owner == k
        if not mask.any():
            continue
        local = targets[mask] - offsets[k]
        out[0, mask] = np.interp(local, cumulative, stroke[:, 0])
        out[1, mask] = np.interp(local, cumulative, stroke[:, 1])
        if k > 0:
            out[2, np.flatnonzero(mask)[0]] = 0.0
    return out.astype(np.float32)


def stratified_split(patterns: Sequence[LabeledPattern],
                     train_fraction: float, seed: int,
                     class_count: Optional[int] = None
                     ) -> tuple[DatasetSplit, DatasetSplit]:
    """
    Стратифицированное разбиение на train/test.

    В каждом классе в train попадает round(n * train_fraction) паттернов
    (но не меньше 1 и не больше n - 1). Результат упорядочен по id и
    полностью определяется seed.

    Raises:

        SplitError: В каком-то классе меньше двух паттернов.
        ArgumentError: train_fraction вне (0, 1).
    """
    if not 0.0 < train_fraction < 1.0:
        raise ArgumentError('train_fraction должен лежать в (0, 1)')
    if class_count is None:
        class_count = max((p.label for p in patterns), default=-1) + 1
    by_class: dict[int, list[LabeledPattern]] = defaultdict(list)
    for pattern in sorted(patterns, key=lambda p: p.id):
        by_class[pattern.label].append(pattern)

    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < 2:
            raise SplitError(
                f'В классе {label} меньше двух паттернов: {len(members)}')
        n_train = int(np.floor(len(members) * train_fraction + 0.5))
        n_train = min(max(n_train, 1), len(members) - 1)
        order = rng.permutation(len(members))
        train.extend(members[i] for i in order[:n_train])
        test.extend(members[i] for i in order[n_train:])

    return (DatasetSplit(name='train', class_count=class_count,
                         patterns=sorted(train, key=lambda p: p.id)),
            DatasetSplit(name='test', class_count=class_count,
                         patterns=sorted(test, key=lambda p: p.id)))


def _curve(fn, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    return np.stack(fn(t), axis=1)


def shape_template(index: int, phase: float = 0.0,
                   points_per_stroke: int = 32) -> list[np.ndarray]:
    """
    Параметрический шаблон штрихов класса `index`.

    Для замкнутых фигур `phase` в [0, 1) сдвигает начальную точку
    обхода вдоль кривой; изображение фигуры от этого не меняется.
    """
    name = SHAPE_NAMES[index]
    n = points_per_stroke
    if name == 'line':
        strokes = [resample_polyline([(-1, 0), (1, 0)], n)]
    elif name == 'circle':
        strokes = [_curve(lambda t: (np.cos(2 * np.pi * t),
                                     np.sin(2 * np.pi * t)), n)]
    elif name == 'zigzag':
        strokes = [resample_polyline(
            [(-1, -1), (-0.5, 1), (0, -1), (0.5, 1), (1, -1)], n)]
    elif name == 'spiral':
        strokes = [_curve(lambda t: ((0.15 + 0.85 * t) * np.cos(4 * np.pi * t),
                                     (0.15 + 0.85 * t) * np.sin(4 * np.pi * t)),
                          n)]
    elif name == 'l_shape':
        strokes = [resample_polyline([(-0.6, -1), (-0.6, 1), (0.6, 1)], n)]
    elif name == 's_shape':
        strokes = [_curve(lambda t: (-0.7 * np.sin(2 * np.pi * t),
                                     -1 + 2 * t), n)]
    elif name == 'cross':
        strokes = [resample_polyline([(-1, 0), (1, 0)], n),
                   resample_polyline([(0, -1), (0, 1)], n)]
    elif name == 'triangle':
        strokes = [resample_polyline(
            [(0, -1), (1, 0.8), (-1, 0.8), (0, -1)], n)]
    elif name == 'u_shape':
        arc = np.linspace(np.pi, 0.0, 9)
        vertices = ([(-0.8, -1)]
                    + [(0.8 * np.cos(a), 0.2 + 0.8 * np.sin(a)) for a in arc]
                    + [(0.8, -1)])
        strokes = [resample_polyline(vertices, n)]
    else:
        strokes = [_curve(lambda t: (0.6 * np.sin(4 * np.pi * t),
                                     -np.cos(2 * np.pi * t)), n)]

    if phase and name in CLOSED_SHAPES:
        ring = strokes[0][:-1]
        shift = int(round(phase * len(ring))) % len(ring)
        ring = np.roll(ring, -shift, axis=0)
        strokes = [np.vstack([ring, ring[:1]])]
    return strokes


def synth_shapes(class_count: int, per_class: int, seed: int,
                 noise_sigma: float = 0.02,
                 max_rotation_deg: float = 10.0,
                 scale_range: tuple[float, float] = (0.9, 1.1),
                 phase_jitter: float = 0.0,
                 reverse_order_prob: float = 0.0,
                 train_fraction: float = 0.8
                 ) -> tuple[DatasetSplit, DatasetSplit]:
    """
    Синтетический рукописный набор: траектории по шаблонам SHAPE_NAMES.

    Каждый образец поворачивается не более чем на max_rotation_deg,
    масштабируется в scale_range и зашумляется нормальным шумом
    noise_sigma. phase_jitter и reverse_order_prob искажают только
    временной порядок (начальная точка замкнутых фигур, обратный порядок
    штрихов), изображение при этом не меняется.

    Returns:

        tuple[DatasetSplit, DatasetSplit]: (train, test), разбиение 80/20.
    """
    if not 2 <= class_count <= len(SHAPE_NAMES):
        raise ArgumentError('class_count должен лежать в [2, 10]')
    if per_class < 4:
        raise ArgumentError('per_class должен быть не меньше 4')

    rng = np.random.default_rng(seed)
    patterns = []
    for label in range(class_count):
        for i in range(per_class):
            phase = rng.uniform(0.0, phase_jitter)
            reverse = rng.random() < reverse_order_prob
            angle = np.deg2rad(rng.uniform(-max_rotation_deg,
                                           max_rotation_deg))
            scale = rng.uniform(*scale_range)
            strokes = shape_template(label, phase=phase)
            if reverse:
                strokes = [stroke[::-1] for stroke in reversed(strokes)]
            rotation = np.array([[np.cos(angle), -np.sin(angle)],
                                 [np.sin(angle), np.cos(angle)]])
            jittered = []
            for stroke in strokes:
                noise = rng.normal(size=stroke.shape) * noise_sigma
                jittered.append(scale * stroke @ rotation.T + noise)
            patterns.append(LabeledPattern(
                id=f'{SHAPE_NAMES[label]}-{i:04d}', label=label,
                modality=Modality.TIME_SERIES,
                payload=TrajectorySample(strokes=jittered)))
    return stratified_split(patterns, train_fraction, seed,
                            class_count=class_count)


def blob_mask(label: int, side: int, rotation: float, radius: float,
              amplitude_scale: float = 1.0) -> np.ndarray:
    """Бинарная маска лепестковой фигуры класса `label`."""
    lobes, amplitude, aspect = BLOB_CLASSES[label]
    amplitude *= amplitude_scale
    center = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = xx - center, yy - center
    cos_r, sin_r = np.cos(rotation), np.sin(rotation)
    u = cos_r * dx + sin_r * dy
    v = (-sin_r * dx + cos_r * dy) / aspect
    boundary = radius * (1.0 + amplitude * np.cos(lobes * np.arctan2(v, u)))
    return (np.hypot(u, v) <= boundary).astype(np.float32)


def synth_blobs(class_count: int, per_class: int, seed: int, side: int = 32,
                noise_sigma: float = 0.05,
                scale_range: tuple[float, float] = (0.75, 1.0),
                train_fraction: float = 0.8
                ) -> tuple[DatasetSplit, DatasetSplit]:
    """
    Синтетический набор «листьев»: залитые маски, исходная модальность -
    изображение. Поворот произвольный, масштаб в scale_range,
    амплитуда лепестков зашумлена с noise_sigma.
    """
    if not 2 <= class_count <= len(BLOB_CLASSES):
        raise ArgumentError('class_count должен лежать в [2, 10]')
    if per_class < 4:
        raise ArgumentError('per_class должен быть не меньше 4')

    rng = np.random.default_rng(seed)
    patterns = []
    for label in range(class_count):
        amplitude = BLOB_CLASSES[label][1]
        base_radius = (side / 2.0 - 2.0) / (1.0 + amplitude)
        for i in range(per_class):
            rotation = rng.uniform(0.0, 2 * np.pi)
            radius = base_radius * rng.uniform(*scale_range)
            wobble = 1.0 + rng.normal() * noise_sigma
            pixels = blob_mask(label, side, rotation, radius, wobble)
            patterns.append(LabeledPattern(
                id=f'blob{label}-{i:04d}', label=label,
                modality=Modality.IMAGE,
                payload=ImageSample(pixels=pixels)))
    return stratified_split(patterns, train_fraction, seed,
                            class_count=class_count)


def read_pgm(path: Path) -> np.ndarray:
    """
    Читает изображение в оттенках серого и бинаризует: пиксель >= 128
    становится 1.0.

    Raises:

        LoadError: Файл не читается как изображение.
    """
    try:
        with Image.open(path) as image:
            raw = np.asarray(image.convert('L'))
    except (OSError, SyntaxError) as ex:
        raise LoadError(f'Не удалось прочитать изображение: {ex}', path)
    return (raw >= 128).astype(np.float32)


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Записывает изображение [0, 1] как бинарный PGM (P5, maxval 255)."""
    pixels = np.asarray(pixels)
    raw = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(raw, 'L').save(path, format='PPM')


def fit_image(pixels: np.ndarray, side: int) -> np.ndarray:
    """
    Приводит изображение к side x side: дополняет фоном до квадрата и
    масштабирует ближайшим соседом.
    """
    height, width = pixels.shape
    if height == width == side:
        return pixels
    size = max(height, width)
    square = np.zeros((size, size), dtype=np.float32)
    top, left = (size - height) // 2, (size - width) // 2
    square[top:top + height, left:left + width] = pixels
    index = np.minimum(((np.arange(side) + 0.5) * size / side).astype(int),
                       size - 1)
    return square[np.ix_(index, index)]


def _read_payload(path: Path, fmt: str, side: Optional[int]):
    try:
        if fmt == 'trajectory-json':
            content = orjson.loads(path.read_bytes())
            return Modality.TIME_SERIES, TrajectorySample(
                strokes=content['strokes'])
        pixels = read_pgm(path)
        if side is not None:
            pixels = fit_image(pixels, side)
        return Modality.IMAGE, ImageSample(pixels=pixels)
    except (orjson.JSONDecodeError, KeyError, TypeError, ValidationError,
            ValueError) as ex:
        raise LoadError(f'Не удалось прочитать паттерн: {ex}', path)


def _class_dirs(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_dir())


def class_names(root: Path) -> list[str]:
    """Имена классов набора данных в лексикографическом порядке."""
    root = Path(root)
    parts = [root / name for name in ('train', 'test')
             if (root / name).is_dir()]
    if not parts:
        return [d.name for d in _class_dirs(root)]
    class_sets = {part.name: {d.name for d in _class_dirs(part)}
                  for part in parts}
    if len(class_sets) == 2 and class_sets['train'] != class_sets['test']:
        raise SchemaError(
            'Наборы классов train и test различаются: '
            f'{sorted(class_sets["train"] ^ class_sets["test"])}')
    return sorted(set().union(*class_sets.values()))


def load_dataset(root: Path, format: str, train_fraction: float = 0.8,
                 seed: int = 0, side: Optional[int] = None
                 ) -> tuple[DatasetSplit, DatasetSplit]:
    """
    Загружает набор данных с диска.

    Args:

        root (Path): Корень набора данных.
        format (str): 'trajectory-json' или 'image-dir'.
        train_fraction (float): Доля train, если разбиение не задано.
        seed (int): Зерно стратифицированного разбиения.
        side (int | None): Приводить изображения к side x side.

    Returns:

        tuple[DatasetSplit, DatasetSplit]: (train, test), упорядочены по id.

    Notes:

        Поддерживаются раскладки `<root>/{train,test}/<class>/<id>.<ext>`
        и `<root>/<class>/<id>.<ext>`. Метки - индексы имён классов в
        лексикографическом порядке. `<root>/split.json` со списками
        `train` и `test` переопределяет разбиение.
    """
    root = Path(root)
    if format not in FORMATS:
        raise LoadError(f'Неизвестный формат {format}', root)
    if not root.is_dir():
        raise LoadError('Каталог набора данных не найден', root)
    suffix = FORMATS[format]

    partitioned = (root / 'train').is_dir() or (root / 'test').is_dir()
    if partitioned:
        sources = {name: root / name for name in ('train', 'test')
                   if (root / name).is_dir()}
    else:
        sources = {'all': root}
    names = class_names(root)
    if not names:
        raise LoadError('В наборе данных нет каталогов классов', root)
    labels = {name: index for index, name in enumerate(names)}

    found: dict[str, list[LabeledPattern]] = defaultdict(list)
    seen: dict[str, Path] = {}
    for part, directory in sources.items():
        for class_dir in _class_dirs(directory):
            for path in sorted(class_dir.glob(f'*{suffix}')):
                if path.name.endswith(f'.aug{suffix}'):
                    continue
                pattern_id = path.stem
                if pattern_id in seen:
                    raise SchemaError(
                        f'Идентификатор {pattern_id} встречается дважды: '
                        f'{seen[pattern_id]} и {path}')
                seen[pattern_id] = path
                modality, payload = _read_payload(path, format, side)
                found[part].append(LabeledPattern(
                    id=pattern_id, label=labels[class_dir.name],
                    modality=modality, payload=payload))
    patterns = [p for part in found.values() for p in part]
    if not patterns:
        raise LoadError('В наборе данных нет файлов паттернов', root)
    class_count = len(names)
    logger.info('Loaded %d patterns over %d classes from %s',
                len(patterns), class_count, root)

    split_file = root / 'split.json'
    if split_file.exists():
        try:
            split = orjson.loads(split_file.read_bytes())
            train_ids, test_ids = set(split['train']), set(split['test'])
        except (orjson.JSONDecodeError, KeyError, TypeError) as ex:
            raise LoadError(f'Неверный файл разбиения: {ex}', split_file)
        missing = (train_ids | test_ids) - seen.keys()
        if missing or train_ids & test_ids:
            raise SchemaError(
                f'Файл разбиения не согласован с данными: {sorted(missing)}')
        train = [p for p in patterns if p.id in train_ids]
        test = [p for p in patterns if p.id in test_ids]
    elif partitioned:
        train, test = found.get('train', []), found.get('test', [])
    else:
        return stratified_split(patterns, train_fraction, seed,
                                class_count=class_count)

    try:
        return (DatasetSplit(name='train', class_count=class_count,
                             patterns=sorted(train, key=lambda p: p.id)),
                DatasetSplit(name='test', class_count=class_count,
                             patterns=sorted(test, key=lambda p: p.id)))
    except ValidationError as ex:
        raise SchemaError(str(ex))


def _write_payload(path_stem: Path, payload, suffix: str = '') -> None:
    if isinstance(payload, TrajectorySample):
        content = {'strokes': [stroke.tolist() for stroke in payload.strokes]}
        path_stem.with_name(path_stem.name + f'{suffix}.json').write_bytes(
            orjson.dumps(content))
    else:
        write_pgm(path_stem.with_name(path_stem.name + f'{suffix}.pgm'),
                  payload.pixels)


def _read_prepared(path: Path):
    if path.suffix == '.json':
        return TrajectorySample(strokes=orjson.loads(path.read_bytes())['strokes'])
    return ImageSample(pixels=read_pgm(path))


def save_pairs(out_dir: Path, splits: dict[str, Iterable[PairedPattern]],
               class_names: Sequence[str], provenance: dict) -> None:
    """
    Сохраняет подготовленные пары: `x_org` в формате исходного набора,
    `x_aug` рядом с суффиксом `.aug`, и `provenance.json`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, pairs in splits.items():
        for pair in pairs:
            class_dir = out_dir / name / class_names[pair.label]
            class_dir.mkdir(parents=True, exist_ok=True)
            stem = class_dir / pair.id
            _write_payload(stem, pair.x_org)
            _write_payload(stem, pair.x_aug, suffix='.aug')
    manifest = dict(provenance, class_names=list(class_names))
    (out_dir / 'provenance.json').write_bytes(
        orjson.dumps(manifest, option=JSON_OPTIONS))


def load_pairs(prepared_dir: Path
               ) -> tuple[list[PairedPattern], list[PairedPattern], dict]:
    """
    Загружает каталог, записанный save_pairs.

    Returns:

        tuple: (train, test, provenance); пары упорядочены по id.
    """
    prepared_dir = Path(prepared_dir)
    manifest_path = prepared_dir / 'provenance.json'
    if not manifest_path.exists():
        raise LoadError('Подготовленный набор не найден', manifest_path)
    provenance = orjson.loads(manifest_path.read_bytes())
    org_modality = Modality(provenance['org_modality'])
    org_suffix = '.json' if org_modality is Modality.TIME_SERIES else '.pgm'
    aug_suffix = '.pgm' if org_suffix == '.json' else '.json'

    result = {}
    for name in ('train', 'test'):
        pairs = []
        for label, class_name in enumerate(provenance['class_names']):
            class_dir = prepared_dir / name / class_name
            if not class_dir.is_dir():
                continue
            for path in sorted(class_dir.glob(f'*{org_suffix}')):
                if path.name.endswith(f'.aug{org_suffix}'):
                    continue
                aug_path = path.with_name(path.stem + f'.aug{aug_suffix}')
                if not aug_path.exists():
                    raise LoadError('Нет файла x_aug', aug_path)
                try:
                    pairs.append(PairedPattern(
                        id=path.stem, label=label, org_modality=org_modality,
                        x_org=_read_prepared(path),
                        x_aug=_read_prepared(aug_path),
                        provenance=provenance['pair_provenance']))
                except (ValidationError, KeyError) as ex:
                    raise LoadError(f'Повреждённая пара: {ex}', path)
        result[name] = sorted(pairs, key=lambda p: p.id)
    return result['train'], result['test'], provenance
