"""Self-augmentation: deriving the second modality from the original one."""

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from datasets.datasets import fit_image, normalize_trajectory, resample_polyline
from errors.errors import (ArgumentError, DatasetQualityError,
                           DegenerateInputError)
from models.models import (AugmentSection, DatasetSplit, ImageSample,
                           LabeledPattern, Modality, PairedPattern,
                           TrajectorySample)


logger = logging.getLogger(__name__)

# Соседи Мура по часовой стрелке (строка вниз), начиная с запада.
MOORE_NEIGHBOURS = ((0, -1), (-1, -1), (-1, 0), (-1, 1),
                    (0, 1), (1, 1), (1, 0), (1, -1))


class PairingResult(NamedTuple):
    """Пары и отброшенные паттерны (id, причина)."""
    pairs: list[PairedPattern]
    dropped: list[tuple[str, str]]


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Целочисленный отрезок Брезенхэма от (x0, y0) до (x1, y1)."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    cells = []
    while True:
        cells.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return cells
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def to_pixel(points: np.ndarray, side: int) -> np.ndarray:
    """
    Переводит координаты [-1, 1] в индексы пикселей 1..side-2
    (поле в 1 пиксель). Ось y направлена вниз, как строки изображения.
    """
    scaled = 1.0 + (np.asarray(points) + 1.0) / 2.0 * (side - 3)
    return np.clip(np.floor(scaled + 1e-9), 0, side - 1).astype(np.int64)


def rasterize(t: TrajectorySample, side: int = 32) -> ImageSample:
    """
    Рисует каждый штрих нормализованной траектории отрезками толщиной
    1 пиксель в бинарное изображение side x side. Переходы пера между
    штрихами не рисуются.

    Raises:

        ArgumentError: side < 8.
    """
    if side < 8:
        raise ArgumentError(f'side должно быть не меньше 8, получено {side}')
    pixels = np.zeros((side, side), dtype=np.float32)
    for stroke in t.strokes:
        cells = to_pixel(stroke, side)
        for (x0, y0), (x1, y1) in zip(cells[:-1], cells[1:]):
            for x, y in bresenham(int(x0), int(y0), int(x1), int(y1)):
                pixels[y, x] = 1.0
    return ImageSample(pixels=pixels)


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Наибольшая 8-связная компонента (при равенстве - с меньшей меткой)."""
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        raise DegenerateInputError('Изображение не содержит переднего плана')
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def trace_contour(img: ImageSample) -> TrajectorySample:
    """
    Обход внешней границы наибольшей компоненты соседями Мура.

    Обход по часовой стрелке начинается с самого верхнего, затем самого
    левого пикселя и останавливается, когда из начального пикселя
    обход повторил бы свой первый шаг. Точки - (x = столбец, y = строка).
    Контур из одного пикселя возвращается штрихом из двух совпадающих
    точек.

    Raises:

        DegenerateInputError: На изображении нет переднего плана.
    """
    mask = img.pixels >= 0.5
    if not mask.any():
        raise DegenerateInputError('Изображение не содержит переднего плана')
    component = np.pad(largest_component(mask), 1, constant_values=False)
    rows, cols = np.nonzero(component)
    start = (int(rows[0]), int(cols[0]))

    contour = [start]
    current, direction = start, 0
    limit = 4 * int(component.sum()) + 8
    for _ in range(limit):
        for step in range(1, 9):
            index = (direction + step) % 8
            dr, dc = MOORE_NEIGHBOURS[index]
            candidate = (current[0] + dr, current[1] + dc)
            if component[candidate]:
                break
        else:
            break
        # обход замкнулся: из начального пикселя снова тот же первый шаг
        if current == start and len(contour) > 1 and candidate == contour[1]:
            break
        br, bc = MOORE_NEIGHBOURS[(index - 1) % 8]
        backtrack = (current[0] + br - candidate[0],
                     current[1] + bc - candidate[1])
        current, direction = candidate, MOORE_NEIGHBOURS.index(backtrack)
        contour.append(current)
    if len(contour) > 1 and contour[-1] == start:
        contour.pop()

    points = np.array([(c - 1, r - 1) for r, c in contour], dtype=np.float64)
    if len(points) == 1:
        points = np.vstack([points, points])
    return TrajectorySample(strokes=[points])


def contour_series(img: ImageSample, steps: int = 50,
                   min_points: int = 8) -> TrajectorySample:
    """
    Псевдо-временной ряд контура: обход границы, равномерная
    передискретизация замкнутой кривой до steps точек и нормализация.

    Raises:

        DegenerateInputError: Контур короче min_points точек.
    """
    contour = trace_contour(img).strokes[0]
    distinct = len(np.unique(contour, axis=0))
    if distinct < min_points:
        raise DegenerateInputError(
            f'Контур содержит {distinct} точек, требуется не меньше '
            f'{min_points}')
    resampled = resample_polyline(contour, steps, closed=True)
    return normalize_trajectory(TrajectorySample(strokes=[resampled]))


def rotate_mask(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """
    Поворот маски вокруг центра изображения против часовой стрелки
    (как np.rot90) с выборкой ближайшего соседа.
    """
    height, width = pixels.shape
    theta = np.deg2rad(degrees)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    dr, dc = rows - cy, cols - cx
    source_r = np.rint(np.cos(theta) * dr + np.sin(theta) * dc + cy)
    source_c = np.rint(-np.sin(theta) * dr + np.cos(theta) * dc + cx)
    inside = ((source_r >= 0) & (source_r < height)
              & (source_c >= 0) & (source_c < width))
    rotated = np.zeros_like(pixels)
    rotated[inside] = pixels[source_r[inside].astype(np.int64),
                             source_c[inside].astype(np.int64)]
    return rotated


def rotate_augment(split: DatasetSplit, copies: int = 60,
                   step_degrees: float = 6.0) -> DatasetSplit:
    """
    Расширяет выборку изображений поворотами на k * step_degrees,
    k = 0..copies-1. К id добавляется суффикс `#rot<k>`, метки
    сохраняются.
    """
    if copies < 1:
        raise ArgumentError(f'copies должно быть не меньше 1, получено {copies}')
    patterns = []
    for pattern in split.patterns:
        if pattern.modality is not Modality.IMAGE:
            raise ArgumentError(
                f'Поворот применим только к изображениям: {pattern.id}')
        for k in range(copies):
            pixels = rotate_mask(pattern.payload.pixels, k * step_degrees)
            patterns.append(LabeledPattern(
                id=f'{pattern.id}#rot{k}', label=pattern.label,
                modality=Modality.IMAGE, payload=ImageSample(pixels=pixels)))
    logger.info('Rotation augmentation: %d -> %d patterns',
                len(split.patterns), len(patterns))
    return DatasetSplit(name=split.name, class_count=split.class_count,
                        patterns=sorted(patterns, key=lambda p: p.id))


def pair_provenance(org_modality: Modality, config: AugmentSection) -> str:
    if org_modality is Modality.TIME_SERIES:
        return f'rasterize(side={config.side})'
    return f'contour_series(steps={config.steps})'


def make_pair(pattern: LabeledPattern,
              config: AugmentSection) -> PairedPattern:
    """
    Строит пару для одного паттерна.

    Raises:

        DegenerateInputError: Аугментация невозможна.
    """
    if pattern.modality is Modality.TIME_SERIES:
        x_org = pattern.payload
        x_aug = rasterize(normalize_trajectory(x_org), config.side)
    else:
        x_org = ImageSample(pixels=fit_image(pattern.payload.pixels,
                                             config.side))
        x_aug = contour_series(x_org, config.steps, config.min_contour_points)
    return PairedPattern(id=pattern.id, label=pattern.label,
                         org_modality=pattern.modality, x_org=x_org,
                         x_aug=x_aug,
                         provenance=pair_provenance(pattern.modality, config))


def _try_pair(args: tuple[LabeledPattern, AugmentSection]
              ) -> tuple[str, Optional[PairedPattern], Optional[str]]:
    pattern, config = args
    try:
        return pattern.id, make_pair(pattern, config), None
    except DegenerateInputError as ex:
        return pattern.id, None, str(ex)


def build_pairs(split: DatasetSplit,
                config: AugmentSection = AugmentSection()) -> PairingResult:
    """
    Строит пары (x_org, x_aug) для всей выборки.

    Args:

        split (DatasetSplit): Выборка одной модальности.
        config (AugmentSection): Параметры аугментации.

    Returns:

        PairingResult: Пары по порядку id и список отброшенных паттернов.

    Raises:

        DatasetQualityError: Отброшено больше max_drop_fraction паттернов.

    Notes:

        Вырожденные паттерны (пустое изображение, короткий контур,
        нулевая протяжённость) отбрасываются с предупреждением в лог.
        При workers > 1 пары строятся в пуле процессов, порядок
        результата от этого не зависит.
    """
    jobs = [(pattern, config) for pattern in split.patterns]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_try_pair, jobs, chunksize=64))
    else:
        results = [_try_pair(job) for job in jobs]

    pairs, dropped = [], []
    for pattern_id, pair, reason in results:
        if pair is None:
            logger.warning('Dropped pattern %s: %s', pattern_id, reason)
            dropped.append((pattern_id, reason))
        else:
            pairs.append(pair)
    if split.patterns:
        fraction = len(dropped) / len(split.patterns)
        if fraction > config.max_drop_fraction:
            raise DatasetQualityError(
                f'Отброшено {len(dropped)} из {len(split.patterns)} '
                f'паттернов ({fraction:.1%}), допустимо '
                f'{config.max_drop_fraction:.1%}')
    return PairingResult(pairs=sorted(pairs, key=lambda p: p.id),
                         dropped=dropped)
