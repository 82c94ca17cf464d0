from enum import Enum
from pathlib import Path
from typing import Any, Literal, Optional, Union

import math
import numpy as np
from pydantic import (BaseModel, ConfigDict, Field, field_validator,
                      model_validator)


class Modality(str, Enum):
    """Модальность паттерна."""
    TIME_SERIES = "TimeSeries"
    IMAGE = "Image"

    def other(self) -> "Modality":
        if self is Modality.TIME_SERIES:
            return Modality.IMAGE
        return Modality.TIME_SERIES


class Ablation(str, Enum):
    """Абляции предложенного метода."""
    NONE = "none"
    NO_CMD = "no_cmd"
    NO_FD = "no_fd"


class BaselineVariant(str, Enum):
    """Базовые одномодальные и конкатенационные CNN."""
    IMAGE_ONLY = "image_only"
    TS_ONLY = "ts_only"
    CONCAT = "concat"


class TrajectorySample(BaseModel):
    """Траектория пера: список штрихов, каждый штрих - массив (n, 2)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    strokes: list[np.ndarray]

    @field_validator('strokes', mode='before')
    def validate_strokes(cls, value: Any):
        if len(value) < 1:
            raise ValueError('Траектория должна содержать хотя бы один штрих')
        strokes = []
        for stroke in value:
            points = np.asarray(stroke, dtype=np.float64)
            if points.ndim != 2 or points.shape[1] != 2:
                raise ValueError(
                    f'Штрих должен иметь форму (n, 2), получено {points.shape}')
            if points.shape[0] < 2:
                raise ValueError('Штрих должен содержать не менее 2 точек')
            if not np.all(np.isfinite(points)):
                raise ValueError('Координаты штриха должны быть конечными')
            strokes.append(points)
        return strokes

    @property
    def points(self) -> np.ndarray:
        """Все точки траектории подряд."""
        return np.concatenate(self.strokes, axis=0)


class ImageSample(BaseModel):
    """Одноканальное изображение со значениями пикселей в [0, 1]."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray

    @field_validator('pixels', mode='before')
    def validate_pixels(cls, value: Any):
        pixels = np.asarray(value, dtype=np.float32)
        if pixels.ndim != 2 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError(
                f'Изображение должно быть двумерным, получено {pixels.shape}')
        if not np.all(np.isfinite(pixels)):
            raise ValueError('Пиксели должны быть конечными')
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError('Значения пикселей должны лежать в [0, 1]')
        return pixels

    @property
    def side(self) -> int:
        return int(self.pixels.shape[0])


Payload = Union[TrajectorySample, ImageSample]


def payload_modality(payload: Payload) -> Modality:
    """Модальность, соответствующая типу полезной нагрузки."""
    if isinstance(payload, TrajectorySample):
        return Modality.TIME_SERIES
    return Modality.IMAGE


class LabeledPattern(BaseModel):
    """Размеченный паттерн одной модальности."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str
    label: int = Field(ge=0)
    modality: Modality
    payload: Payload

    @model_validator(mode='after')
    def validate_payload(self):
        if payload_modality(self.payload) is not self.modality:
            raise ValueError(
                f'Тип данных не соответствует модальности {self.modality.value}')
        return self


class DatasetSplit(BaseModel):
    """Обучающая или тестовая часть набора данных."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: Literal['train', 'test']
    patterns: list[LabeledPattern]
    class_count: int = Field(ge=1)

    @model_validator(mode='after')
    def validate_split(self):
        ids = set()
        for pattern in self.patterns:
            if pattern.label >= self.class_count:
                raise ValueError(
                    f'Метка {pattern.label} паттерна {pattern.id} '
                    f'вне диапазона [0, {self.class_count})')
            if pattern.id in ids:
                raise ValueError(f'Повторяющийся идентификатор {pattern.id}')
            ids.add(pattern.id)
        return self

    def __len__(self) -> int:
        return len(self.patterns)

    @property
    def modalities(self) -> set[Modality]:
        return {pattern.modality for pattern in self.patterns}


class PairedPattern(BaseModel):
    """Пара (x_org, x_aug) одного паттерна - единица обучения."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str
    label: int = Field(ge=0)
    org_modality: Modality
    x_org: Payload
    x_aug: Payload
    provenance: str

    @model_validator(mode='after')
    def validate_modalities(self):
        if payload_modality(self.x_org) is not self.org_modality:
            raise ValueError('x_org не соответствует org_modality')
        if payload_modality(self.x_aug) is not self.org_modality.other():
            raise ValueError('Модальности x_org и x_aug должны различаться')
        return self

    def payload_of(self, modality: Modality) -> Payload:
        """Полезная нагрузка заданной модальности."""
        if modality is self.org_modality:
            return self.x_org
        return self.x_aug


class LossWeights(BaseModel):
    """Веса слагаемых функции потерь кодировщиков."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    w_cls: float = 1.0
    w_fd: float = 1.0
    w_adv: float = 1.0

    @field_validator('w_cls', 'w_fd', 'w_adv')
    def validate_weight(cls, value: float):
        if not math.isfinite(value) or value < 0:
            raise ValueError('Вес должен быть конечным и неотрицательным')
        return value


class TrainConfig(BaseModel):
    """Параметры обучения."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    epochs: int = 400
    learning_rate: float = 1e-4
    batch_size: int = 64
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weights: LossWeights = LossWeights()
    seed: int = 0
    ablation: Ablation = Ablation.NONE
    checkpoint_every: int = Field(default=0, ge=0)
    deterministic: bool = True
    device: str = 'cpu'
    assert_freeze: bool = False
    eval_batch_size: int = Field(default=256, ge=1)

    @field_validator('epochs')
    def validate_epochs(cls, value: int):
        if value < 1:
            raise ValueError('Число эпох должно быть не меньше 1')
        return value

    @field_validator('batch_size')
    def validate_batch_size(cls, value: int):
        if value < 2:
            raise ValueError(
                'Размер батча должен быть не меньше 2 (батч-нормализация)')
        return value

    @field_validator('learning_rate')
    def validate_learning_rate(cls, value: float):
        if not value > 0:
            raise ValueError('Скорость обучения должна быть положительной')
        return value

    def effective_weights(self) -> LossWeights:
        """Веса с учётом абляции: no_fd обнуляет w_fd, no_cmd - w_adv."""
        if self.ablation is Ablation.NO_FD:
            return self.weights.model_copy(update={'w_fd': 0.0})
        if self.ablation is Ablation.NO_CMD:
            return self.weights.model_copy(update={'w_adv': 0.0})
        return self.weights


CSV_COLUMNS = ('epoch', 'l_cls', 'l_fd', 'l_adv', 'l_disc', 'disc_accuracy',
               'train_accuracy', 'seconds', 'deterministic', 'aborted')


class EpochRecord(BaseModel):
    """Сводка одной эпохи обучения."""
    model_config = ConfigDict(frozen=True)

    epoch: int = Field(ge=0)
    l_cls: float
    l_fd: float
    l_adv: float
    l_disc: float
    disc_accuracy: float
    train_accuracy: float
    seconds: float
    deterministic: bool = True
    aborted: bool = False

    @model_validator(mode='after')
    def validate_record(self):
        if self.aborted:
            return self
        for name in ('l_cls', 'l_fd', 'l_adv', 'l_disc', 'seconds'):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f'{name} должно быть конечным')
        for name in ('disc_accuracy', 'train_accuracy'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f'{name} должно лежать в [0, 1]')
        return self

    def as_row(self) -> list:
        return [getattr(self, column) for column in CSV_COLUMNS]


ALPHA_BUCKETS = tuple(round(0.1 * k, 1) for k in range(11))


class EvalReport(BaseModel):
    """Результаты оценки модели на тестовой выборке."""
    model_config = ConfigDict(frozen=True)

    accuracy: float = Field(ge=0.0, le=1.0)
    count: int = Field(ge=1)
    per_class_accuracy: list[Optional[float]]
    confusion: list[list[int]]
    mean_fd: Optional[float] = None
    mean_alpha: Optional[float] = None
    alpha_histogram: Optional[list[int]] = None

    @model_validator(mode='after')
    def validate_report(self):
        matrix = np.asarray(self.confusion, dtype=np.int64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError('Матрица ошибок должна быть квадратной')
        if int(matrix.sum()) != self.count:
            raise ValueError('Сумма матрицы ошибок не равна числу паттернов')
        if abs(np.trace(matrix) / self.count - self.accuracy) > 1e-12:
            raise ValueError('Точность не совпадает со следом матрицы')
        if self.alpha_histogram is not None:
            if len(self.alpha_histogram) != len(ALPHA_BUCKETS):
                raise ValueError('Гистограмма alpha должна иметь 11 корзин')
            if sum(self.alpha_histogram) != self.count:
                raise ValueError('Сумма гистограммы alpha не равна |test|')
        return self


class AlphaBucket(BaseModel):
    """Одна корзина alpha: выбранные паттерны и флаги ошибок."""
    value: float
    population: int = Field(ge=0)
    ids: list[str]
    alphas: list[float]
    misclassified: list[bool]


class AlphaBucketReport(BaseModel):
    """Паттерны, сгруппированные по ближайшему значению alpha."""
    seed: int
    per_bucket: int
    buckets: list[AlphaBucket]

    @field_validator('buckets')
    def validate_buckets(cls, value: list[AlphaBucket]):
        if len(value) != len(ALPHA_BUCKETS):
            raise ValueError('Отчёт должен содержать 11 корзин')
        return value


class ComparedSample(BaseModel):
    """Паттерн, предсказание которого различается у двух моделей."""
    id: str
    label: int
    pred_a: int
    pred_b: int
    alpha_a: Optional[float] = None


class ComparisonReport(BaseModel):
    """Улучшенные и ухудшенные паттерны модели a относительно модели b."""
    count: int
    improved: list[ComparedSample]
    deteriorated: list[ComparedSample]
    unchanged: int
    error_rate_a: float
    error_rate_b: float
    error_reduction: Optional[float] = None
    improved_small_alpha: int = 0
    improved_large_alpha: int = 0


class AblationRow(BaseModel):
    """Строка таблицы абляций."""
    label: str
    variant: str
    report: EvalReport


class AblationTable(BaseModel):
    """Таблица абляций и базовых моделей."""
    seed: int
    config: dict
    rows: list[AblationRow]


# Секции файла конфигурации запуска

class DatasetSection(BaseModel):
    """Источник данных: синтетика или каталог на диске."""
    model_config = ConfigDict(extra='forbid')

    source: Literal['synth', 'synth-blobs', 'trajectory-json',
                    'image-dir'] = 'synth'
    root: Optional[Path] = None
    class_count: int = 4
    per_class: int = 50
    noise_sigma: float = Field(default=0.02, ge=0.0)
    phase_jitter: float = Field(default=0.0, ge=0.0, le=1.0)
    reverse_order_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    max_rotation_deg: float = Field(default=10.0, ge=0.0)
    scale_range: tuple[float, float] = (0.9, 1.1)
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    seed: int = 0

    @field_validator('scale_range')
    def validate_scale_range(cls, value: tuple[float, float]):
        if not 0 < value[0] <= value[1]:
            raise ValueError('Диапазон масштаба должен быть 0 < min <= max')
        return value

    @model_validator(mode='after')
    def validate_source(self):
        if self.source in ('trajectory-json', 'image-dir'):
            if self.root is None:
                raise ValueError(
                    f'Для источника {self.source} требуется root')
        else:
            if not 2 <= self.class_count <= 10:
                raise ValueError('class_count должен лежать в [2, 10]')
            if self.per_class < 4:
                raise ValueError('per_class должен быть не меньше 4')
        return self

    @property
    def org_modality(self) -> Modality:
        if self.source in ('synth', 'trajectory-json'):
            return Modality.TIME_SERIES
        return Modality.IMAGE


class AugmentSection(BaseModel):
    """Параметры самоаугментации."""
    model_config = ConfigDict(extra='forbid')

    steps: int = Field(default=50, ge=2)
    side: int = Field(default=32, ge=8)
    rotation_copies: int = Field(default=1, ge=1)
    rotation_step_deg: float = 6.0
    max_drop_fraction: float = Field(default=0.10, ge=0.0, le=1.0)
    min_contour_points: int = Field(default=8, ge=2)
    workers: int = Field(default=1, ge=1)


class ModelSection(BaseModel):
    """Размерности сетей."""
    model_config = ConfigDict(extra='forbid')

    embedding_dim: int = Field(default=512, ge=1)
    filters: tuple[int, int, int] = (32, 64, 128)
    class_count: Optional[int] = Field(default=None, ge=2)


class RunConfig(BaseModel):
    """Полная конфигурация запуска (YAML-файл)."""
    model_config = ConfigDict(extra='forbid')

    dataset: DatasetSection = DatasetSection()
    augment: AugmentSection = AugmentSection()
    model: ModelSection = ModelSection()
    training: TrainConfig = TrainConfig()
    output_dir: Path = Path('runs')

    @model_validator(mode='after')
    def validate_rotation(self):
        if (self.augment.rotation_copies > 1
                and self.dataset.org_modality is not Modality.IMAGE):
            raise ValueError(
                'Поворотная аугментация применима только к изображениям')
        return self
