"""Neural networks of the shared feature space and their bundles."""

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from datasets.datasets import normalize_trajectory, to_tensor
from errors.errors import ArgumentError, ShapeError, StateError
from models.models import (BaselineVariant, ImageSample, Modality,
                           PairedPattern, TrainConfig, TrajectorySample)


def pooled_length(length: int, layers: int = 3) -> int:
    """Длина после layers max-pool(2) с округлением вниз: 50 -> 25 -> 12 -> 6."""
    for _ in range(layers):
        length //= 2
    return length


def input_shape(modality: Modality, steps: int, side: int) -> tuple:
    if modality is Modality.TIME_SERIES:
        return (3, steps)
    return (1, side, side)


def check_shape(x: torch.Tensor, expected: tuple, what: str) -> None:
    """Проверяет форму батча (N, *expected)."""
    if x.dim() != len(expected) + 1 or tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(f'Неверная форма входа {what}',
                         expected=('N',) + tuple(expected),
                         actual=tuple(x.shape))


class ConvStem(nn.Module):
    """
    Свёрточный ствол: три блока conv(3, stride 1, padding 1) ->
    batch-norm -> ReLU -> max-pool(2), затем выпрямление.
    """

    def __init__(self, modality: Modality, shape: tuple,
                 filters: Sequence[int] = (32, 64, 128)):
        super().__init__()
        if modality is Modality.TIME_SERIES:
            conv, norm, pool = nn.Conv1d, nn.BatchNorm1d, nn.MaxPool1d
        else:
            conv, norm, pool = nn.Conv2d, nn.BatchNorm2d, nn.MaxPool2d
        blocks = []
        channels = shape[0]
        for width in filters:
            blocks += [conv(channels, width, kernel_size=3, stride=1,
                            padding=1),
                       norm(width, momentum=0.1, eps=1e-5),
                       nn.ReLU(),
                       pool(2)]
            channels = width
        self.features = nn.Sequential(*blocks)
        self.output_shape = (channels,) + tuple(
            pooled_length(n, len(filters)) for n in shape[1:])
        self.flat_size = int(np.prod(self.output_shape))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.features(x), start_dim=1)


def fc_block(in_features: int, out_features: int) -> list[nn.Module]:
    return [nn.Linear(in_features, out_features),
            nn.BatchNorm1d(out_features, momentum=0.1, eps=1e-5),
            nn.ReLU()]


class Encoder(nn.Module):
    """Кодировщик одной модальности в общее пространство признаков."""

    def __init__(self, modality: Modality, shape: tuple,
                 filters: Sequence[int] = (32, 64, 128),
                 embedding_dim: int = 512):
        super().__init__()
        self.modality = modality
        self.input_shape = tuple(shape)
        self.stem = ConvStem(modality, shape, filters)
        self.head = nn.Sequential(*fc_block(self.stem.flat_size, embedding_dim),
                                  *fc_block(embedding_dim, embedding_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_shape(x, self.input_shape, self.modality.value)
        return self.head(self.stem(x))


class GatingNetwork(nn.Module):
    """
    Гейтинговая сеть: свёрточные стволы обеих модальностей, склейка
    выпрямленных выходов (2048 + 768), два слоя FC и логистический
    выход - одно alpha на паттерн.
    """

    def __init__(self, ts_shape: tuple, img_shape: tuple,
                 filters: Sequence[int] = (32, 64, 128),
                 hidden: int = 512):
        super().__init__()
        self.ts_shape, self.img_shape = tuple(ts_shape), tuple(img_shape)
        self.stem_img = ConvStem(Modality.IMAGE, img_shape, filters)
        self.stem_ts = ConvStem(Modality.TIME_SERIES, ts_shape, filters)
        self.fused_size = self.stem_img.flat_size + self.stem_ts.flat_size
        self.head = nn.Sequential(*fc_block(self.fused_size, hidden),
                                  *fc_block(hidden, hidden))
        self.gate = nn.Linear(hidden, 1)

    def forward(self, x_img: torch.Tensor, x_ts: torch.Tensor) -> torch.Tensor:
        check_shape(x_img, self.img_shape, Modality.IMAGE.value)
        check_shape(x_ts, self.ts_shape, Modality.TIME_SERIES.value)
        fused = torch.cat([self.stem_img(x_img), self.stem_ts(x_ts)], dim=1)
        return torch.sigmoid(self.gate(self.head(fused))).squeeze(1)


class Classifier(nn.Module):
    """MLP: FC -> batch-norm -> ReLU -> FC, возвращает логиты."""

    def __init__(self, in_features: int, class_count: int,
                 hidden: int = 512):
        super().__init__()
        self.in_features = in_features
        self.layers = nn.Sequential(*fc_block(in_features, hidden),
                                    nn.Linear(hidden, class_count))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        check_shape(f, (self.in_features,), 'классификатора')
        return self.layers(f)


class ModalityDiscriminator(nn.Module):
    """
    Условный дискриминатор модальности: вход - признак и one-hot класса,
    выход - вероятность того, что признак получен из самоаугментированной
    модальности (d = 1).
    """

    def __init__(self, embedding_dim: int, class_count: int,
                 hidden: int = 512):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.class_count = class_count
        self.layers = nn.Sequential(
            *fc_block(embedding_dim + class_count, hidden),
            *fc_block(hidden, hidden),
            nn.Linear(hidden, 1))

    def forward(self, f: torch.Tensor, label_onehot: torch.Tensor
                ) -> torch.Tensor:
        check_shape(f, (self.embedding_dim,), 'дискриминатора')
        check_shape(label_onehot, (self.class_count,), 'one-hot')
        x = torch.cat([f, label_onehot.to(f.dtype)], dim=1)
        return torch.sigmoid(self.layers(x)).squeeze(1)


class Inference(NamedTuple):
    """Результат прямого прохода бандла."""
    logits: torch.Tensor
    alpha: Optional[torch.Tensor] = None
    f_org: Optional[torch.Tensor] = None
    f_aug: Optional[torch.Tensor] = None


def make_adam(parameters, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(parameters, lr=config.learning_rate,
                            betas=config.betas, eps=config.adam_eps)


@dataclass
class ModelBundle:
    """Пять сетей предложенного метода и метаданные обучения."""
    encoder_ts: Encoder
    encoder_img: Encoder
    cmd: ModalityDiscriminator
    gating: GatingNetwork
    classifier: Classifier
    class_count: int
    org_modality: Modality
    steps: int = 50
    side: int = 32
    embedding_dim: int = 512
    filters: tuple = (32, 64, 128)
    config: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    epoch: int = 0
    optim_cmd: Optional[torch.optim.Adam] = None
    optim_main: Optional[torch.optim.Adam] = None

    kind = 'proposed'

    def encoder(self, modality: Modality) -> Encoder:
        if modality is Modality.TIME_SERIES:
            return self.encoder_ts
        return self.encoder_img

    @property
    def encoder_org(self) -> Encoder:
        return self.encoder(self.org_modality)

    @property
    def encoder_aug(self) -> Encoder:
        return self.encoder(self.org_modality.other())

    def modules(self) -> dict[str, nn.Module]:
        return {'encoder_ts': self.encoder_ts, 'encoder_img': self.encoder_img,
                'cmd': self.cmd, 'gating': self.gating,
                'classifier': self.classifier}

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {name: optim for name, optim in
                (('cmd', self.optim_cmd), ('main', self.optim_main))
                if optim is not None}

    def main_parameters(self) -> Iterator[nn.Parameter]:
        for module in (self.encoder_ts, self.encoder_img, self.gating,
                       self.classifier):
            yield from module.parameters()

    def train(self, mode: bool = True) -> 'ModelBundle':
        for module in self.modules().values():
            module.train(mode)
        return self

    def eval(self) -> 'ModelBundle':
        return self.train(False)

    def to(self, device: Union[str, torch.device]) -> 'ModelBundle':
        for module in self.modules().values():
            module.to(device)
        return self

    def split_inputs(self, x_org: torch.Tensor, x_aug: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor]:
        """(x_img, x_ts) по модальностям пары."""
        if self.org_modality is Modality.IMAGE:
            return x_org, x_aug
        return x_aug, x_org

    def infer(self, x_org: torch.Tensor, x_aug: torch.Tensor) -> Inference:
        f_org = self.encoder_org(x_org)
        f_aug = self.encoder_aug(x_aug)
        alpha = self.gating(*self.split_inputs(x_org, x_aug))
        logits = self.classifier(gate_combine(f_org, f_aug, alpha))
        return Inference(logits=logits, alpha=alpha, f_org=f_org, f_aug=f_aug)

    def metadata(self) -> dict:
        return {'kind': self.kind, 'class_count': self.class_count,
                'org_modality': self.org_modality.value, 'steps': self.steps,
                'side': self.side, 'embedding_dim': self.embedding_dim,
                'filters': list(self.filters), 'seed': self.seed,
                'epoch': self.epoch,
                'config': self.config.model_dump(mode='json')}


@dataclass
class BaselineBundle:
    """CNN (image), CNN (time series) или CNN (concat)."""
    variant: BaselineVariant
    encoders: nn.ModuleDict
    classifier: Classifier
    class_count: int
    org_modality: Modality
    steps: int = 50
    side: int = 32
    embedding_dim: int = 512
    filters: tuple = (32, 64, 128)
    config: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    epoch: int = 0
    optim_main: Optional[torch.optim.Adam] = None

    @property
    def kind(self) -> str:
        return self.variant.value

    def modules(self) -> dict[str, nn.Module]:
        return {'encoders': self.encoders, 'classifier': self.classifier}

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {'main': self.optim_main} if self.optim_main is not None else {}

    def main_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.encoders.parameters()
        yield from self.classifier.parameters()

    def train(self, mode: bool = True) -> 'BaselineBundle':
        for module in self.modules().values():
            module.train(mode)
        return self

    def eval(self) -> 'BaselineBundle':
        return self.train(False)

    def to(self, device: Union[str, torch.device]) -> 'BaselineBundle':
        for module in self.modules().values():
            module.to(device)
        return self

    def infer(self, x_org: torch.Tensor, x_aug: torch.Tensor) -> Inference:
        if self.org_modality is Modality.IMAGE:
            inputs = {'img': x_org, 'ts': x_aug}
        else:
            inputs = {'img': x_aug, 'ts': x_org}
        features = [self.encoders[key](inputs[key]) for key in ('img', 'ts')
                    if key in self.encoders]
        return Inference(logits=self.classifier(torch.cat(features, dim=1)))

    def metadata(self) -> dict:
        return {'kind': self.kind, 'class_count': self.class_count,
                'org_modality': self.org_modality.value, 'steps': self.steps,
                'side': self.side, 'embedding_dim': self.embedding_dim,
                'filters': list(self.filters), 'seed': self.seed,
                'epoch': self.epoch,
                'config': self.config.model_dump(mode='json')}


Bundle = Union[ModelBundle, BaselineBundle]


def build_bundle(class_count: int, org_modality: Modality, steps: int = 50,
                 side: int = 32, embedding_dim: int = 512,
                 filters: Sequence[int] = (32, 64, 128),
                 config: TrainConfig = TrainConfig()) -> ModelBundle:
    """
    Создаёт пять сетей с инициализацией по умолчанию PyTorch
    (равномерная, масштабированная по fan-in) и оптимизаторы Adam:
    отдельный для CMD и общий для остальных сетей.
    """
    torch.manual_seed(config.seed)
    ts_shape = input_shape(Modality.TIME_SERIES, steps, side)
    img_shape = input_shape(Modality.IMAGE, steps, side)
    bundle = ModelBundle(
        encoder_ts=Encoder(Modality.TIME_SERIES, ts_shape, filters,
                           embedding_dim),
        encoder_img=Encoder(Modality.IMAGE, img_shape, filters, embedding_dim),
        cmd=ModalityDiscriminator(embedding_dim, class_count),
        gating=GatingNetwork(ts_shape, img_shape, filters, embedding_dim),
        classifier=Classifier(embedding_dim, class_count, embedding_dim),
        class_count=class_count, org_modality=org_modality, steps=steps,
        side=side, embedding_dim=embedding_dim, filters=tuple(filters),
        config=config, seed=config.seed)
    bundle.to(config.device)
    bundle.optim_cmd = make_adam(bundle.cmd.parameters(), config)
    bundle.optim_main = make_adam(list(bundle.main_parameters()), config)
    return bundle


def build_baseline(variant: BaselineVariant, class_count: int,
                   org_modality: Modality, steps: int = 50, side: int = 32,
                   embedding_dim: int = 512,
                   filters: Sequence[int] = (32, 64, 128),
                   config: TrainConfig = TrainConfig()) -> BaselineBundle:
    """Базовая модель с той же структурой кодировщика, что и у метода."""
    torch.manual_seed(config.seed)
    encoders = nn.ModuleDict()
    if variant in (BaselineVariant.IMAGE_ONLY, BaselineVariant.CONCAT):
        encoders['img'] = Encoder(
            Modality.IMAGE, input_shape(Modality.IMAGE, steps, side),
            filters, embedding_dim)
    if variant in (BaselineVariant.TS_ONLY, BaselineVariant.CONCAT):
        encoders['ts'] = Encoder(
            Modality.TIME_SERIES,
            input_shape(Modality.TIME_SERIES, steps, side),
            filters, embedding_dim)
    bundle = BaselineBundle(
        variant=variant, encoders=encoders,
        classifier=Classifier(embedding_dim * len(encoders), class_count,
                              embedding_dim),
        class_count=class_count, org_modality=org_modality, steps=steps,
        side=side, embedding_dim=embedding_dim, filters=tuple(filters),
        config=config, seed=config.seed)
    bundle.to(config.device)
    bundle.optim_main = make_adam(list(bundle.main_parameters()), config)
    return bundle


def _require_proposed(bundle) -> ModelBundle:
    if not isinstance(bundle, ModelBundle):
        raise StateError('Операция требует инициализированный ModelBundle')
    return bundle


def encoder_forward(modality: Modality, x: torch.Tensor,
                    bundle: ModelBundle) -> torch.Tensor:
    """Вложение (N, 512) входа заданной модальности."""
    return _require_proposed(bundle).encoder(modality)(x)


def gate_combine(f_org: torch.Tensor, f_aug: torch.Tensor,
                 alpha: Union[torch.Tensor, float]) -> torch.Tensor:
    """f = alpha * f_org + (1 - alpha) * f_aug, alpha - по одному на паттерн."""
    if not torch.is_tensor(alpha):
        if not 0.0 <= alpha <= 1.0:
            raise ArgumentError(f'alpha должно лежать в [0, 1], получено {alpha}')
        alpha = torch.tensor(alpha, dtype=f_org.dtype, device=f_org.device)
    if alpha.dim() == 1 and f_org.dim() == 2:
        alpha = alpha.unsqueeze(1)
    return alpha * f_org + (1 - alpha) * f_aug


def gating_forward(x_org: torch.Tensor, x_aug: torch.Tensor,
                   bundle: ModelBundle) -> torch.Tensor:
    """alpha в [0, 1] для каждой пары батча."""
    bundle = _require_proposed(bundle)
    return bundle.gating(*bundle.split_inputs(x_org, x_aug))


def classifier_forward(f: torch.Tensor, bundle: ModelBundle) -> torch.Tensor:
    return _require_proposed(bundle).classifier(f)


def one_hot(labels: torch.Tensor, class_count: int) -> torch.Tensor:
    return nn.functional.one_hot(labels.long(), class_count).float()


def cmd_forward(f: torch.Tensor, label_onehot: torch.Tensor,
                bundle: ModelBundle) -> torch.Tensor:
    """
    d_hat - вероятность того, что признак получен из самоаугментированной
    модальности.

    Raises:

        ArgumentError: one-hot содержит не ровно одну единицу.
    """
    bundle = _require_proposed(bundle)
    hot = label_onehot.float()
    if (label_onehot.dim() != 2 or not torch.all((hot == 0) | (hot == 1))
            or not torch.all(hot.sum(dim=1) == 1)):
        raise ArgumentError('label_onehot должен содержать ровно одну единицу')
    return bundle.cmd(f, hot)


@dataclass
class PairTensors:
    """Пары в виде тензоров: x_org, x_aug, метки и id."""
    ids: list[str]
    labels: torch.Tensor
    x_org: torch.Tensor
    x_aug: torch.Tensor
    org_modality: Modality

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index: Sequence[int]) -> 'PairTensors':
        positions = torch.as_tensor(np.asarray(index, dtype=np.int64))
        return PairTensors(ids=[self.ids[i] for i in index],
                           labels=self.labels[positions],
                           x_org=self.x_org[positions],
                           x_aug=self.x_aug[positions],
                           org_modality=self.org_modality)

    def to(self, device: Union[str, torch.device]) -> 'PairTensors':
        return PairTensors(ids=self.ids, labels=self.labels.to(device),
                           x_org=self.x_org.to(device),
                           x_aug=self.x_aug.to(device),
                           org_modality=self.org_modality)


def payload_tensor(payload: Union[TrajectorySample, ImageSample], steps: int,
                   side: int) -> np.ndarray:
    """Вход сети для одного паттерна: (3, steps) или (1, side, side)."""
    if isinstance(payload, TrajectorySample):
        return to_tensor(normalize_trajectory(payload), steps)
    if payload.pixels.shape != (side, side):
        raise ShapeError('Неверный размер изображения', expected=(side, side),
                         actual=payload.pixels.shape)
    return payload.pixels[None].astype(np.float32)


def tensorize_pairs(pairs: Sequence[PairedPattern], steps: int = 50,
                    side: int = 32) -> PairTensors:
    """Собирает пары одной исходной модальности в тензоры."""
    if not pairs:
        raise ArgumentError('Список пар пуст')
    modalities = {pair.org_modality for pair in pairs}
    if len(modalities) != 1:
        raise ArgumentError('Пары должны иметь одну исходную модальность')
    return PairTensors(
        ids=[pair.id for pair in pairs],
        labels=torch.tensor([pair.label for pair in pairs], dtype=torch.long),
        x_org=torch.from_numpy(np.stack(
            [payload_tensor(pair.x_org, steps, side) for pair in pairs])),
        x_aug=torch.from_numpy(np.stack(
            [payload_tensor(pair.x_aug, steps, side) for pair in pairs])),
        org_modality=modalities.pop())
