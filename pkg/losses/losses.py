"""Функции потерь: расстояние признаков, CMD, классификация."""

import math

import torch
from torch.nn import functional as F

from errors.errors import NumericError
from models.models import LossWeights


EPSILON = 1e-7


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 1 else x


def feature_distance_loss(f_org: torch.Tensor,
                          f_aug: torch.Tensor) -> torch.Tensor:
    """
    Жёсткая согласованность: ||f_org - f_aug||^2 / 2, среднее по батчу.

    Args:

        f_org (torch.Tensor): Вложения исходной модальности (N, D) или (D,).
        f_aug (torch.Tensor): Вложения самоаугментированной модальности.
    """
    difference = _as_batch(f_org) - _as_batch(f_aug)
    return 0.5 * difference.pow(2).sum(dim=1).mean()


def cmd_discriminator_loss(d_hat: torch.Tensor,
                           d: torch.Tensor) -> torch.Tensor:
    """
    Бинарная кросс-энтропия дискриминатора, d_hat ограничено
    [EPSILON, 1 - EPSILON]; среднее по паттернам обеих модальностей.
    """
    d_hat = torch.as_tensor(d_hat).clamp(EPSILON, 1.0 - EPSILON)
    d = torch.as_tensor(d, dtype=d_hat.dtype, device=d_hat.device)
    return -(d * torch.log(d_hat) + (1 - d) * torch.log(1 - d_hat)).mean()


def cmd_encoder_loss(d_hat_correct: torch.Tensor) -> torch.Tensor:
    """
    Состязательная потеря кодировщиков: -log(1 - d_hat_correct).

    d_hat_correct - вероятность, которую дискриминатор присваивает
    истинной модальности паттерна.
    """
    d_hat_correct = torch.as_tensor(d_hat_correct).clamp(EPSILON, 1.0 - EPSILON)
    return -torch.log(1 - d_hat_correct).mean()


def classification_loss(logits: torch.Tensor,
                        labels: torch.Tensor) -> torch.Tensor:
    """Кросс-энтропия softmax, среднее по батчу."""
    return F.cross_entropy(_as_batch(logits),
                           torch.as_tensor(labels).reshape(-1).long())


def encoder_step_total(l_cls: torch.Tensor, l_fd: torch.Tensor,
                       l_adv: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """
    Взвешенная сумма w_cls * l_cls + w_fd * l_fd + w_adv * l_adv.

    Raises:

        NumericError: Одно из слагаемых не является конечным числом.
    """
    terms = {'l_cls': l_cls, 'l_fd': l_fd, 'l_adv': l_adv}
    for name, value in terms.items():
        if not math.isfinite(float(value)):
            raise NumericError(f'Потеря {name} не конечна: {float(value)}',
                               term=name)
    return w.w_cls * l_cls + w.w_fd * l_fd + w.w_adv * l_adv
