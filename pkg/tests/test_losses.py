import math

import numpy as np
import pytest
import torch

from errors.errors import NumericError
from losses.losses import (EPSILON, classification_loss,
                           cmd_discriminator_loss, cmd_encoder_loss,
                           encoder_step_total, feature_distance_loss)
from models.models import LossWeights


def test_feature_distance_hand_value():
    f_org = torch.tensor([[1.0, 2.0], [0.0, 0.0]])
    f_aug = torch.tensor([[1.0, 0.0], [3.0, 4.0]])
    # (4 / 2 + 25 / 2) / 2
    assert feature_distance_loss(f_org, f_aug).item() == pytest.approx(7.25)


def test_feature_distance_identical_is_zero():
    f = torch.randn(4, 8)
    assert feature_distance_loss(f, f.clone()).item() == 0.0


def test_feature_distance_single_vector():
    loss = feature_distance_loss(torch.tensor([3.0, 0.0]),
                                 torch.tensor([0.0, 4.0]))
    assert loss.item() == pytest.approx(12.5)


def test_feature_distance_gradient():
    f_org = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
    f_aug = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(feature_distance_loss, (f_org, f_aug))
    feature_distance_loss(f_org, f_aug).backward()
    expected = (f_org - f_aug).detach() / 3
    assert torch.allclose(f_org.grad, expected)


def test_discriminator_loss_half_is_log_two():
    d_hat = torch.full((6,), 0.5)
    d = torch.tensor([0, 0, 0, 1, 1, 1])
    assert cmd_discriminator_loss(d_hat, d).item() == pytest.approx(math.log(2))


def test_discriminator_loss_hand_value():
    d_hat = torch.tensor([0.8, 0.3])
    d = torch.tensor([1.0, 0.0])
    expected = -(math.log(0.8) + math.log(0.7)) / 2
    assert cmd_discriminator_loss(d_hat, d).item() == pytest.approx(expected,
                                                                    rel=1e-6)


def test_discriminator_loss_clamped():
    loss = cmd_discriminator_loss(torch.tensor([0.0, 1.0]),
                                  torch.tensor([1.0, 0.0]))
    assert math.isfinite(loss.item())
    assert loss.item() == pytest.approx(-math.log(EPSILON), rel=2e-2)


def test_discriminator_loss_gradient():
    d_hat = torch.tensor([0.2, 0.6, 0.9], dtype=torch.float64,
                         requires_grad=True)
    d = torch.tensor([0.0, 1.0, 1.0], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: cmd_discriminator_loss(x, d),
                                    (d_hat,))


def test_encoder_loss_hand_value():
    loss = cmd_encoder_loss(torch.tensor([0.5, 0.75]))
    expected = -(math.log(0.5) + math.log(0.25)) / 2
    assert loss.item() == pytest.approx(expected, rel=1e-6)


def test_classification_loss_uniform_logits():
    logits = torch.zeros(3, 4)
    labels = torch.tensor([0, 2, 3])
    assert classification_loss(logits, labels).item() == pytest.approx(
        math.log(4))


def test_classification_loss_hand_value():
    logits = torch.tensor([[2.0, 0.0]])
    expected = -math.log(math.exp(2) / (math.exp(2) + 1))
    assert classification_loss(logits, torch.tensor([0])).item() == \
        pytest.approx(expected, rel=1e-6)


def test_encoder_step_total_weights():
    total = encoder_step_total(torch.tensor(1.0), torch.tensor(2.0),
                               torch.tensor(3.0),
                               LossWeights(w_cls=1.0, w_fd=0.5, w_adv=0.0))
    assert total.item() == pytest.approx(2.0)


@pytest.mark.parametrize('term', ['l_cls', 'l_fd', 'l_adv'])
def test_encoder_step_total_non_finite(term):
    values = {'l_cls': torch.tensor(1.0), 'l_fd': torch.tensor(1.0),
              'l_adv': torch.tensor(1.0)}
    values[term] = torch.tensor(float('nan'))
    with pytest.raises(NumericError) as info:
        encoder_step_total(values['l_cls'], values['l_fd'], values['l_adv'],
                           LossWeights())
    assert info.value.term == term


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(w_fd=-1.0)


def feature_distance_case(rng):
    f_aug = torch.from_numpy(rng.normal(size=(4, 6)))
    return (lambda x: feature_distance_loss(x, f_aug),
            rng.normal(size=(4, 6)))


def discriminator_case(rng):
    d = torch.from_numpy(rng.integers(0, 2, 8).astype('float64'))
    return (lambda x: cmd_discriminator_loss(x, d),
            rng.uniform(0.05, 0.95, 8))


def encoder_case(rng):
    return cmd_encoder_loss, rng.uniform(0.05, 0.95, 8)


def classification_case(rng):
    labels = torch.from_numpy(rng.integers(0, 5, 6))
    return (lambda x: classification_loss(x, labels),
            rng.normal(size=(6, 5)))


def total_case(rng):
    weights = LossWeights(w_cls=rng.uniform(0.1, 2.0),
                          w_fd=rng.uniform(0.1, 2.0),
                          w_adv=rng.uniform(0.1, 2.0))
    return (lambda x: encoder_step_total(x[0], x[1], x[2], weights),
            rng.uniform(0.1, 3.0, 3))


@pytest.mark.parametrize('case', [feature_distance_case, discriminator_case,
                                  encoder_case, classification_case,
                                  total_case])
def test_gradients_match_central_differences(case):
    rng = np.random.default_rng(2024)
    step = 1e-4
    for _ in range(100):
        loss, values = case(rng)
        x = torch.tensor(values, dtype=torch.float64, requires_grad=True)
        loss(x).backward()
        analytic = x.grad.numpy().ravel()
        numeric = np.zeros_like(analytic)
        flat = x.detach().clone().reshape(-1)
        for i in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += step
            minus[i] -= step
            numeric[i] = (loss(plus.reshape(x.shape)).item()
                          - loss(minus.reshape(x.shape)).item()) / (2 * step)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        assert np.linalg.norm(analytic - numeric) <= 1e-4 * scale
