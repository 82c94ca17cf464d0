from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from augment.augment import build_pairs
from datasets.datasets import synth_blobs, synth_shapes
from models.models import AugmentSection, Modality, TrainConfig
from networks.networks import build_bundle


# Малые сети для быстрых тестов обучения
SMALL_DIMS = dict(embedding_dim=32, filters=(4, 8, 16))


@pytest.fixture(scope='session')
def shape_splits():
    return synth_shapes(4, 10, seed=3)


@pytest.fixture(scope='session')
def shape_pairs(shape_splits):
    train, test = shape_splits
    return build_pairs(train).pairs, build_pairs(test).pairs


@pytest.fixture(scope='session')
def blob_pairs():
    train, test = synth_blobs(3, 6, seed=1)
    config = AugmentSection()
    return build_pairs(train, config).pairs, build_pairs(test, config).pairs


@pytest.fixture
def small_config():
    return TrainConfig(epochs=1, batch_size=8, seed=0)


@pytest.fixture
def small_bundle(small_config):
    return build_bundle(4, Modality.TIME_SERIES, config=small_config,
                        **SMALL_DIMS)


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def write_config(tmp_path):
    """Пишет YAML-конфигурацию в tmp_path и возвращает путь к ней."""

    def write(data: dict, name: str = 'run.yaml') -> Path:
        data = {'output_dir': str(tmp_path / 'out'), **data}
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data), encoding='utf-8')
        return path
    return write


@pytest.fixture
def tiny_run_config():
    """Конфигурация запуска на крошечном синтетическом наборе."""
    return {
        'dataset': {'source': 'synth', 'class_count': 2, 'per_class': 5,
                    'seed': 0},
        'model': {'embedding_dim': 16, 'filters': [4, 8, 8]},
        'training': {'epochs': 1, 'batch_size': 4, 'seed': 0},
    }
