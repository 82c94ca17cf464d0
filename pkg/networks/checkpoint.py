"""Checkpoint container: text manifest plus a little-endian float32 buffer.

Layout of a checkpoint directory:

    manifest.json  format_version, metadata, optimizer param groups and
                   entries [{name, shape, dtype: "<f4", offset, length}]
    tensors.bin    concatenated arrays, offsets and lengths in bytes

Every module state (parameters and batch-norm buffers) and every optimizer
state tensor is stored as a named array, so a resumed run is exact.
"""

import logging
import shutil
from pathlib import Path
from typing import Optional

import numpy as np
import orjson
import torch

from errors.errors import CorruptCheckpointError, ShapeError, VersionError
from models.models import BaselineVariant, Modality, TrainConfig
from networks.networks import Bundle, build_baseline, build_bundle


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = 'manifest.json'
BUFFER = 'tensors.bin'
DTYPE = '<f4'


def named_arrays(bundle: Bundle) -> dict[str, np.ndarray]:
    """Все сохраняемые тензоры бандла в детерминированном порядке."""
    arrays = {}
    for module_name, module in bundle.modules().items():
        for key, value in module.state_dict().items():
            arrays[f'{module_name}.{key}'] = value.detach().cpu().numpy()
    for optim_name, optim in bundle.optimizers().items():
        state = optim.state_dict()['state']
        for index in sorted(state):
            for key, value in state[index].items():
                if torch.is_tensor(value):
                    arrays[f'optim.{optim_name}.{index}.{key}'] = (
                        value.detach().cpu().numpy())
    return arrays


def save_checkpoint(bundle: Bundle, path: Path) -> Path:
    """
    Сохраняет бандл в каталог `path`.

    Запись идёт во временный каталог, который затем подменяет `path`,
    поэтому прерванная запись не портит предыдущий чекпоинт.
    """
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, array in named_arrays(bundle).items():
        data = np.ascontiguousarray(array, dtype=DTYPE).tobytes()
        entries.append({'name': name, 'shape': list(array.shape),
                        'dtype': DTYPE, 'offset': offset,
                        'length': len(data)})
        chunks.append(data)
        offset += len(data)
    optimizers = {}
    for name, optim in bundle.optimizers().items():
        optimizers[name] = optim.state_dict()['param_groups']
    manifest = {'format_version': FORMAT_VERSION,
                'metadata': bundle.metadata(),
                'optimizers': optimizers,
                'entries': entries}

    staging = path.with_name(path.name + '.tmp')
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    (staging / BUFFER).write_bytes(b''.join(chunks))
    (staging / MANIFEST).write_bytes(
        orjson.dumps(manifest, option=orjson.OPT_INDENT_2
                     | orjson.OPT_SORT_KEYS))
    if path.exists():
        retired = path.with_name(path.name + '.old')
        if retired.exists():
            shutil.rmtree(retired)
        path.rename(retired)
        staging.rename(path)
        shutil.rmtree(retired)
    else:
        staging.rename(path)
    logger.debug('Saved checkpoint %s (%d arrays)', path, len(entries))
    return path


def read_manifest(path: Path) -> dict:
    """Читает и проверяет манифест чекпоинта."""
    manifest_path = Path(path) / MANIFEST
    try:
        manifest = orjson.loads(manifest_path.read_bytes())
    except FileNotFoundError:
        raise CorruptCheckpointError(f'Нет манифеста: {manifest_path}')
    except orjson.JSONDecodeError as ex:
        raise CorruptCheckpointError(f'Манифест повреждён: {ex}')
    version = manifest.get('format_version')
    if version != FORMAT_VERSION:
        raise VersionError(
            f'Версия формата {version} не поддерживается, '
            f'ожидалась {FORMAT_VERSION}')
    for key in ('metadata', 'entries', 'optimizers'):
        if key not in manifest:
            raise CorruptCheckpointError(f'В манифесте нет поля {key}')
    return manifest


def _bundle_from_metadata(metadata: dict) -> Bundle:
    config = TrainConfig.model_validate(metadata['config'])
    arguments = dict(class_count=metadata['class_count'],
                     org_modality=Modality(metadata['org_modality']),
                     steps=metadata['steps'], side=metadata['side'],
                     embedding_dim=metadata['embedding_dim'],
                     filters=tuple(metadata['filters']), config=config)
    if metadata['kind'] == 'proposed':
        bundle = build_bundle(**arguments)
    else:
        bundle = build_baseline(BaselineVariant(metadata['kind']), **arguments)
    bundle.seed = metadata['seed']
    bundle.epoch = metadata['epoch']
    return bundle


def load_checkpoint(path: Path, expected_class_count: Optional[int] = None
                    ) -> Bundle:
    """
    Загружает бандл, сохранённый save_checkpoint.

    Args:

        path (Path): Каталог чекпоинта.
        expected_class_count (int | None): Число классов текущего запуска.

    Returns:

        Bundle: ModelBundle или BaselineBundle с состоянием оптимизаторов.

    Raises:

        VersionError: Неизвестная версия формата.
        ShapeError: Число классов не совпадает с ожидаемым.
        CorruptCheckpointError: Манифест не согласован с архитектурой или
            буфер обрезан.
    """
    path = Path(path)
    manifest = read_manifest(path)
    metadata = manifest['metadata']
    if (expected_class_count is not None
            and metadata.get('class_count') != expected_class_count):
        raise ShapeError('Число классов чекпоинта не совпадает с запуском',
                         expected=expected_class_count,
                         actual=metadata.get('class_count'))
    try:
        buffer = (path / BUFFER).read_bytes()
    except FileNotFoundError:
        raise CorruptCheckpointError(f'Нет буфера тензоров: {path / BUFFER}')
    entries = {entry['name']: entry for entry in manifest['entries']}
    expected_size = sum(entry['length'] for entry in entries.values())
    if len(buffer) != expected_size:
        raise CorruptCheckpointError(
            f'Размер буфера {len(buffer)} байт, по манифесту {expected_size}')

    def array(name: str, shape: tuple) -> np.ndarray:
        entry = entries.get(name)
        if entry is None:
            raise CorruptCheckpointError(f'В манифесте нет массива {name}')
        if tuple(entry['shape']) != tuple(shape) or entry['dtype'] != DTYPE:
            raise CorruptCheckpointError(
                f'Массив {name}: форма {entry["shape"]}, ожидалась '
                f'{list(shape)}')
        start, length = entry['offset'], entry['length']
        if length != int(np.prod(shape, dtype=np.int64)) * 4:
            raise CorruptCheckpointError(f'Массив {name}: неверная длина')
        return np.frombuffer(buffer, dtype=DTYPE, count=length // 4,
                             offset=start).reshape(shape)

    # веса будут перезаписаны, глобальный генератор torch не трогаем
    with torch.random.fork_rng(devices=[]):
        bundle = _bundle_from_metadata(metadata)
    for module_name, module in bundle.modules().items():
        state = {}
        for key, value in module.state_dict().items():
            data = array(f'{module_name}.{key}', tuple(value.shape))
            state[key] = torch.from_numpy(data.copy()).to(value.dtype)
        module.load_state_dict(state, strict=True)

    for optim_name, optim in bundle.optimizers().items():
        prefix = f'optim.{optim_name}.'
        state: dict[int, dict] = {}
        for name, entry in entries.items():
            if not name.startswith(prefix):
                continue
            index, key = name[len(prefix):].split('.', 1)
            state.setdefault(int(index), {})[key] = torch.from_numpy(
                array(name, tuple(entry['shape'])).copy())
        groups = manifest['optimizers'].get(optim_name)
        if groups is None:
            raise CorruptCheckpointError(f'Нет параметров оптимизатора {optim_name}')
        optim.load_state_dict({'state': state, 'param_groups': groups})
    return bundle
