from collections import Counter

import numpy as np
import orjson
import pytest
from PIL import Image

from datasets.datasets import (load_dataset, load_pairs, normalize_trajectory,
                               read_pgm, resample_polyline, save_pairs,
                               shape_template, stratified_split, synth_blobs,
                               synth_shapes, to_tensor, write_pgm)
from errors.errors import (ArgumentError, DegenerateInputError, LoadError,
                           SchemaError, SplitError)
from models.models import LabeledPattern, Modality, TrajectorySample


def trajectory(*strokes) -> TrajectorySample:
    return TrajectorySample(strokes=[np.array(s, dtype=float) for s in strokes])


def patterns(counts: list[int]) -> list[LabeledPattern]:
    result = []
    for label, count in enumerate(counts):
        for i in range(count):
            result.append(LabeledPattern(
                id=f'c{label}-{i:03d}', label=label,
                modality=Modality.TIME_SERIES,
                payload=trajectory([(0, 0), (1, i + 1)])))
    return result


@pytest.mark.parametrize('stroke, expected', [
    ([(0, 0), (2, 0)], [(-1, 0), (1, 0)]),
    ([(0, 0), (0, 4)], [(0, -1), (0, 1)]),
    ([(1, 1), (3, 5)], [(-0.5, -1), (0.5, 1)]),
])
def test_normalize_trajectory(stroke, expected):
    result = normalize_trajectory(trajectory(stroke))
    np.testing.assert_allclose(result.strokes[0], expected, atol=1e-12)


def test_normalize_keeps_stroke_structure():
    result = normalize_trajectory(trajectory([(0, 0), (1, 0)],
                                             [(0, 1), (1, 1), (2, 2)]))
    assert [len(s) for s in result.strokes] == [2, 3]
    assert np.abs(result.points).max() == pytest.approx(1.0)
    np.testing.assert_allclose(result.points.mean(axis=0), 0.0, atol=1e-12)


def test_normalize_is_idempotent(shape_splits):
    train, _ = shape_splits
    for pattern in train.patterns[:10]:
        once = normalize_trajectory(pattern.payload)
        twice = normalize_trajectory(once)
        for a, b in zip(once.strokes, twice.strokes):
            np.testing.assert_allclose(a, b, atol=1e-9)


def test_normalize_zero_extent():
    with pytest.raises(DegenerateInputError):
        normalize_trajectory(trajectory([(1, 1), (1, 1)]))


def test_to_tensor_straight_stroke():
    out = to_tensor(trajectory([(-1, 0), (1, 0)]), steps=5)
    assert out.shape == (3, 5)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out[0], [-1, -0.5, 0, 0.5, 1])
    np.testing.assert_allclose(out[1], 0)
    np.testing.assert_array_equal(out[2], 1)


def test_to_tensor_two_strokes_flag():
    t = trajectory([(-1, -1), (1, -1)], [(-1, 1), (1, 1)])
    out = to_tensor(t, steps=50)
    zeros = np.flatnonzero(out[2] == 0)
    assert len(zeros) == 1
    # первый отсчёт второго штриха - первая точка с y = 1
    assert zeros[0] == np.flatnonzero(out[1] > 0)[0]
    assert out[1, zeros[0]] == pytest.approx(1.0)


def test_to_tensor_bounded(shape_splits):
    train, test = shape_splits
    for pattern in train.patterns + test.patterns:
        out = to_tensor(normalize_trajectory(pattern.payload))
        assert np.isfinite(out).all()
        assert np.abs(out).max() <= 1.0 + 1e-6


def test_to_tensor_steps_too_small():
    with pytest.raises(ArgumentError):
        to_tensor(trajectory([(-1, 0), (1, 0)]), steps=1)


def test_resample_closed_square():
    square = [(0, 0), (1, 0), (1, 1), (0, 1)]
    out = resample_polyline(square, 8, closed=True)
    np.testing.assert_allclose(out, [(0, 0), (0.5, 0), (1, 0), (1, 0.5),
                                     (1, 1), (0.5, 1), (0, 1), (0, 0.5)])


def test_stratified_split_balanced():
    train, test = stratified_split(patterns([50, 50]), 0.8, seed=1)
    assert len(train) == 80 and len(test) == 20
    assert Counter(p.label for p in train.patterns) == {0: 40, 1: 40}
    assert [p.id for p in train.patterns] == sorted(
        p.id for p in train.patterns)


def test_stratified_split_deterministic():
    first = stratified_split(patterns([7, 9]), 0.8, seed=5)
    second = stratified_split(patterns([7, 9]), 0.8, seed=5)
    for a, b in zip(first, second):
        assert [p.id for p in a.patterns] == [p.id for p in b.patterns]


def test_stratified_split_rounding():
    train, _ = stratified_split(patterns([11, 9]), 0.8, seed=0)
    sizes = Counter(p.label for p in train.patterns)
    assert sizes[0] in {8, 9}
    assert sizes[1] in {7, 8}


@pytest.mark.parametrize('counts, fraction', [
    ([11, 9, 2], 0.8), ([5, 6, 7, 13], 0.5), ([3, 40], 0.7),
])
def test_stratified_split_partitions(counts, fraction):
    source = patterns(counts)
    train, test = stratified_split(source, fraction, seed=2)
    train_ids = {p.id for p in train.patterns}
    test_ids = {p.id for p in test.patterns}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {p.id for p in source}
    sizes = Counter(p.label for p in train.patterns)
    for label, count in enumerate(counts):
        assert abs(sizes[label] - count * fraction) <= 1


def test_stratified_split_small_class():
    with pytest.raises(SplitError):
        stratified_split(patterns([5, 1]), 0.8, seed=0)


def test_synth_shapes_counts():
    train, test = synth_shapes(4, 50, seed=7)
    assert len(train) == 160 and len(test) == 40
    assert Counter(p.label for p in train.patterns) == {k: 40 for k in range(4)}
    assert train.class_count == 4


def test_synth_shapes_deterministic():
    a, _ = synth_shapes(3, 8, seed=11, phase_jitter=0.5,
                        reverse_order_prob=0.5)
    b, _ = synth_shapes(3, 8, seed=11, phase_jitter=0.5,
                        reverse_order_prob=0.5)
    for x, y in zip(a.patterns, b.patterns):
        assert x.id == y.id
        for s, t in zip(x.payload.strokes, y.payload.strokes):
            np.testing.assert_array_equal(s, t)


def test_synth_shapes_noise_free_matches_template():
    train, test = synth_shapes(2, 4, seed=0, noise_sigma=0.0,
                               max_rotation_deg=0.0, scale_range=(1.0, 1.0))
    for pattern in train.patterns + test.patterns:
        template = shape_template(pattern.label)
        for stroke, expected in zip(pattern.payload.strokes, template):
            assert np.abs(stroke - expected).max() < 1e-9


def test_phase_jitter_keeps_point_set():
    circle = shape_template(1)
    shifted = shape_template(1, phase=0.25)
    ring = {tuple(np.round(p, 9)) for p in circle[0][:-1]}
    assert {tuple(np.round(p, 9)) for p in shifted[0][:-1]} == ring
    assert not np.allclose(circle[0][0], shifted[0][0])


def test_synth_blobs_image_modality():
    train, test = synth_blobs(3, 5, seed=0, side=32)
    assert train.modalities == {Modality.IMAGE}
    assert all(p.payload.pixels.shape == (32, 32) for p in train.patterns)
    assert all(p.payload.pixels.sum() > 20 for p in test.patterns)


def write_trajectory(path, strokes):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps({'strokes': strokes}))


def test_load_dataset_split_file(tmp_path):
    ids = []
    for label in ('a', 'b'):
        for i in range(5):
            pattern_id = f'{label}{i}'
            ids.append(pattern_id)
            write_trajectory(tmp_path / label / f'{pattern_id}.json',
                             [[[0, 0], [1, i + 1]]])
    (tmp_path / 'split.json').write_bytes(orjson.dumps(
        {'train': ids[:4] + ids[5:9], 'test': [ids[4], ids[9]]}))
    train, test = load_dataset(tmp_path, 'trajectory-json')
    assert len(train) == 8 and len(test) == 2
    assert [p.id for p in test.patterns] == ['a4', 'b4']
    assert train.class_count == 2


def test_load_dataset_empty(tmp_path):
    with pytest.raises(LoadError):
        load_dataset(tmp_path, 'trajectory-json')


def test_load_dataset_malformed_names_path(tmp_path):
    bad = tmp_path / 'a' / 'broken.json'
    bad.parent.mkdir()
    bad.write_text('{not json')
    with pytest.raises(LoadError) as info:
        load_dataset(tmp_path, 'trajectory-json')
    assert 'broken.json' in str(info.value)


def test_load_dataset_class_mismatch(tmp_path):
    write_trajectory(tmp_path / 'train' / 'a' / 'x.json', [[[0, 0], [1, 1]]])
    write_trajectory(tmp_path / 'test' / 'b' / 'y.json', [[[0, 0], [1, 1]]])
    with pytest.raises(SchemaError):
        load_dataset(tmp_path, 'trajectory-json')


def test_load_image_dir_six_classes(tmp_path):
    for k in range(6):
        for i in range(2):
            pixels = np.zeros((32, 32))
            pixels[8:20, 8 + k:20] = 1.0
            path = tmp_path / f'leaf{k}' / f'leaf{k}-{i}.pgm'
            path.parent.mkdir(exist_ok=True)
            write_pgm(path, pixels)
    train, test = load_dataset(tmp_path, 'image-dir', side=32)
    assert train.class_count == 6
    assert len(train) + len(test) == 12


def test_pgm_roundtrip_binarizes(tmp_path):
    pixels = np.zeros((5, 7))
    pixels[1, 2] = 1.0
    pixels[3, 4] = 0.6
    write_pgm(tmp_path / 'x.pgm', pixels)
    out = read_pgm(tmp_path / 'x.pgm')
    assert out.shape == (5, 7)
    assert out[1, 2] == 1.0 and out[3, 4] == 1.0 and out.sum() == 2.0


def test_write_pgm_is_binary_pgm(tmp_path):
    write_pgm(tmp_path / 'x.pgm', np.ones((3, 4)))
    data = (tmp_path / 'x.pgm').read_bytes()
    assert data.startswith(b'P5')
    assert data.endswith(b'\xff' * 12)


def test_read_pgm_accepts_png(tmp_path):
    raw = np.zeros((4, 6), dtype=np.uint8)
    raw[2, 3] = 200
    Image.fromarray(raw, 'L').save(tmp_path / 'x.png')
    out = read_pgm(tmp_path / 'x.png')
    assert out.shape == (4, 6) and out.sum() == 1.0


@pytest.mark.parametrize('content', [b'not an image', b'P5\n4 4\n255\n\x00'])
def test_read_pgm_rejects_broken_files(tmp_path, content):
    path = tmp_path / 'broken.pgm'
    path.write_bytes(content)
    with pytest.raises(LoadError) as info:
        read_pgm(path)
    assert 'broken.pgm' in str(info.value)


def test_save_and_load_pairs(tmp_path, shape_pairs):
    train, test = shape_pairs
    save_pairs(tmp_path, {'train': train, 'test': test},
               ['line', 'circle', 'zigzag', 'spiral'],
               {'org_modality': 'TimeSeries',
                'pair_provenance': 'rasterize(side=32)'})
    loaded_train, loaded_test, provenance = load_pairs(tmp_path)
    assert [p.id for p in loaded_train] == [p.id for p in train]
    assert len(loaded_test) == len(test)
    first, original = loaded_train[0], train[0]
    np.testing.assert_array_equal(first.x_aug.pixels, original.x_aug.pixels)
    for a, b in zip(first.x_org.strokes, original.x_org.strokes):
        np.testing.assert_array_equal(a, b)
    assert provenance['class_names'][first.label] in first.id


def test_load_pairs_missing(tmp_path):
    with pytest.raises(LoadError):
        load_pairs(tmp_path / 'nothing')
