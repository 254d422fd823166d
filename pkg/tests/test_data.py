import struct

import numpy as np
import pytest

from twins.data import (
    DomainDataset,
    PdaTaskSpec,
    class_centers,
    gen_blobs,
    load_idx,
    make_blob_task,
    paired_batches,
    source_batches,
    write_idx,
)
from twins.errors import ConfigError, DataError, FormatError


def small_spec(**kw):
    base = dict(n_train_per_class=30, n_test_per_class=10)
    base.update(kw)
    return PdaTaskSpec(**base)


def test_blobs_reproducible():
    a = gen_blobs(small_spec(seed=4))
    b = gen_blobs(small_spec(seed=4))
    for (x, y) in zip(a, b):
        for d1, d2 in zip(x, y):
            assert d1.features.tobytes() == d2.features.tobytes()
            assert d1.labels.tobytes() == d2.labels.tobytes()


def test_blobs_seed_changes_data():
    a = gen_blobs(small_spec(seed=1))[0][0]
    b = gen_blobs(small_spec(seed=2))[0][0]
    assert not np.array_equal(a.features, b.features)


def test_target_keeps_first_n_classes():
    (_, _), (t_tr, t_te) = gen_blobs(small_spec(n_target_classes=3))
    for d in (t_tr, t_te):
        assert sorted(set(d.labels.tolist())) == [0, 1, 2]
        assert d.labels.max() < 3
        assert d.class_universe == 10


def test_full_target_is_standard_uda():
    (_, _), (t_tr, _) = gen_blobs(small_spec(n_target_classes=10))
    assert sorted(set(t_tr.labels.tolist())) == list(range(10))


def test_zero_shift_matches_source_distribution():
    spec = small_spec(rotation_deg=0.0, translation=[0.0, 0.0], noise=0.0,
                      n_train_per_class=4000, n_test_per_class=2)
    (s_tr, _), (t_tr, _) = gen_blobs(spec)
    centers = class_centers(spec)
    for c in range(spec.n_target_classes):
        xs = s_tr.features[s_tr.labels == c]
        xt = t_tr.features[t_tr.labels == c]
        for x in (xs, xt):
            np.testing.assert_allclose(x.mean(axis=0), centers[c], atol=0.1 * spec.cluster_std)
            np.testing.assert_allclose(x.std(axis=0), spec.cluster_std, rtol=0.05)


def test_shift_moves_target():
    spec = small_spec(n_train_per_class=2000)
    (s_tr, _), (t_tr, _) = gen_blobs(spec)
    theta = np.deg2rad(spec.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    expected = class_centers(spec)[0] @ rot.T + np.array(spec.translation)
    np.testing.assert_allclose(t_tr.features[t_tr.labels == 0].mean(axis=0), expected, atol=0.1)
    std = np.sqrt(spec.cluster_std**2 + spec.noise**2)
    np.testing.assert_allclose(t_tr.features[t_tr.labels == 0].std(axis=0), std, rtol=0.08)


def test_too_many_target_classes():
    with pytest.raises(ConfigError):
        gen_blobs(small_spec(n_target_classes=11))


def test_centers_distinct_and_interleaved():
    spec = small_spec()
    c = class_centers(spec)
    assert len({tuple(np.round(r, 9)) for r in c}) == 10
    angles = np.rad2deg(np.arctan2(c[:, 1], c[:, 0])) % 360
    np.testing.assert_allclose(angles[:5], [0, 72, 144, 216, 288], atol=1e-9)
    np.testing.assert_allclose(angles[5:], [36, 108, 180, 252, 324], atol=1e-9)


def test_task_bundle():
    task = make_blob_task(small_spec())
    assert task.n_classes == 10 and task.dim == 2
    np.testing.assert_allclose(task.true_target_distribution(), [0.2] * 5 + [0] * 5)


def test_dataset_validation():
    with pytest.raises(DataError):
        DomainDataset(np.ones((2, 2)), [0, 5], 3)
    with pytest.raises(DataError):
        DomainDataset(np.array([[np.nan, 1.0]]), None, 3)
    ds = DomainDataset(np.ones((2, 2)), [0, 1], 3)
    assert not ds.features.flags.writeable


# -- IDX -------------------------------------------------------------------------

PIXELS = np.array(
    [[[0, 255, 0], [128, 64, 32], [1, 2, 3]],
     [[255, 255, 255], [0, 0, 0], [10, 20, 30]]],
    dtype=np.uint8,
)


def _fixture(tmp_path, images=PIXELS, labels=(7, 3)):
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    write_idx(images, np.array(labels), ip, lp)
    return ip, lp


def test_idx_round_trip(tmp_path):
    ip, lp = _fixture(tmp_path)
    raw = ip.read_bytes()
    assert raw[:16] == struct.pack(">IIII", 0x803, 2, 3, 3)
    ds = load_idx(ip, lp, class_universe=10)
    assert ds.features.shape == (2, 9)
    np.testing.assert_allclose(ds.features[0], np.array([0, 255, 0, 128, 64, 32, 1, 2, 3]) / 255)
    np.testing.assert_allclose(ds.features[1, 3:6], 0.0)
    assert ds.labels.tolist() == [7, 3]
    assert ds.features.min() >= 0 and ds.features.max() <= 1


def test_idx_filter_keeps_original_labels(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(40, 2, 2), dtype=np.uint8)
    labels = np.arange(40) % 10
    ip, lp = _fixture(tmp_path, imgs, labels)
    ds = load_idx(ip, lp, keep_classes=range(5), class_universe=10)
    assert set(ds.labels.tolist()) == {0, 1, 2, 3, 4}
    assert len(ds) == 20
    assert len(load_idx(ip, lp)) == 40


def test_idx_bad_magic(tmp_path):
    ip, lp = _fixture(tmp_path)
    with pytest.raises(FormatError):
        load_idx(lp, lp)
    ip.write_bytes(b"\x00\x00\x08\x04" + ip.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_idx(ip, lp)


def test_idx_truncated(tmp_path):
    ip, lp = _fixture(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_idx(ip, lp)
    (tmp_path / "short").write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_idx(tmp_path / "short", lp)


def test_idx_count_mismatch(tmp_path):
    ip, _ = _fixture(tmp_path)
    lp = tmp_path / "l3.idx"
    lp.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(DataError):
        load_idx(ip, lp)


# -- batching ----------------------------------------------------------------------


def _domains(ns=300, nt=100):
    rng = np.random.default_rng(0)
    src = DomainDataset(np.arange(ns, dtype=float)[:, None], rng.integers(0, 3, ns), 3)
    tgt = DomainDataset(np.arange(nt, dtype=float)[:, None] + 10_000, None, 3)
    return src, tgt


def test_batch_sizes():
    src, tgt = _domains(1000, 300)
    batches = list(paired_batches(src, tgt, 128, seed=0, epoch=0))
    assert len(batches) == 8
    for xs, ys, xt in batches:
        assert len(xs) == len(ys) == len(xt) == 128


def test_epoch_covers_source_exactly_once_when_divisible():
    src, tgt = _domains(256, 50)
    seen = np.concatenate([xs[:, 0] for xs, _, _ in paired_batches(src, tgt, 32, 1, 0)])
    assert sorted(seen.tolist()) == list(range(256))


def test_epoch_covers_source_with_top_up():
    src, tgt = _domains(300, 200)
    seen = np.concatenate([xs[:, 0] for xs, _, _ in paired_batches(src, tgt, 128, 1, 0)])
    assert len(seen) == 384
    assert set(seen.tolist()) == set(range(300))
    counts = np.bincount(seen.astype(int))
    assert counts.max() == 2 and (counts == 2).sum() == 84


def test_target_recycles():
    src, tgt = _domains(300, 50)
    xts = [xt[:, 0] for _, _, xt in paired_batches(src, tgt, 40, 1, 0)]
    assert len(xts) == 8
    assert set(np.concatenate(xts).tolist()) == set(range(10_000, 10_050))


def test_batches_deterministic_and_epoch_dependent():
    src, tgt = _domains()
    run = lambda e: [b[0].tobytes() + b[2].tobytes() for b in paired_batches(src, tgt, 64, 3, e)]  # noqa: E731
    assert run(0) == run(0)
    assert run(0) != run(1)


def test_batch_too_large():
    src, tgt = _domains(300, 50)
    with pytest.raises(ConfigError):
        list(paired_batches(src, tgt, 64, 0, 0))
    with pytest.raises(ConfigError):
        list(source_batches(src, 301, 0, 0))


def test_source_batches_share_epoch_permutation():
    src, tgt = _domains(256, 256)
    a = [xs.tobytes() for xs, _ in source_batches(src, 64, 5, 2)]
    b = [xs.tobytes() for xs, _, _ in paired_batches(src, tgt, 64, 5, 2)]
    assert a == b


def test_idx_resize_nearest(tmp_path):
    imgs = np.arange(16, dtype=np.uint8).reshape(1, 4, 4) * 10
    ip, lp = _fixture(tmp_path, imgs, (1,))
    ds = load_idx(ip, lp, size=(2, 2))
    np.testing.assert_allclose(ds.features[0] * 255, [50, 70, 130, 150])
    assert load_idx(ip, lp, size=(4, 4)).features.shape == (1, 16)
