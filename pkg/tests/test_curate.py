"""Curation, rotation augmentation, the toy generator, and dataset files."""

import numpy as np
import pytest

from stmdistill import curate
from stmdistill.curate import TEST, TRAIN, UNSPLIT, LabeledDataset
from stmdistill.errors import (BadMagicError, DataError, ShapeError,
                               TruncatedFileError, VersionError)


def toy(images, labels, conf=None, split=None):
    n = len(labels)
    if conf is None:
        conf = np.ones(n, dtype=np.float32)
    if split is None:
        split = np.full(n, UNSPLIT, dtype=np.uint8)
    return LabeledDataset(np.asarray(images, dtype=np.float32),
                          np.asarray(labels, dtype=np.int32), conf, split)


def indexed_images(n, size=4):
    """Distinct constant images: image i is filled with i / n."""
    vals = np.arange(n, dtype=np.float32) / n
    return np.broadcast_to(vals[:, None, None, None], (n, 1, size, size)).copy()


# ---------------------------------------------------------------------------
# container validation


def test_dataset_validation():
    good = indexed_images(3)
    toy(good, [0, 1, 2])
    with pytest.raises(DataError):
        toy(good + 2.0, [0, 1, 2])  # pixels out of range
    with pytest.raises(DataError):
        toy(good, [0, -1, 2])
    with pytest.raises(DataError):
        toy(good, [0, 1, 2], conf=np.array([0.5, 1.5, 0.5], np.float32))
    with pytest.raises(DataError):
        toy(good, [0, 1, 2], split=np.array([0, 1, 7], np.uint8))
    with pytest.raises(ShapeError):
        toy(good, [0, 1])
    with pytest.raises(ShapeError):
        LabeledDataset(np.zeros((2, 4, 4), np.float32), np.zeros(2, np.int32),
                       np.ones(2, np.float32), np.zeros(2, np.uint8))


def test_dataset_part_selects_by_tag():
    ds = toy(indexed_images(4), [0, 0, 1, 1],
             split=np.array([TRAIN, TEST, TRAIN, TEST], np.uint8))
    assert ds.part("train").n == 2
    assert ds.part("test").labels.tolist() == [0, 1]
    with pytest.raises(DataError):
        ds.part("validation")


# ---------------------------------------------------------------------------
# top-k curation


def test_curate_sort_oracle():
    # class 0 confidences {0.9, 0.5, 0.1}: top-2 keeps the 0.9 and 0.5 images
    imgs = indexed_images(3)
    ds = toy(imgs, [0, 0, 0], conf=np.array([0.5, 0.9, 0.1], np.float32))
    out = curate.curate_topk(ds, 2, 1, seed=0)
    assert out.n == 2
    # ranked by descending confidence within the class
    assert out.confidence.tolist() == pytest.approx([0.9, 0.5])


def test_curate_tie_break_is_stable():
    imgs = indexed_images(4)
    ds = toy(imgs, [0, 0, 0, 0], conf=np.full(4, 0.7, np.float32))
    out = curate.curate_topk(ds, 2, 1, seed=0)
    # equal confidence: first two by original order survive
    assert np.array_equal(out.images, imgs[:2])
    assert float(out.confidence.mean()) == pytest.approx(float(ds.confidence.mean()))


def test_curate_split_counts_per_class():
    rng = np.random.Generator(np.random.PCG64(0))
    n = 40
    ds = toy(rng.uniform(0, 1, (n, 1, 4, 4)).astype(np.float32),
             np.repeat([0, 1], n // 2),
             conf=rng.uniform(0, 1, n).astype(np.float32))
    out = curate.curate_topk(ds, 10, 7, seed=3)
    assert out.n == 20
    for cls in (0, 1):
        m = out.labels == cls
        assert m.sum() == 10
        assert (out.split[m] == TRAIN).sum() == 7
        assert (out.split[m] == TEST).sum() == 3
    # class-major output
    assert out.labels.tolist() == [0] * 10 + [1] * 10


def test_curate_mean_confidence_rises():
    rng = np.random.Generator(np.random.PCG64(1))
    ds = toy(rng.uniform(0, 1, (60, 1, 4, 4)).astype(np.float32),
             np.repeat([0, 1, 2], 20),
             conf=rng.uniform(0, 1, 60).astype(np.float32))
    out = curate.curate_topk(ds, 8, 5, seed=0)
    assert float(out.confidence.mean()) > float(ds.confidence.mean())


def test_curate_split_is_seeded():
    rng = np.random.Generator(np.random.PCG64(2))
    ds = toy(rng.uniform(0, 1, (30, 1, 4, 4)).astype(np.float32),
             np.zeros(30, np.int32), conf=rng.uniform(0, 1, 30).astype(np.float32))
    a = curate.curate_topk(ds, 20, 10, seed=5)
    b = curate.curate_topk(ds, 20, 10, seed=5)
    c = curate.curate_topk(ds, 20, 10, seed=6)
    assert np.array_equal(a.split, b.split)
    assert not np.array_equal(a.split, c.split)


def test_curate_rejections():
    ds = toy(indexed_images(6), [0, 0, 0, 0, 1, 1])
    with pytest.raises(DataError, match="class 1 has 2"):
        curate.curate_topk(ds, 3, 2, seed=0)
    with pytest.raises(DataError):
        curate.curate_topk(ds, 2, 2, seed=0)  # train must be < k


# ---------------------------------------------------------------------------
# rotation augmentation


def test_rotate_full_turn_returns_originals():
    rng = np.random.Generator(np.random.PCG64(3))
    base = curate._blur3(rng.uniform(0, 0.9, (4, 8, 8)), passes=2)[:, None].astype(np.float32)
    ds = toy(base, [0, 0, 1, 1], split=np.full(4, TRAIN, np.uint8))
    out = curate.rotate_augment(ds, 360.0, 1)
    assert out.n == 4
    assert np.max(np.abs(out.images - ds.images)) < 1e-3


def test_rotate_radially_symmetric_blob_is_invariant():
    size = 32
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2.0
    # compactly supported smooth disk: zero well inside the border, so no
    # rotation ever mixes fill values into the comparison
    u = np.clip(np.sqrt((yy - c) ** 2 + (xx - c) ** 2) / 14.0, 0.0, 1.0)
    blob = (0.85 * (1.0 - u**2) ** 3).astype(np.float32)[None, None]
    ds = toy(blob, [0], split=np.array([TRAIN], np.uint8))
    out = curate.rotate_augment(ds, 36.0, 10)
    assert out.n == 10
    spread = out.images.max(axis=0) - out.images.min(axis=0)
    assert float(spread.max()) < 1e-2  # all ten rotations agree per pixel


def test_rotate_counts_and_image_major_order():
    ds = toy(indexed_images(2, size=8), [3, 5],
             conf=np.array([0.2, 0.8], np.float32),
             split=np.full(2, TRAIN, np.uint8))
    out = curate.rotate_augment(ds, 90.0, 3)
    assert out.n == 6
    assert out.labels.tolist() == [3, 3, 3, 5, 5, 5]
    assert out.confidence.tolist() == pytest.approx([0.2] * 3 + [0.8] * 3)
    # constant images are rotation-invariant up to border fill; centers match
    assert out.images[0, 0, 4, 4] == pytest.approx(ds.images[0, 0, 4, 4], abs=1e-5)


def test_rotate_refuses_test_rows():
    ds = toy(indexed_images(3), [0, 1, 2],
             split=np.array([TRAIN, TEST, TRAIN], np.uint8))
    with pytest.raises(DataError, match="index 1"):
        curate.rotate_augment(ds, 36.0, 10)


def test_rotate_rejections():
    ds = toy(indexed_images(2), [0, 1], split=np.full(2, TRAIN, np.uint8))
    with pytest.raises(DataError):
        curate.rotate_augment(ds, 36.0, 0)


# ---------------------------------------------------------------------------
# catalog-scale arithmetic (the 600 -> 500/100 x9 recipe, x10 rotations)


def test_curation_pipeline_arithmetic():
    spec = curate.GeneratorSpec(size=16, classes=9, noise=0.05)
    full = curate.generate_synthetic(spec, per_class=600, seed=0)
    assert full.n == 5400
    cur = curate.curate_topk(full, 600, 500, seed=1)
    train, test = cur.part("train"), cur.part("test")
    assert train.n == 4500
    assert test.n == 900
    aug = curate.rotate_augment(train, 36.0, 10)
    assert aug.n == 45000
    assert test.classes == 9


# ---------------------------------------------------------------------------
# toy generator


def test_generator_deterministic_and_in_range():
    spec = curate.GeneratorSpec(size=16, classes=4, noise=0.05)
    a = curate.generate_synthetic(spec, per_class=10, seed=7)
    b = curate.generate_synthetic(spec, per_class=10, seed=7)
    c = curate.generate_synthetic(spec, per_class=10, seed=8)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.confidence, b.confidence)
    assert not np.array_equal(a.images, c.images)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert a.labels.tolist() == sorted(a.labels.tolist())  # class-major
    assert a.confidence.std() > 0  # confidence model is not constant


def test_generator_classes_are_distinct():
    spec = curate.GeneratorSpec(size=16, classes=9, noise=0.0)
    ds = curate.generate_synthetic(spec, per_class=6, seed=0)
    means = [ds.images[ds.labels == c].mean(axis=0).ravel() for c in range(9)]
    # every pair of class-mean images differs visibly
    for i in range(9):
        for j in range(i + 1, 9):
            assert np.abs(means[i] - means[j]).max() > 0.02, (i, j)


def test_generator_spec_validation():
    with pytest.raises(DataError):
        curate.GeneratorSpec(size=24, classes=4, noise=0.05)
    with pytest.raises(DataError):
        curate.GeneratorSpec(size=16, classes=1, noise=0.05)
    with pytest.raises(DataError):
        curate.GeneratorSpec(size=16, classes=4, noise=0.8)


# ---------------------------------------------------------------------------
# dataset files


def test_dataset_roundtrip_bitwise(tmp_path):
    spec = curate.GeneratorSpec(size=16, classes=3, noise=0.05)
    ds = curate.generate_synthetic(spec, per_class=5, seed=2)
    ds = curate.curate_topk(ds, 4, 3, seed=0)
    path = str(tmp_path / "d.stmd")
    curate.save_dataset(ds, path)
    back = curate.load_dataset(path)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.confidence, ds.confidence)
    assert np.array_equal(back.split, ds.split)


def test_dataset_corruption_detected(tmp_path):
    ds = toy(indexed_images(3), [0, 1, 2])
    path = tmp_path / "d.stmd"
    curate.save_dataset(ds, str(path))
    raw = bytearray(path.read_bytes())

    bad = tmp_path / "m.stmd"
    bad.write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(BadMagicError):
        curate.load_dataset(str(bad))

    bad = tmp_path / "v.stmd"
    bad.write_bytes(raw[:4] + (3).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionError):
        curate.load_dataset(str(bad))

    bad = tmp_path / "t.stmd"
    bad.write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        curate.load_dataset(str(bad))

    bad = tmp_path / "e.stmd"
    bad.write_bytes(raw + b"\x99")
    with pytest.raises(TruncatedFileError, match="trailing"):
        curate.load_dataset(str(bad))


def test_import_image_dir(tmp_path):
    from PIL import Image

    rng = np.random.Generator(np.random.PCG64(0))
    for i in range(3):
        a = (rng.uniform(0, 255, (8, 8))).astype(np.uint8)
        Image.fromarray(a, mode="L").save(tmp_path / f"img{i}.png")
    csv_path = tmp_path / "labels.csv"
    csv_path.write_text("filename,label,confidence\n"
                        "img0.png,0,0.9\n"
                        "# a comment line\n"
                        "img1.png,1,0.5\n"
                        "img2.png,0,1.0\n")
    ds = curate.import_image_dir(str(tmp_path), str(csv_path))
    assert ds.n == 3
    assert ds.images.shape == (3, 1, 8, 8)
    assert ds.labels.tolist() == [0, 1, 0]
    assert ds.confidence.tolist() == pytest.approx([0.9, 0.5, 1.0])
    assert (ds.split == UNSPLIT).all()


def test_import_image_dir_rejects_mixed_shapes(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((8, 8), np.uint8), mode="L").save(tmp_path / "a.png")
    Image.fromarray(np.zeros((9, 9), np.uint8), mode="L").save(tmp_path / "b.png")
    csv_path = tmp_path / "l.csv"
    csv_path.write_text("a.png,0,1.0\nb.png,1,1.0\n")
    with pytest.raises(DataError, match="b.png"):
        curate.import_image_dir(str(tmp_path), str(csv_path))
    csv_path.write_text("a.png,0,1.0\nmissing.png,1,1.0\n")
    with pytest.raises(DataError, match="missing.png"):
        curate.import_image_dir(str(tmp_path), str(csv_path))
