"""Evaluation harness: training fresh nets on candidate sets, the random
baseline, and report comparison."""

import numpy as np
import pytest

from stmdistill import autodiff as ad
from stmdistill import evaluate, nets
from stmdistill.curate import TEST, TRAIN, LabeledDataset
from stmdistill.distill import SyntheticDataset
from stmdistill.errors import DataError, ShapeError

ARCH = nets.ArchDescriptor(1, 4, (1, 8, 8), 2, "none")


def bright_dark(n_per, seed=0, lo=0.15, hi=0.85):
    """Trivially separable candidate images: class 0 dark, class 1 bright."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dark = rng.uniform(0.0, lo, size=(n_per, 1, 8, 8)).astype(np.float32)
    bright = rng.uniform(hi, 1.0, size=(n_per, 1, 8, 8)).astype(np.float32)
    images = np.concatenate([dark, bright])
    labels = np.repeat(np.array([0, 1], dtype=np.int32), n_per)
    return images, labels


TEST_IMAGES, TEST_LABELS = bright_dark(20, seed=99)


def syn_candidate(alpha=0.1, seed=1):
    images, labels = bright_dark(2, seed=seed)
    return SyntheticDataset(ad.Tensor(images), labels, alpha)


def test_evaluate_learns_separable_candidate():
    rep = evaluate.evaluate(syn_candidate(), TEST_IMAGES, TEST_LABELS, ARCH, 3,
                            evaluate.TrainConfig(epochs=60), seed=0)
    assert rep.mean >= 0.95
    assert rep.n_nets == 3 and len(rep.accuracies) == 3
    assert rep.diverged == ()
    assert rep.lr_used == pytest.approx(0.1)  # lr=None pulled the learned alpha


def test_evaluate_is_deterministic():
    cfg = evaluate.TrainConfig(epochs=30)
    a = evaluate.evaluate(syn_candidate(), TEST_IMAGES, TEST_LABELS, ARCH, 2, cfg, seed=5)
    b = evaluate.evaluate(syn_candidate(), TEST_IMAGES, TEST_LABELS, ARCH, 2, cfg, seed=5)
    assert a.accuracies == b.accuracies
    assert a.fingerprint == b.fingerprint


def test_evaluate_explicit_lr_overrides_alpha():
    rep = evaluate.evaluate(syn_candidate(alpha=0.1), TEST_IMAGES, TEST_LABELS,
                            ARCH, 1, evaluate.TrainConfig(epochs=5, lr=0.03), seed=0)
    assert rep.lr_used == pytest.approx(0.03)


def test_evaluate_real_subset_uses_train_rows_only():
    # non-train rows carry inverted labels; high accuracy proves they were
    # never trained on
    images, labels = bright_dark(6, seed=2)
    poison_images, poison_labels = bright_dark(4, seed=3)
    ds = LabeledDataset(
        np.concatenate([images, poison_images]),
        np.concatenate([labels, 1 - poison_labels]),
        np.ones(20, dtype=np.float32),
        np.concatenate([np.full(12, TRAIN, np.uint8), np.full(8, TEST, np.uint8)]))
    rep = evaluate.evaluate(ds, TEST_IMAGES, TEST_LABELS, ARCH, 2,
                            evaluate.TrainConfig(epochs=60, lr=0.1), seed=0)
    assert rep.mean >= 0.95


def test_evaluate_real_subset_needs_explicit_lr():
    images, labels = bright_dark(4)
    ds = LabeledDataset(images, labels, np.ones(8, np.float32),
                        np.full(8, TRAIN, np.uint8))
    with pytest.raises(DataError, match="step size"):
        evaluate.evaluate(ds, TEST_IMAGES, TEST_LABELS, ARCH, 1,
                          evaluate.TrainConfig(epochs=5), seed=0)


def test_evaluate_flags_divergence_but_still_scores():
    # a step size beyond float32 range overflows the weights immediately
    with np.errstate(over="ignore", invalid="ignore"):
        rep = evaluate.evaluate(syn_candidate(alpha=1e30), TEST_IMAGES,
                                TEST_LABELS, ARCH, 2,
                                evaluate.TrainConfig(epochs=10), seed=0)
    assert rep.diverged != ()
    assert len(rep.accuracies) == 2  # scored from last finite weights
    assert all(np.isfinite(a) for a in rep.accuracies)


def test_evaluate_rejections():
    cfg = evaluate.TrainConfig(epochs=1)
    with pytest.raises(DataError):
        evaluate.evaluate(syn_candidate(), np.zeros((0, 1, 8, 8), np.float32),
                          np.zeros(0, np.int32), ARCH, 1, cfg)
    with pytest.raises(ShapeError):
        evaluate.evaluate(syn_candidate(), np.zeros((4, 1, 5, 5), np.float32),
                          np.zeros(4, np.int32), ARCH, 1, cfg)
    with pytest.raises(DataError):
        evaluate.evaluate(syn_candidate(), TEST_IMAGES, TEST_LABELS, ARCH, 0, cfg)
    with pytest.raises(DataError):
        evaluate.evaluate("nonsense", TEST_IMAGES, TEST_LABELS, ARCH, 1, cfg)


# ---------------------------------------------------------------------------
# random baseline


def full_labeled(n_per=10, seed=0):
    images, labels = bright_dark(n_per, seed=seed)
    split = np.full(2 * n_per, TRAIN, np.uint8)
    split[::5] = TEST  # a few test rows the baseline must never pick
    return LabeledDataset(images, labels, np.ones(2 * n_per, np.float32), split)


def test_random_baseline_picks_from_train_split():
    ds = full_labeled()
    sub = evaluate.random_baseline(ds, 2, seed=4)
    assert sub.n == 4
    assert sub.labels.tolist() == [0, 0, 1, 1]
    assert (sub.split == TRAIN).all()
    train = ds.select(ds.split == TRAIN)
    for i in range(sub.n):
        rows = train.images[train.labels == sub.labels[i]]
        assert any(np.array_equal(sub.images[i], r) for r in rows)


def test_random_baseline_seeded():
    ds = full_labeled()
    a = evaluate.random_baseline(ds, 1, seed=0)
    b = evaluate.random_baseline(ds, 1, seed=0)
    c = evaluate.random_baseline(ds, 1, seed=3)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_random_baseline_rejections():
    ds = full_labeled(n_per=3)
    with pytest.raises(DataError):
        evaluate.random_baseline(ds, 0, seed=0)
    with pytest.raises(DataError, match="class"):
        evaluate.random_baseline(ds, 50, seed=0)


# ---------------------------------------------------------------------------
# comparison


def test_compare_reports_gap_and_winner():
    cfg = evaluate.TrainConfig(epochs=60)
    good = evaluate.evaluate(syn_candidate(), TEST_IMAGES, TEST_LABELS, ARCH, 2, cfg, seed=0)
    noise = SyntheticDataset(
        ad.Tensor(np.random.default_rng(0).uniform(0.4, 0.6, (4, 1, 8, 8)).astype(np.float32)),
        np.array([0, 0, 1, 1], np.int32), 0.1)
    weak = evaluate.evaluate(noise, TEST_IMAGES, TEST_LABELS, ARCH, 2, cfg, seed=0)
    cmpn = evaluate.compare(good, weak)
    assert cmpn.values["gap"] == pytest.approx(good.mean - weak.mean)
    assert "gap" in cmpn.text and "distilled" in cmpn.text
    assert cmpn.distilled_wins == (cmpn.values["gap"] > good.std + weak.std)


def test_compare_allows_per_candidate_step_size():
    # same protocol, different lr: the step size belongs to the candidate
    distilled = evaluate.evaluate(syn_candidate(alpha=0.08), TEST_IMAGES, TEST_LABELS,
                                  ARCH, 1, evaluate.TrainConfig(epochs=20), seed=0)
    ds = full_labeled()
    baseline = evaluate.evaluate(ds, TEST_IMAGES, TEST_LABELS, ARCH, 1,
                                 evaluate.TrainConfig(epochs=20, lr=0.05), seed=0)
    cmpn = evaluate.compare(distilled, baseline)
    assert "gap" in cmpn.values


def test_compare_rejects_protocol_mismatch():
    a = evaluate.evaluate(syn_candidate(), TEST_IMAGES, TEST_LABELS, ARCH, 1,
                          evaluate.TrainConfig(epochs=5), seed=0)
    b = evaluate.evaluate(syn_candidate(), TEST_IMAGES, TEST_LABELS, ARCH, 1,
                          evaluate.TrainConfig(epochs=6), seed=0)
    with pytest.raises(DataError, match="fingerprint"):
        evaluate.compare(a, b)


def test_compare_includes_full_reference():
    cfg = evaluate.TrainConfig(epochs=30)
    d = evaluate.evaluate(syn_candidate(), TEST_IMAGES, TEST_LABELS, ARCH, 1, cfg, seed=0)
    r = evaluate.evaluate(syn_candidate(seed=7), TEST_IMAGES, TEST_LABELS, ARCH, 1, cfg, seed=0)
    f = evaluate.evaluate(syn_candidate(seed=8), TEST_IMAGES, TEST_LABELS, ARCH, 1, cfg, seed=0)
    cmpn = evaluate.compare(d, r, full=f)
    assert "full" in cmpn.text
    assert cmpn.values["full_mean"] == pytest.approx(f.mean)


def test_report_row_is_percentage():
    rep = evaluate.evaluate(syn_candidate(), TEST_IMAGES, TEST_LABELS, ARCH, 1,
                            evaluate.TrainConfig(epochs=40), seed=0)
    row = rep.row("distilled")
    assert "distilled" in row and "+/-" in row
    assert f"{rep.mean * 100:.2f}" in row
