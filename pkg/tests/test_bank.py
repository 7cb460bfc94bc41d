"""Streaming per-class statistics: batch stats, exact merges, checkpoints."""

import numpy as np
import pytest

from semalign.bank import ClassStats, DistributionBank, batch_stats, merge
from semalign.containers import IGNORE_ID


def brute_population_stats(x):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    cov = np.zeros((x.shape[1], x.shape[1]))
    for row in x:
        d = row - mu
        cov += np.outer(d, d)
    return x.shape[0], mu, cov / x.shape[0]


class TestBatchStats:
    def test_square_of_four(self):
        m, mu, cov = batch_stats([(0, 0), (2, 0), (0, 2), (2, 2)])
        assert m == 4
        np.testing.assert_array_equal(mu, [1.0, 1.0])
        np.testing.assert_array_equal(cov, np.eye(2))

    def test_single_pixel(self):
        m, mu, cov = batch_stats([(3.0, -1.0)])
        assert m == 1
        np.testing.assert_array_equal(mu, [3.0, -1.0])
        np.testing.assert_array_equal(cov, np.zeros((2, 2)))

    def test_identical_pixels_zero_cov(self):
        m, mu, cov = batch_stats([(1.0, 2.0)] * 7)
        np.testing.assert_array_equal(cov, np.zeros((2, 2)))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((37, 5))
        m, mu, cov = batch_stats(x)
        bm, bmu, bcov = brute_population_stats(x)
        assert m == bm
        np.testing.assert_allclose(mu, bmu, atol=1e-14)
        np.testing.assert_allclose(cov, bcov, atol=1e-13)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            batch_stats(np.empty((0, 3)))


class TestMerge:
    def test_empty_prior_copies_batch(self):
        m, mu, cov = batch_stats(np.random.default_rng(0).standard_normal((5, 3)))
        out = merge(ClassStats.empty(3), m, mu, cov)
        assert out.count == m
        np.testing.assert_array_equal(out.mean, mu)
        np.testing.assert_array_equal(out.cov, cov)

    def test_mean_arithmetic(self):
        prior = ClassStats(2, np.zeros(2), np.zeros((2, 2)))
        out = merge(prior, 2, np.array([2.0, 2.0]), np.zeros((2, 2)))
        np.testing.assert_array_equal(out.mean, [1.0, 1.0])

    def test_two_stage_equals_batch(self):
        pts = np.array([(0, 0), (2, 0), (0, 2), (2, 2)], dtype=np.float64)
        stats = merge(ClassStats.empty(2), *batch_stats(pts[:2]))
        stats = merge(stats, *batch_stats(pts[2:]))
        m, mu, cov = batch_stats(pts)
        assert stats.count == m
        np.testing.assert_allclose(stats.mean, mu, atol=1e-15)
        np.testing.assert_allclose(stats.cov, cov, atol=1e-15)

    def test_merge_order_independent(self):
        rng = np.random.default_rng(11)
        chunks = [rng.standard_normal((rng.integers(1, 20), 4)) for _ in range(6)]
        full = np.concatenate(chunks)
        orders = [range(6), reversed(range(6)), (3, 0, 5, 1, 4, 2)]
        results = []
        for order in orders:
            st = ClassStats.empty(4)
            for i in order:
                st = merge(st, *batch_stats(chunks[i]))
            results.append(st)
        _, mu, cov = batch_stats(full)
        for st in results:
            assert st.count == full.shape[0]
            np.testing.assert_allclose(st.mean, mu, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(st.cov, cov, rtol=1e-8, atol=1e-12)

    def test_symmetry_preserved(self):
        rng = np.random.default_rng(12)
        st = ClassStats.empty(3)
        for _ in range(10):
            st = merge(st, *batch_stats(rng.standard_normal((8, 3))))
            np.testing.assert_array_equal(st.cov, st.cov.T)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            merge(ClassStats.empty(3), 1, np.zeros(2), np.zeros((2, 2)))


def random_labelled_images(rng, n_images, h, w, d, k):
    images = []
    for _ in range(n_images):
        feats = rng.standard_normal((h, w, d))
        labels = rng.integers(0, k, size=(h, w)).astype(np.int32)
        labels[rng.random((h, w)) < 0.1] = IGNORE_ID
        images.append((feats, labels))
    return images


class TestBank:
    def test_replay_equals_init(self):
        rng = np.random.default_rng(13)
        images = random_labelled_images(rng, 5, 6, 6, 3, 4)
        a = DistributionBank(3, 4).init_from_dataset(images)
        b = DistributionBank(3, 4)
        for feats, labels in images:
            b.update_with_image(feats, labels)
        for k in range(4):
            assert a.stats(k).count == b.stats(k).count
            np.testing.assert_array_equal(a.stats(k).mean, b.stats(k).mean)
            np.testing.assert_array_equal(a.stats(k).cov, b.stats(k).cov)

    def test_streaming_matches_whole_dataset(self):
        rng = np.random.default_rng(14)
        images = random_labelled_images(rng, 6, 8, 8, 4, 3)
        bank = DistributionBank(4, 3).init_from_dataset(images)
        for k in range(3):
            pixels = np.concatenate(
                [f.reshape(-1, 4)[l.reshape(-1) == k] for f, l in images]
            )
            m, mu, cov = batch_stats(pixels)
            assert bank.stats(k).count == m
            np.testing.assert_allclose(bank.stats(k).mean, mu, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(bank.stats(k).cov, cov, rtol=1e-9, atol=1e-12)

    def test_absent_class_untouched(self):
        bank = DistributionBank(2, 3)
        feats = np.ones((4, 4, 2))
        labels = np.zeros((4, 4), dtype=np.int32)  # only class 0 present
        bank.update_with_image(feats, labels)
        assert bank.stats(0).count == 16
        assert not bank.stats(1).initialized
        assert not bank.stats(2).initialized

    def test_single_class_image_counts(self):
        bank = DistributionBank(2, 2)
        feats = np.random.default_rng(15).standard_normal((5, 5, 2))
        labels = np.ones((5, 5), dtype=np.int32)
        bank.update_with_image(feats, labels)
        bank.update_with_image(feats, labels)
        assert bank.stats(1).count == 50
        assert bank.stats(0).count == 0

    def test_count_conservation(self):
        rng = np.random.default_rng(16)
        images = random_labelled_images(rng, 4, 7, 7, 2, 4)
        bank = DistributionBank(2, 4).init_from_dataset(images)
        expected = sum(int(np.sum(l != IGNORE_ID)) for _, l in images)
        assert bank.total_count == expected

    def test_snapshot_frozen_during_updates(self):
        rng = np.random.default_rng(17)
        bank = DistributionBank(2, 2)
        bank.update_with_image(rng.standard_normal((3, 3, 2)), np.zeros((3, 3), dtype=int))
        snap = bank.snapshot()
        before = snap.stats(0).mean.copy()
        bank.update_with_image(rng.standard_normal((3, 3, 2)) + 5.0, np.zeros((3, 3), dtype=int))
        np.testing.assert_array_equal(snap.stats(0).mean, before)
        assert bank.stats(0).count == 18 and snap.stats(0).count == 9

    def test_diag_only_mode(self):
        rng = np.random.default_rng(18)
        bank = DistributionBank(3, 2, diag_only=True)
        bank.update_with_image(rng.standard_normal((6, 6, 3)), np.zeros((6, 6), dtype=int))
        cov = bank.stats(0).cov
        assert np.all(cov == np.diag(np.diag(cov)))

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(19)
        images = random_labelled_images(rng, 3, 6, 6, 3, 3)
        bank = DistributionBank(3, 3, space_tag="output").init_from_dataset(images)
        path = tmp_path / "bank.ckpt"
        bank.save(path)
        loaded = DistributionBank.load(path)
        assert loaded.space_tag == "output" and loaded.dim == 3
        for k in range(3):
            assert loaded.stats(k).count == bank.stats(k).count
            np.testing.assert_array_equal(loaded.stats(k).mean, bank.stats(k).mean)
            np.testing.assert_array_equal(loaded.stats(k).cov, bank.stats(k).cov)
        loaded.save(tmp_path / "bank2.ckpt")
        assert (tmp_path / "bank.ckpt").read_bytes() == (tmp_path / "bank2.ckpt").read_bytes()
