"""Confidence masks, median thresholds and pseudo-label selection."""

import numpy as np
import pytest

from semalign.containers import IGNORE_ID
from semalign.pseudo import (
    downsample_labels,
    median_thresholds,
    pseudo_labels,
    self_supervised_loss,
    target_mask,
)
from semalign.seglosses import NoValidPixelsError, cross_entropy


def logits_for_confidences(confs):
    """1 x n x 2 logits whose class-0 max-softmax confidence is confs."""
    confs = np.asarray(confs, dtype=np.float64)
    return np.stack([np.log(confs), np.log(1.0 - confs)], axis=-1)[None, :, :]


class TestDownsampleLabels:
    def test_identity_at_same_size(self):
        labels = np.arange(12).reshape(3, 4)
        np.testing.assert_array_equal(downsample_labels(labels, 3, 4), labels)

    def test_constant_map_any_size(self):
        labels = np.full((8, 8), 3)
        np.testing.assert_array_equal(downsample_labels(labels, 2, 5), np.full((2, 5), 3))

    def test_checkerboard_matches_index_arithmetic(self):
        labels = np.fromfunction(lambda i, j: (i + j) % 2, (4, 4), dtype=int)
        got = downsample_labels(labels, 2, 2)
        expected = np.array(
            [[labels[(r * 4) // 2, (c * 4) // 2] for c in range(2)] for r in range(2)]
        )
        np.testing.assert_array_equal(got, expected)

    def test_ignore_propagates(self):
        labels = np.full((4, 4), IGNORE_ID)
        labels[0, 0] = 1
        got = downsample_labels(labels, 2, 2)
        assert got[0, 0] == 1
        assert np.all(got.reshape(-1)[1:] == IGNORE_ID)

    def test_idempotent(self):
        rng = np.random.default_rng(50)
        labels = rng.integers(0, 5, size=(9, 7))
        once = downsample_labels(labels, 4, 3)
        np.testing.assert_array_equal(downsample_labels(once, 4, 3), once)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            downsample_labels(np.zeros((4, 4), dtype=int), 5, 4)


class TestTargetMask:
    def test_confident_pixel_accepted(self):
        logits = logits_for_confidences([0.95])
        mask = target_mask(logits, 0.9)
        assert mask.labels[0, 0] == 0

    def test_unconfident_pixel_ignored(self):
        logits = logits_for_confidences([0.6])
        assert target_mask(logits, 0.9).labels[0, 0] == IGNORE_ID

    def test_zero_threshold_labels_everything(self):
        rng = np.random.default_rng(51)
        logits = rng.standard_normal((5, 5, 4))
        mask = target_mask(logits, 0.0)
        np.testing.assert_array_equal(mask.labels, logits.argmax(axis=-1))

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(52)
        logits = rng.standard_normal((6, 6, 3))
        accepted = [np.sum(target_mask(logits, d).labels != IGNORE_ID) for d in (0.0, 0.4, 0.6, 0.9)]
        assert accepted == sorted(accepted, reverse=True)

    def test_invalid_delta(self):
        with pytest.raises(ValueError):
            target_mask(np.zeros((1, 1, 2)), 1.5)


class TestMedianThresholds:
    def test_even_count_mean_of_middle(self):
        logits = logits_for_confidences([0.5, 0.6, 0.7, 0.8])
        thresholds = median_thresholds([logits], 2)
        assert thresholds[0] == pytest.approx(0.65, abs=1e-12)
        assert thresholds[1] == np.inf

    def test_all_equal_selects_everything(self):
        logits = logits_for_confidences([0.7, 0.7, 0.7])
        thresholds = median_thresholds([logits], 2)
        mask = pseudo_labels(logits, thresholds)
        assert np.all(mask.labels == 0)

    def test_never_predicted_class_gets_no_labels(self):
        logits = logits_for_confidences([0.9, 0.8])
        thresholds = median_thresholds([logits], 2)
        mask = pseudo_labels(logits, thresholds)
        assert not np.any(mask.labels == 1)

    def test_streams_over_multiple_maps(self):
        a = logits_for_confidences([0.5, 0.6])
        b = logits_for_confidences([0.7, 0.8])
        together = median_thresholds([a, b], 2)
        single = median_thresholds([logits_for_confidences([0.5, 0.6, 0.7, 0.8])], 2)
        assert together[0] == single[0]


class TestPseudoLabels:
    def test_half_selected_with_tie_free_confidences(self):
        rng = np.random.default_rng(53)
        for _ in range(10):
            k = int(rng.integers(2, 5))
            logits = rng.standard_normal((8, 8, k)) * 2.0
            thresholds = median_thresholds([logits], k)
            mask = pseudo_labels(logits, thresholds)
            arg = logits.argmax(axis=-1)
            for c in range(k):
                n_c = int(np.sum(arg == c))
                if n_c == 0:
                    continue
                selected = int(np.sum(mask.labels == c))
                assert selected == -(-n_c // 2)  # ceil(n_c / 2)

    def test_threshold_shape_checked(self):
        with pytest.raises(ValueError):
            pseudo_labels(np.zeros((2, 2, 3)), np.zeros(2))


class TestSelfSupervisedLoss:
    def test_all_ignored_raises(self):
        with pytest.raises(NoValidPixelsError):
            self_supervised_loss(np.zeros((2, 2, 3)), np.full((2, 2), IGNORE_ID))

    def test_self_consistent_labels_small_loss(self):
        rng = np.random.default_rng(54)
        logits = rng.standard_normal((4, 4, 3))
        winners = logits.argmax(axis=-1)
        np.put_along_axis(logits, winners[..., None], 30.0, axis=-1)
        value, _ = self_supervised_loss(logits, winners.astype(np.int32))
        assert value < 1e-6

    def test_matches_cross_entropy(self):
        rng = np.random.default_rng(55)
        logits = rng.standard_normal((3, 3, 4))
        labels = rng.integers(0, 4, size=(3, 3)).astype(np.int32)
        labels[2, 2] = IGNORE_ID
        v1, g1 = self_supervised_loss(logits, labels)
        v2, g2 = cross_entropy(logits, labels)
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)
