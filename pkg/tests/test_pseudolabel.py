"""Confidence-gated ensemble labeling and its tie policies."""

import numpy as np
import pytest

from conda_adapt.pseudolabel import (EmptyBatchError, PredictorLogits,
                                     PseudoLabeledBatch, ensemble_pseudolabel,
                                     pseudolabel_batch)


def test_more_confident_predictor_wins():
    logits = PredictorLogits(
        zero_shot=np.array([[4.0, 0.0], [0.1, 0.0]]),
        linear_probe=np.array([[0.0, 0.2], [0.0, 3.0]]),
    )
    labels, conf = ensemble_pseudolabel(logits)
    np.testing.assert_array_equal(labels, [0, 1])  # zs row 0, lp row 1
    assert conf[0] > 0.9 and conf[1] > 0.9


def test_exact_confidence_tie_goes_to_probe():
    # same logit gap, opposite argmax: identical max-softmax confidence
    logits = PredictorLogits(
        zero_shot=np.array([[1.0, 0.0]]),
        linear_probe=np.array([[0.0, 1.0]]),
    )
    labels, _ = ensemble_pseudolabel(logits)
    assert labels[0] == 1


def test_argmax_tie_goes_to_lowest_class():
    logits = PredictorLogits(
        zero_shot=np.array([[2.0, 2.0, 0.0]]),
        linear_probe=np.array([[0.0, 0.0, 0.0]]),
    )
    labels, _ = ensemble_pseudolabel(logits)
    assert labels[0] == 0


def test_zs_temperature_can_flip_the_winner():
    logits = PredictorLogits(
        zero_shot=np.array([[5.0, 0.0]]),
        linear_probe=np.array([[0.0, 2.0]]),
    )
    hot, _ = ensemble_pseudolabel(logits, zs_temperature=1.0)
    assert hot[0] == 0
    damped, _ = ensemble_pseudolabel(logits, zs_temperature=50.0)
    assert damped[0] == 1  # flattened zs confidence loses to the probe


def test_confidence_is_the_winners():
    logits = PredictorLogits(
        zero_shot=np.array([[np.log(9.0), 0.0]]),  # softmax -> 0.9
        linear_probe=np.array([[0.0, 0.0]]),
    )
    _, conf = ensemble_pseudolabel(logits)
    assert abs(conf[0] - 0.9) < 1e-12


def test_validation_and_empty_batches():
    with pytest.raises(ValueError):
        PredictorLogits(np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        PredictorLogits(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))
    empty = PredictorLogits(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(EmptyBatchError):
        ensemble_pseudolabel(empty)
    good = PredictorLogits(np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        ensemble_pseudolabel(good, zs_temperature=0.0)


def test_slice_keeps_alignment():
    rng = np.random.default_rng(0)
    logits = PredictorLogits(rng.standard_normal((6, 3)), rng.standard_normal((6, 3)))
    idx = np.array([4, 1])
    part = logits.slice(idx)
    np.testing.assert_array_equal(part.zero_shot, logits.zero_shot[idx])
    np.testing.assert_array_equal(part.linear_probe, logits.linear_probe[idx])


def test_pseudolabel_batch_bundles():
    feats = np.ones((2, 4))
    logits = PredictorLogits(np.array([[3.0, 0.0], [0.0, 3.0]]), np.zeros((2, 2)))
    batch = pseudolabel_batch(feats, logits)
    assert isinstance(batch, PseudoLabeledBatch)
    np.testing.assert_array_equal(batch.labels, [0, 1])
    assert batch.n == 2
    with pytest.raises(ValueError):
        pseudolabel_batch(np.ones((3, 4)), logits)
