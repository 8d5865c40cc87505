"""Confidence-gated ensemble pseudo-labels from two frozen predictors.

Each target batch arrives with logits from a zero-shot predictor and from a
source-fit linear probe.  Per sample, whichever predictor is more confident
(max softmax probability) supplies the pseudo-label; exact confidence ties go
to the linear probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_f64, check_finite, softmax


class EmptyBatchError(ValueError):
    """Raised when a batch with zero rows reaches the labeler."""


@dataclass
class PredictorLogits:
    """Aligned logits from the zero-shot predictor and the linear probe."""

    zero_shot: np.ndarray
    linear_probe: np.ndarray

    def __post_init__(self):
        self.zero_shot = as_f64(self.zero_shot, "zero-shot logits")
        self.linear_probe = as_f64(self.linear_probe, "linear-probe logits")
        if self.zero_shot.ndim != 2:
            raise ValueError("logits must be N x L")
        if self.zero_shot.shape != self.linear_probe.shape:
            raise ValueError(
                f"predictor shapes disagree: {self.zero_shot.shape} vs {self.linear_probe.shape}"
            )
        check_finite(self.zero_shot, "zero-shot logits")
        check_finite(self.linear_probe, "linear-probe logits")

    @property
    def n(self) -> int:
        return self.zero_shot.shape[0]

    def slice(self, idx: np.ndarray) -> "PredictorLogits":
        return PredictorLogits(self.zero_shot[idx], self.linear_probe[idx])


@dataclass
class PseudoLabeledBatch:
    """A feature batch with ensemble pseudo-labels and their confidences."""

    features: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        self.features = as_f64(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.confidences = as_f64(self.confidences, "confidences")
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.confidences.shape != (n,):
            raise ValueError("labels/confidences length does not match feature rows")
        if n == 0:
            raise EmptyBatchError("batch has no rows")
        if np.any(self.confidences <= 0.0) or np.any(self.confidences > 1.0):
            raise ValueError("confidences must lie in (0, 1]")

    @property
    def n(self) -> int:
        return self.features.shape[0]


def ensemble_pseudolabel(logits: PredictorLogits,
                         zs_temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Pick the more confident predictor per sample; return labels, confidences.

    Zero-shot logits are divided by ``zs_temperature`` before softmax so
    differently-scaled predictors can be put on a comparable footing.  Within
    a predictor, argmax ties resolve to the lowest class index; confidence
    ties between predictors resolve to the linear probe.
    """
    if logits.n == 0:
        raise EmptyBatchError("cannot pseudo-label an empty batch")
    if zs_temperature <= 0:
        raise ValueError("zs_temperature must be > 0")
    p_zs = softmax(logits.zero_shot / zs_temperature)
    p_lp = softmax(logits.linear_probe)
    lab_zs = np.argmax(p_zs, axis=1)
    lab_lp = np.argmax(p_lp, axis=1)
    conf_zs = p_zs[np.arange(logits.n), lab_zs]
    conf_lp = p_lp[np.arange(logits.n), lab_lp]
    use_zs = conf_zs > conf_lp
    labels = np.where(use_zs, lab_zs, lab_lp).astype(np.int64)
    confidences = np.where(use_zs, conf_zs, conf_lp)
    return labels, confidences


def pseudolabel_batch(features: np.ndarray, logits: PredictorLogits,
                      zs_temperature: float = 1.0) -> PseudoLabeledBatch:
    """Bundle a feature batch with its ensemble pseudo-labels."""
    features = as_f64(features, "features")
    if features.shape[0] != logits.n:
        raise ValueError("feature rows do not match logits rows")
    labels, confidences = ensemble_pseudolabel(logits, zs_temperature)
    return PseudoLabeledBatch(features=features, labels=labels, confidences=confidences)
