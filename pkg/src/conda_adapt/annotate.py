"""Post-hoc naming of concept vectors from caption similarities.

Each concept induces a score profile over the target samples (inner products
of features with the concept vector).  A caption whose per-sample similarity
column correlates with that profile, cosine above a strict threshold, names
the concept; otherwise the concept stays unnamed.  Degenerate profiles
(zero norm or zero variance) are flagged and never named.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_f64, check_finite

DEFAULT_THRESHOLD = 0.8

# sentinel below the cosine range so degenerate caption columns never win
_NEVER = -2.0


@dataclass
class SimilarityMatrix:
    """Per-sample similarity of each target item to each candidate caption."""

    values: np.ndarray          # (N, S)
    captions: list

    def __post_init__(self):
        self.values = as_f64(self.values, "similarity matrix")
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"similarity matrix must be N x S, got {self.values.shape}")
        check_finite(self.values, "similarity matrix")
        if len(self.captions) != self.values.shape[1]:
            raise ValueError("caption count does not match similarity columns")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def num_captions(self) -> int:
        return self.values.shape[1]


@dataclass
class ConceptAnnotation:
    """Naming outcome for one concept vector."""

    caption_index: int | None
    caption: str | None
    similarity: float
    accepted: bool
    flagged: bool

    def to_dict(self) -> dict:
        return {
            "caption_index": self.caption_index,
            "caption": self.caption,
            "similarity": float(self.similarity),
            "accepted": self.accepted,
            "flagged": self.flagged,
        }


@dataclass
class AnnotationResult:
    entries: list
    threshold: float

    def to_dict(self) -> dict:
        return {
            "threshold": float(self.threshold),
            "entries": [e.to_dict() for e in self.entries],
        }

    @property
    def accepted_count(self) -> int:
        return sum(1 for e in self.entries if e.accepted)


def annotate_concepts(bank_vectors: np.ndarray, features: np.ndarray,
                      simmat: SimilarityMatrix,
                      threshold: float = DEFAULT_THRESHOLD) -> AnnotationResult:
    """Name each concept by its best caption, if strictly above threshold.

    Best is by cosine between the concept's score profile over the samples
    and each caption column; argmax ties resolve to the lowest caption index.
    """
    c = as_f64(bank_vectors, "bank")
    phi = as_f64(features, "features")
    if c.ndim != 2 or phi.ndim != 2 or phi.shape[1] != c.shape[1]:
        raise ValueError("bank and features dimensions disagree")
    if phi.shape[0] != simmat.n:
        raise ValueError(f"{phi.shape[0]} feature rows but {simmat.n} similarity rows")
    if not -1.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [-1, 1)")

    profiles = phi @ c.T                       # (N, m), raw inner products
    p_norm = np.linalg.norm(profiles, axis=0)  # (m,)
    col_norm = np.linalg.norm(simmat.values, axis=0)
    col_ok = col_norm > 0.0

    entries = []
    for j in range(c.shape[0]):
        var = float(np.var(profiles[:, j]))
        if p_norm[j] == 0.0 or var == 0.0:
            entries.append(ConceptAnnotation(None, None, float("nan"),
                                             accepted=False, flagged=True))
            continue
        sims = np.full(simmat.num_captions, _NEVER)
        dots = simmat.values.T @ profiles[:, j]
        sims[col_ok] = dots[col_ok] / (col_norm[col_ok] * p_norm[j])
        best = int(np.argmax(sims))
        best_sim = float(sims[best])
        if not col_ok.any():
            entries.append(ConceptAnnotation(None, None, float("nan"),
                                             accepted=False, flagged=True))
            continue
        accepted = best_sim > threshold
        entries.append(ConceptAnnotation(
            caption_index=best if accepted else None,
            caption=simmat.captions[best] if accepted else None,
            similarity=best_sim,
            accepted=accepted,
            flagged=False,
        ))
    return AnnotationResult(entries=entries, threshold=float(threshold))
