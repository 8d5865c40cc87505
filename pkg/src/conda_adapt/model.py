"""Concept-bottleneck model state: bank, linear head, residual branch.

The classifier is  logits(x) = W @ normalize_rows(C) @ phi(x) + b  plus an
optional residual branch  W_t @ normalize_rows(C_t) @ phi(x) + b_t  over extra
concept vectors discovered at adaptation time.  Features phi(x) come from a
frozen backbone and are treated as plain float64 matrices here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import OptimizerState, as_f64, check_finite, optimizer_step, softmax
from .rng import named_stream


def normalize_rows(vectors: np.ndarray, what: str = "concept") -> np.ndarray:
    """Rows scaled to unit L2 norm; zero rows are rejected."""
    v = as_f64(vectors, what)
    if v.ndim != 2:
        raise ValueError(f"{what} vectors must be 2-D, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=1)
    if v.shape[0] and (not np.all(np.isfinite(norms)) or np.any(norms <= 0.0)):
        bad = int(np.argmin(norms))
        raise ValueError(f"{what} row {bad} has zero or non-finite norm")
    return v / norms[:, None] if v.shape[0] else v


@dataclass
class EmbeddingSet:
    """Frozen backbone output: N x d features with optional integer labels."""

    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = as_f64(self.features, "features")
        if self.features.ndim != 2:
            raise ValueError(f"features must be N x d, got shape {self.features.shape}")
        check_finite(self.features, "features")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.dtype.kind not in "iu":
                raise TypeError(f"labels must be integers, got dtype {self.labels.dtype}")
            self.labels = self.labels.astype(np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise ValueError("labels length does not match feature rows")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ConceptBank:
    """m concept vectors in feature space, plus a frozen source snapshot.

    ``vectors`` is the raw, trainable storage; scores always go through row
    normalization.  ``source_vectors`` is captured at construction and kept
    read-only so the alignment anchor survives in-place updates.
    """

    vectors: np.ndarray
    captions: list[str] | None = None
    source_vectors: np.ndarray = None

    def __post_init__(self):
        self.vectors = as_f64(self.vectors, "bank")
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"bank must be m x d with m >= 1, got shape {self.vectors.shape}")
        check_finite(self.vectors, "bank")
        normalize_rows(self.vectors, "bank")  # rejects zero rows
        if self.captions is not None and len(self.captions) != self.vectors.shape[0]:
            raise ValueError("caption count does not match bank rows")
        if self.source_vectors is None:
            snap = self.vectors.copy()
            snap.flags.writeable = False
            self.source_vectors = snap
        else:
            self.source_vectors = as_f64(self.source_vectors, "source bank")
            if self.source_vectors.shape != self.vectors.shape:
                raise ValueError("source snapshot shape does not match bank")
            self.source_vectors = self.source_vectors.copy()
            self.source_vectors.flags.writeable = False

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class LinearHead:
    """Class weights over concept scores: logits = scores @ weights.T + bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = as_f64(self.weights, "head weights")
        self.bias = as_f64(self.bias, "head bias")
        if self.weights.ndim != 2:
            raise ValueError(f"head weights must be L x m, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("head bias length does not match class count")
        check_finite(self.weights, "head weights")
        check_finite(self.bias, "head bias")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


@dataclass
class ResidualBranch:
    """r extra concept vectors with their own linear head; r may be 0."""

    vectors: np.ndarray
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.vectors = as_f64(self.vectors, "residual bank")
        self.weights = as_f64(self.weights, "residual weights")
        self.bias = as_f64(self.bias, "residual bias")
        if self.vectors.ndim != 2:
            raise ValueError("residual vectors must be r x d")
        r = self.vectors.shape[0]
        if self.weights.shape != (self.bias.shape[0], r):
            raise ValueError(
                f"residual weights shape {self.weights.shape} does not match r={r}, "
                f"L={self.bias.shape[0]}"
            )
        if r:
            normalize_rows(self.vectors, "residual")
        for arr, name in ((self.vectors, "residual bank"), (self.weights, "residual weights"),
                          (self.bias, "residual bias")):
            check_finite(arr, name)

    @property
    def r(self) -> int:
        return self.vectors.shape[0]


def init_residual(r: int, dim: int, num_classes: int, seed: int) -> ResidualBranch:
    """Fresh residual branch: unit-norm random directions, zero head.

    The zero head makes the branch exactly inert until its own stage trains
    it, so enabling r > 0 never changes pre-adaptation predictions.
    """
    if r < 0:
        raise ValueError("r must be >= 0")
    rng = named_stream(seed, "residual-init")
    vecs = rng.standard_normal((r, dim))
    if r:
        vecs = normalize_rows(vecs, "residual")
    return ResidualBranch(
        vectors=vecs.reshape(r, dim),
        weights=np.zeros((num_classes, r)),
        bias=np.zeros(num_classes),
    )


@dataclass
class CbmModel:
    """Full model: concept bank, head, residual branch, class count."""

    bank: ConceptBank
    head: LinearHead
    residual: ResidualBranch

    def __post_init__(self):
        if self.head.weights.shape[1] != self.bank.m:
            raise ValueError(
                f"head expects {self.head.weights.shape[1]} concepts, bank has {self.bank.m}"
            )
        if self.residual.vectors.shape[1] != self.bank.dim and self.residual.r:
            raise ValueError("residual vectors live in a different feature space than the bank")
        if self.residual.bias.shape[0] != self.head.num_classes:
            raise ValueError("residual head class count does not match main head")

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def dim(self) -> int:
        return self.bank.dim


def concept_scores(vectors: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Scores of each feature row against row-normalized concept vectors."""
    u = normalize_rows(vectors)
    f = as_f64(features, "features")
    if f.ndim != 2 or f.shape[1] != u.shape[1]:
        raise ValueError(f"features shape {f.shape} does not match concept dim {u.shape[1]}")
    check_finite(f, "features")
    return f @ u.T


def forward(model: CbmModel, features: np.ndarray) -> np.ndarray:
    """Logits of the combined model (main branch plus residual if r > 0)."""
    logits = concept_scores(model.bank.vectors, features) @ model.head.weights.T
    logits += model.head.bias
    if model.residual.r:
        logits += concept_scores(model.residual.vectors, features) @ model.residual.weights.T
        logits += model.residual.bias
    return logits


def predict(model: CbmModel, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(forward(model, features), axis=1).astype(np.int64)


def combined_params(model: CbmModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-bottleneck form (W_con, C_con, b_con) of the two-branch model.

    Concatenating the residual columns onto the head and the residual rows
    onto the bank reproduces the combined logits exactly: the model is still
    one concept bottleneck, only wider.
    """
    w_con = np.hstack([model.head.weights, model.residual.weights])
    c_con = np.vstack([model.bank.vectors, model.residual.vectors])
    b_con = model.head.bias + model.residual.bias
    return w_con, c_con, b_con


@dataclass
class HeadFitConfig:
    """Full-batch training knobs for fitting a linear head on fixed inputs."""

    epochs: int = 300
    optimizer: str = "adam"
    learning_rate: float = 0.05
    lambda_sparse: float = 1e-4
    alpha: float = 0.99

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_sparse < 0:
            raise ValueError("lambda_sparse must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def fit_linear_head(inputs: np.ndarray, labels: np.ndarray, num_classes: int,
                    config: HeadFitConfig | None = None) -> LinearHead:
    """Multinomial logistic fit by full-batch gradient descent from zeros.

    Deterministic: no sampling anywhere, so the result depends only on the
    inputs and the config.
    """
    from .losses import sparse_penalty  # local import; losses depends on this module

    config = config or HeadFitConfig()
    x = as_f64(inputs, "inputs")
    y = np.asarray(labels)
    if x.ndim != 2:
        raise ValueError("inputs must be 2-D")
    if y.shape != (x.shape[0],):
        raise ValueError("labels length does not match input rows")
    if x.shape[0] < num_classes:
        raise ValueError(f"need at least {num_classes} samples, got {x.shape[0]}")
    present = np.unique(y)
    if present.min() < 0 or present.max() >= num_classes:
        raise ValueError("labels outside [0, num_classes)")
    missing = sorted(set(range(num_classes)) - set(present.tolist()))
    if missing:
        raise ValueError(f"no samples for classes {missing}")

    n = x.shape[0]
    w = np.zeros((num_classes, x.shape[1]))
    b = np.zeros(num_classes)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0
    state = OptimizerState(kind=config.optimizer, learning_rate=config.learning_rate)
    for _ in range(config.epochs):
        probs = softmax(x @ w.T + b)
        gz = (probs - onehot) / n
        _, g_sparse = sparse_penalty(w, config.alpha)
        grad_w = gz.T @ x + config.lambda_sparse * g_sparse
        grad_b = gz.sum(axis=0)
        optimizer_step(state, [w, b], [grad_w, grad_b])
    return LinearHead(weights=w, bias=b)


def fit_source_head(scores: np.ndarray, labels: np.ndarray, num_classes: int,
                    config: HeadFitConfig | None = None) -> LinearHead:
    """Fit the source head on concept scores (thin wrapper for clarity)."""
    return fit_linear_head(scores, labels, num_classes, config)
