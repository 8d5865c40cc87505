"""Adaptation losses with hand-derived analytic gradients.

Three per-batch objectives, one per stage:

* alignment: pull pseudo-labeled concept scores toward their source class
  Gaussian and away from the others, with a Frobenius anchor to the source
  bank (updates concept vectors only);
* probe refit: cross-entropy against pseudo-labels with an elastic-net
  penalty (updates head weights and bias only);
* residual fit: cross-entropy plus a redundancy penalty on cosines and a
  coherency reward for residual directions that point at their own
  top-scoring batch features (updates residual vectors, weights, bias).

Scores always use row-normalized concept vectors; gradients pass through the
normalization.  Each function returns the loss value and gradients for
exactly the parameters its stage updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import (CbmModel, ConceptBank, LinearHead, ResidualBranch,
                    concept_scores, normalize_rows)
from .numerics import as_f64, finite_diff_check, log_softmax, softmax
from .pseudolabel import PseudoLabeledBatch
from .rng import named_stream
from .stats import ClassStats, fit_class_stats

DISTANCE_FLOOR = 1e-12

STAGES = ("csa", "lpa", "rcb")


@dataclass
class AdaptConfig:
    """Every knob of the adaptation loop in one place.

    ``k_coh=None`` means automatic: max(1, floor(n / (2 * L))) per batch,
    where n is the actual batch row count.  Stage flags turn individual
    stages off for ablations; a disabled stage runs no steps and leaves its
    parameters untouched.
    """

    lambda_frob: float = 0.1
    lambda_sparse: float = 1.0
    lambda_sim: float = 0.1
    lambda_coh: float = 2.0
    alpha: float = 0.99
    n_grad: int = 20
    batch_size: int = 128
    residual_count: int = 5
    k_coh: int | None = None
    csa_optimizer: str = "adam"
    csa_lr: float = 0.01
    lpa_optimizer: str = "adam"
    lpa_lr: float = 0.01
    rcb_optimizer: str = "adam"
    rcb_lr: float = 0.01
    zs_temperature: float = 1.0
    seed: int = 42
    csa_enabled: bool = True
    lpa_enabled: bool = True
    rcb_enabled: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_frob", "lambda_sparse", "lambda_sim", "lambda_coh"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.n_grad < 0:
            raise ValueError("n_grad must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.residual_count < 0:
            raise ValueError("residual_count must be >= 0")
        if self.k_coh is not None and self.k_coh < 1:
            raise ValueError("k_coh must be >= 1 (or unset for automatic)")
        for name in ("csa_optimizer", "lpa_optimizer", "rcb_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                raise ValueError(f"{name} must be 'sgd' or 'adam'")
        for name in ("csa_lr", "lpa_lr", "rcb_lr"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if self.zs_temperature <= 0:
            raise ValueError("zs_temperature must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def resolve_k_coh(self, num_classes: int, batch_n: int) -> int:
        if self.k_coh is not None:
            return int(self.k_coh)
        return max(1, batch_n // (2 * num_classes))

    def with_stages(self, csa: bool, lpa: bool, rcb: bool) -> "AdaptConfig":
        return replace(self, csa_enabled=csa, lpa_enabled=lpa, rcb_enabled=rcb)


def _normalized_scores_grad(grad_wrt_u: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Push a gradient w.r.t. unit rows back to the raw stored vectors.

    With u = c/\\|c\\|, d(loss)/dc = (g - (g.u) u) / \\|c\\| where g is the
    gradient w.r.t. u.  The projection removes the radial component, so these
    gradients are always orthogonal to the rows themselves.
    """
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    u = vectors / norms
    radial = np.sum(grad_wrt_u * u, axis=1, keepdims=True)
    return (grad_wrt_u - radial * u) / norms


def csa_loss(bank_vectors: np.ndarray, batch: PseudoLabeledBatch, stats: ClassStats,
             source_vectors: np.ndarray, lambda_frob: float,
             counters: dict | None = None) -> tuple[float, np.ndarray]:
    """Alignment loss over the concept bank and its gradient.

    Per sample: log of (distance to pseudo-class Gaussian over mean distance
    to the other class Gaussians), batch-averaged, plus
    lambda_frob * \\|C - C_source\\|_F^2 on the raw stored vectors.  Distances
    are floored at 1e-12; floored samples contribute no alignment gradient
    (the count lands in ``counters['clamped_distances']`` when given).
    """
    c = as_f64(bank_vectors, "bank")
    c_src = as_f64(source_vectors, "source bank")
    if c.shape != c_src.shape:
        raise ValueError("bank and source snapshot shapes differ")
    ell = stats.num_classes
    if ell < 2:
        raise ValueError("alignment needs at least two classes")
    if np.any(batch.labels >= ell):
        raise ValueError("pseudo-label outside the class range of the statistics")

    u = normalize_rows(c)
    v = batch.features @ u.T                                   # (N, m)
    diffs = v[None, :, :] - stats.means[:, None, :]            # (L, N, m)
    solved = np.einsum("lnm,lmk->lnk", diffs, stats.inverses)  # Sigma^-1 (v - mu)
    dist = np.einsum("lnk,lnk->ln", solved, diffs)             # (L, N)

    n = batch.n
    idx = np.arange(n)
    intra = dist[batch.labels, idx]
    inter = (dist.sum(axis=0) - intra) / (ell - 1)
    intra_c = np.maximum(intra, DISTANCE_FLOOR)
    inter_c = np.maximum(inter, DISTANCE_FLOOR)
    clamped = int(np.sum(intra < DISTANCE_FLOOR) + np.sum(inter < DISTANCE_FLOOR))
    if counters is not None and clamped:
        counters["clamped_distances"] = counters.get("clamped_distances", 0) + clamped

    align = float(np.mean(np.log(intra_c) - np.log(inter_c)))
    delta = c - c_src
    value = align + lambda_frob * float(np.sum(delta * delta))

    # d(align)/d(v_n) via the two distance terms; floored terms get zero weight.
    w_intra = np.where(intra > DISTANCE_FLOOR, 1.0 / (n * intra_c), 0.0)
    w_inter = np.where(inter > DISTANCE_FLOOR, -1.0 / (n * (ell - 1) * inter_c), 0.0)
    a_label = solved[batch.labels, idx, :]                     # (N, m)
    a_sum = solved.sum(axis=0)                                 # (N, m)
    g_scores = 2.0 * (w_intra[:, None] * a_label
                      + w_inter[:, None] * (a_sum - a_label))  # (N, m)
    grad_u = g_scores.T @ batch.features                       # (m, d)
    grad = _normalized_scores_grad(grad_u, c) + 2.0 * lambda_frob * delta
    return value, grad


def sparse_penalty(weights: np.ndarray, alpha: float) -> tuple[float, np.ndarray]:
    """Elastic-net penalty over head rows, averaged by total entry count.

    value = (1/(L*m)) * sum_rows(alpha*\\|w\\|_1 + (1-alpha)*\\|w\\|_2^2).
    The L1 subgradient at exactly zero is taken as zero.
    """
    w = as_f64(weights, "weights")
    if w.ndim != 2:
        raise ValueError("weights must be L x m")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    scale = 1.0 / w.size if w.size else 0.0
    value = scale * float(alpha * np.abs(w).sum() + (1.0 - alpha) * np.sum(w * w))
    grad = scale * (alpha * np.sign(w) + 2.0 * (1.0 - alpha) * w)
    return value, grad


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE against integer labels and the gradient w.r.t. the logits."""
    n = logits.shape[0]
    value = float(-log_softmax(logits)[np.arange(n), labels].mean())
    gz = softmax(logits)
    gz[np.arange(n), labels] -= 1.0
    return value, gz / n


def lpa_loss(model: CbmModel, batch: PseudoLabeledBatch, lambda_sparse: float,
             alpha: float, scores: np.ndarray | None = None,
             residual_logits: np.ndarray | None = None
             ) -> tuple[float, np.ndarray, np.ndarray]:
    """Probe-refit loss and gradients for (head weights, head bias).

    Cross-entropy of the full forward pass (residual branch included, but
    frozen) against pseudo-labels, plus lambda_sparse times the elastic-net
    penalty on the main head.  ``scores``/``residual_logits`` may be passed
    precomputed since the bank and residual do not move during this stage.
    """
    if np.any(batch.labels >= model.num_classes):
        raise ValueError("pseudo-label outside the model's class range")
    if scores is None:
        scores = concept_scores(model.bank.vectors, batch.features)
    logits = scores @ model.head.weights.T + model.head.bias
    if residual_logits is not None:
        logits = logits + residual_logits
    elif model.residual.r:
        logits = logits + (concept_scores(model.residual.vectors, batch.features)
                           @ model.residual.weights.T + model.residual.bias)
    ce, gz = _cross_entropy(logits, batch.labels)
    s_val, s_grad = sparse_penalty(model.head.weights, alpha)
    value = ce + lambda_sparse * s_val
    grad_w = gz.T @ scores + lambda_sparse * s_grad
    grad_b = gz.sum(axis=0)
    return value, grad_w, grad_b


def similarity_penalty(bank_vectors: np.ndarray,
                       residual_vectors: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean signed cosine of residual rows to bank rows and to each other.

    value = (1/(m r)) * sum_ij cos(c_i, ct_j)
          + (2/(r(r-1))) * sum_{j>i} cos(ct_i, ct_j),
    with the second term zero when r = 1.  Gradient is w.r.t. the raw
    residual vectors; cosines are scale-free so it is orthogonal to each row.
    """
    c = as_f64(bank_vectors, "bank")
    ct = as_f64(residual_vectors, "residual")
    if ct.ndim != 2 or ct.shape[0] < 1:
        raise ValueError("residual must be r x d with r >= 1")
    if c.shape[1] != ct.shape[1]:
        raise ValueError("bank and residual dimensions differ")
    m, r = c.shape[0], ct.shape[0]
    un = normalize_rows(c)
    norms_t = np.linalg.norm(ct, axis=1)
    if np.any(norms_t <= 0.0):
        raise ValueError("residual row with zero norm")
    ut = ct / norms_t[:, None]

    cos_mt = un @ ut.T                                         # (m, r)
    value = float(cos_mt.mean())
    # grad of term1 w.r.t. ut row j is mean of bank unit rows; push through
    # the normalization of ct below.
    grad_u = np.tile(un.mean(axis=0) / r, (r, 1))              # (r, d)

    if r > 1:
        cos_tt = ut @ ut.T
        value += float((cos_tt.sum() - r) / (r * (r - 1)))
        # each unordered pair appears twice in the full gradient sum
        grad_u += (2.0 / (r * (r - 1))) * (ut.sum(axis=0) - ut)
    grad = _normalized_scores_grad(grad_u, ct)
    return value, grad


def coherency(residual_vectors: np.ndarray, features: np.ndarray, k: int,
              memberships: np.ndarray | None = None,
              counters: dict | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean normalized score of each residual row over its top-k features.

    Top-k membership per row is by normalized score, ties to the lowest
    sample index; pass ``memberships`` back in to reuse a frozen selection.
    k larger than the batch is clamped (counted in ``counters['k_coh_clamped']``).
    Returns (value, grad w.r.t. raw residual vectors, memberships).
    """
    ct = as_f64(residual_vectors, "residual")
    phi = as_f64(features, "features")
    if ct.ndim != 2 or ct.shape[0] < 1:
        raise ValueError("residual must be r x d with r >= 1")
    if phi.ndim != 2 or phi.shape[1] != ct.shape[1]:
        raise ValueError("features do not match residual dimension")
    n, r = phi.shape[0], ct.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        if counters is not None:
            counters["k_coh_clamped"] = counters.get("k_coh_clamped", 0) + 1
        k = n

    norms = np.linalg.norm(ct, axis=1)
    if np.any(norms <= 0.0):
        raise ValueError("residual row with zero norm")
    ut = ct / norms[:, None]
    s = phi @ ut.T                                             # (N, r)
    if memberships is None:
        # stable sort on -s keeps the lowest index first among ties
        order = np.argsort(-s, axis=0, kind="stable")
        memberships = order[:k, :].T.astype(np.int64)          # (r, k)
    else:
        memberships = np.asarray(memberships, dtype=np.int64)
        if memberships.shape != (r, k):
            raise ValueError(f"memberships shape {memberships.shape} != {(r, k)}")

    scale = 1.0 / (r * k)
    value = 0.0
    grad_u = np.zeros_like(ct)
    for i in range(r):
        sel = memberships[i]
        value += s[sel, i].sum()
        grad_u[i] = phi[sel].sum(axis=0)
    value *= scale
    grad = _normalized_scores_grad(scale * grad_u, ct)
    return float(value), grad, memberships


def rcb_loss(model: CbmModel, batch: PseudoLabeledBatch, config: AdaptConfig,
             memberships: np.ndarray | None = None,
             main_logits: np.ndarray | None = None,
             counters: dict | None = None
             ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Residual-stage loss and gradients for (vectors, weights, bias).

    Cross-entropy of the combined forward pass against pseudo-labels, plus
    lambda_sim times the redundancy penalty, minus lambda_coh times the
    coherency reward.  The main branch is frozen, so ``main_logits`` may be
    passed precomputed.  Returns (value, grad_vectors, grad_weights,
    grad_bias, memberships); memberships are recomputed when None.
    """
    res = model.residual
    if res.r < 1:
        raise ValueError("residual stage requires residual_count >= 1")
    if np.any(batch.labels >= model.num_classes):
        raise ValueError("pseudo-label outside the model's class range")
    if main_logits is None:
        main_logits = (concept_scores(model.bank.vectors, batch.features)
                       @ model.head.weights.T + model.head.bias)

    norms = np.linalg.norm(res.vectors, axis=1)
    if np.any(norms <= 0.0):
        raise ValueError("residual row with zero norm")
    ut = res.vectors / norms[:, None]
    vt = batch.features @ ut.T                                  # (N, r)
    logits = main_logits + vt @ res.weights.T + res.bias
    ce, gz = _cross_entropy(logits, batch.labels)
    grad_wt = gz.T @ vt
    grad_bt = gz.sum(axis=0)
    g_scores = gz @ res.weights                                 # (N, r)
    grad_ct = _normalized_scores_grad(g_scores.T @ batch.features, res.vectors)

    sim_val, sim_grad = similarity_penalty(model.bank.vectors, res.vectors)
    k = config.resolve_k_coh(model.num_classes, batch.n)
    coh_val, coh_grad, memberships = coherency(res.vectors, batch.features, k,
                                               memberships, counters)
    value = ce + config.lambda_sim * sim_val - config.lambda_coh * coh_val
    grad_ct = grad_ct + config.lambda_sim * sim_grad - config.lambda_coh * coh_grad
    return value, grad_ct, grad_wt, grad_bt, memberships


# ---------------------------------------------------------------------------
# gradient verification

def _gradcheck_instance(seed: int):
    """A small random problem exercising every loss term."""
    rng = named_stream(seed, "gradcheck")
    m, d, ell, n, r = 5, 7, 3, 6, 3
    features = rng.standard_normal((n, d))
    bank = rng.standard_normal((m, d))
    source = bank + 0.2 * rng.standard_normal((m, d))
    labels = rng.integers(0, ell, size=n)
    conf = rng.uniform(0.5, 1.0, size=n)
    batch = PseudoLabeledBatch(features=features, labels=labels, confidences=conf)
    stat_scores = rng.standard_normal((10 * ell, m)) + np.repeat(
        rng.standard_normal((ell, m)), 10, axis=0)
    stats = fit_class_stats(stat_scores, np.repeat(np.arange(ell), 10))
    head = LinearHead(weights=rng.standard_normal((ell, m)),
                      bias=rng.standard_normal(ell))
    residual = ResidualBranch(vectors=rng.standard_normal((r, d)),
                              weights=0.5 * rng.standard_normal((ell, r)),
                              bias=0.1 * rng.standard_normal(ell))
    model = CbmModel(bank=ConceptBank(vectors=bank.copy()), head=head, residual=residual)
    config = AdaptConfig(lambda_frob=0.3, lambda_sparse=0.5, lambda_sim=0.7,
                         lambda_coh=0.9, alpha=0.99, k_coh=2)
    return model, batch, stats, source, config


def _swap_head(model: CbmModel, weights=None, bias=None) -> CbmModel:
    head = LinearHead(weights=model.head.weights if weights is None else weights.copy(),
                      bias=model.head.bias if bias is None else bias.copy())
    return CbmModel(bank=model.bank, head=head, residual=model.residual)


def _swap_residual(model: CbmModel, vectors=None, weights=None, bias=None) -> CbmModel:
    res = model.residual
    residual = ResidualBranch(
        vectors=res.vectors if vectors is None else vectors.copy(),
        weights=res.weights if weights is None else weights.copy(),
        bias=res.bias if bias is None else bias.copy())
    return CbmModel(bank=model.bank, head=model.head, residual=residual)


def gradient_check_report(num_seeds: int = 20, base_seed: int = 0,
                          h: float = 1e-5) -> dict:
    """Worst finite-difference relative error per loss over random instances.

    Coherency memberships are frozen at the unperturbed selection so the
    checked function is smooth; everything else is exactly the training path.
    """
    worst = {name: 0.0 for name in ("csa", "sparse", "lpa", "similarity",
                                    "coherency", "rcb")}
    for s in range(num_seeds):
        model, batch, stats, source, config = _gradcheck_instance(base_seed + s)
        bank = model.bank.vectors

        _, g = csa_loss(bank, batch, stats, source, config.lambda_frob)
        err = finite_diff_check(
            lambda c: csa_loss(c, batch, stats, source, config.lambda_frob)[0],
            bank.copy(), g, h)
        worst["csa"] = max(worst["csa"], err)

        _, g = sparse_penalty(model.head.weights, config.alpha)
        err = finite_diff_check(
            lambda w: sparse_penalty(w, config.alpha)[0],
            model.head.weights.copy(), g, h)
        worst["sparse"] = max(worst["sparse"], err)

        _, gw, gb = lpa_loss(model, batch, config.lambda_sparse, config.alpha)

        def lpa_of_w(w):
            return lpa_loss(_swap_head(model, weights=w), batch,
                            config.lambda_sparse, config.alpha)[0]

        def lpa_of_b(b):
            return lpa_loss(_swap_head(model, bias=b), batch,
                            config.lambda_sparse, config.alpha)[0]

        err = max(finite_diff_check(lpa_of_w, model.head.weights.copy(), gw, h),
                  finite_diff_check(lpa_of_b, model.head.bias.copy(), gb, h))
        worst["lpa"] = max(worst["lpa"], err)

        res = model.residual
        _, g = similarity_penalty(bank, res.vectors)
        err = finite_diff_check(
            lambda c: similarity_penalty(bank, c)[0], res.vectors.copy(), g, h)
        worst["similarity"] = max(worst["similarity"], err)

        k = config.resolve_k_coh(model.num_classes, batch.n)
        _, g, mem = coherency(res.vectors, batch.features, k)
        err = finite_diff_check(
            lambda c: coherency(c, batch.features, k, memberships=mem)[0],
            res.vectors.copy(), g, h)
        worst["coherency"] = max(worst["coherency"], err)

        _, gc, gw, gb, mem = rcb_loss(model, batch, config)

        def rcb_of_c(c):
            return rcb_loss(_swap_residual(model, vectors=c), batch, config,
                            memberships=mem)[0]

        def rcb_of_w(w):
            return rcb_loss(_swap_residual(model, weights=w), batch, config,
                            memberships=mem)[0]

        def rcb_of_b(b):
            return rcb_loss(_swap_residual(model, bias=b), batch, config,
                            memberships=mem)[0]

        err = max(finite_diff_check(rcb_of_c, res.vectors.copy(), gc, h),
                  finite_diff_check(rcb_of_w, res.weights.copy(), gw, h),
                  finite_diff_check(rcb_of_b, res.bias.copy(), gb, h))
        worst["rcb"] = max(worst["rcb"], err)
    return worst
