"""Online per-batch adaptation over an unlabeled target stream.

Each incoming batch is pseudo-labeled once, then the three stages run in
order (alignment of the concept bank, probe refit of the head, residual
fit), each for ``n_grad`` optimizer steps on that batch.  The batch is predicted with the
freshly updated model, and all parameters and optimizer moments carry forward
to the next batch.  Nothing is ever reset mid-stream.

Wall-clock timing lives only in the performance counters; the prediction log
and evaluation report are pure functions of the inputs and seed so identical
runs produce byte-identical artifacts.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .losses import STAGES, AdaptConfig, csa_loss, lpa_loss, rcb_loss
from .model import CbmModel, concept_scores, predict
from .numerics import OptimizerState, optimizer_step
from .pseudolabel import PredictorLogits, pseudolabel_batch
from .rng import named_stream
from .stats import ClassStats


def split_batches(num_samples: int, batch_size: int, seed: int) -> list:
    """Shuffle sample indices into ordered batches (last one may be short)."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = named_stream(seed, "batch-split").permutation(num_samples).astype(np.int64)
    return [perm[i:i + batch_size] for i in range(0, num_samples, batch_size)]


@dataclass
class EvalReport:
    """Class-balanced accuracy summary.

    ``avg`` is the unweighted mean of per-class accuracies and
    ``worst_group`` their minimum; classes with zero true samples are
    excluded from both and carry NaN in ``per_class``.
    """

    avg: float
    worst_group: float
    per_class: np.ndarray
    counts: np.ndarray
    num_classes: int

    def to_dict(self) -> dict:
        return {
            "avg": float(self.avg),
            "worst_group": float(self.worst_group),
            "per_class": [None if not np.isfinite(a) else float(a) for a in self.per_class],
            "counts": [int(c) for c in self.counts],
            "num_classes": int(self.num_classes),
        }


def evaluate(predictions: np.ndarray, true_labels: np.ndarray,
             num_classes: int | None = None) -> EvalReport:
    """Per-class accuracies with their unweighted mean and minimum."""
    preds = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(true_labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("predictions and labels must be equal-length 1-D arrays")
    if preds.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if labels.min() < 0 or preds.min() < 0:
        raise ValueError("class indices must be non-negative")
    ell = int(num_classes) if num_classes is not None else int(max(preds.max(), labels.max())) + 1
    if labels.max() >= ell or preds.max() >= ell:
        raise ValueError(f"class index outside [0, {ell})")

    per_class = np.full(ell, np.nan)
    counts = np.zeros(ell, dtype=np.int64)
    for c in range(ell):
        mask = labels == c
        counts[c] = int(mask.sum())
        if counts[c]:
            per_class[c] = float((preds[mask] == c).mean())
    present = np.isfinite(per_class)
    if not present.any():
        raise ValueError("no class has any true samples")
    return EvalReport(
        avg=float(per_class[present].mean()),
        worst_group=float(per_class[present].min()),
        per_class=per_class,
        counts=counts,
        num_classes=ell,
    )


def stage_flop_proxy(stage: str, n_batch: int, m: int, d: int, ell: int,
                     r: int, n_grad: int, k: int) -> float:
    """Rough multiply-add count for one batch of one stage.

    Dominant terms only: score products, per-class quadratic forms, softmax
    rows, cosine blocks, and a base-2 log for the top-k sort.  Used for
    relative cost reporting, not billing.
    """
    if stage == "csa":
        per_step = n_batch * (2 * m * d + ell * m * (2 * m + 3) + ell) + 5 * m * d
    elif stage == "lpa":
        per_step = (n_batch * (2 * (m + r) * (d + ell) + 5 * ell)
                    + 5 * ell * m + 2 * ell)
    elif stage == "rcb":
        sort_cost = r * n_batch * (math.log2(n_batch) if n_batch > 1 else 1.0)
        per_step = (n_batch * (2 * (m + r) * (d + ell) + 5 * ell)
                    + 6 * d * r * (m + (r - 1) / 2.0)
                    + 4 * n_batch * r * d + sort_cost + k * r
                    + 2 * r * d + 2 * ell * (r + 1))
    else:
        raise ValueError(f"unknown stage {stage!r}")
    return float(n_grad * per_step)


@dataclass
class StagePerf:
    wall_seconds: float = 0.0
    steps: int = 0
    flop_proxy: float = 0.0


class AdaptSession:
    """Mutable adaptation run: model, optimizers, counters, prediction log.

    The model is adapted in place.  One optimizer per stage; moment buffers
    persist across batches for the life of the session.
    """

    def __init__(self, model: CbmModel, stats: ClassStats, config: AdaptConfig):
        if stats.m != model.bank.m:
            raise ValueError(f"statistics cover {stats.m} concepts, bank has {model.bank.m}")
        if stats.num_classes != model.num_classes:
            raise ValueError("statistics class count does not match the model")
        config.validate()
        if config.rcb_enabled and config.n_grad > 0 and model.residual.r == 0:
            # not an error: residual stage silently skips when there is no branch
            pass
        self.model = model
        self.stats = stats
        self.config = config
        self.optimizers = {
            "csa": OptimizerState(config.csa_optimizer, config.csa_lr),
            "lpa": OptimizerState(config.lpa_optimizer, config.lpa_lr),
            "rcb": OptimizerState(config.rcb_optimizer, config.rcb_lr),
        }
        self.counters = {"clamped_distances": 0, "k_coh_clamped": 0}
        self.perf = {s: StagePerf() for s in STAGES}
        self.log: list = []
        self.batches_seen = 0

    def perf_dict(self) -> dict:
        out = {"batches": self.batches_seen, "stages": {}}
        total = 0.0
        for s in STAGES:
            p = self.perf[s]
            out["stages"][s] = {
                "wall_seconds": p.wall_seconds,
                "steps": p.steps,
                "flop_proxy": p.flop_proxy,
            }
            total += p.wall_seconds
        out["stage_wall_seconds"] = total
        out["counters"] = dict(self.counters)
        return out


def adapt_batch(session: AdaptSession, features: np.ndarray,
                logits: PredictorLogits) -> np.ndarray:
    """Run the enabled stages on one batch and predict it post-update."""
    cfg = session.config
    model = session.model
    batch = pseudolabel_batch(features, logits, cfg.zs_temperature)
    pre_preds = predict(model, batch.features)
    record = {
        "batch": session.batches_seen,
        "n": batch.n,
        "pseudo_labels": batch.labels.tolist(),
        "confidences": [float(c) for c in batch.confidences],
        "pre_predictions": pre_preds.tolist(),
        "stage_loss_first": {},
        "stage_loss_last": {},
    }
    n, m, d = batch.n, model.bank.m, model.bank.dim
    ell, r = model.num_classes, model.residual.r

    if cfg.csa_enabled and cfg.n_grad > 0:
        opt = session.optimizers["csa"]
        t0 = time.perf_counter()
        for step in range(cfg.n_grad):
            value, grad = csa_loss(model.bank.vectors, batch, session.stats,
                                   model.bank.source_vectors, cfg.lambda_frob,
                                   session.counters)
            if step == 0:
                record["stage_loss_first"]["csa"] = value
            optimizer_step(opt, [model.bank.vectors], [grad])
        record["stage_loss_last"]["csa"] = value
        p = session.perf["csa"]
        p.wall_seconds += time.perf_counter() - t0
        p.steps += cfg.n_grad
        p.flop_proxy += stage_flop_proxy("csa", n, m, d, ell, r, cfg.n_grad, 0)

    if cfg.lpa_enabled and cfg.n_grad > 0:
        opt = session.optimizers["lpa"]
        t0 = time.perf_counter()
        # bank and residual are frozen this stage: score them once
        scores = concept_scores(model.bank.vectors, batch.features)
        res_logits = None
        if r:
            res_logits = (concept_scores(model.residual.vectors, batch.features)
                          @ model.residual.weights.T + model.residual.bias)
        for step in range(cfg.n_grad):
            value, grad_w, grad_b = lpa_loss(model, batch, cfg.lambda_sparse, cfg.alpha,
                                             scores=scores, residual_logits=res_logits)
            if step == 0:
                record["stage_loss_first"]["lpa"] = value
            optimizer_step(opt, [model.head.weights, model.head.bias], [grad_w, grad_b])
        record["stage_loss_last"]["lpa"] = value
        p = session.perf["lpa"]
        p.wall_seconds += time.perf_counter() - t0
        p.steps += cfg.n_grad
        p.flop_proxy += stage_flop_proxy("lpa", n, m, d, ell, r, cfg.n_grad, 0)

    if cfg.rcb_enabled and cfg.n_grad > 0 and r > 0:
        opt = session.optimizers["rcb"]
        t0 = time.perf_counter()
        # main branch is frozen this stage: its logits are constant
        main_logits = (concept_scores(model.bank.vectors, batch.features)
                       @ model.head.weights.T + model.head.bias)
        for step in range(cfg.n_grad):
            value, g_ct, g_wt, g_bt, _ = rcb_loss(model, batch, cfg, None, main_logits,
                                                  session.counters)
            if step == 0:
                record["stage_loss_first"]["rcb"] = value
            optimizer_step(opt, [model.residual.vectors, model.residual.weights,
                                 model.residual.bias], [g_ct, g_wt, g_bt])
        record["stage_loss_last"]["rcb"] = value
        p = session.perf["rcb"]
        p.wall_seconds += time.perf_counter() - t0
        p.steps += cfg.n_grad
        k = cfg.resolve_k_coh(ell, n)
        p.flop_proxy += stage_flop_proxy("rcb", n, m, d, ell, r, cfg.n_grad, min(k, n))

    preds = predict(model, batch.features)
    record["predictions"] = preds.tolist()
    session.log.append(record)
    session.batches_seen += 1
    return preds


def adapt_stream(session: AdaptSession, batches) -> EvalReport | None:
    """Adapt through an iterable of (features, PredictorLogits, labels|None).

    Returns an evaluation over post-adaptation predictions when every batch
    carried true labels, else None.  Per-batch details accumulate in
    ``session.log`` either way.
    """
    all_preds = []
    all_labels = []
    labeled = True
    for features, logits, labels in batches:
        preds = adapt_batch(session, features, logits)
        all_preds.append(preds)
        if labels is None:
            labeled = False
        else:
            all_labels.append(np.asarray(labels, dtype=np.int64))
    if not all_preds:
        raise ValueError("empty stream")
    if not labeled:
        return None
    return evaluate(np.concatenate(all_preds), np.concatenate(all_labels),
                    session.model.num_classes)
