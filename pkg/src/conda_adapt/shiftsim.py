"""Synthetic worlds that reproduce three embedding-shift failure modes.

Features live on an orthonormal basis split into m concept directions and
d - m nuisance directions.  Concept coordinates are drawn from per-class
Gaussians; labels come from a fixed linear rule on the causal concept
coordinates, so the Bayes-optimal predictor that knows the world is exact by
construction.  Three target regimes:

* ``low_level``: an orthogonal rotation mixes each concept axis with a paired
  nuisance axis (staggered angles), corrupting scores geometrically while
  the concept semantics stay put;
* ``concept_level``: the spurious concept agrees with the class on almost all
  source samples but is not causal; the target grows the disagreeing minority
  until the class-conditional means swap sign, so a head that leaned on it is
  anti-correlated with truth on the grown group;
* ``incomplete_bank``: the bank handed to the model omits one causal concept,
  and the proxy concept that stood in for it on the source loses its class
  separation on the target.

Surrogate predictor logits come with each target set: a "zero-shot" predictor
(the label rule read off the true concept coordinates, mildly label-noised)
and a linear probe fit on the source features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .adapt import EvalReport, evaluate
from .losses import AdaptConfig
from .model import EmbeddingSet, HeadFitConfig, fit_linear_head
from .pseudolabel import PredictorLogits
from .rng import named_stream

KINDS = ("low_level", "concept_level", "incomplete_bank")

ZS_LABEL_NOISE = 0.10

# per-kind generative constants: class separations, concept noise, and the
# temperature of the surrogate zero-shot logits
_GEOMETRY = {
    "low_level": {"sep": 0.9, "sigma_v": 0.4, "zs_scale": 0.15, "angle_lo": 0.38},
    "concept_level": {"sep_spur": 1.3, "sep_true": 0.55, "sigma_v": 0.35, "zs_scale": 1.0,
                      "bank_noise": 2.0, "rho_source": 0.0},
    "incomplete_bank": {"sep_causal": 1.2, "sep_proxy": 1.0, "sep_weak": 0.25,
                        "sigma_v": 0.4, "zs_scale": 0.2},
}

# the semantic-shift probes use early-stopped plain SGD, which follows raw
# gradient magnitudes and so favors the dominant (spurious) correlation the
# way a quickly fit probe on real embeddings does; confidences stay strong
# but below the zero-shot leg's
_PROBE_FITS = {
    "low_level": HeadFitConfig(epochs=200, optimizer="adam", learning_rate=0.05,
                               lambda_sparse=1e-4, alpha=0.99),
    "concept_level": HeadFitConfig(epochs=40, optimizer="sgd", learning_rate=0.5,
                                   lambda_sparse=1e-3, alpha=0.0),
    "incomplete_bank": HeadFitConfig(epochs=40, optimizer="sgd", learning_rate=0.5,
                                     lambda_sparse=1e-3, alpha=0.0),
}

# kind -> (feature_dim, concept_count, class_count, noise_sigma, severity)
_DEFAULT_DIMS = {
    "low_level": (64, 16, 4, 0.35, 1.0),
    "concept_level": (32, 8, 2, 0.3, 0.8),
    "incomplete_bank": (48, 12, 2, 0.3, 1.0),
}


@dataclass
class ScenarioSpec:
    """What to simulate: regime, sizes, severity, and the special concepts."""

    kind: str
    feature_dim: int = 64
    concept_count: int = 16
    class_count: int = 4
    n_source: int = 2000
    n_target: int = 2000
    severity: float = 1.0
    spurious_concept_index: int | None = None
    dropped_concept_index: int | None = None
    noise_sigma: float = 0.3
    seed: int = 42

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; choose from {KINDS}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.concept_count < self.class_count:
            raise ValueError("concept_count must be >= class_count")
        if self.kind == "low_level":
            if self.feature_dim < 2 * self.concept_count:
                raise ValueError("low_level needs feature_dim >= 2 * concept_count "
                                 "(each concept axis pairs with a nuisance axis)")
        elif self.feature_dim <= self.concept_count:
            raise ValueError("feature_dim must exceed concept_count")
        if self.n_source < self.class_count or self.n_target < 1:
            raise ValueError("sample counts too small")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.kind == "concept_level":
            if self.spurious_concept_index is None:
                self.spurious_concept_index = 0
            if not 0 <= self.spurious_concept_index < self.concept_count:
                raise ValueError("spurious_concept_index out of range")
        if self.kind == "incomplete_bank":
            if self.dropped_concept_index is None:
                self.dropped_concept_index = 0
            if not 0 <= self.dropped_concept_index < self.concept_count:
                raise ValueError("dropped_concept_index out of range")
            if self.concept_count < 4:
                raise ValueError("incomplete_bank needs at least 4 concepts "
                                 "(dropped, proxy, two weak)")

    @classmethod
    def default(cls, kind: str, seed: int = 42,
                severity: float | None = None) -> "ScenarioSpec":
        if kind not in _DEFAULT_DIMS:
            raise ValueError(f"unknown scenario kind {kind!r}")
        d, m, ell, noise, sev = _DEFAULT_DIMS[kind]
        if severity is None:
            severity = sev
        return cls(kind=kind, feature_dim=d, concept_count=m, class_count=ell,
                   noise_sigma=noise, seed=seed, severity=severity)


@dataclass
class SyntheticWorld:
    """Everything the generator knows: basis, Gaussians, rule, and the shift."""

    spec: ScenarioSpec
    basis: np.ndarray             # (d, d) orthonormal rows; first m are concepts
    true_bank: np.ndarray         # (m, d)
    handed_bank: np.ndarray       # what the model receives (m or m-1 rows)
    class_means: np.ndarray       # (L, m) source concept means (marginal)
    target_class_means: np.ndarray
    sigma_v: float
    causal_mask: np.ndarray       # (m,) 1.0 where the label rule looks
    rule_weights: np.ndarray      # (L, m)
    rule_bias: np.ndarray         # (L,)
    rotation: np.ndarray | None   # (d, d) target-feature rotation, low_level only
    zs_scale: float

    @property
    def m(self) -> int:
        return self.true_bank.shape[0]

    @property
    def dim(self) -> int:
        return self.true_bank.shape[1]

    @property
    def num_classes(self) -> int:
        return self.rule_weights.shape[0]


def _orthonormal_basis(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    # fix the column signs so the basis is a deterministic function of the draw
    q = q * np.sign(np.diag(r))
    return q.T


def _class_signs(ell: int) -> np.ndarray:
    return np.array([1.0 - 2.0 * (y / (ell - 1)) for y in range(ell)])  # +1 .. -1


def _minority_rate(spec: ScenarioSpec) -> float:
    """Fraction of target samples whose spurious coordinate opposes the class.

    At severity 0 the rate equals the source rate; at severity 1 it mirrors
    it, which swaps the spurious class-conditional means exactly.
    """
    rho = _GEOMETRY["concept_level"]["rho_source"]
    return rho + spec.severity * (1.0 - 2.0 * rho)


def _class_means(spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
    """Source concept means and the causal mask for the label rule.

    For ``concept_level`` the spurious column holds the marginal conditional
    mean of the majority/minority mixture; sampling resolves the group split.
    """
    geo = _GEOMETRY[spec.kind]
    ell, m = spec.class_count, spec.concept_count
    means = np.zeros((ell, m))
    mask = np.zeros(m)
    if spec.kind == "low_level":
        block = m // ell
        for y in range(ell):
            means[y, y * block:(y + 1) * block] = geo["sep"]
        mask[: ell * block] = 1.0
    elif spec.kind == "concept_level":
        s = spec.spurious_concept_index
        causal = [j for j in range(m) if j != s][:2]
        signs = _class_signs(ell)
        means[:, s] = (1.0 - 2.0 * geo["rho_source"]) * signs * geo["sep_spur"]
        for j in causal:
            means[:, j] = signs * geo["sep_true"]
        mask[causal] = 1.0
    else:  # incomplete_bank
        jd = spec.dropped_concept_index
        others = [j for j in range(m) if j != jd]
        proxy = others[0]
        weak = others[1:3]
        signs = _class_signs(ell)
        means[:, jd] = signs * geo["sep_causal"]
        means[:, proxy] = signs * geo["sep_proxy"]
        for j in weak:
            means[:, j] = signs * geo["sep_weak"]
        mask[jd] = 1.0
        for j in weak:
            mask[j] = 1.0
    return means, mask


def _target_means(spec: ScenarioSpec, means: np.ndarray) -> np.ndarray:
    tgt = means.copy()
    if spec.kind == "concept_level":
        s = spec.spurious_concept_index
        swapped = means[::-1, s]
        tgt[:, s] = (1.0 - spec.severity) * means[:, s] + spec.severity * swapped
    elif spec.kind == "incomplete_bank":
        jd = spec.dropped_concept_index
        proxy = [j for j in range(spec.concept_count) if j != jd][0]
        tgt[:, proxy] = (1.0 - spec.severity) * means[:, proxy]
    return tgt


def _rotation(spec: ScenarioSpec, basis: np.ndarray) -> np.ndarray:
    """Orthogonal map mixing concept axis j with nuisance axis m + j.

    Angles are staggered within each class block so every class loses its
    concepts progressively, up to a free 90-degree swap at full severity.
    """
    d, m, ell = spec.feature_dim, spec.concept_count, spec.class_count
    lo = _GEOMETRY["low_level"]["angle_lo"]
    block = max(1, m // ell)
    g = np.eye(d)
    for j in range(m):
        frac = lo + (1.0 - lo) * ((j % block) + 1) / block
        theta = spec.severity * (np.pi / 2.0) * frac
        c, s = np.cos(theta), np.sin(theta)
        rot = np.eye(d)
        rot[j, j] = c
        rot[j, m + j] = -s
        rot[m + j, j] = s
        rot[m + j, m + j] = c
        g = rot @ g
    return basis.T @ g @ basis


def _rule(means: np.ndarray, mask: np.ndarray, sigma_v: float) -> tuple[np.ndarray, np.ndarray]:
    """Equal-prior Gaussian discriminant restricted to causal coordinates."""
    masked = means * mask
    w = masked / (sigma_v**2)
    b = -0.5 * np.sum(masked * masked, axis=1) / (sigma_v**2)
    return w, b


def _sample_domain(spec: ScenarioSpec, world_means: np.ndarray, sigma_v: float,
                   basis: np.ndarray, rule_w: np.ndarray, rule_b: np.ndarray,
                   n: int, rng: np.random.Generator,
                   spur_rho: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (true concept coords, features, labels) for one domain.

    ``spur_rho`` turns the spurious coordinate into a two-group mixture: each
    sample's spurious mean is the full separation aligned with its class
    (majority) or opposed to it (minority, probability ``spur_rho``).
    """
    ell, m, d = spec.class_count, spec.concept_count, spec.feature_dim
    y_seed = rng.integers(0, ell, size=n)
    v = world_means[y_seed] + sigma_v * rng.standard_normal((n, m))
    eta = spec.noise_sigma * rng.standard_normal((n, d - m))
    if spur_rho is not None:
        s = spec.spurious_concept_index
        sep = _GEOMETRY[spec.kind]["sep_spur"]
        signs = _class_signs(ell)
        minority = rng.random(n) < spur_rho
        group_mean = np.where(minority, -1.0, 1.0) * signs[y_seed] * sep
        v[:, s] += group_mean - world_means[y_seed, s]
    features = np.hstack([v, eta]) @ basis
    labels = np.argmax(v @ rule_w.T + rule_b, axis=1).astype(np.int64)
    return v, features, labels


def _zero_shot_logits(v: np.ndarray, world: SyntheticWorld,
                      rng: np.random.Generator) -> np.ndarray:
    """Label-rule logits on true coordinates, scaled and mildly mislabeled.

    A noised sample has its top logit swapped with a uniformly chosen other
    class, moving the argmax while keeping the confidence profile.
    """
    logits = world.zs_scale * (v @ world.rule_weights.T + world.rule_bias)
    n, ell = logits.shape
    flip = rng.random(n) < ZS_LABEL_NOISE
    targets = rng.integers(0, ell - 1, size=n)
    for i in np.flatnonzero(flip):
        top = int(np.argmax(logits[i]))
        other = int(targets[i])
        if other >= top:
            other += 1
        logits[i, top], logits[i, other] = logits[i, other], logits[i, top]
    return logits


def generate(spec: ScenarioSpec) -> tuple[EmbeddingSet, EmbeddingSet, PredictorLogits,
                                          SyntheticWorld]:
    """Build (source set, target set, target surrogate logits, world).

    Severity 0 makes the target another draw from the source distribution for
    every kind.  All randomness flows through named streams of ``spec.seed``.
    """
    geo = _GEOMETRY[spec.kind]
    sigma_v = geo["sigma_v"]
    basis = _orthonormal_basis(spec.feature_dim, named_stream(spec.seed, "world-basis"))
    true_bank = basis[: spec.concept_count].copy()
    means, mask = _class_means(spec)
    rule_w, rule_b = _rule(means, mask, sigma_v)
    target_means = _target_means(spec, means)
    rotation = _rotation(spec, basis) if spec.kind == "low_level" else None

    handed = true_bank
    if spec.kind == "incomplete_bank":
        keep = [j for j in range(spec.concept_count) if j != spec.dropped_concept_index]
        handed = true_bank[keep].copy()
    elif geo.get("bank_noise"):
        # the bank the model receives only approximates the true directions,
        # so causal scores are read with crosstalk and a high-separation
        # spurious concept is genuinely the better feature on the source
        noise_rng = named_stream(spec.seed, "bank-noise")
        delta = geo["bank_noise"] * noise_rng.standard_normal(true_bank.shape)
        handed = true_bank + delta / np.sqrt(spec.feature_dim)
        handed = handed / np.linalg.norm(handed, axis=1, keepdims=True)

    world = SyntheticWorld(
        spec=spec, basis=basis, true_bank=true_bank, handed_bank=handed,
        class_means=means, target_class_means=target_means, sigma_v=sigma_v,
        causal_mask=mask, rule_weights=rule_w, rule_bias=rule_b,
        rotation=rotation, zs_scale=geo["zs_scale"],
    )

    rho_src = rho_tgt = None
    if spec.kind == "concept_level":
        rho_src = geo["rho_source"]
        rho_tgt = _minority_rate(spec)

    _, src_feat, src_lab = _sample_domain(
        spec, means, sigma_v, basis, rule_w, rule_b, spec.n_source,
        named_stream(spec.seed, "source-sample"), spur_rho=rho_src)
    source = EmbeddingSet(features=src_feat, labels=src_lab)

    v_t, tgt_feat, tgt_lab = _sample_domain(
        spec, target_means, sigma_v, basis, rule_w, rule_b, spec.n_target,
        named_stream(spec.seed, "target-sample"), spur_rho=rho_tgt)
    if rotation is not None:
        tgt_feat = tgt_feat @ rotation.T
    target = EmbeddingSet(features=tgt_feat, labels=tgt_lab)

    zs = _zero_shot_logits(v_t, world, named_stream(spec.seed, "zs-noise"))
    probe = fit_linear_head(src_feat, src_lab, spec.class_count, _PROBE_FITS[spec.kind])
    lp = tgt_feat @ probe.weights.T + probe.bias
    logits = PredictorLogits(zero_shot=zs, linear_probe=lp)
    return source, target, logits, world


def oracle_bank(world: SyntheticWorld) -> np.ndarray:
    """Concept vectors that read the true coordinates off target features."""
    if world.rotation is not None:
        return world.true_bank @ world.rotation.T
    return world.true_bank


def oracle_predict(world: SyntheticWorld, features: np.ndarray) -> np.ndarray:
    """Bayes predictions using full knowledge of the generative process."""
    v_hat = np.asarray(features, dtype=np.float64) @ oracle_bank(world).T
    return np.argmax(v_hat @ world.rule_weights.T + world.rule_bias, axis=1).astype(np.int64)


def oracle_accuracy(world: SyntheticWorld, target: EmbeddingSet) -> EvalReport:
    """Evaluation of the oracle predictor; exact recovery gives AVG 1.0."""
    if target.labels is None:
        raise ValueError("oracle accuracy needs labeled data")
    return evaluate(oracle_predict(world, target.features), target.labels,
                    world.num_classes)


def default_adapt_config(kind: str, seed: int = 42) -> AdaptConfig:
    """Adaptation bundle tuned per shift regime.

    Geometry-level shifts get an adaptive optimizer and a light bank anchor
    so alignment can travel; semantic shifts get plain SGD with a strong
    anchor so the probe and residual stages do the work instead of the bank
    re-deriving concepts.
    """
    if kind == "low_level":
        return AdaptConfig(lambda_frob=0.1, lambda_sparse=1.0, lambda_sim=0.1,
                           lambda_coh=2.0, n_grad=20, batch_size=128,
                           csa_optimizer="adam", csa_lr=0.01,
                           lpa_optimizer="adam", lpa_lr=0.01,
                           rcb_optimizer="adam", rcb_lr=0.01, seed=seed)
    if kind == "concept_level":
        return AdaptConfig(lambda_frob=10.0, lambda_sparse=1.0, lambda_sim=0.1,
                           lambda_coh=0.1, n_grad=20, batch_size=32,
                           csa_optimizer="sgd", csa_lr=0.03,
                           lpa_optimizer="sgd", lpa_lr=0.1,
                           rcb_optimizer="sgd", rcb_lr=0.1, seed=seed)
    if kind == "incomplete_bank":
        return AdaptConfig(lambda_frob=2.0, lambda_sparse=1.0, lambda_sim=0.5,
                           lambda_coh=1.0, n_grad=20, batch_size=64,
                           csa_optimizer="sgd", csa_lr=0.1,
                           lpa_optimizer="sgd", lpa_lr=0.1,
                           rcb_optimizer="adam", rcb_lr=0.01, seed=seed)
    raise ValueError(f"unknown scenario kind {kind!r}")


def make_caption_similarity(features: np.ndarray, bank_vectors: np.ndarray,
                            distractors: int = 8, noise: float = 0.25,
                            seed: int = 0) -> tuple[np.ndarray, list, np.ndarray]:
    """Caption-similarity matrix with one planted column per concept.

    Column ``planted[j]`` is the concept-j score vector plus scaled Gaussian
    noise; the rest are random distractors.  Returns (matrix, captions,
    planted column indices).
    """
    rng = named_stream(seed, "caption-sim")
    feats = np.asarray(features, dtype=np.float64)
    bank = np.asarray(bank_vectors, dtype=np.float64)
    m = bank.shape[0]
    scores = feats @ (bank / np.linalg.norm(bank, axis=1, keepdims=True)).T
    n = feats.shape[0]
    total = m + distractors
    cols = np.empty((n, total))
    captions = []
    scale = scores.std(axis=0)
    for j in range(m):
        cols[:, j] = scores[:, j] + noise * scale[j] * rng.standard_normal(n)
        captions.append(f"planted concept {j}")
    for j in range(distractors):
        cols[:, m + j] = rng.standard_normal(n) * float(scale.mean() if m else 1.0)
        captions.append(f"distractor {j}")
    perm = rng.permutation(total)
    cols = cols[:, perm]
    captions = [captions[i] for i in perm]
    planted = np.empty(m, dtype=np.int64)
    for col, orig in enumerate(perm):
        if orig < m:
            planted[orig] = col
    return cols, captions, planted


def energy_distance(a: np.ndarray, b: np.ndarray, max_samples: int = 400,
                    seed: int = 0) -> float:
    """Two-sample energy distance between feature clouds (subsampled)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rng = named_stream(seed, "energy-subsample")
    if a.shape[0] > max_samples:
        a = a[rng.choice(a.shape[0], max_samples, replace=False)]
    if b.shape[0] > max_samples:
        b = b[rng.choice(b.shape[0], max_samples, replace=False)]
    d_ab = cdist(a, b).mean()
    d_aa = cdist(a, a).mean()
    d_bb = cdist(b, b).mean()
    return float(2.0 * d_ab - d_aa - d_bb)
