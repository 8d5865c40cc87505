"""Stage losses against hand-worked values and finite differences."""

import numpy as np
import pytest

from conda_adapt.losses import (AdaptConfig, coherency, csa_loss,
                                gradient_check_report, lpa_loss, rcb_loss,
                                similarity_penalty, sparse_penalty)
from conda_adapt.model import (CbmModel, ConceptBank, LinearHead, ResidualBranch,
                               init_residual)
from conda_adapt.pseudolabel import PseudoLabeledBatch
from conda_adapt.stats import ClassStats


def identity_stats():
    eye = np.stack([np.eye(2)] * 2)
    return ClassStats(means=np.array([[1.0, 0.0], [0.0, 1.0]]),
                      covariances=eye, inverses=eye, counts=np.array([4, 4]))


def one_sample_batch(feature, label):
    return PseudoLabeledBatch(features=np.array([feature]),
                              labels=np.array([label]),
                              confidences=np.array([0.9]))


def test_adapt_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(lambda_frob=-1.0)
    with pytest.raises(ValueError):
        AdaptConfig(alpha=2.0)
    with pytest.raises(ValueError):
        AdaptConfig(csa_optimizer="momentum")
    with pytest.raises(ValueError):
        AdaptConfig(k_coh=0)
    with pytest.raises(ValueError):
        AdaptConfig(zs_temperature=0.0)
    with pytest.raises(ValueError):
        AdaptConfig(batch_size=0)


def test_adapt_config_helpers():
    cfg = AdaptConfig()
    assert cfg.resolve_k_coh(num_classes=3, batch_n=32) == 5  # 32 // 6
    assert cfg.resolve_k_coh(num_classes=3, batch_n=2) == 1   # floored at 1
    assert AdaptConfig(k_coh=7).resolve_k_coh(3, 32) == 7
    ablated = cfg.with_stages(True, False, False)
    assert (ablated.csa_enabled, ablated.lpa_enabled, ablated.rcb_enabled) == \
        (True, False, False)
    assert cfg.lpa_enabled  # original untouched


def test_csa_loss_hand_case():
    # unit-axis bank, sample exactly on class-0 mean: intra clamps to the
    # floor (zero gradient weight); only the inter term moves concept 1
    bank = np.eye(2)
    batch = one_sample_batch([1.0, 0.0], 0)
    counters = {}
    value, grad = csa_loss(bank, batch, identity_stats(), bank, 0.0, counters)
    assert counters["clamped_distances"] == 1
    assert abs(value - (np.log(1e-12) - np.log(2.0))) < 1e-9
    np.testing.assert_allclose(grad, [[0.0, 0.0], [1.0, 0.0]], atol=1e-12)


def test_csa_anchor_is_additive():
    rng = np.random.default_rng(0)
    src = rng.standard_normal((3, 4))
    bank = src + 0.3 * rng.standard_normal((3, 4))
    stats = ClassStats(means=rng.standard_normal((2, 3)),
                       covariances=np.stack([np.eye(3)] * 2),
                       inverses=np.stack([np.eye(3)] * 2),
                       counts=np.array([5, 5]))
    batch = PseudoLabeledBatch(features=rng.standard_normal((4, 4)),
                               labels=np.array([0, 1, 0, 1]),
                               confidences=np.full(4, 0.8))
    v0, g0 = csa_loss(bank, batch, stats, src, 0.0)
    v5, g5 = csa_loss(bank, batch, stats, src, 5.0)
    delta = bank - src
    assert abs((v5 - v0) - 5.0 * np.sum(delta * delta)) < 1e-9
    np.testing.assert_allclose(g5 - g0, 10.0 * delta, atol=1e-9)


def test_csa_rejects_mismatched_shapes():
    bank = np.eye(2)
    batch = one_sample_batch([1.0, 0.0], 0)
    with pytest.raises(ValueError):
        csa_loss(bank, batch, identity_stats(), np.eye(3), 0.1)
    with pytest.raises(ValueError):
        csa_loss(bank, one_sample_batch([1.0, 0.0], 5), identity_stats(), bank, 0.1)


def test_sparse_penalty_hand_case():
    w = np.array([[1.0, -2.0], [0.0, 3.0]])
    value, grad = sparse_penalty(w, alpha=0.5)
    assert abs(value - 2.5) < 1e-12  # (0.5*6 + 0.5*14) / 4
    np.testing.assert_allclose(grad, [[0.375, -0.625], [0.0, 0.875]], atol=1e-12)
    # sign(0) contributes nothing even at full L1
    _, g1 = sparse_penalty(np.zeros((2, 2)), alpha=1.0)
    np.testing.assert_allclose(g1, 0.0, atol=0.0)


def test_lpa_loss_hand_case():
    model = CbmModel(ConceptBank(np.eye(2)),
                     LinearHead(np.eye(2), np.zeros(2)),
                     init_residual(0, 2, 2, seed=0))
    batch = one_sample_batch([2.0, 0.0], 0)
    value, grad_w, grad_b = lpa_loss(model, batch, lambda_sparse=0.0, alpha=0.99)
    assert abs(value - np.log(1.0 + np.exp(-2.0))) < 1e-12
    p1 = 1.0 / (1.0 + np.exp(2.0))
    np.testing.assert_allclose(grad_b, [-p1, p1], atol=1e-12)
    np.testing.assert_allclose(grad_w, [[-2.0 * p1, 0.0], [2.0 * p1, 0.0]],
                               atol=1e-12)


def test_lpa_includes_frozen_residual_logits():
    res = ResidualBranch(vectors=np.array([[0.0, 1.0]]),
                         weights=np.array([[1.0], [0.0]]),
                         bias=np.array([0.0, 0.0]))
    model = CbmModel(ConceptBank(np.eye(2)),
                     LinearHead(np.eye(2), np.zeros(2)), res)
    batch = one_sample_batch([0.0, 3.0], 1)
    # residual adds +3 to class-0 logit: logits become [3, 3], CE = log 2
    value, _, _ = lpa_loss(model, batch, lambda_sparse=0.0, alpha=0.99)
    assert abs(value - np.log(2.0)) < 1e-12


def test_similarity_penalty_signed_and_r1():
    bank = np.eye(2)
    value, grad = similarity_penalty(bank, np.array([[1.0, 1.0]]))
    assert abs(value - 1.0 / np.sqrt(2.0)) < 1e-12  # no pair term at r = 1
    neg, _ = similarity_penalty(bank, np.array([[-1.0, -1.0]]))
    assert abs(neg + 1.0 / np.sqrt(2.0)) < 1e-12    # signed, not absolute
    # gradients never move rows radially
    assert abs(np.dot(grad[0], [1.0, 1.0])) < 1e-12


def test_similarity_pair_term():
    bank = np.eye(3)
    ct = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])  # identical rows
    value, _ = similarity_penalty(bank, ct)
    # bank term: mean over 3x2 cosines = (1 + 1) / 6; pair term: cos = 1
    assert abs(value - (2.0 / 6.0 + 1.0)) < 1e-12


def test_coherency_hand_topk():
    feats = np.array([[2.0, 0.0], [1.0, 0.0], [0.0, 5.0]])
    value, grad, mem = coherency(np.array([[1.0, 0.0]]), feats, k=2)
    assert abs(value - 1.5) < 1e-12
    np.testing.assert_array_equal(mem, [[0, 1]])
    assert abs(np.dot(grad[0], [1.0, 0.0])) < 1e-12  # orthogonal to the row


def test_coherency_tie_takes_lowest_index():
    feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    _, _, mem = coherency(np.array([[1.0, 0.0]]), feats, k=1)
    np.testing.assert_array_equal(mem, [[0]])


def test_coherency_clamps_large_k():
    feats = np.ones((3, 2))
    counters = {}
    value, _, mem = coherency(np.array([[1.0, 0.0]]), feats, k=10,
                              counters=counters)
    assert counters["k_coh_clamped"] == 1
    assert mem.shape == (1, 3)
    assert abs(value - 1.0) < 1e-12


def test_coherency_frozen_memberships_reused():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((8, 3))
    ct = rng.standard_normal((2, 3))
    _, _, mem = coherency(ct, feats, k=3)
    moved = ct + 0.5 * rng.standard_normal(ct.shape)
    _, _, mem_again = coherency(moved, feats, k=3, memberships=mem)
    np.testing.assert_array_equal(mem, mem_again)


def test_rcb_loss_is_the_stated_composition():
    rng = np.random.default_rng(2)
    model = CbmModel(ConceptBank(rng.standard_normal((4, 6))),
                     LinearHead(rng.standard_normal((3, 4)), rng.standard_normal(3)),
                     ResidualBranch(rng.standard_normal((2, 6)),
                                    0.3 * rng.standard_normal((3, 2)),
                                    0.1 * rng.standard_normal(3)))
    batch = PseudoLabeledBatch(features=rng.standard_normal((5, 6)),
                               labels=rng.integers(0, 3, 5),
                               confidences=np.full(5, 0.7))
    config = AdaptConfig(lambda_sim=0.4, lambda_coh=1.3, k_coh=2)
    value, _, _, _, mem = rcb_loss(model, batch, config)
    sim_val, _ = similarity_penalty(model.bank.vectors, model.residual.vectors)
    coh_val, _, _ = coherency(model.residual.vectors, batch.features, 2,
                              memberships=mem)
    from conda_adapt.model import forward
    from conda_adapt.numerics import log_softmax
    ce = -log_softmax(forward(model, batch.features))[np.arange(5), batch.labels].mean()
    assert abs(value - (ce + 0.4 * sim_val - 1.3 * coh_val)) < 1e-10


def test_rcb_requires_residual_rows():
    model = CbmModel(ConceptBank(np.eye(2)),
                     LinearHead(np.eye(2), np.zeros(2)),
                     init_residual(0, 2, 2, seed=0))
    with pytest.raises(ValueError):
        rcb_loss(model, one_sample_batch([1.0, 0.0], 0), AdaptConfig())


def test_gradient_check_small_sample():
    report = gradient_check_report(num_seeds=3)
    assert set(report) == {"csa", "sparse", "lpa", "similarity", "coherency", "rcb"}
    for name, err in report.items():
        assert err < 1e-4, f"{name} gradient error {err:.2e}"
