"""Model state, scoring, and the combined-bottleneck identity."""

import numpy as np
import pytest

from conda_adapt.model import (CbmModel, ConceptBank, EmbeddingSet, HeadFitConfig,
                               LinearHead, ResidualBranch, combined_params,
                               concept_scores, fit_linear_head, forward,
                               init_residual, normalize_rows, predict)


def random_model(rng, m=6, d=10, ell=3, r=2):
    bank = ConceptBank(rng.standard_normal((m, d)))
    head = LinearHead(rng.standard_normal((ell, m)), rng.standard_normal(ell))
    res = ResidualBranch(rng.standard_normal((r, d)) if r else np.zeros((0, d)),
                         rng.standard_normal((ell, r)), rng.standard_normal(ell))
    return CbmModel(bank, head, res)


def test_normalize_rows_hand_case():
    out = normalize_rows(np.array([[3.0, 4.0], [0.0, 2.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 1.0]], atol=1e-15)
    with pytest.raises(ValueError):
        normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_embedding_set_validation():
    es = EmbeddingSet(np.zeros((4, 3)), np.array([0, 1, 2, 1], dtype=np.int32))
    assert es.labels.dtype == np.int64
    assert es.n == 4 and es.dim == 3
    with pytest.raises(TypeError):
        EmbeddingSet(np.zeros((2, 3)), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros((2, 3)), np.array([0, 1, 1]))
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros((2, 3)), np.array([0, -1]))
    with pytest.raises(ValueError):
        EmbeddingSet(np.array([[1.0, np.inf]]))


def test_bank_snapshot_survives_updates():
    bank = ConceptBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
    original = bank.source_vectors.copy()
    bank.vectors += 5.0
    np.testing.assert_allclose(bank.source_vectors, original, atol=0.0)
    assert not bank.source_vectors.flags.writeable


def test_bank_validation():
    with pytest.raises(ValueError):
        ConceptBank(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        ConceptBank(np.array([[0.0, 0.0]]))
    with pytest.raises(ValueError):
        ConceptBank(np.eye(2), captions=["only one"])


def test_concept_scores_normalizes_rows():
    vectors = np.array([[2.0, 0.0], [0.0, 0.5]])  # normalizes to identity
    feats = np.array([[1.5, -2.0], [0.0, 3.0]])
    np.testing.assert_allclose(concept_scores(vectors, feats), feats, atol=1e-15)


def test_forward_hand_case():
    bank = ConceptBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
    head = LinearHead(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.5, 0.0]))
    model = CbmModel(bank, head, init_residual(0, 2, 2, seed=0))
    logits = forward(model, np.array([[2.0, 1.0]]))
    np.testing.assert_allclose(logits, [[2.5, 1.0]], atol=1e-15)
    assert predict(model, np.array([[2.0, 1.0]]))[0] == 0
    # exact tie resolves to the lowest class index
    assert predict(model, np.array([[-0.5, 0.0]]))[0] == 0


def test_zero_residual_head_is_inert():
    rng = np.random.default_rng(3)
    bank = ConceptBank(rng.standard_normal((5, 8)))
    head = LinearHead(rng.standard_normal((3, 5)), rng.standard_normal(3))
    with_res = CbmModel(bank, head, init_residual(4, 8, 3, seed=9))
    without = CbmModel(bank, head, init_residual(0, 8, 3, seed=9))
    feats = rng.standard_normal((6, 8))
    np.testing.assert_allclose(forward(with_res, feats), forward(without, feats),
                               atol=0.0)


def test_init_residual_properties():
    res = init_residual(3, 7, 4, seed=11)
    np.testing.assert_allclose(np.linalg.norm(res.vectors, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(res.weights, 0.0, atol=0.0)
    again = init_residual(3, 7, 4, seed=11)
    np.testing.assert_allclose(res.vectors, again.vectors, atol=0.0)
    other = init_residual(3, 7, 4, seed=12)
    assert np.abs(res.vectors - other.vectors).max() > 1e-3


def test_combined_params_identity():
    rng = np.random.default_rng(7)
    for _ in range(10):
        model = random_model(rng)
        feats = rng.standard_normal((8, model.dim))
        w_con, c_con, b_con = combined_params(model)
        direct = concept_scores(c_con, feats) @ w_con.T + b_con
        np.testing.assert_allclose(forward(model, feats), direct, atol=1e-9)


def test_model_shape_validation():
    bank = ConceptBank(np.eye(3))
    head = LinearHead(np.ones((2, 4)), np.zeros(2))
    with pytest.raises(ValueError):
        CbmModel(bank, head, init_residual(0, 3, 2, seed=0))
    head = LinearHead(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        CbmModel(bank, head, init_residual(1, 5, 2, seed=0))  # wrong feature dim
    with pytest.raises(ValueError):
        CbmModel(bank, head, init_residual(1, 3, 4, seed=0))  # wrong class count


def test_fit_linear_head_recovers_separable_problem():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.standard_normal((50, 2)) + [3, 0],
                   rng.standard_normal((50, 2)) - [3, 0]])
    y = np.repeat([0, 1], 50)
    head = fit_linear_head(x, y, 2)
    preds = np.argmax(x @ head.weights.T + head.bias, axis=1)
    assert (preds == y).mean() == 1.0


def test_fit_linear_head_deterministic():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((30, 4))
    y = rng.integers(0, 3, 30)
    cfg = HeadFitConfig(epochs=50)
    one = fit_linear_head(x, y, 3, cfg)
    two = fit_linear_head(x, y, 3, cfg)
    np.testing.assert_array_equal(one.weights, two.weights)
    np.testing.assert_array_equal(one.bias, two.bias)


def test_fit_linear_head_validation():
    x = np.zeros((4, 2))
    with pytest.raises(ValueError):
        fit_linear_head(x, np.array([0, 0, 0, 0]), 2)  # class 1 missing
    with pytest.raises(ValueError):
        fit_linear_head(x[:1], np.array([0]), 2)  # fewer samples than classes
    with pytest.raises(ValueError):
        fit_linear_head(x, np.array([0, 1, 2, 0]), 2)  # label out of range
    with pytest.raises(ValueError):
        HeadFitConfig(epochs=0)
    with pytest.raises(ValueError):
        HeadFitConfig(alpha=1.5)
