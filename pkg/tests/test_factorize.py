"""Row importance, budgeted ranks, and sparsity-aware truncated SVD."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunefactor import nn
from prunefactor.factorize import (
    FactorizeReport,
    factorize_model,
    rank_for_budget,
    row_importance,
    sparsity_aware_factorize,
)
from prunefactor.linalg import svd, truncate
from prunefactor.nn import forward, init_mlp
from prunefactor.prune import mark_prunable, prune_to


def sparse_matrix(rng, n, m, kept=0.3):
    w = rng.standard_normal((n, m))
    mask, pruned = prune_to(w, rng.standard_normal((n, m)), kept)
    return pruned


def weighted_norm(imp, resid):
    return float(np.linalg.norm(imp[:, None] * resid))


# --------------------------------------------------------- row_importance --


def test_row_importance_proportional_to_row_sums():
    score = np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    imp = row_importance(score)
    assert np.allclose(imp, [0.5, 0.25, 0.25], atol=1e-9)


def test_row_importance_uniform_scores():
    imp = row_importance(np.full((4, 3), 7.0))
    assert np.allclose(imp, 0.25)


def test_row_importance_dominant_row():
    score = np.array([[10.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    imp = row_importance(score)
    assert np.allclose(imp, [10 / 12, 1 / 12, 1 / 12], atol=1e-9)


def test_row_importance_negative_scores_shifted_positive():
    imp = row_importance(np.array([[-5.0, -1.0], [-3.0, -3.0]]))
    assert np.all(imp > 0)
    assert abs(imp.sum() - 1.0) <= 1e-9


def test_row_importance_floor_applies():
    score = np.array([[1e9, 1e9], [0.0, 0.0]])
    imp = row_importance(score)
    assert imp[1] == 1e-6


def test_row_importance_floor_validation():
    with pytest.raises(ValueError):
        row_importance(np.ones((2, 2)), epsilon_floor=0.0)


# -------------------------------------------------------- rank_for_budget --


def test_rank_for_budget_square_example():
    assert rank_for_budget(16, 16, 0.25) == 2  # 2*(16+16) = 64 = 0.25*256


def test_rank_for_budget_clamps_to_one():
    assert rank_for_budget(8, 8, 0.01) == 1


def test_rank_for_budget_clamps_to_min_dim():
    assert rank_for_budget(100, 2, 1.0) == 2


def test_rank_for_budget_validation():
    with pytest.raises(ValueError):
        rank_for_budget(4, 4, 0.0)
    with pytest.raises(ValueError):
        rank_for_budget(4, 4, 1.5)


# --------------------------------------- sparsity_aware_factorize --------


def test_uniform_importance_matches_plain_truncated_svd():
    rng = np.random.default_rng(0)
    w = sparse_matrix(rng, 9, 7)
    plain = truncate(svd(w), 3).product()
    for imp in (None, np.full(9, 1.0 / 9)):
        pair = sparsity_aware_factorize(w, 3, imp)
        assert pair.a.shape == (9, 3)
        assert pair.b.shape == (3, 7)
        assert np.max(np.abs(pair.product() - plain)) <= 1e-8


def test_weighted_beats_plain_in_weighted_norm():
    rng = np.random.default_rng(1)
    for trial in range(50):
        w = sparse_matrix(rng, 12, 10)
        raw = rng.random(12) + 0.05
        imp = raw / raw.sum()
        weighted = sparsity_aware_factorize(w, 3, imp)
        plain = sparsity_aware_factorize(w, 3, None)
        err_w = weighted_norm(imp, w - weighted.product())
        err_p = weighted_norm(imp, w - plain.product())
        assert err_w <= err_p + 1e-12


def test_error_non_increasing_in_rank():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((10, 8))
    imp = row_importance(rng.random((10, 8)))
    errs = [
        weighted_norm(imp, w - sparsity_aware_factorize(w, k, imp).product())
        for k in range(1, 9)
    ]
    assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-9  # full rank reproduces the matrix


def test_zero_row_with_floored_importance_stays_finite():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((5, 4))
    w[2] = 0.0
    imp = np.array([0.4, 0.3, 1e-6, 0.2, 0.1])
    pair = sparsity_aware_factorize(w, 2, imp)
    assert np.all(np.isfinite(pair.a))
    assert np.all(np.isfinite(pair.product()))


def test_factorize_validation():
    w = np.ones((4, 3))
    with pytest.raises(ValueError):
        sparsity_aware_factorize(w, 0)
    with pytest.raises(ValueError):
        sparsity_aware_factorize(w, 4)
    with pytest.raises(ValueError, match="length"):
        sparsity_aware_factorize(w, 2, np.ones(3))
    with pytest.raises(ValueError, match="positive"):
        sparsity_aware_factorize(w, 2, np.array([1.0, 1.0, 0.0, 1.0]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6))
def test_weighted_optimality_property(seed, k):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((8, 6))
    raw = rng.random(8) + 0.01
    imp = raw / raw.sum()
    best = sparsity_aware_factorize(w, k, imp)
    err_best = weighted_norm(imp, w - best.product())
    # any rank-k pair from a perturbed decomposition cannot do better
    other = sparsity_aware_factorize(w + 0.1 * rng.standard_normal((8, 6)), k, imp)
    err_other = weighted_norm(imp, w - other.product())
    assert err_best <= err_other + 1e-9


# --------------------------------------------------------- factorize_model --


def sparse_model(seed=0, dims=(6, 8, 3)):
    model = init_mlp(dims[0], list(dims[1:-1]), num_classes=dims[-1], seed=seed)
    mark_prunable(model)
    rng = np.random.default_rng(seed + 100)
    for lay in model.layers:
        lay.score = rng.random(lay.weight.shape)
    return model


def test_factorize_model_full_rank_none_weighting_preserves_outputs():
    model = sparse_model()
    x = np.random.default_rng(9).standard_normal((5, 6))
    before = forward(model, x)
    report = factorize_model(model, min(8, 6), weighting="none")
    after = forward(model, x)
    assert np.max(np.abs(after - before)) <= 1e-8
    assert report.layer_ranks == {0: 6}


def test_factorize_model_defaults_to_hidden_sparse_layers():
    model = sparse_model()
    classifier_weight = model.layers[1].weight
    factorize_model(model, 2)
    assert model.layers[0].kind == nn.FACTORIZED
    assert model.layers[1].kind == nn.SPARSE
    assert model.layers[1].weight is classifier_weight


def test_factorize_model_keeps_shadow_and_mask():
    model = sparse_model()
    original = model.layers[0].weight
    mask = model.layers[0].mask
    factorize_model(model, 2, layers=[0])
    lay = model.layers[0]
    assert lay.shadow is original
    assert lay.mask is mask
    assert lay.weight is None
    assert lay.factors.param_count() == 2 * (8 + 6)


def test_factorize_model_report_errors_match_direct_norm():
    model = sparse_model(seed=4)
    lay = model.layers[0]
    masked = (lay.weight * lay.mask).copy()
    report = factorize_model(model, 3, layers=[0])
    direct = float(np.linalg.norm(masked - lay.factors.product()))
    assert abs(report.errors[0] - direct) <= 1e-12


def test_factorize_model_rank_modes():
    for rank, expected in ((2, 2), (0.25, rank_for_budget(8, 6, 0.25)), ([4], 4)):
        model = sparse_model()
        report = factorize_model(model, rank, layers=[0])
        assert report.layer_ranks[0] == expected
    with pytest.raises(ValueError, match="length"):
        factorize_model(sparse_model(), [2, 3], layers=[0])


def test_factorize_model_errors():
    model = init_mlp(6, [8], num_classes=3, seed=0)
    with pytest.raises(ValueError, match="no layers to factorize"):
        factorize_model(model, 2)
    with pytest.raises(ValueError, match="not sparse"):
        factorize_model(model, 2, layers=[0])
    mark_prunable(model)
    with pytest.raises(ValueError, match="no scores"):
        model.layers[0].score = None
        factorize_model(model, 2, weighting="score", layers=[0])
    with pytest.raises(ValueError, match="unknown weighting"):
        factorize_model(sparse_model(), 2, weighting="rows")
    with pytest.raises(ValueError, match="rank 9 invalid"):
        factorize_model(sparse_model(), 9, layers=[0])


def test_factorize_model_mask_weighting_needs_no_scores():
    model = sparse_model()
    model.layers[0].score = np.zeros_like(model.layers[0].mask)
    report = factorize_model(model, 3, weighting="mask", layers=[0])
    assert isinstance(report, FactorizeReport)
    assert model.layers[0].kind == nn.FACTORIZED
