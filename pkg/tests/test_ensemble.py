"""
Tests de la fusion des profils : PCA, normalisations, concaténation, imputation
"""

import numpy as np
import pytest
from scipy.spatial.distance import pdist
from scipy.stats import kstest

from ensemble import (EnsembleSource, ProfileMatrix, combine, l2_normalize, normalize,
                      pca_fit, pca_transform, quantile_fit, quantile_transform,
                      random_profile)
from errors import ConfigurationError, ContractError, ParameterError


def test_l2_normalize():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    np.testing.assert_array_equal(l2_normalize(np.zeros(3)), np.zeros(3))
    unit = np.array([0.0, 0.6, 0.8])
    np.testing.assert_allclose(l2_normalize(unit), unit, atol=1e-7)


def test_l2_normalize_rows():
    X = np.array([[3.0, 4.0], [0.0, 0.0], [0.0, -2.0]])
    np.testing.assert_allclose(l2_normalize(X), [[0.6, 0.8], [0.0, 0.0], [0.0, -1.0]])


def test_quantile_map_on_fit_values():
    qmap = quantile_fit(np.array([10.0, 20.0, 30.0]))
    np.testing.assert_allclose(quantile_transform(qmap, np.array([10.0, 20.0, 30.0])), [0.0, 0.5, 1.0])
    assert np.all(np.diff(qmap.knots[:, 0]) >= 0)


def test_quantile_clamps_out_of_range():
    qmap = quantile_fit(np.array([10.0, 20.0, 30.0]))
    np.testing.assert_allclose(quantile_transform(qmap, np.array([-5.0, 99.0])), [0.0, 1.0])


def test_quantile_constant_column():
    qmap = quantile_fit(np.full(5, 7.0))
    np.testing.assert_array_equal(quantile_transform(qmap, np.array([7.0, 7.0, 3.0])), [0.5, 0.5, 0.5])


def test_quantile_self_transform_is_uniform():
    rng = np.random.default_rng(0)
    sample = rng.lognormal(size=100_000)
    out = quantile_transform(quantile_fit(sample), sample)
    assert kstest(out, 'uniform').statistic < 0.01


def test_pca_on_a_line():
    x = np.linspace(-3, 3, 20)
    X = np.column_stack([x, 2 * x])
    model = pca_fit(X, 1)
    total = X.var(axis=0, ddof=1).sum()
    assert model.explained_variance[0] == pytest.approx(total)
    Z = pca_transform(model, X)
    reconstruction = Z @ model.components + model.mean
    np.testing.assert_allclose(reconstruction, X, atol=1e-10)


def test_pca_full_rank_is_isometry():
    X = np.random.default_rng(1).normal(size=(30, 5))
    Z = pca_transform(pca_fit(X, 5), X)
    np.testing.assert_allclose(pdist(Z), pdist(X), atol=1e-6)


def test_pca_matches_eigendecomposition():
    X = np.random.default_rng(2).normal(size=(50, 10))
    model = pca_fit(X, 3)
    eigenvalues = np.linalg.eigh(np.cov(X, rowvar=False))[0][::-1][:3]
    projected = pca_transform(model, X).var(axis=0, ddof=1)
    np.testing.assert_allclose(projected, eigenvalues, rtol=1e-8)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(3), atol=1e-6)
    assert np.all(np.diff(model.explained_variance) <= 0)


def test_pca_sign_convention():
    X = np.random.default_rng(3).normal(size=(40, 6))
    model = pca_fit(X, 4)
    for direction in model.components:
        assert direction[np.argmax(np.abs(direction))] > 0


def test_pca_rejects_large_k():
    with pytest.raises(ParameterError):
        pca_fit(np.ones((4, 3)), 4)


def test_normalize_unknown_method():
    with pytest.raises(ConfigurationError):
        normalize(np.ones((2, 2)), 'minmax')


def _profile(ids, values, source):
    return ProfileMatrix(np.array(ids), np.asarray(values, dtype=np.float64), source)


def test_combine_concatenates_normalized_rows():
    a = _profile([1, 2, 3], [[3.0, 4.0], [1.0, 0.0], [0.0, 2.0]], 'a')
    b = _profile([1, 2, 3], [[0.0, 0.0, 5.0], [1.0, 1.0, 0.0], [2.0, 0.0, 0.0]], 'b')
    fused = combine([EnsembleSource(a), EnsembleSource(b)], [1, 2, 3])
    assert fused.dim == 5
    assert fused.column_sources == ['a', 'a', 'b', 'b', 'b']
    np.testing.assert_allclose(fused.row_of(1), [0.6, 0.8, 0.0, 0.0, 1.0])


def test_combine_mean_imputation():
    a = _profile([1, 2, 3], [[3.0, 4.0], [1.0, 0.0], [0.0, 2.0]], 'a')
    b = _profile([1, 3], [[1.0, 0.0], [0.0, 3.0]], 'b')
    fused = combine([EnsembleSource(a), EnsembleSource(b, 'none')], [1, 2, 3])
    np.testing.assert_allclose(fused.row_of(2)[2:], [0.5, 1.5])
    assert fused.metadata['sources'][1]['imputed'] == 1
    assert not np.any(np.isnan(fused.values))


def test_combine_zero_imputation():
    a = _profile([1, 2], [[1.0], [2.0]], 'a')
    b = _profile([1], [[5.0]], 'b')
    fused = combine([EnsembleSource(a, 'none'), EnsembleSource(b, 'none')], [1, 2], imputation='zero')
    np.testing.assert_array_equal(fused.row_of(2), [2.0, 0.0])


def test_combine_follows_master_order():
    a = _profile([3, 1, 2], [[3.0], [1.0], [2.0]], 'a')
    fused = combine([EnsembleSource(a, 'none')], [1, 2, 3])
    np.testing.assert_array_equal(fused.values[:, 0], [1.0, 2.0, 3.0])


def test_combine_with_pca_and_quantile():
    rng = np.random.default_rng(4)
    a = _profile(range(20), rng.normal(size=(20, 6)), 'a')
    b = _profile(range(20), rng.normal(size=(20, 3)), 'b')
    fused = combine([EnsembleSource(a, 'unit_length', pca_k=2), EnsembleSource(b, 'quantile')], list(range(20)))
    assert fused.dim == 5
    np.testing.assert_allclose(np.linalg.norm(fused.values[:, :2], axis=1), 1.0)
    assert fused.values[:, 2:].min() >= 0.0 and fused.values[:, 2:].max() <= 1.0


def test_combine_rejects_absent_source():
    a = _profile([1, 2], [[1.0], [2.0]], 'a')
    b = _profile([9], [[1.0]], 'b')
    with pytest.raises(ConfigurationError):
        combine([EnsembleSource(a), EnsembleSource(b)], [1, 2])


def test_profile_rejects_duplicate_clients():
    with pytest.raises(ContractError):
        _profile([1, 1], [[1.0], [2.0]], 'a')


def test_profile_subset_and_frame():
    profile = _profile([5, 6, 7], [[1.0], [2.0], [3.0]], 'a')
    subset = profile.subset([7, 5])
    np.testing.assert_array_equal(subset.values[:, 0], [3.0, 1.0])
    assert list(subset.to_frame().index) == [7, 5]
    with pytest.raises(ContractError):
        profile.subset([8])


def test_random_profile():
    profile = random_profile([1, 2, 3], width=4, seed=1)
    assert profile.values.shape == (3, 4)
    np.testing.assert_array_equal(profile.values, random_profile([1, 2, 3], width=4, seed=1).values)


def test_combine_standard_normalization():
    rng = np.random.default_rng(7)
    a = _profile(range(30), rng.normal(3.0, 2.0, size=(30, 4)), 'a')
    fused = combine([EnsembleSource(a, 'standard')], list(range(30)))
    np.testing.assert_allclose(fused.values.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(fused.values.std(axis=0), 1.0, atol=1e-12)


def test_combine_three_sources_with_random_missingness():
    rng = np.random.default_rng(8)
    master = np.arange(40)
    widths = [3, 5, 2]
    for _ in range(25):
        sources, kept = [], []
        for i, width in enumerate(widths):
            present = rng.random(len(master)) < rng.uniform(0.2, 0.9)
            present[rng.integers(len(master))] = True
            ids = master[present]
            kept.append(present)
            sources.append(EnsembleSource(_profile(ids, rng.normal(size=(len(ids), width)), f's{i}')))
        fused = combine(sources, master)
        assert not np.any(np.isnan(fused.values))
        start = 0
        for source, present, width in zip(sources, kept, widths):
            block = fused.values[:, start:start + width]
            np.testing.assert_allclose(np.linalg.norm(block[present], axis=1), 1.0, atol=1e-6)
            expected = l2_normalize(source.profile.values).mean(axis=0)
            np.testing.assert_array_equal(block[~present], np.tile(expected, ((~present).sum(), 1)))
            start += width
