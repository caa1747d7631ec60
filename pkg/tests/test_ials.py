"""
Tests de la factorisation implicite iALS
"""

import numpy as np
import pytest
from scipy import sparse

from conftest import make_event, make_log
from errors import NumericError, SchemaError
from ials import (IalsModel, InteractionMatrix, build_interaction_matrix, ials_fit,
                  objective, solve_items, solve_users)


def _matrix(dense):
    dense = np.asarray(dense, dtype=np.float64)
    return InteractionMatrix(sparse.csr_matrix(dense), np.arange(dense.shape[0]), np.arange(dense.shape[1]))


def _model(M, k, reg, alpha, seed=0):
    rng = np.random.default_rng(seed)
    return IalsModel(rng.normal(size=(M.shape[0], k)), rng.normal(size=(M.shape[1], k)),
                     M.client_ids, M.item_ids, reg=reg, alpha=alpha)


def test_category_weights_are_summed():
    log = make_log([make_event(1, 0, 'product_buy', category=4),
                    make_event(1, 1, 'product_buy', category=4),
                    make_event(1, 2, 'add_to_cart', category=4),
                    make_event(1, 3, 'remove_from_cart', category=4)])
    M = build_interaction_matrix(log, 'category')
    assert M.shape == (1, 1)
    assert M.dense()[0, 0] == 7.0


def test_page_visits_only_give_empty_category_row():
    log = make_log([make_event(1, 0, 'page_visit', url=3),
                    make_event(2, 1, 'add_to_cart', category=9)])
    M = build_interaction_matrix(log, 'category')
    np.testing.assert_array_equal(M.dense()[0], np.zeros(1))
    assert M.dense()[1, 0] == 1.0


def test_url_duplicates_are_summed():
    log = make_log([make_event(1, t, 'page_visit', url=3) for t in range(4)])
    M = build_interaction_matrix(log, 'url')
    assert M.dense()[0, 0] == 4.0
    assert M.matrix.nnz == 1


def test_unknown_target():
    with pytest.raises(SchemaError):
        build_interaction_matrix(make_log([make_event(1, 0, 'page_visit')]), 'sku')


def test_rows_follow_requested_clients(small_log):
    M = build_interaction_matrix(small_log, 'url', client_ids=[3, 2, 1])
    assert list(M.client_ids) == [3, 2, 1]
    assert M.dense()[0].sum() == 0
    assert M.dense()[1].sum() == 2


def test_gram_objective_matches_dense():
    rng = np.random.default_rng(3)
    dense = rng.poisson(0.4, (12, 9)).astype(np.float64)
    M = _matrix(dense)
    model = _model(M, 4, reg=0.3, alpha=5.0)
    assert objective(M, model) == pytest.approx(objective(M, model, dense=True), rel=1e-10)


def test_objective_at_zero_factors():
    dense = np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    M = _matrix(dense)
    model = IalsModel(np.zeros((3, 2)), np.zeros((2, 2)), M.client_ids, M.item_ids, reg=0.5, alpha=10.0)
    assert objective(M, model, dense=True) == pytest.approx((1 + 10 * 2) + (1 + 10 * 1))
    assert objective(M, model) == pytest.approx(32.0)


def test_rank_one_pattern_is_reconstructed_exactly():
    a = np.array([1.0, 0.0, 1.0, 1.0])
    b = np.array([0.0, 1.0, 1.0])
    M = _matrix(3.0 * np.outer(a, b))
    model = IalsModel(a.reshape(-1, 1), b.reshape(-1, 1), M.client_ids, M.item_ids, reg=0.0, alpha=40.0)
    assert objective(M, model, dense=True) == pytest.approx(0.0, abs=1e-12)


def test_half_sweeps_never_increase_objective():
    rng = np.random.default_rng(11)
    dense = (rng.random((20, 15)) < 0.2) * rng.integers(1, 5, (20, 15))
    M = _matrix(dense)
    model = _model(M, 3, reg=0.1, alpha=40.0, seed=5)
    previous = objective(M, model, dense=True)
    for _ in range(5):
        for solve in (solve_users, solve_items):
            solve(M, model)
            current = objective(M, model, dense=True)
            assert current <= previous + 1e-9 * max(1.0, abs(previous))
            previous = current


def test_single_cell_closed_form():
    M = _matrix([[2.0]])
    alpha, reg, v = 3.0, 0.5, 0.8
    model = IalsModel(np.zeros((1, 1)), np.array([[v]]), M.client_ids, M.item_ids, reg=reg, alpha=alpha)
    solve_users(M, model)
    c = 1 + alpha * 2.0
    assert model.user_factors[0, 0] == pytest.approx(c * v / (c * v * v + reg))


def test_empty_matrix_gives_zero_factors():
    M = _matrix(np.zeros((4, 3)))
    model = ials_fit(M, k=2, reg=0.1, alpha=0.0, iterations=3, progress=False)
    np.testing.assert_array_equal(model.user_factors, np.zeros((4, 2)))
    np.testing.assert_array_equal(model.item_factors, np.zeros((3, 2)))


def test_singular_system_raises_numeric_error():
    M = _matrix([[1.0]])
    model = IalsModel(np.zeros((1, 1)), np.zeros((1, 1)), M.client_ids, M.item_ids, reg=0.0, alpha=1.0)
    with pytest.raises(NumericError):
        solve_users(M, model)


def test_fit_is_deterministic_and_thread_independent():
    rng = np.random.default_rng(2)
    M = _matrix((rng.random((30, 10)) < 0.3) * 1.0)
    a = ials_fit(M, k=4, iterations=4, seed=9, progress=False)
    b = ials_fit(M, k=4, iterations=4, seed=9, n_jobs=2, progress=False)
    np.testing.assert_array_equal(a.user_factors, b.user_factors)
    np.testing.assert_array_equal(a.item_factors, b.item_factors)
    assert len(a.history) == 4


def test_user_embeddings_and_persistence(tmp_path, small_log):
    M = build_interaction_matrix(small_log, 'category')
    model = ials_fit(M, k=3, iterations=2, progress=False)
    profile = model.user_embeddings()
    assert profile.source == 'ials_category'
    assert profile.values.shape == (3, 3)
    # client 3 n'a aucune interaction
    np.testing.assert_array_equal(profile.row_of(3), np.zeros(3))

    path = tmp_path / 'ials.joblib'
    model.save(str(path))
    loaded = IalsModel.load(str(path))
    np.testing.assert_array_equal(loaded.user_factors, model.user_factors)


def test_permuting_users_permutes_factors():
    rng = np.random.default_rng(11)
    dense = rng.poisson(0.6, size=(25, 12)).astype(np.float64)
    perm = rng.permutation(25)
    M = _matrix(dense)
    M_perm = InteractionMatrix(sparse.csr_matrix(dense[perm]), perm, np.arange(12))
    a = ials_fit(M, k=3, iterations=4, seed=5, progress=False)
    b = ials_fit(M_perm, k=3, iterations=4, seed=5, progress=False)
    np.testing.assert_allclose(b.user_factors, a.user_factors[perm], rtol=1e-7, atol=1e-10)
    np.testing.assert_allclose(b.item_factors, a.item_factors, rtol=1e-7, atol=1e-10)
