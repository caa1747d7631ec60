"""
Tests du noyau numérique : GRU, entropie croisée, rétropropagation, Adam, dropout
"""

import math

import numpy as np
import pytest

import neural_core as nc
from errors import ContractError, IdRangeError, ParameterError, ShapeError, TrainingError


def _zero_gru(d_in, d_h):
    tensors = {}
    for gate in ('z', 'r', 'h'):
        tensors[f'W_{gate}'] = nc.parameter(np.zeros((d_in, d_h)), f'W_{gate}')
        tensors[f'U_{gate}'] = nc.parameter(np.zeros((d_h, d_h)), f'U_{gate}')
        tensors[f'b_{gate}'] = nc.parameter(np.zeros(d_h), f'b_{gate}')
    return nc.GruParams(**tensors)


def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def _scalar_gru(x, h, p):
    """Évaluation coordonnée par coordonnée des trois portes"""
    d_in, d_h = len(x), len(h)
    W = {g: p[f'W_{g}'] for g in 'zrh'}
    U = {g: p[f'U_{g}'] for g in 'zrh'}
    b = {g: p[f'b_{g}'] for g in 'zrh'}
    z = [_sigmoid(sum(x[i] * W['z'][i][j] for i in range(d_in))
                  + sum(h[i] * U['z'][i][j] for i in range(d_h)) + b['z'][j]) for j in range(d_h)]
    r = [_sigmoid(sum(x[i] * W['r'][i][j] for i in range(d_in))
                  + sum(h[i] * U['r'][i][j] for i in range(d_h)) + b['r'][j]) for j in range(d_h)]
    h_tilde = [math.tanh(sum(x[i] * W['h'][i][j] for i in range(d_in))
                         + sum(r[i] * h[i] * U['h'][i][j] for i in range(d_h)) + b['h'][j])
               for j in range(d_h)]
    return [(1 - z[j]) * h[j] + z[j] * h_tilde[j] for j in range(d_h)]


def test_gru_cell_zero_params_halves_state():
    params = _zero_gru(3, 2)
    v = np.array([0.4, -1.2])
    h = nc.gru_cell(np.ones(3), v, params)
    np.testing.assert_allclose(h.data[0], 0.5 * v)


def test_gru_cell_zero_state_stays_zero():
    params = _zero_gru(3, 2)
    h = nc.gru_cell(np.ones(3), np.zeros(2), params)
    np.testing.assert_array_equal(h.data, np.zeros((1, 2)))


def test_gru_cell_matches_scalar_evaluation(rng):
    params = nc.GruParams.init(3, 2, rng, dtype=np.float64)
    x = rng.normal(size=3)
    h_prev = rng.normal(size=2)
    expected = _scalar_gru(x.tolist(), h_prev.tolist(),
                           {k.split('.')[-1]: t.data.tolist() for k, t in params.named('g').items()})
    h = nc.gru_cell(x, h_prev, params)
    np.testing.assert_allclose(h.data[0], expected, rtol=1e-12)


def test_gru_cell_shape_mismatch(rng):
    params = nc.GruParams.init(3, 2, rng, dtype=np.float64)
    with pytest.raises(ShapeError):
        nc.gru_cell(np.ones(4), np.zeros(2), params)


def test_softmax_cross_entropy_uniform():
    loss, grad = nc.softmax_cross_entropy(np.zeros(7), 3)
    assert loss == pytest.approx(math.log(7))
    assert grad.sum() == pytest.approx(0.0, abs=1e-12)


def test_softmax_cross_entropy_is_stable():
    loss, _ = nc.softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert math.isfinite(loss)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_softmax_cross_entropy_direct_value():
    loss, _ = nc.softmax_cross_entropy(np.array([1.0, 2.0, 3.0]), 2)
    expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_softmax_cross_entropy_target_out_of_range():
    with pytest.raises(IdRangeError):
        nc.softmax_cross_entropy(np.zeros(3), 3)


def test_backward_of_linear_sum():
    x = np.array([[1.0, -2.0, 3.0]])
    W = nc.parameter(np.ones((3, 2)), 'W')
    grads = nc.backward(nc.total(nc.matmul(nc.constant(x), W)), {'W': W})
    np.testing.assert_array_equal(grads['W'], np.outer(x[0], np.ones(2)))


def test_unused_parameter_has_zero_gradient():
    W = nc.parameter(np.ones((2, 2)), 'W')
    unused = nc.parameter(np.ones(3), 'unused')
    grads = nc.backward(nc.total(W * W), {'W': W, 'unused': unused})
    np.testing.assert_array_equal(grads['unused'], np.zeros(3))
    np.testing.assert_array_equal(grads['W'], 2 * np.ones((2, 2)))


def test_backward_requires_scalar():
    W = nc.parameter(np.ones((2, 2)), 'W')
    with pytest.raises(ContractError):
        nc.backward(W * W, {'W': W})


def test_gradients_match_finite_differences(rng):
    stack = nc.GruStack.init(3, 4, 2, rng, dtype=np.float64, prefix='enc')
    head_W = nc.parameter(rng.normal(size=(4, 5)), 'head.W')
    head_b = nc.parameter(rng.normal(size=5), 'head.b')
    params = stack.named_parameters('enc')
    params.update({'head.W': head_W, 'head.b': head_b})
    inputs = [rng.normal(size=(2, 3)) for _ in range(3)]
    mask = np.array([[True, True, True], [True, True, False]])
    targets = np.array([1, 4])

    def loss_fn():
        outputs, hidden = stack.run([nc.constant(x) for x in inputs], 2, step_mask=mask)
        logits = nc.affine(nc.tanh(hidden[-1]), head_W, head_b)
        return nc.cross_entropy(logits, targets, np.ones(2))

    errors = nc.gradient_check(loss_fn, params)
    assert max(errors.values()) < 1e-6


def test_binary_cross_entropy_gradient(rng):
    W = nc.parameter(rng.normal(size=(4, 3)), 'W')
    X = rng.normal(size=(6, 4))
    Y = (rng.random((6, 3)) > 0.5).astype(np.float64)
    errors = nc.gradient_check(lambda: nc.binary_cross_entropy(nc.constant(X) @ W, Y), {'W': W})
    assert errors['W'] < 1e-6


def test_masked_steps_carry_state_exactly(rng):
    stack = nc.GruStack.init(3, 4, 2, rng, dtype=np.float64)
    steps = [rng.normal(size=(1, 3)) for _ in range(3)]
    _, short = stack.run([nc.constant(x) for x in steps], 1)
    padded = steps + [np.zeros((1, 3)), np.zeros((1, 3))]
    mask = np.array([[True, True, True, False, False]])
    _, long = stack.run([nc.constant(x) for x in padded], 1, step_mask=mask)
    for a, b in zip(short, long):
        np.testing.assert_array_equal(a.data, b.data)


def test_adam_zero_gradient_keeps_parameters():
    p = nc.parameter(np.array([1.0, -2.0]), 'p')
    state = nc.AdamState(lr=0.1)
    nc.adam_step({'p': p}, {'p': np.zeros(2)}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_matches_formula():
    g = np.array([0.3, -2.0])
    p = nc.parameter(np.zeros(2), 'p')
    state = nc.AdamState(lr=0.01)
    nc.adam_step({'p': p}, {'p': g.copy()}, state)
    expected = -0.01 * g / (np.abs(g) + state.eps)
    np.testing.assert_allclose(p.data, expected, rtol=1e-10)


def test_adam_constant_gradient_step_tends_to_lr():
    p = nc.parameter(np.zeros(1), 'p')
    state = nc.AdamState(lr=0.01)
    previous = 0.0
    for _ in range(2000):
        nc.adam_step({'p': p}, {'p': np.array([0.5])}, state)
        step = previous - p.data[0]
        previous = p.data[0]
    assert step == pytest.approx(0.01, rel=1e-3)


def test_adam_rejects_non_finite_gradient():
    p = nc.parameter(np.zeros(2), 'poids')
    with pytest.raises(TrainingError, match='poids'):
        nc.adam_step({'poids': p}, {'poids': np.array([np.nan, 0.0])}, nc.AdamState())


def test_dropout_identity_cases(rng):
    x = nc.constant(rng.normal(size=(4, 5)))
    assert nc.dropout(x, 0.0, True, rng) is x
    assert nc.dropout(x, 0.7, False, rng) is x


def test_dropout_statistics():
    x = nc.constant(np.ones(1_000_000))
    out = nc.dropout(x, 0.5, True, 7).data
    zero_fraction = float(np.mean(out == 0))
    assert abs(zero_fraction - 0.5) < 0.005
    assert out.mean() == pytest.approx(1.0, abs=0.01)


def test_dropout_rate_must_be_below_one():
    with pytest.raises(ParameterError):
        nc.dropout(nc.constant(np.ones(3)), 1.0, True, 0)


def test_clip_grad_norm():
    grads = {'a': np.array([3.0]), 'b': np.array([4.0])}
    norm = nc.clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert grads['a'][0] == pytest.approx(0.6)
    assert grads['b'][0] == pytest.approx(0.8)


def test_checkpoint_round_trip(tmp_path, rng):
    params = nc.GruStack.init(2, 3, 1, rng).named_parameters('enc')
    path = tmp_path / 'model.ckpt'
    nc.save_checkpoint(params, str(path), metadata={'variant': 'all'})
    arrays, metadata = nc.load_checkpoint(str(path))
    assert metadata == {'variant': 'all'}
    assert list(arrays) == list(params)
    for name, p in params.items():
        np.testing.assert_array_equal(arrays[name], p.data)
