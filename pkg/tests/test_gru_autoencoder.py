"""
Tests de l'autoencodeur GRU
"""

import math

import numpy as np
import pytest

import gru_autoencoder as gae
import neural_core as nc
from errors import ContractError, IdRangeError, ShapeError
from sequence_builder import EOS, SOS, EncodedSequence

VOCAB = {'day_index': 8, 'event_type': 10}


def _config(**overrides):
    values = dict(variant='day_event_type', hidden_size=4, n_layers=2, dropout=0.0,
                  vocab_sizes=dict(VOCAB), dtype='float64', progress=False, batch_size=4)
    values.update(overrides)
    return gae.GruAeConfig(**values)


def _sequence(client_id, days, events):
    return EncodedSequence(client_id, {
        'day_index': np.array([SOS] + list(days) + [EOS], dtype=np.int64),
        'event_type': np.array([SOS] + list(events) + [EOS], dtype=np.int64),
    })


def _random_sequences(rng, n, max_events=4):
    sequences = []
    for cid in range(n):
        length = int(rng.integers(0, max_events + 1))
        sequences.append(_sequence(cid, rng.integers(5, 8, length), rng.integers(5, 10, length)))
    return sequences


def _stacked_step(x, hidden, stack):
    for i, layer in enumerate(stack.layers):
        hidden[i] = nc.gru_cell(x, hidden[i], layer).data[0]
        x = hidden[i]
    return x


def _row_sum(model, seq, t):
    return sum(model.embeddings[f].data[seq.fields[f][t]] for f in model.fields)


def test_presets():
    small = gae.GruAeConfig.preset('day_event_type')
    assert (small.hidden_size, small.n_layers, small.dropout) == (128, 2, 0.5)
    for variant in ('week_all', 'all', 'sku_text'):
        config = gae.GruAeConfig.preset(variant)
        assert (config.hidden_size, config.n_layers, config.dropout) == (512, 3, 0.1)
        assert config.max_len == 128


def test_embed_event_single_field(rng):
    model = gae.GruAeModel(_config(variant='sku_text', vocab_sizes={'token': 12}), seed=1)
    out = gae.embed_event({'token': np.array([7])}, model)
    np.testing.assert_array_equal(out.data[0], model.embeddings['token'].data[7])


def test_embed_event_is_additive():
    model = gae.GruAeModel(_config(), seed=1)
    v = np.array([0.1, -0.3, 0.7, 2.0])
    model.embeddings['day_index'].data[6] = v
    model.embeddings['event_type'].data[8] = -v
    out = gae.embed_event({'day_index': np.array([6]), 'event_type': np.array([8])}, model)
    np.testing.assert_array_equal(out.data[0], np.zeros(4))


def test_embed_event_week_all_sums_six_rows():
    sizes = {'week_index': 6, 'event_type': 10, 'category': 9, 'sku': 11, 'price': 8, 'url': 7}
    model = gae.GruAeModel(_config(variant='week_all', vocab_sizes=sizes), seed=3)
    ids = {'week_index': 5, 'event_type': 6, 'category': 1, 'sku': 10, 'price': 2, 'url': 5}
    out = gae.embed_event({f: np.array([i]) for f, i in ids.items()}, model)
    expected = sum(model.embeddings[f].data[i] for f, i in ids.items())
    np.testing.assert_allclose(out.data[0], expected, rtol=1e-12, atol=1e-15)


def test_embed_event_id_out_of_range():
    model = gae.GruAeModel(_config(), seed=1)
    with pytest.raises(IdRangeError):
        gae.embed_event({'day_index': np.array([8]), 'event_type': np.array([5])}, model)


def test_zero_model_gives_zero_embedding():
    model = gae.GruAeModel(_config(), seed=1)
    for p in model.named_parameters().values():
        p.data[...] = 0.0
    u = gae.encode(_sequence(1, [5, 6], [7, 8]), model)
    np.testing.assert_array_equal(u, np.zeros(4))


def test_empty_history_embedding_is_deterministic():
    model = gae.GruAeModel(_config(), seed=5)
    a = gae.encode(_sequence(1, [], []), model)
    b = gae.encode(_sequence(2, [], []), model)
    np.testing.assert_array_equal(a, b)


def test_encode_matches_stacked_cells():
    model = gae.GruAeModel(_config(), seed=7)
    seq = _sequence(1, [5], [9])
    hidden = [np.zeros(4), np.zeros(4)]
    for t in range(seq.length):
        _stacked_step(_row_sum(model, seq, t), hidden, model.encoder)
    np.testing.assert_allclose(gae.encode(seq, model), hidden[-1], rtol=1e-12)


def test_encode_rejects_other_schema():
    model = gae.GruAeModel(_config(), seed=1)
    seq = EncodedSequence(1, {'token': np.array([SOS, EOS])})
    with pytest.raises(ContractError):
        gae.encode(seq, model)


def test_decode_single_step_for_empty_history():
    model = gae.GruAeModel(_config(), seed=1)
    logits = gae.decode_teacher_forced(np.zeros(4), _sequence(1, [], []), model)
    assert logits['event_type'].shape == (1, VOCAB['event_type'])
    assert logits['day_index'].shape == (1, VOCAB['day_index'])


def test_decode_matches_stacked_cells_and_heads(rng):
    model = gae.GruAeModel(_config(), seed=11)
    seq = _sequence(1, [5, 7], [9, 6])
    u = rng.normal(size=4)
    hidden = [np.zeros(4), np.zeros(4)]
    expected = {f: [] for f in model.fields}
    for t in range(1, seq.length):
        top = _stacked_step(_row_sum(model, seq, t - 1) + u, hidden, model.decoder)
        for f in model.fields:
            weight, bias = model.heads[f]
            expected[f].append(top @ weight.data + bias.data)
    logits = gae.decode_teacher_forced(u, seq, model)
    for f in model.fields:
        np.testing.assert_allclose(logits[f], np.stack(expected[f]), rtol=1e-10, atol=1e-12)


def test_zero_user_decoder_is_unconditional():
    model = gae.GruAeModel(_config(), seed=2)
    seq = _sequence(1, [5, 6], [7, 8])
    a = gae.decode_teacher_forced(np.zeros(4), seq, model)
    b = gae.decode_teacher_forced(np.zeros(4), _sequence(2, [5, 6], [7, 8]), model)
    for f in model.fields:
        np.testing.assert_array_equal(a[f], b[f])


def test_decode_rejects_wrong_user_size():
    model = gae.GruAeModel(_config(), seed=1)
    with pytest.raises(ShapeError):
        gae.decode_teacher_forced(np.zeros(5), _sequence(1, [5], [6]), model)


def test_reconstruction_loss_uniform_logits():
    seq = _sequence(1, [5, 6, 7], [5, 6, 7])
    logits = {f: np.zeros((seq.length - 1, v)) for f, v in VOCAB.items()}
    loss = gae.reconstruction_loss(logits, seq)
    assert loss == pytest.approx(math.log(8) + math.log(10))


def test_reconstruction_loss_perfect_logits():
    seq = _sequence(1, [5, 6], [5, 6])
    logits = {}
    for f, v in VOCAB.items():
        field_logits = np.zeros((seq.length - 1, v))
        field_logits[np.arange(seq.length - 1), seq.fields[f][1:]] = 100.0
        logits[f] = field_logits
    assert gae.reconstruction_loss(logits, seq) < 1e-30


def test_reconstruction_loss_matches_batched_loss(rng):
    model = gae.GruAeModel(_config(), seed=4)
    seq = _sequence(1, [5, 7, 6], [9, 6, 5])
    u = rng.normal(size=4)
    single = gae.reconstruction_loss(gae.decode_teacher_forced(u, seq, model), seq)
    batched = gae.sequence_loss(model, [seq], users=u.reshape(1, -1))
    assert batched == pytest.approx(single, rel=1e-10)


def test_padding_does_not_change_loss(rng):
    model = gae.GruAeModel(_config(), seed=4)
    seq = _sequence(1, [5, 7], [9, 6])
    exact = float(gae._forward_loss(model, [seq]).data)
    padded = float(gae._forward_loss(model, [seq], length=9).data)
    assert padded == pytest.approx(exact, rel=1e-12)


def test_full_loss_gradients_match_finite_differences(rng):
    model = gae.GruAeModel(_config(hidden_size=3), seed=6)
    sequences = _random_sequences(rng, 3, max_events=3)
    errors = nc.gradient_check(lambda: gae._forward_loss(model, sequences), model.named_parameters())
    assert max(errors.values()) < 1e-4


def test_batch_embedding_matches_single(rng):
    model = gae.GruAeModel(_config(), seed=8)
    sequences = _random_sequences(rng, 7)
    profile = gae.embed_all(sequences, model, batch_size=3)
    assert profile.source == 'gru_ae_day_event_type'
    assert profile.values.shape == (7, 4)
    for row, seq in zip(profile.values, sequences):
        np.testing.assert_allclose(row, gae.encode(seq, model), rtol=1e-6, atol=1e-7)


def test_same_client_twice_gives_identical_rows(rng):
    model = gae.GruAeModel(_config(), seed=8)
    seq = _sequence(3, [5, 6], [7, 8])
    first = gae.embed_all([seq], model)
    second = gae.embed_all([seq], model)
    np.testing.assert_array_equal(first.values, second.values)


def test_training_is_deterministic(rng):
    sequences = _random_sequences(rng, 8)
    config = _config(epochs=3, dropout=0.2)
    a = gae.train(sequences, config, seed=21)
    b = gae.train(sequences, config, seed=21)
    assert a.loss_history == b.loss_history
    for name, p in a.model.named_parameters().items():
        np.testing.assert_array_equal(p.data, b.model.named_parameters()[name].data)


def test_training_decreases_loss(rng):
    sequences = _random_sequences(rng, 16)
    result = gae.train(sequences, _config(epochs=15, lr=0.01), seed=0)
    assert result.loss_history[-1] < result.loss_history[0]


def test_train_rejects_empty_set():
    with pytest.raises(ContractError):
        gae.train([], _config(), seed=0)


def test_model_save_and_load(tmp_path):
    model = gae.GruAeModel(_config(dtype='float32'), seed=9)
    path = tmp_path / 'ae.ckpt'
    model.save(str(path))
    loaded = gae.GruAeModel.load(str(path))
    assert loaded.config.variant == 'day_event_type'
    seq = _sequence(1, [5, 6], [7, 8])
    np.testing.assert_array_equal(gae.encode(seq, loaded), gae.encode(seq, model))


@pytest.mark.slow
def test_overfits_small_set():
    rng = np.random.default_rng(0)
    sequences = _random_sequences(rng, 32, max_events=3)
    config = _config(hidden_size=64, n_layers=1, batch_size=8, epochs=500, lr=0.01)
    result = gae.train(sequences, config, seed=0)
    accuracy = gae.teacher_forced_accuracy(result.model, sequences)
    assert min(accuracy.values()) >= 0.95

    users = gae.embed_all(sequences, result.model).values.astype(np.float64)
    own = gae.sequence_loss(result.model, sequences, users=users)
    swapped = gae.sequence_loss(result.model, sequences, users=np.roll(users, 1, axis=0))
    assert swapped > own
