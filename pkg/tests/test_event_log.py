"""
Tests du module event_log
"""

import json

import numpy as np
import pytest

from conftest import DAY, make_event, make_log
from errors import ParseError, RangeError, ValidationError
from event_log import (event_counts, iter_events, parse_events, serialize_events,
                       split_window)


def _line(**record) -> bytes:
    return (json.dumps(record) + '\n').encode('utf-8')


def test_history_sorted_by_timestamp():
    stream = [
        _line(client_id=7, timestamp=200, event_type='page_visit', url=1),
        _line(client_id=7, timestamp=100, event_type='page_visit', url=2),
    ]
    log = parse_events(stream)
    assert list(log.history_of(7)['timestamp']) == [100, 200]


def test_equal_timestamps_keep_file_order():
    stream = [
        _line(client_id=1, timestamp=50, event_type='page_visit', url=3),
        _line(client_id=1, timestamp=50, event_type='page_visit', url=1),
        _line(client_id=1, timestamp=50, event_type='page_visit', url=2),
    ]
    log = parse_events(stream)
    assert list(log.history_of(1)['url']) == [3, 1, 2]


def test_page_visit_with_sku_is_rejected():
    stream = [_line(client_id=1, timestamp=0, event_type='page_visit', url=1, sku=3)]
    with pytest.raises(ValidationError) as exc:
        parse_events(stream)
    assert exc.value.field == 'sku'


def test_product_event_requires_price():
    stream = [_line(client_id=1, timestamp=0, event_type='product_buy', sku=1, category=1,
                    name_tokens=[0] * 16)]
    with pytest.raises(ValidationError) as exc:
        parse_events(stream)
    assert exc.value.field == 'price_bucket'


def test_malformed_line_reports_line_number():
    stream = [_line(client_id=1, timestamp=0, event_type='page_visit', url=1), b'{not json\n']
    with pytest.raises(ParseError) as exc:
        parse_events(stream)
    assert exc.value.line_number == 2


def test_invalid_utf8_line_reports_line_number():
    stream = [_line(client_id=1, timestamp=0, event_type='page_visit', url=1), b'\xff\xfe\n']
    with pytest.raises(ParseError) as exc:
        parse_events(stream)
    assert exc.value.line_number == 2


def test_price_bucket_out_of_range():
    stream = [_line(client_id=1, timestamp=0, event_type='add_to_cart', sku=1, category=1,
                    price_bucket=100, name_tokens=[0] * 16)]
    with pytest.raises(ValidationError):
        parse_events(stream)


def test_empty_stream():
    log = parse_events([])
    assert len(log) == 0
    assert len(log.clients()) == 0


def test_serialize_then_parse_preserves_events(small_log):
    again = parse_events(serialize_events(small_log).splitlines(keepends=True), small_log.window)
    assert list(iter_events(again)) == list(iter_events(small_log))


def test_split_window_boundaries():
    log = make_log([make_event(1, ts, 'page_visit') for ts in (5, 15, 25)], window=(0, 30))
    history, holdout = split_window(log, 10, horizon_days=1)
    assert list(history.events['timestamp']) == [5]
    assert list(holdout.events['timestamp']) == [15, 25]

    log = make_log([make_event(1, ts, 'page_visit') for ts in (5, 15, DAY + 20)], window=(0, 2 * DAY))
    history, holdout = split_window(log, 10, horizon_days=1)
    assert list(history.events['timestamp']) == [5]
    assert list(holdout.events['timestamp']) == [15]


def test_split_at_window_start_gives_empty_history(small_log):
    history, holdout = split_window(small_log, 0)
    assert len(history) == 0
    assert list(history.clients()) == [1, 2, 3]


def test_split_keeps_clients_without_holdout_events(small_log):
    history, holdout = split_window(small_log, 10 * DAY)
    assert 1 in history.clients() and 1 in holdout.clients()
    assert len(holdout.history_of(1)) == 1
    assert len(holdout.history_of(3)) == 0


def test_split_rejects_cutoff_outside_window(small_log):
    with pytest.raises(RangeError):
        split_window(small_log, 40 * DAY)


def test_event_counts_single_client():
    log = make_log([make_event(1, 0, 'page_visit', url=1),
                    make_event(1, 1, 'page_visit', url=2),
                    make_event(1, 2, 'page_visit', url=1)])
    table = event_counts(log)
    row = table.loc['page_visit']
    assert row['interactions'] == 3
    assert row['clients'] == 1
    assert row['entities'] == 2
    assert row['avg_length'] == 3.0
    buys = table.loc['product_buy']
    assert buys['interactions'] == 0 and buys['avg_length'] == 0.0
    assert np.isnan(table.loc['search_query', 'entities'])


def test_with_clients_restricts_log(small_log):
    subset = small_log.with_clients([2, 3])
    assert list(subset.clients()) == [2, 3]
    assert set(subset.events['client_id']) == {2}
    assert subset.window == small_log.window


def test_event_counts_ignore_client_order():
    events = [make_event(1, 0, 'page_visit', url=1),
              make_event(2, 1, 'product_buy', sku=3),
              make_event(3, 2, 'add_to_cart', sku=4),
              make_event(3, 3, 'search_query', query_tokens=[1] * 16)]
    relabel = {1: 30, 2: 10, 3: 20}
    shuffled = [make_event(relabel[e.client_id], e.timestamp, e.event_type,
                           **{k: v for k, v in e.to_record().items()
                              if k not in ('client_id', 'timestamp', 'event_type')})
                for e in reversed(events)]
    original = event_counts(make_log(events))
    permuted = event_counts(make_log(shuffled))
    np.testing.assert_array_equal(original.fillna(-1).to_numpy(), permuted.fillna(-1).to_numpy())
