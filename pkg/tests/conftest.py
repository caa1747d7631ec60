"""
Fixtures partagées : petits journaux d'événements construits à la main
"""

import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Ajouter le dossier src au path
sys.path.append(str(Path(__file__).resolve().parent.parent / 'src'))
sys.path.append(str(Path(__file__).resolve().parent.parent))

from event_log import EventLog, events_to_frame, parse_record  # noqa: E402

DAY = 86400


def make_event(client_id, timestamp, event_type, **fields):
    """Construit un événement valide en complétant les champs obligatoires"""
    record = {'client_id': client_id, 'timestamp': timestamp, 'event_type': event_type}
    if event_type in ('product_buy', 'add_to_cart', 'remove_from_cart'):
        record.update(sku=fields.get('sku', 1), category=fields.get('category', 1),
                      price_bucket=fields.get('price_bucket', 10),
                      name_tokens=fields.get('name_tokens', [fields.get('sku', 1)] * 16))
    elif event_type == 'page_visit':
        record['url'] = fields.get('url', 1)
    else:
        record['query_tokens'] = fields.get('query_tokens', [0] * 16)
    return parse_record(record, 0)


def make_log(events, window=None, client_ids=None) -> EventLog:
    return EventLog(events_to_frame(list(events)), window, client_ids)


@pytest.fixture
def small_log() -> EventLog:
    """Trois clients sur 30 jours, dont un sans événement"""
    events = [
        make_event(1, 0, 'page_visit', url=10),
        make_event(1, DAY, 'add_to_cart', sku=5, category=2, price_bucket=20),
        make_event(1, 2 * DAY, 'product_buy', sku=5, category=2, price_bucket=20),
        make_event(1, 20 * DAY, 'search_query'),
        make_event(1, 25 * DAY, 'page_visit', url=11),
        make_event(2, 3 * DAY, 'page_visit', url=10),
        make_event(2, 4 * DAY, 'page_visit', url=12),
        make_event(2, 22 * DAY, 'product_buy', sku=6, category=3, price_bucket=40),
        make_event(2, 26 * DAY, 'add_to_cart', sku=7, category=3, price_bucket=50),
    ]
    return make_log(events, window=(0, 30 * DAY - 1), client_ids=[1, 2, 3])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
