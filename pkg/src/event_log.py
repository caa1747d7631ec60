"""
Module de lecture, validation et découpage temporel des journaux d'événements
Chaque client dispose d'un historique chronologique (tri stable sur l'ordre du fichier)
"""

import json
import logging
from dataclasses import dataclass
from typing import IO, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from errors import ParseError, RangeError, ValidationError

logger = logging.getLogger(__name__)

EVENT_TYPES = ('product_buy', 'add_to_cart', 'remove_from_cart', 'page_visit', 'search_query')
PRODUCT_EVENTS = ('product_buy', 'add_to_cart', 'remove_from_cart')
COLUMNS = ['client_id', 'timestamp', 'event_type', 'sku', 'category',
           'price_bucket', 'url', 'query_tokens', 'name_tokens']
OPTIONAL_INT_FIELDS = ('sku', 'category', 'price_bucket', 'url')
TOKEN_FIELDS = ('query_tokens', 'name_tokens')
TOKEN_LENGTH = 16
N_PRICE_BUCKETS = 100
SECONDS_PER_DAY = 86400

# Champs obligatoires par type d'événement ; tous les autres doivent être absents
REQUIRED_FIELDS = {
    'product_buy': ('sku', 'category', 'price_bucket', 'name_tokens'),
    'add_to_cart': ('sku', 'category', 'price_bucket', 'name_tokens'),
    'remove_from_cart': ('sku', 'category', 'price_bucket', 'name_tokens'),
    'page_visit': ('url',),
    'search_query': ('query_tokens',),
}


@dataclass(frozen=True)
class Event:
    """Une action horodatée d'un client"""
    client_id: int
    timestamp: int
    event_type: str
    sku: Optional[int] = None
    category: Optional[int] = None
    price_bucket: Optional[int] = None
    url: Optional[int] = None
    query_tokens: Optional[Tuple[int, ...]] = None
    name_tokens: Optional[Tuple[int, ...]] = None

    def validate(self, line_number: Optional[int] = None) -> 'Event':
        """Vérifie les combinaisons de champs propres au type d'événement"""
        if self.event_type not in REQUIRED_FIELDS:
            raise ValidationError('event_type', f"type inconnu '{self.event_type}'", line_number)

        required = REQUIRED_FIELDS[self.event_type]
        for field in OPTIONAL_INT_FIELDS + TOKEN_FIELDS:
            value = getattr(self, field)
            if field in required and value is None:
                raise ValidationError(field, f"obligatoire pour {self.event_type}", line_number)
            if field not in required and value is not None:
                raise ValidationError(field, f"interdit pour {self.event_type}", line_number)

        if self.price_bucket is not None and not 0 <= self.price_bucket < N_PRICE_BUCKETS:
            raise ValidationError('price_bucket', f"{self.price_bucket} hors de [0, 99]", line_number)

        for field in TOKEN_FIELDS:
            tokens = getattr(self, field)
            if tokens is not None and len(tokens) != TOKEN_LENGTH:
                raise ValidationError(field, f"{len(tokens)} jetons au lieu de {TOKEN_LENGTH}", line_number)
        return self

    def to_record(self) -> Dict:
        """Dictionnaire JSONL sans les champs absents"""
        record = {}
        for column in COLUMNS:
            value = getattr(self, column)
            if value is None:
                continue
            record[column] = list(value) if column in TOKEN_FIELDS else value
        return record


class EventLog:
    """Historiques clients triés par horodatage, immuables après construction"""

    def __init__(self,
                 events: pd.DataFrame,
                 window: Optional[Tuple[int, int]] = None,
                 client_ids: Optional[Iterable[int]] = None):
        frame = events.copy()
        if '_order' not in frame.columns:
            frame['_order'] = np.arange(len(frame), dtype=np.int64)
        frame = frame.sort_values(['client_id', 'timestamp', '_order']).reset_index(drop=True)
        self._events = frame

        if window is None:
            if len(frame):
                window = (int(frame['timestamp'].min()), int(frame['timestamp'].max()))
            else:
                window = (0, 0)
        self.window = (int(window[0]), int(window[1]))

        known = frame['client_id'].unique() if len(frame) else np.array([], dtype=np.int64)
        if client_ids is not None:
            known = np.union1d(np.asarray(list(client_ids), dtype=np.int64), known)
        self._client_ids = np.sort(np.asarray(known, dtype=np.int64))

        cids = frame['client_id'].to_numpy(dtype=np.int64)
        self._starts = np.searchsorted(cids, self._client_ids, side='left')
        self._ends = np.searchsorted(cids, self._client_ids, side='right')

    @property
    def events(self) -> pd.DataFrame:
        """Vue (copie) de la table des événements"""
        return self._events.drop(columns='_order').copy()

    def __len__(self) -> int:
        return len(self._events)

    def clients(self) -> np.ndarray:
        """Identifiants clients connus, y compris ceux sans événement"""
        return self._client_ids.copy()

    def history_of(self, client_id: int) -> pd.DataFrame:
        """Historique chronologique d'un client (vide si inconnu)"""
        idx = np.searchsorted(self._client_ids, client_id)
        if idx >= len(self._client_ids) or self._client_ids[idx] != client_id:
            return self._events.iloc[0:0].drop(columns='_order')
        return self._events.iloc[self._starts[idx]:self._ends[idx]].drop(columns='_order')

    def iter_histories(self) -> Iterable[Tuple[int, pd.DataFrame]]:
        """Parcourt (client_id, historique) dans l'ordre des identifiants"""
        events = self._events.drop(columns='_order')
        for cid, start, end in zip(self._client_ids, self._starts, self._ends):
            yield int(cid), events.iloc[start:end]

    def with_clients(self, client_ids: Iterable[int]) -> 'EventLog':
        """Même journal restreint (ou étendu) à une liste de clients"""
        wanted = np.asarray(list(client_ids), dtype=np.int64)
        frame = self._events[self._events['client_id'].isin(wanted)]
        return EventLog(frame, self.window, client_ids=wanted)


def _parse_optional_int(record: Dict, field: str, line_number: int) -> Optional[int]:
    value = record.get(field)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(field, f"entier attendu, reçu {value!r}", line_number)
    return value


def _parse_tokens(record: Dict, field: str, line_number: int) -> Optional[Tuple[int, ...]]:
    value = record.get(field)
    if value is None:
        return None
    if not isinstance(value, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in value):
        raise ValidationError(field, "liste d'entiers attendue", line_number)
    return tuple(value)


def parse_record(record: Dict, line_number: int) -> Event:
    """Construit et valide un événement à partir d'un objet JSON"""
    if not isinstance(record, dict):
        raise ParseError(line_number, "objet JSON attendu")
    unknown = set(record) - set(COLUMNS)
    if unknown:
        raise ValidationError(sorted(unknown)[0], "champ inconnu", line_number)
    for field in ('client_id', 'timestamp', 'event_type'):
        if record.get(field) is None:
            raise ValidationError(field, "champ obligatoire manquant", line_number)

    client_id = _parse_optional_int(record, 'client_id', line_number)
    timestamp = _parse_optional_int(record, 'timestamp', line_number)
    event = Event(
        client_id=client_id,
        timestamp=timestamp,
        event_type=record['event_type'],
        sku=_parse_optional_int(record, 'sku', line_number),
        category=_parse_optional_int(record, 'category', line_number),
        price_bucket=_parse_optional_int(record, 'price_bucket', line_number),
        url=_parse_optional_int(record, 'url', line_number),
        query_tokens=_parse_tokens(record, 'query_tokens', line_number),
        name_tokens=_parse_tokens(record, 'name_tokens', line_number),
    )
    return event.validate(line_number)


def events_to_frame(events: List[Event]) -> pd.DataFrame:
    """Liste d'événements -> table typée (entiers nullables pour les champs optionnels)"""
    frame = pd.DataFrame(
        [[getattr(e, c) for c in COLUMNS] for e in events],
        columns=COLUMNS,
    )
    frame['client_id'] = frame['client_id'].astype(np.int64)
    frame['timestamp'] = frame['timestamp'].astype(np.int64)
    frame['event_type'] = frame['event_type'].astype(object)
    for field in OPTIONAL_INT_FIELDS:
        frame[field] = frame[field].astype('Int64')
    for field in TOKEN_FIELDS:
        frame[field] = frame[field].astype(object)
    return frame


def parse_events(stream: Union[IO[bytes], Iterable[bytes]],
                 window: Optional[Tuple[int, int]] = None) -> EventLog:
    """
    Lit un flux JSONL d'événements

    Args:
        stream: flux binaire (ou itérable de lignes) au format events-JSONL
        window: fenêtre d'observation [début, fin] ; déduite des données si absente

    Returns:
        EventLog trié par client puis horodatage
    """
    events = []
    for line_number, raw in enumerate(stream, start=1):
        try:
            line = raw.decode('utf-8') if isinstance(raw, bytes) else raw
        except UnicodeDecodeError as e:
            raise ParseError(line_number, f"encodage UTF-8 invalide ({e.reason})") from e
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(line_number, f"JSON invalide ({e.msg})") from e
        event = parse_record(record, line_number)
        if window is not None and not window[0] <= event.timestamp <= window[1]:
            raise ValidationError('timestamp', f"{event.timestamp} hors de la fenêtre {window}", line_number)
        events.append(event)

    logger.info(f"✓ {len(events)} événements lus")
    return EventLog(events_to_frame(events), window)


def read_events(path: str, window: Optional[Tuple[int, int]] = None) -> EventLog:
    """Charge un fichier events-JSONL"""
    logger.info(f"Chargement du fichier {path}...")
    with open(path, 'rb') as f:
        return parse_events(f, window)


def _row_to_event(row) -> Event:
    values = {}
    for column in COLUMNS:
        value = getattr(row, column)
        if value is None or value is pd.NA or (isinstance(value, float) and np.isnan(value)):
            values[column] = None
        elif column in TOKEN_FIELDS:
            values[column] = tuple(int(t) for t in value)
        elif column == 'event_type':
            values[column] = str(value)
        else:
            values[column] = int(value)
    return Event(**values)


def iter_events(log: EventLog) -> Iterable[Event]:
    """Événements dans l'ordre (client, horodatage, ordre du fichier)"""
    for row in log.events.itertuples(index=False):
        yield _row_to_event(row)


def serialize_events(log: EventLog) -> bytes:
    """Inverse de parse_events : une ligne JSON par événement"""
    lines = [json.dumps(e.to_record(), separators=(',', ':')) for e in iter_events(log)]
    return ''.join(line + '\n' for line in lines).encode('utf-8')


def write_events(log: EventLog, path: str):
    """Écrit un journal au format events-JSONL"""
    with open(path, 'wb') as f:
        f.write(serialize_events(log))
    logger.info(f"✓ {len(log)} événements écrits dans {path}")


def split_window(log: EventLog, cutoff_ts: int, horizon_days: int = 14) -> Tuple[EventLog, EventLog]:
    """
    Sépare l'historique (avant cutoff) de la fenêtre d'évaluation

    Les deux journaux conservent la liste complète des clients,
    y compris ceux sans événement.
    """
    start, end = log.window
    if not start <= cutoff_ts <= end:
        raise RangeError(f"cutoff {cutoff_ts} hors de la fenêtre d'observation [{start}, {end}]")
    if horizon_days <= 0:
        raise RangeError(f"horizon_days doit être > 0 (reçu {horizon_days})")

    bound = cutoff_ts + horizon_days * SECONDS_PER_DAY
    frame = log._events
    ts = frame['timestamp']
    clients = log.clients()

    history = EventLog(frame[ts < cutoff_ts], (start, cutoff_ts), client_ids=clients)
    holdout = EventLog(frame[(ts >= cutoff_ts) & (ts < bound)], (cutoff_ts, bound), client_ids=clients)
    logger.info(f"Découpage au cutoff {cutoff_ts} : {len(history)} événements d'historique, "
                f"{len(holdout)} en fenêtre d'évaluation ({horizon_days} jours)")
    return history, holdout


def event_counts(log: EventLog) -> pd.DataFrame:
    """
    Statistiques par type d'événement

    Returns:
        DataFrame indexé par event_type : interactions, clients, entities
        (URL pour page_visit, SKU pour les événements produit, absent pour
        search_query) et avg_length = interactions / clients
    """
    frame = log._events
    rows = []
    for event_type in ('page_visit', 'search_query', 'add_to_cart', 'remove_from_cart', 'product_buy'):
        subset = frame[frame['event_type'] == event_type]
        n_interactions = len(subset)
        n_clients = subset['client_id'].nunique()
        if event_type == 'page_visit':
            n_entities = float(subset['url'].nunique())
        elif event_type in PRODUCT_EVENTS:
            n_entities = float(subset['sku'].nunique())
        else:
            n_entities = np.nan
        rows.append({
            'event_type': event_type,
            'interactions': n_interactions,
            'clients': n_clients,
            'entities': n_entities,
            'avg_length': n_interactions / n_clients if n_clients else 0.0,
        })
    return pd.DataFrame(rows).set_index('event_type')
