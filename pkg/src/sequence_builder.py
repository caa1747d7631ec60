"""
Construction des vocabulaires et encodage des historiques en séquences multi-champs
"""

import json
import logging
from dataclasses import dataclass, field as dc_field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import RangeError, SchemaError
from event_log import EVENT_TYPES, PRODUCT_EVENTS, SECONDS_PER_DAY, EventLog

logger = logging.getLogger(__name__)

# Identifiants réservés, communs à tous les champs
PAD, MISSING, RARE, SOS, EOS = 0, 1, 2, 3, 4
N_SPECIAL = 5
SPECIAL_NAMES = ('<pad>', '<missing>', '<rare>', '<sos>', '<eos>')

DATA_FIELDS = ('day_index', 'week_index', 'event_type', 'category', 'sku', 'price', 'url', 'token')
TEMPORAL_FIELDS = ('day_index', 'week_index')

# Champ de séquence -> colonne du journal
SOURCE_COLUMNS = {
    'category': 'category',
    'sku': 'sku',
    'price': 'price_bucket',
    'url': 'url',
}

DEFAULT_MAX_SIZES = {'sku': 5000, 'url': 5000}

VARIANTS = {
    'week_all': ('week_index', 'event_type', 'category', 'sku', 'price', 'url'),
    'all': ('event_type', 'category', 'sku', 'price', 'url'),
    'day_event_type': ('day_index', 'event_type'),
    'sku_text': ('token',),
}


@dataclass
class FieldVocabulary:
    """Table valeur <-> identifiant d'un champ, identifiants réservés en tête"""
    field: str
    values: List = dc_field(default_factory=list)

    def __post_init__(self):
        self._index = {v: i + N_SPECIAL for i, v in enumerate(self.values)}

    @property
    def size(self) -> int:
        return N_SPECIAL + len(self.values)

    def encode(self, value) -> int:
        if value is None or value is pd.NA:
            return MISSING
        return self._index.get(value, RARE)

    def encode_array(self, values: pd.Series) -> np.ndarray:
        """Encodage vectorisé ; valeurs manquantes -> MISSING, hors vocabulaire -> RARE"""
        series = pd.Series(values).astype(object)
        missing = series.isna().to_numpy()
        ids = series.map(self._index).fillna(RARE).to_numpy(dtype=np.int64)
        ids[missing] = MISSING
        return ids

    def decode(self, token_id: int):
        """Identifiant -> valeur (nom du symbole pour les identifiants réservés)"""
        if not 0 <= token_id < self.size:
            raise RangeError(f"identifiant {token_id} hors du vocabulaire '{self.field}' ({self.size})")
        if token_id < N_SPECIAL:
            return SPECIAL_NAMES[token_id]
        return self.values[token_id - N_SPECIAL]

    def to_dict(self) -> Dict:
        return {'field': self.field, 'values': list(self.values)}

    @classmethod
    def from_dict(cls, data: Dict) -> 'FieldVocabulary':
        return cls(field=data['field'], values=list(data['values']))


@dataclass(frozen=True)
class SequenceSchema:
    """Liste ordonnée des champs d'une variante et longueur maximale"""
    fields: Tuple[str, ...]
    max_len: int = 128
    variant: str = 'custom'

    def __post_init__(self):
        unknown = [f for f in self.fields if f not in DATA_FIELDS]
        if unknown:
            raise SchemaError(f"champ inconnu : {unknown[0]}")
        if sum(f in TEMPORAL_FIELDS for f in self.fields) > 1:
            raise SchemaError("day_index et week_index sont exclusifs")
        if self.max_len < 1:
            raise SchemaError(f"max_len doit être >= 1 (reçu {self.max_len})")

    @property
    def temporal_field(self) -> Optional[str]:
        return next((f for f in self.fields if f in TEMPORAL_FIELDS), None)

    @classmethod
    def for_variant(cls, variant: str, max_len: int = 128) -> 'SequenceSchema':
        if variant not in VARIANTS:
            raise SchemaError(f"variante inconnue : {variant}")
        return cls(fields=VARIANTS[variant], max_len=max_len, variant=variant)


@dataclass
class EncodedSequence:
    """Séquence encodée d'un client : un tableau d'identifiants par champ"""
    client_id: int
    fields: Dict[str, np.ndarray]

    @property
    def length(self) -> int:
        return len(next(iter(self.fields.values())))

    @property
    def mask(self) -> np.ndarray:
        return np.ones(self.length, dtype=bool)


def temporal_index(timestamp: int, window_start: int, granularity: str) -> int:
    """Indice de jour ou de semaine depuis le début de la fenêtre"""
    if timestamp < window_start:
        raise RangeError(f"horodatage {timestamp} antérieur au début de fenêtre {window_start}")
    day = (timestamp - window_start) // SECONDS_PER_DAY
    if granularity == 'day':
        return int(day)
    if granularity == 'week':
        return int(day // 7)
    raise SchemaError(f"granularité inconnue : {granularity}")


def _temporal_indices(timestamps: np.ndarray, window_start: int, field: str) -> np.ndarray:
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if len(timestamps) and timestamps.min() < window_start:
        raise RangeError(f"horodatage {timestamps.min()} antérieur au début de fenêtre {window_start}")
    days = (timestamps - window_start) // SECONDS_PER_DAY
    return days if field == 'day_index' else days // 7


def field_values(events: pd.DataFrame, field: str, window_start: int = 0) -> pd.Series:
    """Valeurs brutes d'un champ pour une table d'événements"""
    if field in TEMPORAL_FIELDS:
        return pd.Series(_temporal_indices(events['timestamp'].to_numpy(), window_start, field))
    if field == 'event_type':
        return events['event_type'].reset_index(drop=True)
    if field == 'token':
        tokens = events.loc[events['event_type'].isin(PRODUCT_EVENTS), 'name_tokens']
        return pd.Series([t for toks in tokens for t in toks], dtype=object)
    if field in SOURCE_COLUMNS:
        return events[SOURCE_COLUMNS[field]].reset_index(drop=True)
    raise SchemaError(f"champ inconnu : {field}")


def build_vocab(log: EventLog, field: str, max_size: Optional[int] = None) -> FieldVocabulary:
    """
    Construit le vocabulaire d'un champ

    Conserve les max_size valeurs les plus fréquentes (égalités départagées
    par la plus petite valeur brute). event_type n'est jamais tronqué.
    """
    if field not in DATA_FIELDS:
        raise SchemaError(f"champ inconnu : {field}")
    if max_size is not None and max_size < 1:
        raise SchemaError(f"max_size doit être >= 1 (reçu {max_size})")

    if field == 'event_type':
        return FieldVocabulary(field, list(EVENT_TYPES))

    values = field_values(log.events, field, log.window[0]).dropna()
    counts = values.astype(np.int64).value_counts()
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max_size]
    vocab = FieldVocabulary(field, [int(v) for v, _ in ranked])
    logger.info(f"✓ Vocabulaire '{field}' : {len(vocab.values)} valeurs retenues sur {len(counts)}")
    return vocab


def _wrap(ids: np.ndarray) -> np.ndarray:
    return np.concatenate([[SOS], ids, [EOS]]).astype(np.int64)


def encode_sequence(client_id: int,
                    history: pd.DataFrame,
                    schema: SequenceSchema,
                    vocabs: Dict[str, FieldVocabulary],
                    window_start: int = 0) -> EncodedSequence:
    """
    Encode l'historique d'un client selon un schéma

    Garde les max_len événements les plus récents, encode les champs absents
    en MISSING et les valeurs hors vocabulaire en RARE, puis entoure la
    séquence des pas SOS et EOS.
    """
    missing = [f for f in schema.fields if f not in vocabs]
    if missing:
        raise SchemaError(f"vocabulaire non ajusté pour le champ '{missing[0]}'")
    if schema.fields == ('token',):
        return encode_sku_text(client_id, history, vocabs['token'])

    recent = history.iloc[-schema.max_len:] if len(history) > schema.max_len else history
    fields = {}
    for f in schema.fields:
        ids = vocabs[f].encode_array(field_values(recent, f, window_start))
        fields[f] = _wrap(ids)
    return EncodedSequence(client_id, fields)


def encode_sku_text(client_id: int,
                    history: pd.DataFrame,
                    vocab: FieldVocabulary,
                    n_products: int = 4) -> EncodedSequence:
    """
    Séquence de jetons des noms des n_products derniers produits consultés

    Les achats, ajouts et retraits du panier comptent tous, sans dédoublonnage.
    """
    products = history[history['event_type'].isin(PRODUCT_EVENTS)]
    last = products.iloc[-n_products:] if n_products > 0 else products.iloc[0:0]
    tokens = [t for toks in last['name_tokens'] for t in toks]
    ids = vocab.encode_array(pd.Series(tokens, dtype=object))
    return EncodedSequence(client_id, {'token': _wrap(ids)})


def pad_batch(sequences: Sequence[EncodedSequence],
              fields: Sequence[str],
              length: Optional[int] = None) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    Assemble un batch rectangulaire

    Returns:
        (identifiants [B, T] par champ complétés par PAD, masque booléen [B, T])
    """
    max_len = max(s.length for s in sequences)
    T = max_len if length is None else max(length, max_len)
    B = len(sequences)
    batch = {f: np.full((B, T), PAD, dtype=np.int64) for f in fields}
    mask = np.zeros((B, T), dtype=bool)
    for b, seq in enumerate(sequences):
        L = seq.length
        for f in fields:
            batch[f][b, :L] = seq.fields[f]
        mask[b, :L] = True
    return batch, mask


class SequenceEncoder:
    """Ajuste les vocabulaires d'un schéma et encode tous les clients"""

    def __init__(self,
                 schema: SequenceSchema,
                 max_sizes: Optional[Dict[str, Optional[int]]] = None,
                 n_products: int = 4):
        self.schema = schema
        self.max_sizes = dict(DEFAULT_MAX_SIZES)
        if max_sizes:
            self.max_sizes.update(max_sizes)
        self.n_products = n_products
        self.vocabs: Dict[str, FieldVocabulary] = {}
        self.window_start = 0

    def fit(self, log: EventLog) -> 'SequenceEncoder':
        """Ajuste un vocabulaire par champ du schéma"""
        self.window_start = log.window[0]
        for f in self.schema.fields:
            self.vocabs[f] = build_vocab(log, f, self.max_sizes.get(f))
        return self

    def encode_client(self, client_id: int, history: pd.DataFrame) -> EncodedSequence:
        if self.schema.fields == ('token',):
            return encode_sku_text(client_id, history, self.vocabs['token'], self.n_products)
        return encode_sequence(client_id, history, self.schema, self.vocabs, self.window_start)

    def encode(self, log: EventLog, n_jobs: int = 1) -> List[EncodedSequence]:
        """Encode tous les clients du journal, dans l'ordre des identifiants"""
        histories = list(log.iter_histories())
        logger.info(f"Encodage de {len(histories)} clients (schéma {self.schema.variant})...")
        if n_jobs == 1:
            sequences = [self.encode_client(cid, h) for cid, h in histories]
        else:
            sequences = Parallel(n_jobs=n_jobs)(
                delayed(self.encode_client)(cid, h) for cid, h in histories
            )
        logger.info(f"✓ {len(sequences)} séquences encodées")
        return sequences

    @property
    def vocab_sizes(self) -> Dict[str, int]:
        return {f: self.vocabs[f].size for f in self.schema.fields}

    def save_vocabs(self, path: str):
        """Sérialise le schéma et les vocabulaires en JSON"""
        data = {
            'variant': self.schema.variant,
            'fields': list(self.schema.fields),
            'max_len': self.schema.max_len,
            'window_start': self.window_start,
            'n_products': self.n_products,
            'vocabularies': [self.vocabs[f].to_dict() for f in self.schema.fields],
        }
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
        logger.info(f"✓ Vocabulaires sauvegardés dans {path}")

    @classmethod
    def load_vocabs(cls, path: str) -> 'SequenceEncoder':
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        schema = SequenceSchema(tuple(data['fields']), data['max_len'], data['variant'])
        encoder = cls(schema, n_products=data.get('n_products', 4))
        encoder.window_start = data['window_start']
        encoder.vocabs = {v['field']: FieldVocabulary.from_dict(v) for v in data['vocabularies']}
        return encoder


def save_sequences(sequences: Iterable[EncodedSequence], path: str):
    """Sauvegarde compacte des séquences encodées (npz)"""
    sequences = list(sequences)
    fields = list(sequences[0].fields) if sequences else []
    arrays = {'client_ids': np.array([s.client_id for s in sequences], dtype=np.int64),
              'lengths': np.array([s.length for s in sequences], dtype=np.int64)}
    for f in fields:
        arrays[f'field__{f}'] = np.concatenate([s.fields[f] for s in sequences])
    np.savez_compressed(path, **arrays)
    logger.info(f"✓ {len(sequences)} séquences écrites dans {path}")


def load_sequences(path: str) -> List[EncodedSequence]:
    data = np.load(path)
    fields = [k[len('field__'):] for k in data.files if k.startswith('field__')]
    offsets = np.concatenate([[0], np.cumsum(data['lengths'])])
    sequences = []
    for i, cid in enumerate(data['client_ids']):
        start, end = offsets[i], offsets[i + 1]
        sequences.append(EncodedSequence(int(cid), {f: data[f'field__{f}'][start:end].copy() for f in fields}))
    return sequences
