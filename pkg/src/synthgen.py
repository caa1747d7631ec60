"""
Générateur de journaux synthétiques à structure comportementale connue

Chaque client reçoit un archétype (taux d'événements, affinités de
catégories et d'URL, préférence de prix, probabilité d'abandon). Les
tirages d'un client proviennent d'un flux aléatoire dérivé de (graine,
identifiant) : la génération parallèle reste déterministe.
"""

import json
import logging
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import ParameterError
from event_log import (COLUMNS, EVENT_TYPES, N_PRICE_BUCKETS, OPTIONAL_INT_FIELDS,
                       SECONDS_PER_DAY, TOKEN_LENGTH, EventLog, serialize_events)

logger = logging.getLogger(__name__)

CODEBOOK_SIZE = 256
DEFAULT_WINDOW_START = 1_700_000_000


@dataclass
class Archetype:
    """Profil comportemental : taux journaliers par type d'événement et préférences"""
    name: str
    rates: Dict[str, float]
    churn_probability: float = 0.1
    price_preference: float = 50.0
    price_spread: float = 15.0
    category_concentration: float = 0.5
    url_concentration: float = 0.5

    def validate(self):
        unknown = set(self.rates) - set(EVENT_TYPES)
        if unknown:
            raise ParameterError(f"archétype '{self.name}' : type d'événement inconnu {sorted(unknown)[0]}")
        if any(r < 0 for r in self.rates.values()):
            raise ParameterError(f"archétype '{self.name}' : taux négatif")
        if not 0 <= self.churn_probability <= 1:
            raise ParameterError(f"archétype '{self.name}' : probabilité d'abandon hors de [0, 1]")
        if self.price_spread <= 0 or self.category_concentration <= 0 or self.url_concentration <= 0:
            raise ParameterError(f"archétype '{self.name}' : dispersion et concentrations doivent être > 0")


def default_archetypes() -> List[Archetype]:
    return [
        Archetype('fidele', {'page_visit': 0.8, 'search_query': 0.15, 'add_to_cart': 0.2,
                             'remove_from_cart': 0.05, 'product_buy': 0.12},
                  churn_probability=0.05, price_preference=60, category_concentration=0.3),
        Archetype('explorateur', {'page_visit': 1.2, 'search_query': 0.3, 'add_to_cart': 0.06,
                                  'remove_from_cart': 0.02, 'product_buy': 0.01},
                  churn_probability=0.2, price_preference=40, category_concentration=1.0),
        Archetype('chasseur', {'page_visit': 0.5, 'search_query': 0.2, 'add_to_cart': 0.15,
                               'remove_from_cart': 0.08, 'product_buy': 0.07},
                  churn_probability=0.15, price_preference=15, price_spread=8),
        Archetype('occasionnel', {'page_visit': 0.2, 'search_query': 0.05, 'add_to_cart': 0.03,
                                  'remove_from_cart': 0.01, 'product_buy': 0.015},
                  churn_probability=0.6, price_preference=30),
    ]


@dataclass
class SynthConfig:
    n_clients: int = 10_000
    n_skus: int = 500
    n_categories: int = 50
    n_urls: int = 1_000
    n_price_buckets: int = N_PRICE_BUCKETS
    window_days: int = 90
    window_start: int = DEFAULT_WINDOW_START
    archetypes: List[Archetype] = dc_field(default_factory=default_archetypes)
    archetype_weights: Optional[List[float]] = None
    # instant d'abandon tiré uniformément dans cette fraction de la fenêtre
    churn_start_fraction: float = 0.5
    churn_end_fraction: float = 1.0
    activity_shape: Optional[float] = 2.0
    personal_concentration: float = 20.0
    seed: int = 42

    @classmethod
    def from_dict(cls, data: Dict) -> 'SynthConfig':
        data = dict(data)
        if 'archetypes' in data:
            data['archetypes'] = [a if isinstance(a, Archetype) else Archetype(**a) for a in data['archetypes']]
        return cls(**data)

    def validate(self):
        for name in ('n_clients', 'n_skus', 'n_categories', 'n_urls', 'window_days'):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} doit être >= 1")
        if not 1 <= self.n_price_buckets <= N_PRICE_BUCKETS:
            raise ParameterError(f"n_price_buckets hors de [1, {N_PRICE_BUCKETS}]")
        if not self.archetypes:
            raise ParameterError("au moins un archétype est nécessaire")
        for archetype in self.archetypes:
            archetype.validate()
        if not 0 <= self.churn_start_fraction <= self.churn_end_fraction <= 1:
            raise ParameterError("fractions d'abandon incohérentes")
        if self.archetype_weights is not None:
            w = np.asarray(self.archetype_weights, dtype=np.float64)
            if len(w) != len(self.archetypes) or np.any(w < 0) or w.sum() <= 0:
                raise ParameterError("archetype_weights incohérent avec la liste d'archétypes")

    @property
    def window(self):
        return self.window_start, self.window_start + self.window_days * SECONDS_PER_DAY - 1


@dataclass
class Catalog:
    """Catalogue partagé : catégorie, prix et jetons de nom de chaque SKU"""
    sku_category: np.ndarray
    sku_price: np.ndarray
    sku_popularity: np.ndarray
    sku_tokens: np.ndarray
    archetype_sku_probs: np.ndarray
    archetype_category_probs: np.ndarray
    archetype_url_probs: np.ndarray
    archetype_query_probs: np.ndarray


def build_catalog(config: SynthConfig, seed: int) -> Catalog:
    rng = np.random.default_rng([seed, 0])
    n_skus, n_cat = config.n_skus, config.n_categories
    sku_category = rng.integers(0, n_cat, n_skus)
    sku_price = rng.integers(0, config.n_price_buckets, n_skus)
    sku_popularity = 1.0 / np.arange(1, n_skus + 1) ** 0.8
    rng.shuffle(sku_popularity)

    # jetons de nom : distribution propre à chaque catégorie
    category_token_probs = rng.dirichlet(np.full(CODEBOOK_SIZE, 0.1), size=n_cat)
    sku_tokens = np.stack([rng.choice(CODEBOOK_SIZE, TOKEN_LENGTH, p=category_token_probs[c])
                           for c in sku_category])

    cat_probs, sku_probs, url_probs, query_probs = [], [], [], []
    for archetype in config.archetypes:
        cp = rng.dirichlet(np.full(n_cat, archetype.category_concentration))
        price_fit = np.exp(-0.5 * ((sku_price - archetype.price_preference) / archetype.price_spread) ** 2)
        sp = cp[sku_category] * sku_popularity * (price_fit + 1e-3)
        cat_probs.append(cp)
        sku_probs.append(sp / sp.sum())
        url_probs.append(rng.dirichlet(np.full(config.n_urls, archetype.url_concentration)))
        query_probs.append(rng.dirichlet(np.full(CODEBOOK_SIZE, 0.2)))
    return Catalog(sku_category, sku_price, sku_popularity, sku_tokens,
                   np.array(sku_probs), np.array(cat_probs), np.array(url_probs), np.array(query_probs))


def _client_events(client_id: int, archetype_index: int, config: SynthConfig,
                   catalog: Catalog, seed: int) -> Dict:
    rng = np.random.default_rng([seed, 1, client_id])
    archetype = config.archetypes[archetype_index]
    start = config.window_start
    span = config.window_days * SECONDS_PER_DAY

    churned = bool(rng.random() < archetype.churn_probability)
    churn_at = None
    active_span = span
    if churned:
        frac = rng.uniform(config.churn_start_fraction, config.churn_end_fraction)
        active_span = int(frac * span)
        churn_at = start + active_span
    multiplier = 1.0 if config.activity_shape is None else rng.gamma(config.activity_shape, 1.0 / config.activity_shape)

    # préférences individuelles autour de celles de l'archétype
    sku_probs = rng.dirichlet(config.personal_concentration * catalog.archetype_sku_probs[archetype_index] + 1e-3)
    url_probs = rng.dirichlet(config.personal_concentration * catalog.archetype_url_probs[archetype_index] + 1e-3)

    columns = {c: [] for c in COLUMNS}
    days = active_span / SECONDS_PER_DAY
    for event_type in EVENT_TYPES:
        rate = archetype.rates.get(event_type, 0.0)
        count = rng.poisson(rate * days * multiplier) if rate > 0 and active_span > 0 else 0
        if count == 0:
            continue
        times = start + rng.integers(0, active_span, count)
        columns['client_id'].extend([client_id] * count)
        columns['timestamp'].extend(times.tolist())
        columns['event_type'].extend([event_type] * count)
        if event_type == 'page_visit':
            urls = rng.choice(len(url_probs), count, p=url_probs)
            product = [None] * count
            columns['url'].extend(urls.tolist())
            columns['query_tokens'].extend(product)
            for c in ('sku', 'category', 'price_bucket', 'name_tokens'):
                columns[c].extend(product)
        elif event_type == 'search_query':
            queries = rng.choice(CODEBOOK_SIZE, (count, TOKEN_LENGTH),
                                 p=catalog.archetype_query_probs[archetype_index])
            columns['query_tokens'].extend(tuple(q) for q in queries.tolist())
            for c in ('sku', 'category', 'price_bucket', 'url', 'name_tokens'):
                columns[c].extend([None] * count)
        else:
            skus = rng.choice(len(sku_probs), count, p=sku_probs)
            columns['sku'].extend(skus.tolist())
            columns['category'].extend(catalog.sku_category[skus].tolist())
            columns['price_bucket'].extend(catalog.sku_price[skus].tolist())
            columns['name_tokens'].extend(tuple(t) for t in catalog.sku_tokens[skus].tolist())
            columns['url'].extend([None] * count)
            columns['query_tokens'].extend([None] * count)

    return {
        'columns': columns,
        'truth': {'client_id': client_id, 'archetype': archetype.name,
                  'churned': churned, 'churn_ts': churn_at},
    }


def truth_records(truth: pd.DataFrame) -> List[Dict]:
    return [
        {'client_id': int(row.client_id), 'archetype': str(row.archetype), 'churned': bool(row.churned),
         'churn_ts': None if pd.isna(row.churn_ts) else int(row.churn_ts)}
        for row in truth.itertuples(index=False)
    ]


@dataclass
class SynthResult:
    log: EventLog
    truth: pd.DataFrame
    config: SynthConfig

    def write(self, events_path: str, truth_path: Optional[str] = None):
        Path(events_path).parent.mkdir(parents=True, exist_ok=True)
        with open(events_path, 'wb') as f:
            f.write(serialize_events(self.log))
        logger.info(f"✓ {len(self.log)} événements synthétiques écrits dans {events_path}")
        if truth_path:
            payload = {
                'window': list(self.config.window),
                'archetypes': [asdict(a) for a in self.config.archetypes],
                'clients': truth_records(self.truth),
            }
            with open(truth_path, 'w', encoding='utf-8') as f:
                json.dump(payload, f, ensure_ascii=False, indent=2)
            logger.info(f"✓ Vérité terrain écrite dans {truth_path}")


def generate(config: SynthConfig, seed: Optional[int] = None, n_jobs: int = 1) -> SynthResult:
    """
    Génère un journal synthétique et l'affectation des archétypes

    Returns:
        SynthResult (journal trié, table de vérité par client)
    """
    config.validate()
    seed = config.seed if seed is None else seed
    catalog = build_catalog(config, seed)

    weights = np.ones(len(config.archetypes)) if config.archetype_weights is None \
        else np.asarray(config.archetype_weights, dtype=np.float64)
    assign_rng = np.random.default_rng([seed, 2])
    assignments = assign_rng.choice(len(config.archetypes), config.n_clients, p=weights / weights.sum())
    client_ids = np.arange(config.n_clients, dtype=np.int64)

    logger.info(f"Génération de {config.n_clients} clients ({len(config.archetypes)} archétypes, "
                f"{config.window_days} jours)...")
    if n_jobs == 1:
        parts = [_client_events(int(c), int(a), config, catalog, seed) for c, a in zip(client_ids, assignments)]
    else:
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_client_events)(int(c), int(a), config, catalog, seed) for c, a in zip(client_ids, assignments)
        )

    merged = {c: [] for c in COLUMNS}
    for part in parts:
        for c in COLUMNS:
            merged[c].extend(part['columns'][c])
    frame = pd.DataFrame(merged, columns=COLUMNS)
    frame['client_id'] = frame['client_id'].astype(np.int64)
    frame['timestamp'] = frame['timestamp'].astype(np.int64)
    frame['event_type'] = frame['event_type'].astype(object)
    for column in OPTIONAL_INT_FIELDS:
        frame[column] = pd.array(frame[column].tolist(), dtype='Int64')

    truth = pd.DataFrame([p['truth'] for p in parts], columns=['client_id', 'archetype', 'churned', 'churn_ts'])
    truth['churn_ts'] = truth['churn_ts'].astype('Int64')
    log = EventLog(frame, config.window, client_ids=client_ids)
    logger.info(f"✓ {len(log)} événements générés")
    return SynthResult(log, truth, config)
