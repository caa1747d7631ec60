"""
Module d'extraction de features statistiques par client
"""

import logging
from collections import OrderedDict
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from ensemble import ProfileMatrix
from errors import ContractError
from event_log import PRODUCT_EVENTS, SECONDS_PER_DAY, EventLog

logger = logging.getLogger(__name__)

SOURCES = OrderedDict([
    ('product', PRODUCT_EVENTS),
    ('page_visit', ('page_visit',)),
])
WINDOWS = OrderedDict([('7d', 7), ('30d', 30), ('all', None)])


def _build_schema() -> 'OrderedDict[str, str]':
    schema = OrderedDict()
    for source in SOURCES:
        for window in WINDOWS:
            schema[f'{source}_count_{window}'] = f"nombre d'événements {source} sur la fenêtre {window}"
        for window in WINDOWS:
            schema[f'{source}_mean_gap_{window}'] = (
                f"écart moyen en secondes entre événements {source} successifs ({window}), 0 si moins de 2")
        schema[f'{source}_wow_change'] = (
            f"(c_7j - c_7j_précédents) / (c_7j_précédents + 1) pour {source}")
    schema['distinct_skus'] = "SKU distincts parmi les événements produit"
    schema['distinct_categories'] = "catégories distinctes parmi les événements produit"
    schema['distinct_urls'] = "URL distinctes visitées"
    schema['price_mean'] = "moyenne des tranches de prix achetées, 0 sans achat"
    schema['price_std'] = "écart-type des tranches de prix achetées, 0 sans achat"
    schema['price_min'] = "minimum des tranches de prix achetées, 0 sans achat"
    schema['price_max'] = "maximum des tranches de prix achetées, 0 sans achat"
    schema['cart_abandonment'] = "max(0, ajouts - achats) / max(ajouts, 1)"
    return schema


FEATURE_SCHEMA = _build_schema()


def feature_names(schema: Optional[Dict[str, str]] = None) -> List[str]:
    """Noms des features, dans l'ordre des colonnes"""
    return list((schema or FEATURE_SCHEMA).keys())


def _mean_gap(timestamps: np.ndarray) -> float:
    if len(timestamps) < 2:
        return 0.0
    return float(np.diff(timestamps).mean())


class FeatureExtractor:
    """Extracteur de features comportementales ancrées sur la date de coupure"""

    def __init__(self, schema: Optional[Dict[str, str]] = None):
        self.schema = schema or FEATURE_SCHEMA
        self.names = feature_names(self.schema)

    def extract_features(self, history: pd.DataFrame, now_ts: int) -> Dict[str, float]:
        """Extrait toutes les features d'un historique trié"""
        ts_all = history['timestamp'].to_numpy(dtype=np.int64)
        if len(ts_all) > 1 and np.any(np.diff(ts_all) < 0):
            raise ContractError("historique non trié par horodatage")

        features = {}
        types = history['event_type'].to_numpy()

        for source, event_types in SOURCES.items():
            ts = ts_all[np.isin(types, event_types)]
            for window, days in WINDOWS.items():
                in_window = ts if days is None else ts[ts >= now_ts - days * SECONDS_PER_DAY]
                features[f'{source}_count_{window}'] = float(len(in_window))
            for window, days in WINDOWS.items():
                in_window = ts if days is None else ts[ts >= now_ts - days * SECONDS_PER_DAY]
                features[f'{source}_mean_gap_{window}'] = _mean_gap(in_window)
            week = 7 * SECONDS_PER_DAY
            last = np.sum(ts >= now_ts - week)
            prior = np.sum((ts >= now_ts - 2 * week) & (ts < now_ts - week))
            features[f'{source}_wow_change'] = float((last - prior) / (prior + 1))

        products = history[history['event_type'].isin(PRODUCT_EVENTS)]
        features['distinct_skus'] = float(products['sku'].dropna().nunique())
        features['distinct_categories'] = float(products['category'].dropna().nunique())
        features['distinct_urls'] = float(history.loc[history['event_type'] == 'page_visit', 'url'].dropna().nunique())

        # Prix des achats
        prices = history.loc[history['event_type'] == 'product_buy', 'price_bucket'].dropna().to_numpy(dtype=np.float64)
        if len(prices):
            features['price_mean'] = float(prices.mean())
            features['price_std'] = float(prices.std())
            features['price_min'] = float(prices.min())
            features['price_max'] = float(prices.max())
        else:
            features.update(price_mean=0.0, price_std=0.0, price_min=0.0, price_max=0.0)

        adds = int(np.sum(types == 'add_to_cart'))
        buys = int(np.sum(types == 'product_buy'))
        features['cart_abandonment'] = max(0, adds - buys) / max(adds, 1)

        return {name: features[name] for name in self.names}

    def _extract_many(self, histories, now_ts: int) -> List[List[float]]:
        return [list(self.extract_features(h, now_ts).values()) for _, h in histories]

    def extract_batch_features(self, log: EventLog, now_ts: int,
                               n_jobs: int = 1, progress: bool = True) -> ProfileMatrix:
        """Extrait les features de tous les clients du journal"""
        histories = list(log.iter_histories())
        logger.info(f"Extraction des features pour {len(histories)} clients...")
        if n_jobs == 1:
            rows = [list(self.extract_features(h, now_ts).values())
                    for _, h in tqdm(histories, desc="Features", disable=not progress)]
        else:
            chunks = [histories[i::n_jobs] for i in range(n_jobs)]
            parts = Parallel(n_jobs=n_jobs)(delayed(self._extract_many)(c, now_ts) for c in chunks)
            # réassemblage dans l'ordre des clients
            rows = [None] * len(histories)
            for i, part in enumerate(parts):
                rows[i::n_jobs] = part

        values = np.array(rows, dtype=np.float64).reshape(len(histories), len(self.names))
        logger.info(f"✓ {len(self.names)} features extraites")
        return ProfileMatrix(
            client_ids=np.array([cid for cid, _ in histories], dtype=np.int64),
            values=values,
            source='handcrafted',
            normalization='none',
            feature_names=list(self.names),
            metadata={'now_ts': int(now_ts), 'definitions': dict(self.schema)},
        )
