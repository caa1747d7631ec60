"""
Métriques d'évaluation : AUROC, nouveauté, diversité, score composite, Borda
"""

import logging
import warnings
from collections import OrderedDict
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from errors import ContractError, ParameterError, SchemaError

logger = logging.getLogger(__name__)

TASKS = ('churn', 'category_propensity', 'product_propensity', 'conversion')
PROPENSITY_TASKS = ('category_propensity', 'product_propensity')
TASK_ALIASES = {'category': 'category_propensity', 'product': 'product_propensity'}
TOP_K = 10


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    AUROC par les rangs, égalités au rang moyen

    (Σ rangs des positifs - P(P+1)/2) / (P·N) ; renvoie 0.5 (avec un
    avertissement) si une seule classe est présente.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        message = f"AUROC indéfinie ({n_pos} positifs, {n_neg} négatifs) : 0.5 retourné"
        warnings.warn(message, UserWarning, stacklevel=2)
        logger.warning(message)
        return 0.5
    ranks = rankdata(scores, method='average')
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def top_k_selection(scores: np.ndarray, k: int = TOP_K) -> np.ndarray:
    """Indices des k meilleures cibles par ligne (égalités : plus petit indice)"""
    k = min(k, scores.shape[1])
    order = np.argsort(-scores, axis=1, kind='stable')
    return order[:, :k]


def novelty_diversity(scores: np.ndarray, popularity: Sequence[float],
                      top_k: int = TOP_K) -> Tuple[float, float]:
    """
    Nouveauté et diversité des sélections top-k

    nouveauté = moyenne de rang_popularité / (T - 1), 0 pour la cible la plus populaire ;
    diversité = entropie de la distribution agrégée des sélections / ln T
    """
    scores = np.asarray(scores, dtype=np.float64)
    popularity = np.asarray(popularity, dtype=np.float64)
    T = scores.shape[1]
    if T < 2:
        raise ParameterError(f"au moins 2 cibles nécessaires (reçu {T})")
    if len(popularity) != T:
        raise ContractError(f"{len(popularity)} popularités pour {T} cibles")

    pop_rank = np.empty(T, dtype=np.int64)
    pop_rank[np.argsort(-popularity, kind='stable')] = np.arange(T)

    selected = top_k_selection(scores, top_k).ravel()
    if selected.size == 0:
        return 0.0, 0.0
    novelty = float(np.mean(pop_rank[selected] / (T - 1)))

    counts = np.bincount(selected, minlength=T).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    diversity = float(-(p * np.log(p)).sum() / np.log(T))
    return novelty, max(0.0, min(1.0, diversity))


def canonical_task(task: str) -> str:
    task = TASK_ALIASES.get(task, task)
    if task not in TASKS:
        raise SchemaError(f"tâche inconnue : {task}")
    return task


def composite_score(auroc_value: float, novelty: float, diversity: float, task: str) -> float:
    """0.8·AUROC + 0.1·nouveauté + 0.1·diversité pour les tâches de propension, AUROC sinon"""
    task = canonical_task(task)
    if task in PROPENSITY_TASKS:
        return 0.8 * auroc_value + 0.1 * novelty + 0.1 * diversity
    return float(auroc_value)


def rank_by_score(scores: Mapping[str, float]) -> List[str]:
    """Noms triés par score décroissant (égalités : ordre alphabétique)"""
    return sorted(scores, key=lambda name: (-scores[name], name))


def borda(rankings: Mapping[str, Sequence[str]]) -> 'OrderedDict[str, int]':
    """
    Points de Borda : le k-ième sur N reçoit N - k points par tâche

    Args:
        rankings: tâche -> équipes classées de la meilleure à la moins bonne

    Returns:
        équipe -> total, par total décroissant
    """
    teams = None
    totals: Dict[str, int] = {}
    for task, ranked in rankings.items():
        if len(set(ranked)) != len(ranked):
            raise ContractError(f"équipe classée deux fois pour la tâche '{task}'")
        if teams is None:
            teams = set(ranked)
        elif set(ranked) != teams:
            raise ContractError(f"ensemble d'équipes différent pour la tâche '{task}'")
        n = len(ranked)
        for position, team in enumerate(ranked, start=1):
            totals[team] = totals.get(team, 0) + (n - position)
    return OrderedDict(sorted(totals.items(), key=lambda kv: (-kv[1], kv[0])))
