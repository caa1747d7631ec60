"""
Banc d'évaluation : étiquettes des tâches, sondes MLP et rapport par source
"""

import logging
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

import neural_core as nc
from ensemble import ProfileMatrix
from errors import ContractError, ParameterError
from event_log import EventLog
from metrics import (PROPENSITY_TASKS, TASKS, auroc, borda, canonical_task,
                     composite_score, novelty_diversity, rank_by_score)

logger = logging.getLogger(__name__)

N_TARGETS = 100
TARGET_COLUMNS = {'category_propensity': 'category', 'product_propensity': 'sku'}


@dataclass
class TaskLabels:
    task: str
    client_ids: np.ndarray
    labels: np.ndarray
    targets: Optional[np.ndarray] = None
    popularity: Optional[np.ndarray] = None

    @property
    def n_targets(self) -> int:
        return self.labels.shape[1]


def propensity_targets(history: EventLog, column: str, n_targets: int = N_TARGETS):
    """Cibles les plus achetées dans la fenêtre d'historique (égalités : plus petit identifiant)"""
    events = history.events
    buys = events.loc[(events['event_type'] == 'product_buy') & events[column].notna(), column].astype(np.int64)
    counts = buys.value_counts()
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n_targets]
    targets = np.array([t for t, _ in ranked], dtype=np.int64)
    popularity = np.array([c for _, c in ranked], dtype=np.float64)
    return targets, popularity


def make_labels(history: EventLog, holdout: EventLog, task: str,
                client_ids: Optional[Sequence[int]] = None,
                n_targets: int = N_TARGETS) -> TaskLabels:
    """
    Étiquettes d'une tâche sur la fenêtre d'évaluation

    churn : aucun événement ; conversion : au moins un achat ;
    propension : achat de chacune des cibles les plus fréquentes de l'historique.
    """
    task = canonical_task(task)
    clients = history.clients() if client_ids is None else np.asarray(client_ids, dtype=np.int64)
    events = holdout.events
    index = pd.Index(clients)

    if task == 'churn':
        active = np.isin(clients, events['client_id'].unique())
        return TaskLabels(task, clients, (~active).astype(np.uint8).reshape(-1, 1))

    if task == 'conversion':
        buyers = events.loc[events['event_type'] == 'product_buy', 'client_id'].unique()
        return TaskLabels(task, clients, np.isin(clients, buyers).astype(np.uint8).reshape(-1, 1))

    column = TARGET_COLUMNS[task]
    targets, popularity = propensity_targets(history, column, n_targets)
    labels = np.zeros((len(clients), len(targets)), dtype=np.uint8)
    buys = events[(events['event_type'] == 'product_buy') & events[column].notna()]
    rows = index.get_indexer(buys['client_id'].to_numpy())
    cols = pd.Index(targets).get_indexer(buys[column].astype(np.int64).to_numpy())
    keep = (rows >= 0) & (cols >= 0)
    labels[rows[keep], cols[keep]] = 1
    return TaskLabels(task, clients, labels, targets, popularity)


@dataclass
class ProbeConfig:
    hidden_size: int = 128
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.2


class ProbeModel:
    """MLP à une couche cachée (profil -> 128 -> T) à sorties logistiques"""

    def __init__(self, d_in: int, n_outputs: int, hidden_size: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        scale1 = np.sqrt(2.0 / d_in)
        scale2 = np.sqrt(1.0 / hidden_size)
        self.params = {
            'W1': nc.parameter(rng.normal(0.0, scale1, (d_in, hidden_size)).astype(np.float32), 'W1'),
            'b1': nc.parameter(np.zeros(hidden_size, dtype=np.float32), 'b1'),
            'W2': nc.parameter(rng.normal(0.0, scale2, (hidden_size, n_outputs)).astype(np.float32), 'W2'),
            'b2': nc.parameter(np.zeros(n_outputs, dtype=np.float32), 'b2'),
        }

    def logits(self, X: np.ndarray) -> nc.Tensor:
        x = nc.constant(X, np.float32)
        hidden = nc.relu(nc.affine(x, self.params['W1'], self.params['b1']))
        return nc.affine(hidden, self.params['W2'], self.params['b2'])

    def predict(self, X: np.ndarray) -> np.ndarray:
        z = self.logits(np.asarray(X, dtype=np.float32)).data.astype(np.float64)
        return 1.0 / (1.0 + np.exp(-np.clip(z, -50, 50)))

    def state(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]):
        for k, v in state.items():
            self.params[k].data[...] = v


def validation_mask(client_ids: np.ndarray, fraction: float = 0.2) -> np.ndarray:
    """Partition stable par hachage de l'identifiant client"""
    hashes = pd.util.hash_array(np.asarray(client_ids, dtype=np.int64))
    return (hashes % 1000) < int(round(fraction * 1000))


def mean_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Moyenne des AUROC par colonne sur les colonnes à deux classes"""
    values = []
    for j in range(labels.shape[1]):
        column = labels[:, j]
        if 0 < column.sum() < len(column):
            values.append(auroc(scores[:, j], column))
    if not values:
        return auroc(scores[:, 0], labels[:, 0])
    return float(np.mean(values))


@dataclass
class ProbeResult:
    model: ProbeModel
    val_auroc: float
    val_mask: np.ndarray
    epochs: int
    history: List[float] = dc_field(default_factory=list)


def train_probe(profiles: ProfileMatrix, labels: TaskLabels, seed: int = 0,
                config: Optional[ProbeConfig] = None) -> ProbeResult:
    """
    Entraîne une sonde sur 80 % des clients et arrête sur l'AUROC de validation

    Returns:
        ProbeResult avec les poids de la meilleure époque
    """
    config = config or ProbeConfig()
    if not np.array_equal(profiles.client_ids, labels.client_ids):
        raise ContractError("profils et étiquettes non alignés sur les mêmes clients")
    if labels.n_targets == 0:
        raise ParameterError(f"aucune cible pour la tâche {labels.task}")

    X = profiles.values.astype(np.float32)
    Y = labels.labels.astype(np.float32)
    val = validation_mask(labels.client_ids, config.val_fraction)
    train_idx = np.flatnonzero(~val)
    if len(train_idx) == 0 or val.sum() == 0:
        raise ContractError("découpage apprentissage/validation vide")

    rng = np.random.default_rng(seed)
    model = ProbeModel(X.shape[1], Y.shape[1], config.hidden_size, seed=seed)
    state = nc.AdamState(lr=config.lr)
    best, best_state, best_epoch, history = -np.inf, model.state(), 0, []

    for epoch in range(config.max_epochs):
        order = rng.permutation(train_idx)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = nc.binary_cross_entropy(model.logits(X[idx]), Y[idx]) * (1.0 / Y[idx].size)
            grads = nc.backward(loss, model.params)
            nc.adam_step(model.params, grads, state)

        score = mean_auroc(model.predict(X[val]), labels.labels[val])
        history.append(score)
        if score > best:
            best, best_state, best_epoch = score, model.state(), epoch
        elif epoch - best_epoch >= config.patience:
            break

    model.load_state(best_state)
    logger.debug(f"Sonde {labels.task} : AUROC validation {best:.4f} (époque {best_epoch + 1})")
    return ProbeResult(model, float(best), val, len(history), history)


def evaluate_task(profiles: ProfileMatrix, history: EventLog, holdout: EventLog, task: str,
                  seed: int = 0, config: Optional[ProbeConfig] = None) -> Dict:
    task = canonical_task(task)
    labels = make_labels(history, holdout, task, client_ids=profiles.client_ids)
    if labels.n_targets == 0:
        logger.warning(f"Tâche {task} : aucune cible dans l'historique")
        return {'auroc': 0.5, 'novelty': None, 'diversity': None, 'score': 0.5, 'n_targets': 0}

    result = train_probe(profiles, labels, seed=seed + TASKS.index(task), config=config)
    scores = result.model.predict(profiles.values[result.val_mask])
    truth = labels.labels[result.val_mask]
    task_auroc = mean_auroc(scores, truth)

    novelty = diversity = None
    if task in PROPENSITY_TASKS and labels.n_targets >= 2:
        novelty, diversity = novelty_diversity(scores, labels.popularity)
    score = composite_score(task_auroc, novelty or 0.0, diversity or 0.0, task)
    return {'auroc': task_auroc, 'novelty': novelty, 'diversity': diversity,
            'score': float(score), 'n_targets': int(labels.n_targets)}


def evaluate_profiles(profiles: ProfileMatrix, history: EventLog, holdout: EventLog,
                      tasks: Sequence[str] = TASKS, seed: int = 0,
                      config: Optional[ProbeConfig] = None, n_jobs: int = 1) -> Dict[str, Dict]:
    """
    Évalue une matrice de profils sur chaque tâche

    Returns:
        tâche -> {auroc, novelty, diversity, score, n_targets}
    """
    tasks = [canonical_task(t) for t in tasks]
    logger.info(f"Évaluation de '{profiles.source}' ({profiles.dim} dimensions) sur {len(tasks)} tâches")
    if n_jobs == 1:
        results = [evaluate_task(profiles, history, holdout, t, seed, config) for t in tasks]
    else:
        results = Parallel(n_jobs=n_jobs, prefer='threads')(
            delayed(evaluate_task)(profiles, history, holdout, t, seed, config) for t in tasks
        )
    for task, result in zip(tasks, results):
        logger.info(f"  - {task} : AUROC {result['auroc']:.4f}, score {result['score']:.4f}")
    return dict(zip(tasks, results))


def build_report(results: Dict[str, Dict[str, Dict]], widths: Dict[str, int],
                 tasks: Sequence[str], metadata: Optional[Dict] = None) -> Dict:
    """
    Rapport comparatif : une ligne par source avec la somme des scores,
    classement par tâche et table de Borda
    """
    tasks = [canonical_task(t) for t in tasks]
    rows = []
    for name, per_task in results.items():
        rows.append({
            'name': name,
            'width': int(widths.get(name, 0)),
            'tasks': per_task,
            'sum': float(sum(per_task[t]['score'] for t in tasks)),
        })
    rankings = {t: rank_by_score({r['name']: r['tasks'][t]['score'] for r in rows}) for t in tasks}
    totals = borda(rankings) if len(rows) > 1 else {r['name']: 0 for r in rows}
    table = [{'rank': i + 1, 'name': name, 'points': int(points)}
             for i, (name, points) in enumerate(totals.items())]
    meta = dict(metadata or {})
    meta['tasks'] = list(tasks)
    return {'metadata': meta, 'rows': rows, 'rankings': rankings, 'borda': table}


def evaluate_many(profiles: Sequence[ProfileMatrix], history: EventLog, holdout: EventLog,
                  tasks: Sequence[str] = TASKS, seed: int = 0,
                  config: Optional[ProbeConfig] = None, n_jobs: int = 1,
                  metadata: Optional[Dict] = None) -> Dict:
    """Évalue plusieurs profils et produit le rapport avec classement de Borda"""
    names = [p.source for p in profiles]
    if len(set(names)) != len(names):
        raise ContractError(f"noms de sources dupliqués : {names}")
    results = {p.source: evaluate_profiles(p, history, holdout, tasks, seed, config, n_jobs) for p in profiles}
    return build_report(results, {p.source: p.dim for p in profiles}, tasks, metadata)
