"""
Factorisation implicite par moindres carrés alternés (iALS)

Préférence p_ui = 1[r_ui > 0], confiance c_ui = 1 + α·r_ui ; chaque
demi-itération résout exactement les systèmes ridge d'un côté, l'autre
étant fixé, avec l'astuce de la matrice de Gram.
"""

import logging
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence

import joblib
import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from tqdm import tqdm

from ensemble import ProfileMatrix
from errors import NumericError, ParameterError, SchemaError, ShapeError
from event_log import EventLog

logger = logging.getLogger(__name__)

TARGET_COLUMNS = {'category': 'category', 'url': 'url'}

# Poids par type d'événement ; remove_from_cart n'intervient pas
DEFAULT_WEIGHTS = {
    'category': {'product_buy': 3.0, 'add_to_cart': 1.0},
    'url': {'page_visit': 1.0},
}


@dataclass
class InteractionMatrix:
    """Matrice creuse clients × objets de poids positifs"""
    matrix: sparse.csr_matrix
    client_ids: np.ndarray
    item_ids: np.ndarray
    target: str = 'category'

    @property
    def shape(self):
        return self.matrix.shape

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_interaction_matrix(log: EventLog,
                             target: str,
                             weights: Optional[Dict[str, float]] = None,
                             client_ids: Optional[Sequence[int]] = None) -> InteractionMatrix:
    """
    Construit la matrice d'interactions pondérée d'une cible

    Args:
        log: journal (fenêtre d'historique)
        target: 'category' ou 'url'
        weights: poids par type d'événement (défauts : achat 3, panier 1 ; visite 1)
        client_ids: lignes de la matrice, tous les clients du journal par défaut

    Returns:
        InteractionMatrix ; les doublons (client, objet) sont additionnés
    """
    if target not in TARGET_COLUMNS:
        raise SchemaError(f"cible iALS inconnue : {target} (attendu category ou url)")
    weights = dict(DEFAULT_WEIGHTS[target] if weights is None else weights)
    negative = [t for t, w in weights.items() if w < 0]
    if negative:
        raise ParameterError(f"poids négatif pour '{negative[0]}'")

    rows_ids = log.clients() if client_ids is None else np.asarray(client_ids, dtype=np.int64)
    column = TARGET_COLUMNS[target]
    events = log.events
    events = events[events['event_type'].isin(list(weights)) & events[column].notna()]
    events = events[events['client_id'].isin(rows_ids)]

    item_ids = np.sort(events[column].astype(np.int64).unique())
    row_index = {int(c): i for i, c in enumerate(rows_ids)}
    rows = events['client_id'].map(row_index).to_numpy(dtype=np.int64)
    cols = np.searchsorted(item_ids, events[column].astype(np.int64).to_numpy())
    data = events['event_type'].map(weights).to_numpy(dtype=np.float64)

    matrix = sparse.coo_matrix((data, (rows, cols)), shape=(len(rows_ids), len(item_ids))).tocsr()
    matrix.sum_duplicates()
    matrix.eliminate_zeros()
    logger.info(f"✓ Matrice {target} : {matrix.shape[0]} clients × {matrix.shape[1]} objets, "
                f"{matrix.nnz} cellules non nulles")
    return InteractionMatrix(matrix, np.asarray(rows_ids, dtype=np.int64), item_ids, target)


@dataclass
class IalsModel:
    user_factors: np.ndarray
    item_factors: np.ndarray
    client_ids: np.ndarray
    item_ids: np.ndarray
    target: str = 'category'
    reg: float = 0.1
    alpha: float = 40.0
    history: List[float] = dc_field(default_factory=list)

    @property
    def k(self) -> int:
        return self.user_factors.shape[1]

    def user_embeddings(self) -> ProfileMatrix:
        return ProfileMatrix(self.client_ids, self.user_factors.copy(), f'ials_{self.target}',
                             normalization='none', metadata={'k': self.k, 'reg': self.reg, 'alpha': self.alpha})

    def save(self, path: str):
        joblib.dump(self, path)
        logger.info(f"✓ Facteurs iALS sauvegardés : {path}")

    @staticmethod
    def load(path: str) -> 'IalsModel':
        return joblib.load(path)


def _solve_rows(R: sparse.csr_matrix, Y: np.ndarray, gram: np.ndarray,
                reg: float, alpha: float, rows: np.ndarray) -> np.ndarray:
    k = Y.shape[1]
    eye = reg * np.eye(k)
    out = np.zeros((len(rows), k))
    for j, u in enumerate(rows):
        start, end = R.indptr[u], R.indptr[u + 1]
        if start == end:
            continue
        idx = R.indices[start:end]
        conf = 1.0 + alpha * R.data[start:end]
        Y_u = Y[idx]
        A = gram + Y_u.T @ ((conf - 1.0)[:, None] * Y_u) + eye
        b = Y_u.T @ conf
        try:
            out[j] = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as e:
            raise NumericError(f"système singulier pour la ligne {u} (λ={reg})") from e
    if not np.all(np.isfinite(out)):
        raise NumericError(f"facteurs non finis (λ={reg})")
    return out


def half_sweep(R: sparse.csr_matrix, fixed: np.ndarray, reg: float, alpha: float,
               n_jobs: int = 1) -> np.ndarray:
    """
    Résout toutes les lignes de R, les facteurs de l'autre côté étant fixés

    Les lignes sans interaction reçoivent la solution régularisée, soit zéro.
    """
    gram = fixed.T @ fixed
    n = R.shape[0]
    if n_jobs == 1 or n < 2:
        return _solve_rows(R, fixed, gram, reg, alpha, np.arange(n))
    chunks = np.array_split(np.arange(n), min(n, 4 * max(n_jobs, 1)))
    parts = Parallel(n_jobs=n_jobs, prefer='threads')(
        delayed(_solve_rows)(R, fixed, gram, reg, alpha, chunk) for chunk in chunks if len(chunk)
    )
    return np.concatenate(parts)


def solve_users(M: InteractionMatrix, model: IalsModel, n_jobs: int = 1) -> IalsModel:
    model.user_factors = half_sweep(M.matrix, model.item_factors, model.reg, model.alpha, n_jobs)
    return model


def solve_items(M: InteractionMatrix, model: IalsModel, n_jobs: int = 1) -> IalsModel:
    model.item_factors = half_sweep(M.matrix.T.tocsr(), model.user_factors, model.reg, model.alpha, n_jobs)
    return model


def ials_fit(M: InteractionMatrix,
             k: int = 64,
             reg: float = 0.1,
             alpha: float = 40.0,
             iterations: int = 15,
             seed: int = 0,
             n_jobs: int = 1,
             progress: bool = True,
             track_objective: bool = True) -> IalsModel:
    """
    Alterne les résolutions exactes côté clients puis côté objets

    Returns:
        IalsModel après le budget d'itérations (objectif par itération dans history)
    """
    if k < 1:
        raise ParameterError(f"k doit être >= 1 (reçu {k})")
    if iterations < 1:
        raise ParameterError(f"iterations doit être >= 1 (reçu {iterations})")
    if reg < 0 or alpha < 0:
        raise ParameterError(f"λ et α doivent être >= 0 (λ={reg}, α={alpha})")

    n_users, n_items = M.shape
    rng = np.random.default_rng(seed)
    item_factors = rng.uniform(-0.01, 0.01, (n_items, k))
    user_factors = rng.uniform(-0.01, 0.01, (n_users, k))
    model = IalsModel(user_factors, item_factors, M.client_ids.copy(), M.item_ids.copy(),
                      M.target, reg, alpha)

    logger.info(f"Entraînement iALS {M.target} : k={k}, λ={reg}, α={alpha}, {iterations} itérations")
    for it in tqdm(range(iterations), desc=f"iALS {M.target}", disable=not progress):
        solve_users(M, model, n_jobs)
        solve_items(M, model, n_jobs)
        if track_objective:
            model.history.append(objective(M, model))
            logger.debug(f"Itération {it + 1} : objectif {model.history[-1]:.6f}")

    if model.history:
        logger.info(f"✓ iALS {M.target} entraîné (objectif final {model.history[-1]:.4f})")
    return model


def objective(M: InteractionMatrix, model: IalsModel, dense: bool = False) -> float:
    """
    Objectif implicite exact

    L = Σ_ui c_ui (p_ui - u_u·v_i)² + λ(‖U‖² + ‖V‖²)

    Le calcul par identité de Gram n'itère que sur les cellules observées ;
    dense=True matérialise la matrice complète.
    """
    U, V = model.user_factors, model.item_factors
    if U.shape[0] != M.shape[0] or V.shape[0] != M.shape[1]:
        raise ShapeError(f"facteurs {U.shape}/{V.shape} pour une matrice {M.shape}")
    penalty = model.reg * (float(np.sum(U * U)) + float(np.sum(V * V)))

    if dense:
        R = M.dense()
        P = (R > 0).astype(np.float64)
        C = 1.0 + model.alpha * R
        S = U @ V.T
        return float(np.sum(C * (P - S) ** 2)) + penalty

    # Σ_tout (u·v)² = <UᵀU, VᵀV>, puis correction sur les cellules observées
    unobserved_part = float(np.sum((U.T @ U) * (V.T @ V)))
    coo = M.matrix.tocoo()
    scores = np.einsum('ij,ij->i', U[coo.row], V[coo.col])
    conf = 1.0 + model.alpha * coo.data
    observed_part = float(np.sum(conf * (1.0 - scores) ** 2 - scores ** 2))
    return unobserved_part + observed_part + penalty
