"""
Fusion des profils par source : PCA, normalisation, concaténation, imputation
"""

import logging
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA
from sklearn.preprocessing import QuantileTransformer, StandardScaler

from errors import ConfigurationError, ContractError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

NORMALIZATIONS = ('unit_length', 'quantile', 'standard', 'none')
IMPUTATIONS = ('mean', 'zero')
N_QUANTILES = 1000
NORM_FLOOR = 1e-12


@dataclass
class ProfileMatrix:
    """Matrice dense n×d de profils, une ligne par client"""
    client_ids: np.ndarray
    values: np.ndarray
    source: str = 'unknown'
    column_sources: Optional[List[str]] = None
    normalization: str = 'none'
    feature_names: Optional[List[str]] = None
    metadata: Dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.client_ids = np.asarray(self.client_ids, dtype=np.int64)
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"matrice de profils attendue en 2D, reçu {self.values.shape}")
        if len(self.client_ids) != self.values.shape[0]:
            raise ShapeError(f"{len(self.client_ids)} clients pour {self.values.shape[0]} lignes")
        if len(np.unique(self.client_ids)) != len(self.client_ids):
            raise ContractError(f"identifiants clients dupliqués dans la source '{self.source}'")
        if self.column_sources is None:
            self.column_sources = [self.source] * self.values.shape[1]
        if self.feature_names is not None and len(self.feature_names) != self.values.shape[1]:
            raise ShapeError(f"{len(self.feature_names)} noms pour {self.values.shape[1]} colonnes")

    @property
    def n_clients(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def align(self, client_ids: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Lignes dans l'ordre de client_ids

        Returns:
            (positions dans la matrice, -1 si absent ; masque de présence)
        """
        positions = pd.Index(self.client_ids).get_indexer(np.asarray(client_ids, dtype=np.int64))
        return positions, positions >= 0

    def row_of(self, client_id: int) -> np.ndarray:
        positions, present = self.align([client_id])
        if not present[0]:
            raise ContractError(f"client {client_id} absent de la source '{self.source}'")
        return self.values[positions[0]]

    def subset(self, client_ids: Sequence[int]) -> 'ProfileMatrix':
        """Restreint la matrice aux clients donnés (tous doivent être présents)"""
        positions, present = self.align(client_ids)
        if not present.all():
            raise ContractError(f"{int((~present).sum())} clients absents de la source '{self.source}'")
        return ProfileMatrix(np.asarray(client_ids, dtype=np.int64), self.values[positions], self.source,
                             list(self.column_sources), self.normalization,
                             None if self.feature_names is None else list(self.feature_names),
                             dict(self.metadata))

    def to_frame(self) -> pd.DataFrame:
        columns = self.feature_names or [f'{self.source}_{i}' for i in range(self.dim)]
        return pd.DataFrame(self.values, index=pd.Index(self.client_ids, name='client_id'), columns=columns)


# --- PCA ---------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(X: np.ndarray, k: int) -> PcaModel:
    """
    Axes principaux de la covariance empirique

    Le signe de chaque direction est fixé pour que sa coordonnée de plus
    grande magnitude soit positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ParameterError(f"au moins 2 lignes nécessaires pour la PCA (reçu {n})")
    if not 1 <= k <= min(n, d):
        raise ParameterError(f"k={k} hors de [1, min(n, d)={min(n, d)}]")

    pca = PCA(n_components=k, svd_solver='full').fit(X)
    components = pca.components_.copy()
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), pivots])
    signs[signs == 0] = 1.0
    components *= signs[:, None]
    return PcaModel(mean=pca.mean_.copy(), components=components,
                    explained_variance=pca.explained_variance_.copy())


def pca_transform(model: PcaModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.mean.shape[0]:
        raise ShapeError(f"{X.shape[1]} colonnes, PCA ajustée sur {model.mean.shape[0]}")
    return (X - model.mean) @ model.components.T


# --- Normalisations ----------------------------------------------------------

def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Norme unitaire par ligne ; les lignes de norme quasi nulle deviennent nulles"""
    v = np.asarray(v, dtype=np.float64)
    rows = v.reshape(1, -1) if v.ndim == 1 else v
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    out = np.zeros_like(rows)
    nonzero = norms[:, 0] > NORM_FLOOR
    out[nonzero] = rows[nonzero] / norms[nonzero]
    return out.reshape(v.shape)


@dataclass
class QuantileMap:
    """Transformation quantile par colonne (colonnes constantes envoyées sur 0.5)"""
    transformer: QuantileTransformer
    constant: np.ndarray

    @property
    def knots(self) -> np.ndarray:
        return self.transformer.quantiles_


def quantile_fit(X: np.ndarray, n_quantiles: int = N_QUANTILES) -> QuantileMap:
    X = np.asarray(X, dtype=np.float64)
    X2 = X.reshape(-1, 1) if X.ndim == 1 else X
    n = X2.shape[0]
    if n == 0:
        raise ContractError("colonne vide pour l'ajustement quantile")
    n_q = min(n_quantiles, n)
    transformer = QuantileTransformer(n_quantiles=n_q, output_distribution='uniform',
                                      subsample=max(n, n_q), copy=True)
    transformer.fit(X2)
    constant = X2.min(axis=0) == X2.max(axis=0)
    return QuantileMap(transformer, constant)


def quantile_transform(qmap: QuantileMap, values: np.ndarray) -> np.ndarray:
    """Position dans la fonction de répartition empirique, bornée à [0, 1]"""
    values = np.asarray(values, dtype=np.float64)
    X2 = values.reshape(-1, 1) if values.ndim == 1 else values
    out = np.clip(qmap.transformer.transform(X2), 0.0, 1.0)
    out[:, qmap.constant] = 0.5
    return out.reshape(values.shape)


def normalize(X: np.ndarray, method: str) -> np.ndarray:
    """Applique une normalisation ajustée sur X lui-même"""
    if method == 'unit_length':
        return l2_normalize(X)
    if method == 'quantile':
        return quantile_transform(quantile_fit(X), X)
    if method == 'standard':
        return StandardScaler().fit_transform(X)
    if method == 'none':
        return np.asarray(X, dtype=np.float64)
    raise ConfigurationError(f"normalisation inconnue : {method} (attendu {', '.join(NORMALIZATIONS)})")


# --- Fusion ------------------------------------------------------------------

@dataclass
class EnsembleSource:
    profile: ProfileMatrix
    normalization: str = 'unit_length'
    pca_k: Optional[int] = None


def combine(sources: Sequence[EnsembleSource],
            client_ids: Sequence[int],
            imputation: str = 'mean',
            name: str = 'ensemble') -> ProfileMatrix:
    """
    Profil universel : concaténation des sources normalisées

    Pour chaque source, dans l'ordre déclaré : PCA optionnelle ajustée sur les
    clients présents, normalisation, puis imputation des clients absents par
    la moyenne des colonnes après normalisation (ou zéro).

    Args:
        sources: sources à fusionner
        client_ids: liste maîtresse fixant l'ordre des lignes
        imputation: 'mean' ou 'zero'

    Returns:
        ProfileMatrix de largeur Σ largeurs des sources
    """
    if imputation not in IMPUTATIONS:
        raise ConfigurationError(f"imputation inconnue : {imputation}")
    if not sources:
        raise ConfigurationError("aucune source à fusionner")
    master = np.asarray(client_ids, dtype=np.int64)
    blocks, column_sources, summary = [], [], []

    for spec in sources:
        profile = spec.profile
        positions, present = profile.align(master)
        if not present.any():
            raise ConfigurationError(f"source '{profile.source}' : aucun client présent")
        X = profile.values[positions[present]].astype(np.float64)

        if spec.pca_k:
            X = pca_transform(pca_fit(X, spec.pca_k), X)
        X = normalize(X, spec.normalization)

        block = np.zeros((len(master), X.shape[1]), dtype=np.float64)
        block[present] = X
        if imputation == 'mean':
            block[~present] = X.mean(axis=0)
        blocks.append(block)
        column_sources.extend([profile.source] * X.shape[1])
        summary.append({
            'source': profile.source,
            'normalization': spec.normalization,
            'pca_k': spec.pca_k,
            'width': int(X.shape[1]),
            'present': int(present.sum()),
            'imputed': int((~present).sum()),
        })
        logger.info(f"  - {profile.source} : {X.shape[1]} colonnes, {int((~present).sum())} clients imputés")

    values = np.concatenate(blocks, axis=1)
    if not np.all(np.isfinite(values)):
        raise ContractError("profil fusionné non fini")
    logger.info(f"✓ Profil fusionné : {len(master)} clients × {values.shape[1]} dimensions")
    return ProfileMatrix(master, values, name, column_sources, 'mixed',
                         metadata={'sources': summary, 'imputation': imputation})


def random_profile(client_ids: Sequence[int], width: int, seed: int = 0) -> ProfileMatrix:
    """Profil gaussien sans signal, référence de comparaison"""
    if width < 1:
        raise ParameterError(f"largeur {width} < 1")
    rng = np.random.default_rng(seed)
    ids = np.asarray(client_ids, dtype=np.int64)
    return ProfileMatrix(ids, rng.standard_normal((len(ids), width)), 'random', normalization='none')
