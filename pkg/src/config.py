"""
Chargement de la configuration YAML du pipeline
"""

import dataclasses
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from ensemble import IMPUTATIONS, NORMALIZATIONS
from errors import ConfigurationError
from evaluator import ProbeConfig
from gru_autoencoder import GruAeConfig
from metrics import TASKS
from sequence_builder import DEFAULT_MAX_SIZES, VARIANTS
from synthgen import Archetype, SynthConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / 'config' / 'default.yaml'


@dataclass
class IalsConfig:
    targets: List[str] = dc_field(default_factory=lambda: ['category', 'url'])
    k: int = 64
    reg: float = 0.1
    alpha: float = 40.0
    iterations: int = 15


@dataclass
class VocabConfig:
    max_sizes: Dict[str, Optional[int]] = dc_field(default_factory=lambda: dict(DEFAULT_MAX_SIZES))
    max_len: int = 128
    n_products: int = 4


@dataclass
class EnsembleSourceSpec:
    """Une source du profil fusionné : nom d'étape ou fichier .uemb externe"""
    name: str
    normalization: str = 'unit_length'
    pca_k: Optional[int] = None
    path: Optional[str] = None

    def validate(self):
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(f"source '{self.name}' : normalisation inconnue '{self.normalization}'")
        if self.pca_k is not None and self.pca_k < 1:
            raise ConfigurationError(f"source '{self.name}' : pca_k doit être >= 1")


@dataclass
class EnsembleConfig:
    sources: List[EnsembleSourceSpec] = dc_field(default_factory=list)
    imputation: str = 'mean'


@dataclass
class PipelineConfig:
    seed: int = 42
    threads: int = 1
    work_dir: str = 'output/run'
    events_path: Optional[str] = None
    cutoff: Optional[int] = None
    horizon_days: int = 14
    n_eval_clients: Optional[int] = None
    progress: bool = True
    cache: bool = True
    tasks: List[str] = dc_field(default_factory=lambda: list(TASKS))
    variants: List[str] = dc_field(default_factory=lambda: list(VARIANTS))
    vocab: VocabConfig = dc_field(default_factory=VocabConfig)
    gru_ae: Dict[str, Dict] = dc_field(default_factory=dict)
    ials: IalsConfig = dc_field(default_factory=IalsConfig)
    features: bool = True
    ensemble: EnsembleConfig = dc_field(default_factory=EnsembleConfig)
    probe: ProbeConfig = dc_field(default_factory=ProbeConfig)
    synth: SynthConfig = dc_field(default_factory=SynthConfig)

    def gru_ae_config(self, variant: str, vocab_sizes: Dict[str, int]) -> GruAeConfig:
        """Préréglage de la variante, surchargé par les sections common puis <variant> du YAML"""
        overrides = dict(self.gru_ae.get('common', {}))
        overrides.update(self.gru_ae.get(variant, {}))
        overrides.setdefault('max_len', self.vocab.max_len)
        overrides.setdefault('progress', self.progress)
        return GruAeConfig.preset(variant, vocab_sizes=dict(vocab_sizes), **overrides)

    def validate(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigurationError(f"variante inconnue : {unknown[0]}")
        known_ae_keys = {f.name for f in dataclasses.fields(GruAeConfig)} - {'variant', 'vocab_sizes'}
        for section, values in self.gru_ae.items():
            if section != 'common' and section not in VARIANTS:
                raise ConfigurationError(f"gru_ae.{section} : variante inconnue")
            for key in values:
                if key not in known_ae_keys:
                    raise ConfigurationError(f"gru_ae.{section}.{key} : clé inconnue")
        if self.ensemble.imputation not in IMPUTATIONS:
            raise ConfigurationError(f"imputation inconnue : {self.ensemble.imputation}")
        for spec in self.ensemble.sources:
            spec.validate()
        if self.threads < 1:
            raise ConfigurationError("threads doit être >= 1")
        if self.horizon_days < 1:
            raise ConfigurationError("horizon_days doit être >= 1")
        return self


def _build(cls, data: Optional[Dict], section: str):
    """Instancie une dataclass en refusant les clés inconnues"""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"section '{section}' : dictionnaire attendu")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"{section}.{key} : clé inconnue")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigurationError(f"section '{section}' : {e}") from e


def config_from_dict(data: Dict) -> PipelineConfig:
    data = dict(data or {})
    nested = {
        'vocab': lambda d: _build(VocabConfig, d, 'vocab'),
        'ials': lambda d: _build(IalsConfig, d, 'ials'),
        'probe': lambda d: _build(ProbeConfig, d, 'probe'),
        'synth': lambda d: _build_synth(d),
        'ensemble': lambda d: _build_ensemble(d),
    }
    for key, builder in nested.items():
        if key in data:
            data[key] = builder(data[key])
    return _build(PipelineConfig, data, 'pipeline').validate()


def _build_synth(data: Optional[Dict]) -> SynthConfig:
    data = dict(data or {})
    archetypes = data.pop('archetypes', None)
    config = _build(SynthConfig, data, 'synth')
    if archetypes is not None:
        config.archetypes = [_build(Archetype, a, 'synth.archetypes') for a in archetypes]
    return config


def _build_ensemble(data: Optional[Dict]) -> EnsembleConfig:
    data = dict(data or {})
    sources = data.pop('sources', [])
    config = _build(EnsembleConfig, data, 'ensemble')
    config.sources = [_build(EnsembleSourceSpec, s, 'ensemble.sources') for s in sources]
    return config


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """Charge un fichier YAML (config/default.yaml par défaut)"""
    path = Path(path) if path else DEFAULT_CONFIG_PATH
    if not path.exists():
        raise ConfigurationError(f"fichier de configuration introuvable : {path}")
    with open(path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f) or {}
    logger.info(f"✓ Configuration chargée : {path}")
    return config_from_dict(data)


def config_to_dict(config) -> Dict:
    return dataclasses.asdict(config)
