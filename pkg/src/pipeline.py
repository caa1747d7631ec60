"""
Orchestrateur du pipeline : ingestion -> encodage -> modèles -> fusion -> évaluation

Chaque étape est mise en cache sous une clé joblib.hash (nom d'étape, clés
des étapes amont, configuration de l'étape) écrite dans <étape>.key.
"""

import dataclasses
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import joblib
import numpy as np
from joblib import Parallel, delayed

import gru_autoencoder as gae
from config import EnsembleSourceSpec, PipelineConfig
from ensemble import EnsembleSource, ProfileMatrix, combine, random_profile
from errors import ConfigurationError, StageError, UniprofileError
from evaluator import evaluate_many
from event_log import SECONDS_PER_DAY, EventLog, read_events, split_window
from exporter import DataExporter, read_uemb, write_uemb
from feature_extractor import FeatureExtractor
from ials import build_interaction_matrix, ials_fit
from sequence_builder import SequenceEncoder, SequenceSchema, save_sequences
from synthgen import generate

logger = logging.getLogger(__name__)


def stage_seed(seed: int, stage: str) -> int:
    """Graine propre à une étape, indépendante de l'ordre d'exécution"""
    return int(joblib.hash((seed, stage))[:8], 16)


def default_cutoff(log: EventLog, horizon_days: int) -> int:
    return log.window[1] + 1 - horizon_days * SECONDS_PER_DAY


def default_sources(config: PipelineConfig) -> List[EnsembleSourceSpec]:
    """Sources du profil universel quand le YAML n'en déclare pas"""
    sources = []
    for variant in config.variants:
        pca_k = None if variant == 'day_event_type' else 64
        sources.append(EnsembleSourceSpec(f'gru_ae_{variant}', 'unit_length', pca_k))
    for target in config.ials.targets:
        sources.append(EnsembleSourceSpec(f'ials_{target}', 'unit_length'))
    if config.features:
        sources.append(EnsembleSourceSpec('handcrafted', 'quantile'))
    return sources


class StageCache:
    """Artefacts d'étape indexés par hachage de contenu"""

    def __init__(self, work_dir: Path, enabled: bool = True):
        self.work_dir = work_dir
        self.enabled = enabled
        self.hits: Dict[str, bool] = {}

    def key(self, stage: str, *parts) -> str:
        return joblib.hash((stage,) + parts)

    def _key_path(self, stage: str) -> Path:
        return self.work_dir / f'{stage}.key'

    def is_fresh(self, stage: str, key: str, artefacts: List[Path]) -> bool:
        key_path = self._key_path(stage)
        return (self.enabled and key_path.exists() and key_path.read_text().strip() == key
                and all(p.exists() for p in artefacts))

    def mark(self, stage: str, key: str):
        self._key_path(stage).write_text(key + '\n')

    def run(self, stage: str, key: str, artefacts: List[Path], compute: Callable[[], None]):
        if self.is_fresh(stage, key, artefacts):
            logger.info(f"✓ {stage} : cache valide ({key[:10]})")
            self.hits[stage] = True
            return
        self.hits[stage] = False
        try:
            compute()
        except UniprofileError as e:
            raise StageError(stage, e) from e
        except (OSError, ValueError, ArithmeticError, RuntimeError) as e:
            raise StageError(stage, e) from e
        self.mark(stage, key)


class ProfilePipeline:
    """Chaîne complète de construction et d'évaluation des profils"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.work_dir = Path(config.work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self.cache = StageCache(self.work_dir, config.cache)
        self.exporter = DataExporter()
        self.hashes: Dict[str, str] = {}

    # --- étapes --------------------------------------------------------------

    def ingest(self) -> Tuple[EventLog, str]:
        config = self.config
        if config.events_path:
            source = Path(config.events_path)
            try:
                content_hash = joblib.hash(source.read_bytes())
            except OSError as e:
                raise StageError('ingest', e) from e
            try:
                log = read_events(str(source))
            except (UniprofileError, OSError) as e:
                raise StageError('ingest', e) from e
            return log, content_hash

        events_path = self.work_dir / 'events.jsonl'
        key = self.cache.key('synth', dataclasses.asdict(config.synth), config.seed)

        def compute():
            result = generate(config.synth, seed=config.seed, n_jobs=config.threads)
            result.write(str(events_path), str(self.work_dir / 'truth.json'))

        self.cache.run('synth', key, [events_path], compute)
        self.hashes['synth'] = key
        try:
            log = read_events(str(events_path), window=config.synth.window)
        except UniprofileError as e:
            raise StageError('ingest', e) from e
        return log, joblib.hash(events_path.read_bytes())

    def _profile_stage(self, stage: str, key: str, compute: Callable[[], ProfileMatrix]) -> ProfileMatrix:
        path = self.work_dir / f'{stage}.uemb'

        def run():
            write_uemb(compute(), str(path))

        self.cache.run(stage, key, [path], run)
        self.hashes[stage] = key
        # relecture systématique : résultats identiques avec ou sans cache
        return read_uemb(str(path))

    def gru_ae_stage(self, variant: str, history: EventLog, upstream: str) -> ProfileMatrix:
        config = self.config
        stage = f'gru_ae_{variant}'
        key = self.cache.key(stage, upstream, dataclasses.asdict(config.vocab),
                             config.gru_ae.get('common', {}), config.gru_ae.get(variant, {}), config.seed)

        def compute() -> ProfileMatrix:
            schema = SequenceSchema.for_variant(variant, config.vocab.max_len)
            encoder = SequenceEncoder(schema, config.vocab.max_sizes, config.vocab.n_products).fit(history)
            encoder.save_vocabs(str(self.work_dir / f'{stage}.vocab.json'))
            sequences = encoder.encode(history, n_jobs=1)
            save_sequences(sequences, str(self.work_dir / f'{stage}.sequences.npz'))
            ae_config = config.gru_ae_config(variant, encoder.vocab_sizes)
            result = gae.train(sequences, ae_config, seed=stage_seed(config.seed, stage))
            result.model.save(str(self.work_dir / f'{stage}.ckpt'))
            profile = gae.embed_all(sequences, result.model, source=stage)
            profile.metadata['loss_history'] = result.loss_history
            profile.normalization = 'none'
            return profile

        return self._profile_stage(stage, key, compute)

    def ials_stage(self, target: str, history: EventLog, upstream: str) -> ProfileMatrix:
        config = self.config
        stage = f'ials_{target}'
        key = self.cache.key(stage, upstream, dataclasses.asdict(config.ials), config.seed)

        def compute() -> ProfileMatrix:
            matrix = build_interaction_matrix(history, target)
            model = ials_fit(matrix, k=config.ials.k, reg=config.ials.reg, alpha=config.ials.alpha,
                             iterations=config.ials.iterations, seed=stage_seed(config.seed, stage),
                             progress=config.progress)
            model.save(str(self.work_dir / f'{stage}.joblib'))
            return model.user_embeddings()

        return self._profile_stage(stage, key, compute)

    def features_stage(self, history: EventLog, cutoff: int, upstream: str) -> ProfileMatrix:
        key = self.cache.key('handcrafted', upstream, cutoff)

        def compute() -> ProfileMatrix:
            return FeatureExtractor().extract_batch_features(history, cutoff, n_jobs=1,
                                                             progress=self.config.progress)

        return self._profile_stage('handcrafted', key, compute)

    def _source_hash(self, spec: EnsembleSourceSpec) -> Optional[str]:
        """Hachage de contenu d'une source de fusion : étape amont ou fichier .uemb externe"""
        if spec.path:
            try:
                return joblib.hash(Path(spec.path).read_bytes())
            except OSError as e:
                raise StageError('ensemble', e) from e
        return self.hashes.get(spec.name)

    # --- exécution -----------------------------------------------------------

    def run(self) -> Dict:
        config = self.config

        logger.info("=== PHASE 1 : Ingestion ===")
        log, events_hash = self.ingest()
        self.hashes['events'] = events_hash
        cutoff = config.cutoff if config.cutoff is not None else default_cutoff(log, config.horizon_days)
        try:
            history, holdout = split_window(log, cutoff, config.horizon_days)
        except UniprofileError as e:
            raise StageError('split', e) from e

        clients = history.clients()
        if config.n_eval_clients is not None and config.n_eval_clients < len(clients):
            rng = np.random.default_rng(stage_seed(config.seed, 'eval_clients'))
            clients = np.sort(rng.choice(clients, config.n_eval_clients, replace=False))
            history = history.with_clients(clients)
            holdout = holdout.with_clients(clients)
        upstream = self.cache.key('history', events_hash, cutoff, config.horizon_days, clients)
        logger.info(f"✓ {len(clients)} clients évalués, coupure {cutoff}")

        logger.info("=== PHASE 2 : Modèles par source ===")
        jobs = [(f'gru_ae_{v}', lambda v=v: self.gru_ae_stage(v, history, upstream)) for v in config.variants]
        jobs += [(f'ials_{t}', lambda t=t: self.ials_stage(t, history, upstream)) for t in config.ials.targets]
        if config.features:
            jobs.append(('handcrafted', lambda: self.features_stage(history, cutoff, upstream)))

        if config.threads > 1 and len(jobs) > 1:
            outputs = Parallel(n_jobs=min(config.threads, len(jobs)), prefer='threads')(
                delayed(job)() for _, job in jobs
            )
        else:
            outputs = [job() for _, job in jobs]
        profiles = {name: profile for (name, _), profile in zip(jobs, outputs)}

        logger.info("=== PHASE 3 : Fusion ===")
        specs = config.ensemble.sources or default_sources(config)
        ensemble_key = self.cache.key('ensemble', [self._source_hash(s) for s in specs],
                                      [dataclasses.asdict(s) for s in specs], config.ensemble.imputation)

        def build_ensemble() -> ProfileMatrix:
            sources = []
            for spec in specs:
                if spec.path:
                    profile = read_uemb(spec.path)
                elif spec.name in profiles:
                    profile = profiles[spec.name]
                else:
                    raise ConfigurationError(f"source inconnue : {spec.name}")
                sources.append(EnsembleSource(profile, spec.normalization, spec.pca_k))
            return combine(sources, clients, config.ensemble.imputation)

        ensemble = self._profile_stage('ensemble', ensemble_key, build_ensemble)
        baseline = random_profile(clients, ensemble.dim, seed=stage_seed(config.seed, 'random'))
        baseline = ProfileMatrix(baseline.client_ids, baseline.values.astype(np.float32), 'random')

        logger.info("=== PHASE 4 : Évaluation ===")
        rows = [profiles[name] for name, _ in jobs] + [ensemble, baseline]
        rows = [p.subset(clients) for p in rows]
        metadata = {
            'seed': config.seed,
            'cutoff': int(cutoff),
            'horizon_days': config.horizon_days,
            'n_clients': int(len(clients)),
            'variants': list(config.variants),
            'hashes': dict(sorted(self.hashes.items())),
        }
        try:
            report = evaluate_many(rows, history, holdout, config.tasks, seed=config.seed,
                                   config=config.probe, n_jobs=1, metadata=metadata)
        except UniprofileError as e:
            raise StageError('evaluate', e) from e

        logger.info("=== PHASE 5 : Rapport ===")
        self.exporter.export_to_json(report, str(self.work_dir / 'report.json'))
        self.exporter.export_summary(report, str(self.work_dir / 'rapport.txt'))
        self.exporter.export_to_excel(report, str(self.work_dir / 'report.xlsx'))
        logger.info(f"\n✅ Pipeline terminé ! Résultats dans : {self.work_dir}")
        return report


def run_pipeline(config: PipelineConfig) -> Dict:
    """Exécute toutes les étapes dans l'ordre des dépendances et renvoie le rapport"""
    return ProfilePipeline(config).run()
