#!/usr/bin/env python3
"""
Ligne de commande uniprofile : profils utilisateurs universels à partir de journaux d'événements
"""

import argparse
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

# Ajouter le dossier src au path
sys.path.append(str(Path(__file__).parent / 'src'))

import gru_autoencoder as gae
from config import config_from_dict, load_config
from ensemble import EnsembleSource, combine
from errors import ConfigurationError, UniprofileError
from evaluator import evaluate_many
from event_log import event_counts, read_events, split_window, write_events
from exporter import DataExporter, export_tsv, read_uemb, write_uemb
from feature_extractor import FeatureExtractor
from ials import build_interaction_matrix, ials_fit
from metrics import canonical_task
from pipeline import default_cutoff, run_pipeline
from sequence_builder import VARIANTS, SequenceEncoder, SequenceSchema, save_sequences
from synthgen import generate

# Configuration du logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def _history(args, config):
    """Journal d'historique (avant la coupure) à partir de --events et --cutoff"""
    log = read_events(args.events)
    horizon = config.horizon_days
    cutoff = args.cutoff if args.cutoff is not None else default_cutoff(log, horizon)
    history, holdout = split_window(log, cutoff, horizon)
    return history, holdout, cutoff


def cmd_synth(args, config):
    synth = config.synth
    if args.n_clients:
        synth.n_clients = args.n_clients
    result = generate(synth, seed=config.seed, n_jobs=config.threads)
    result.write(args.out, args.truth)


def cmd_ingest(args, config):
    log = read_events(args.events)
    logger.info(f"✓ {len(log)} événements valides, {len(log.clients())} clients, fenêtre {log.window}")
    if args.out:
        write_events(log, args.out)


def cmd_stats(args, config):
    table = event_counts(read_events(args.events))
    table['entities'] = table['entities'].map(lambda v: '--' if np.isnan(v) else f'{int(v)}')
    print(table.to_string(float_format=lambda v: f'{v:.2f}'))


def cmd_encode(args, config):
    history, _, _ = _history(args, config)
    schema = SequenceSchema.for_variant(args.variant, config.vocab.max_len)
    encoder = SequenceEncoder(schema, config.vocab.max_sizes, config.vocab.n_products).fit(history)
    encoder.save_vocabs(args.vocab or f'{args.out}.vocab.json')
    save_sequences(encoder.encode(history, n_jobs=config.threads), args.out)


def cmd_train_ae(args, config):
    history, _, _ = _history(args, config)
    schema = SequenceSchema.for_variant(args.variant, config.vocab.max_len)
    encoder = SequenceEncoder(schema, config.vocab.max_sizes, config.vocab.n_products).fit(history)
    encoder.save_vocabs(f'{args.out}.vocab.json')
    sequences = encoder.encode(history, n_jobs=config.threads)
    ae_config = config.gru_ae_config(args.variant, encoder.vocab_sizes)
    result = gae.train(sequences, ae_config, seed=config.seed)
    result.model.save(args.out)
    logger.info(f"Pertes par époque : {', '.join(f'{v:.4f}' for v in result.loss_history)}")


def cmd_embed_ae(args, config):
    history, _, _ = _history(args, config)
    model = gae.GruAeModel.load(args.ckpt)
    encoder = SequenceEncoder.load_vocabs(args.vocab or f'{args.ckpt}.vocab.json')
    sequences = encoder.encode(history, n_jobs=config.threads)
    write_uemb(gae.embed_all(sequences, model), args.out)


def cmd_train_ials(args, config):
    history, _, _ = _history(args, config)
    matrix = build_interaction_matrix(history, args.target)
    model = ials_fit(matrix, k=args.k or config.ials.k, reg=config.ials.reg, alpha=config.ials.alpha,
                     iterations=config.ials.iterations, seed=config.seed, n_jobs=config.threads,
                     progress=config.progress)
    write_uemb(model.user_embeddings(), args.out)


def cmd_features(args, config):
    history, _, cutoff = _history(args, config)
    profile = FeatureExtractor().extract_batch_features(history, cutoff, n_jobs=config.threads,
                                                        progress=config.progress)
    write_uemb(profile, args.out)
    if args.tsv:
        export_tsv(profile, args.tsv)


def cmd_combine(args, config):
    with open(args.spec, 'r', encoding='utf-8') as f:
        spec_config = config_from_dict({'ensemble': (yaml.safe_load(f) or {}).get('ensemble', {})})
    specs = spec_config.ensemble.sources
    if not specs or any(s.path is None for s in specs):
        raise ConfigurationError("chaque source de --spec doit déclarer un chemin .uemb (path)")
    sources = [EnsembleSource(read_uemb(s.path), s.normalization, s.pca_k) for s in specs]
    clients = np.unique(np.concatenate([s.profile.client_ids for s in sources]))
    write_uemb(combine(sources, clients, spec_config.ensemble.imputation), args.out)


def cmd_evaluate(args, config):
    history, holdout, cutoff = _history(args, config)
    tasks = [canonical_task(t.strip()) for t in args.tasks.split(',')]
    profiles = [read_uemb(p) for p in args.profiles]
    clients = history.clients()
    profiles = [p.subset(clients) for p in profiles]
    report = evaluate_many(profiles, history, holdout, tasks, seed=config.seed, config=config.probe,
                           n_jobs=config.threads,
                           metadata={'seed': config.seed, 'cutoff': int(cutoff), 'n_clients': int(len(clients))})
    DataExporter().export_to_json(report, args.report)


def cmd_run(args, config):
    if args.out:
        config.work_dir = args.out
    if args.events:
        config.events_path = args.events
    report = run_pipeline(config)
    logger.info("\n=== RÉSUMÉ ===")
    for row in report['rows']:
        logger.info(f"  - {row['name']} : somme {row['sum']:.4f}")


COMMANDS = {
    'synth': cmd_synth,
    'ingest': cmd_ingest,
    'stats': cmd_stats,
    'encode': cmd_encode,
    'train-ae': cmd_train_ae,
    'embed-ae': cmd_embed_ae,
    'train-ials': cmd_train_ials,
    'features': cmd_features,
    'combine': cmd_combine,
    'evaluate': cmd_evaluate,
    'run': cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='uniprofile',
        description="Profils utilisateurs universels par autoencodage de séquences d'événements"
    )
    parser.add_argument('--config', type=str, default=None, help="Fichier YAML (défaut : config/default.yaml)")
    parser.add_argument('--seed', type=int, default=None, help="Graine globale")
    parser.add_argument('--threads', type=int, default=None, help="Nombre de threads (1 = mode déterministe)")
    parser.add_argument('--quiet', action='store_true', help="Désactive les barres de progression")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help="Génère un journal synthétique")
    p.add_argument('--out', required=True, help="Fichier events-JSONL")
    p.add_argument('--truth', default=None, help="Fichier JSON des archétypes")
    p.add_argument('--n-clients', type=int, default=None)

    p = sub.add_parser('ingest', help="Valide un journal et le réécrit trié")
    p.add_argument('--events', required=True)
    p.add_argument('--out', default=None)

    p = sub.add_parser('stats', help="Statistiques par type d'événement")
    p.add_argument('--events', required=True)

    def with_window(p):
        p.add_argument('--events', required=True)
        p.add_argument('--cutoff', type=int, default=None, help="Horodatage de coupure (défaut : fin - horizon)")

    p = sub.add_parser('encode', help="Encode les historiques en séquences")
    with_window(p)
    p.add_argument('--schema', '--variant', dest='variant', choices=list(VARIANTS), default='week_all')
    p.add_argument('--out', required=True)
    p.add_argument('--vocab', default=None)

    p = sub.add_parser('train-ae', help="Entraîne un autoencodeur GRU")
    with_window(p)
    p.add_argument('--schema', '--variant', dest='variant', choices=list(VARIANTS), default='week_all')
    p.add_argument('--out', required=True, help="Point de sauvegarde")

    p = sub.add_parser('embed-ae', help="Extrait les profils d'un autoencodeur entraîné")
    with_window(p)
    p.add_argument('--ckpt', required=True)
    p.add_argument('--vocab', default=None)
    p.add_argument('--out', required=True)

    p = sub.add_parser('train-ials', help="Factorisation iALS")
    with_window(p)
    p.add_argument('--target', choices=['category', 'url'], default='category')
    p.add_argument('--k', type=int, default=None)
    p.add_argument('--out', required=True)

    p = sub.add_parser('features', help="Features statistiques par client")
    with_window(p)
    p.add_argument('--out', required=True)
    p.add_argument('--tsv', default=None)

    p = sub.add_parser('combine', help="Fusionne des fichiers de profils")
    p.add_argument('--spec', required=True, help="YAML avec une section ensemble.sources")
    p.add_argument('--out', required=True)

    p = sub.add_parser('evaluate', help="Évalue des profils sur les tâches")
    with_window(p)
    p.add_argument('--profiles', nargs='+', required=True)
    p.add_argument('--tasks', default='churn,category,product,conversion')
    p.add_argument('--report', required=True)

    p = sub.add_parser('run', help="Pipeline complet")
    p.add_argument('--events', default=None, help="Journal existant (défaut : génération synthétique)")
    p.add_argument('--out', default=None, help="Dossier de travail")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.threads is not None:
            config.threads = args.threads
        if args.quiet:
            config.progress = False
        COMMANDS[args.command](args, config)
    except UniprofileError as e:
        logger.error(f"Erreur lors de {args.command} : {e}")
        sys.exit(1)
    except Exception as e:
        logger.error(f"Erreur lors de {args.command} : {e}")
        traceback.print_exc()
        sys.exit(1)


if __name__ == "__main__":
    main()
