"""
Autoencodeur GRU de séquences d'événements

L'encodeur résume la séquence en un vecteur utilisateur (état caché de la
dernière couche au dernier pas) ; le décodeur reconstruit chaque champ pas à
pas, le vecteur utilisateur étant ajouté à l'embedding d'entrée à chaque pas.
"""

import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import neural_core as nc
from ensemble import ProfileMatrix
from errors import ContractError, ParameterError, ShapeError, TrainingError
from sequence_builder import VARIANTS, EncodedSequence, pad_batch

logger = logging.getLogger(__name__)

# Valeurs publiées : day_event_type est plus petit et plus régularisé
PRESETS = {
    'day_event_type': {'hidden_size': 128, 'n_layers': 2, 'dropout': 0.5},
    'default': {'hidden_size': 512, 'n_layers': 3, 'dropout': 0.1},
}


@dataclass
class GruAeConfig:
    """Hyperparamètres d'une variante d'autoencodeur"""
    variant: str = 'week_all'
    hidden_size: int = 512
    n_layers: int = 3
    dropout: float = 0.1
    max_len: int = 128
    vocab_sizes: Dict[str, int] = dc_field(default_factory=dict)
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 20
    clip_norm: float = 5.0
    dtype: str = 'float32'
    progress: bool = True

    @classmethod
    def preset(cls, variant: str, **overrides) -> 'GruAeConfig':
        if variant not in VARIANTS:
            raise ParameterError(f"variante inconnue : {variant}")
        values = dict(PRESETS.get(variant, PRESETS['default']))
        values.update(overrides)
        return cls(variant=variant, **values)

    @property
    def fields(self) -> Tuple[str, ...]:
        return VARIANTS[self.variant]

    def validate(self):
        if self.hidden_size < 1 or self.n_layers < 1:
            raise ParameterError("hidden_size et n_layers doivent être >= 1")
        if not 0 <= self.dropout < 1:
            raise ParameterError(f"dropout {self.dropout} hors de [0, 1)")
        missing = [f for f in self.fields if f not in self.vocab_sizes]
        if missing:
            raise ParameterError(f"taille de vocabulaire manquante pour '{missing[0]}'")


class GruAeModel:
    """Tables d'embedding par champ, piles GRU encodeur/décodeur, têtes de sortie par champ"""

    def __init__(self, config: GruAeConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.fields = list(config.fields)
        dtype = np.dtype(config.dtype)
        d_h = config.hidden_size
        init_rng = np.random.default_rng(seed)

        self.embeddings = OrderedDict(
            (f, nc.parameter((init_rng.normal(0.0, 0.02, (config.vocab_sizes[f], d_h))).astype(dtype), f'emb.{f}'))
            for f in self.fields
        )
        self.encoder = nc.GruStack.init(d_h, d_h, config.n_layers, init_rng, config.dropout, dtype, 'encoder')
        self.decoder = nc.GruStack.init(d_h, d_h, config.n_layers, init_rng, config.dropout, dtype, 'decoder')
        self.heads = OrderedDict()
        for f in self.fields:
            weight = nc.parameter(init_rng.normal(0.0, 0.02, (d_h, config.vocab_sizes[f])).astype(dtype), f'head.{f}.W')
            bias = nc.parameter(np.zeros(config.vocab_sizes[f], dtype=dtype), f'head.{f}.b')
            self.heads[f] = (weight, bias)

    @property
    def hidden_size(self) -> int:
        return self.config.hidden_size

    def named_parameters(self) -> Dict[str, nc.Tensor]:
        params = OrderedDict()
        for f, table in self.embeddings.items():
            params[f'emb.{f}'] = table
        params.update(self.encoder.named_parameters('encoder'))
        params.update(self.decoder.named_parameters('decoder'))
        for f, (weight, bias) in self.heads.items():
            params[f'head.{f}.W'] = weight
            params[f'head.{f}.b'] = bias
        return params

    def save(self, path: str):
        nc.save_checkpoint(self.named_parameters(), path, metadata={'config': asdict(self.config)})

    @classmethod
    def load(cls, path: str) -> 'GruAeModel':
        arrays, metadata = nc.load_checkpoint(path)
        config = GruAeConfig(**metadata['config'])
        model = cls(config)
        for name, p in model.named_parameters().items():
            if arrays[name].shape != p.data.shape:
                raise ShapeError(f"paramètre '{name}' de forme {arrays[name].shape}, attendu {p.data.shape}")
            p.data[...] = arrays[name].astype(p.data.dtype)
        logger.info(f"✓ Modèle chargé depuis {path}")
        return model


def embed_event(step_ids: Dict[str, np.ndarray], model: GruAeModel) -> nc.Tensor:
    """Somme des embeddings de champ d'un pas : [B] identifiants par champ -> [B, d_h]"""
    out = None
    for f in model.fields:
        row = nc.embedding(model.embeddings[f], step_ids[f])
        out = row if out is None else out + row
    return out


def _check_fields(model: GruAeModel, fields) -> None:
    if list(fields) != model.fields and set(fields) != set(model.fields):
        raise ContractError(f"séquence encodée avec les champs {list(fields)}, modèle attend {model.fields}")


def encode_batch(batch: Dict[str, np.ndarray], mask: np.ndarray, model: GruAeModel,
                 training: bool = False, rng: Optional[np.random.Generator] = None) -> nc.Tensor:
    """États cachés finaux de la couche supérieure de l'encodeur : [B, d_h]"""
    B, T = mask.shape
    inputs = []
    for t in range(T):
        x = embed_event({f: batch[f][:, t] for f in model.fields}, model)
        inputs.append(nc.dropout(x, model.config.dropout, training, rng))
    _, hidden = model.encoder.run(inputs, B, step_mask=mask, training=training, rng=rng)
    return hidden[-1]


def decode_batch(user: nc.Tensor, batch: Dict[str, np.ndarray], mask: np.ndarray, model: GruAeModel,
                 training: bool = False, rng: Optional[np.random.Generator] = None) -> Dict[str, List[nc.Tensor]]:
    """
    Décodage avec forçage de l'enseignant

    L'entrée au pas t est embed_event(pas t-1) + u ; les états cachés partent de zéro.

    Returns:
        logits [B, V_f] par champ pour les pas 1..T-1
    """
    B, T = mask.shape
    if user.shape != (B, model.hidden_size):
        raise ShapeError(f"vecteur utilisateur de forme {user.shape}, attendu {(B, model.hidden_size)}")
    inputs = []
    for t in range(1, T):
        x = embed_event({f: batch[f][:, t - 1] for f in model.fields}, model)
        x = nc.dropout(x, model.config.dropout, training, rng)
        inputs.append(x + user)
    outputs, _ = model.decoder.run(inputs, B, training=training, rng=rng)
    logits = {f: [] for f in model.fields}
    for out in outputs:
        for f in model.fields:
            weight, bias = model.heads[f]
            logits[f].append(nc.affine(out, weight, bias))
    return logits


def batch_loss(logits: Dict[str, List[nc.Tensor]], batch: Dict[str, np.ndarray], mask: np.ndarray) -> nc.Tensor:
    """Somme sur les champs de la moyenne des entropies croisées sur les pas valides"""
    n_valid = float(mask[:, 1:].sum())
    loss = None
    for f, steps in logits.items():
        field_sum = None
        for t, step_logits in enumerate(steps, start=1):
            term = nc.cross_entropy(step_logits, batch[f][:, t], mask[:, t])
            field_sum = term if field_sum is None else field_sum + term
        field_loss = field_sum * (1.0 / max(n_valid, 1.0))
        loss = field_loss if loss is None else loss + field_loss
    return loss


def _forward_loss(model: GruAeModel, sequences: Sequence[EncodedSequence], training: bool = False,
                  rng: Optional[np.random.Generator] = None,
                  user: Optional[np.ndarray] = None, length: Optional[int] = None) -> nc.Tensor:
    batch, mask = pad_batch(sequences, model.fields, length)
    if user is None:
        u = encode_batch(batch, mask, model, training, rng)
    else:
        u = nc.constant(np.asarray(user, dtype=model.config.dtype), np.dtype(model.config.dtype))
    logits = decode_batch(u, batch, mask, model, training, rng)
    return batch_loss(logits, batch, mask)


def encode(seq: EncodedSequence, model: GruAeModel) -> np.ndarray:
    """Vecteur utilisateur d'une séquence (mode évaluation)"""
    _check_fields(model, seq.fields)
    batch, mask = pad_batch([seq], model.fields)
    return encode_batch(batch, mask, model).data[0].copy()


def decode_teacher_forced(user: np.ndarray, seq: EncodedSequence, model: GruAeModel) -> Dict[str, np.ndarray]:
    """Logits [L-1, V_f] par champ pour une séquence et un vecteur utilisateur donnés"""
    _check_fields(model, seq.fields)
    user = np.asarray(user)
    if user.shape != (model.hidden_size,):
        raise ShapeError(f"vecteur utilisateur de taille {user.shape}, attendu ({model.hidden_size},)")
    batch, mask = pad_batch([seq], model.fields)
    u = nc.constant(user.reshape(1, -1).astype(model.config.dtype), np.dtype(model.config.dtype))
    logits = decode_batch(u, batch, mask, model)
    return {f: np.stack([step.data[0] for step in steps]) for f, steps in logits.items()}


def reconstruction_loss(logits: Dict[str, np.ndarray], seq: EncodedSequence,
                        mask: Optional[np.ndarray] = None) -> float:
    """
    Perte de reconstruction d'une séquence à partir de ses logits [L-1, V_f]

    Σ_f moyenne sur les pas valides de CE(logits_f,t, cible_f,t), cibles = pas 1..L-1
    """
    L = seq.length
    valid = np.ones(L, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    total = 0.0
    for f, field_logits in logits.items():
        targets = seq.fields[f]
        losses = [nc.softmax_cross_entropy(field_logits[t - 1], int(targets[t]))[0]
                  for t in range(1, L) if valid[t]]
        total += float(np.mean(losses)) if losses else 0.0
    return total


@dataclass
class TrainingResult:
    model: GruAeModel
    loss_history: List[float]


def train(sequences: Sequence[EncodedSequence], config: GruAeConfig, seed: int = 0) -> TrainingResult:
    """
    Entraînement par mini-batchs avec Adam et forçage de l'enseignant

    Returns:
        modèle entraîné et perte moyenne par époque
    """
    if not sequences:
        raise ContractError("jeu d'entraînement vide")
    config.validate()
    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(seed).spawn(3)
    model = GruAeModel(config, seed=int(init_seq.generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    params = model.named_parameters()
    state = nc.AdamState(lr=config.lr)

    n = len(sequences)
    n_batches = (n + config.batch_size - 1) // config.batch_size
    logger.info(f"Entraînement GRU-AE {config.variant} : {n} séquences, {n_batches} batchs/époque, "
                f"d_h={config.hidden_size}, {config.n_layers} couches")

    history = []
    epochs = tqdm(range(config.epochs), desc=f"GRU-AE {config.variant}", disable=not config.progress)
    for epoch in epochs:
        start = time.time()
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            loss = _forward_loss(model, [sequences[i] for i in idx], training=True, rng=dropout_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"perte non finie à l'époque {epoch}, batch {b}")
            grads = nc.backward(loss, params)
            nc.clip_grad_norm(grads, config.clip_norm)
            nc.adam_step(params, grads, state)
            batch_losses.append(value)
        epoch_loss = float(np.mean(batch_losses))
        history.append(epoch_loss)
        epochs.set_postfix(loss=f"{epoch_loss:.4f}")
        logger.info(f"Époque {epoch + 1}/{config.epochs} : perte {epoch_loss:.4f} ({time.time() - start:.1f}s)")

    logger.info(f"✓ GRU-AE {config.variant} entraîné (perte finale {history[-1]:.4f})")
    return TrainingResult(model, history)


def embed_all(sequences: Sequence[EncodedSequence], model: GruAeModel,
              batch_size: int = 256, source: Optional[str] = None) -> ProfileMatrix:
    """Une ligne par client, dropout désactivé"""
    if sequences:
        _check_fields(model, sequences[0].fields)
    rows = []
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start:start + batch_size]
        batch, mask = pad_batch(chunk, model.fields)
        rows.append(encode_batch(batch, mask, model).data.astype(np.float32))
    matrix = np.concatenate(rows) if rows else np.zeros((0, model.hidden_size), dtype=np.float32)
    name = source or f'gru_ae_{model.config.variant}'
    return ProfileMatrix(
        client_ids=np.array([s.client_id for s in sequences], dtype=np.int64),
        values=matrix,
        source=name,
    )


def sequence_loss(model: GruAeModel, sequences: Sequence[EncodedSequence],
                  users: Optional[np.ndarray] = None) -> float:
    """Perte de reconstruction en mode évaluation, avec des vecteurs utilisateurs imposés si fournis"""
    return float(_forward_loss(model, sequences, user=users).data)


def teacher_forced_accuracy(model: GruAeModel, sequences: Sequence[EncodedSequence]) -> Dict[str, float]:
    """Exactitude de la prédiction du pas suivant par champ, sur les pas valides"""
    batch, mask = pad_batch(sequences, model.fields)
    u = encode_batch(batch, mask, model)
    logits = decode_batch(u, batch, mask, model)
    valid = mask[:, 1:]
    accuracy = {}
    for f, steps in logits.items():
        predicted = np.stack([step.data.argmax(axis=1) for step in steps], axis=1)
        correct = (predicted == batch[f][:, 1:]) & valid
        accuracy[f] = float(correct.sum() / valid.sum())
    return accuracy
