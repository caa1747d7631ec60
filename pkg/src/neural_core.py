"""
Noyau numérique minimal : tenseurs à différentiation inverse, GRU,
entropie croisée, dropout et optimiseur Adam

Chaque opération enregistre ses parents et une fermeture de rétropropagation ;
backward() parcourt le graphe dans l'ordre topologique inverse.
"""

import itertools
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field as dc_field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, IdRangeError, ParameterError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'UPCK'
CHECKPOINT_VERSION = 1

ArrayLike = Union[np.ndarray, float, int]

# ordre de création : un ordre topologique valide, indépendant du parcours
_creation_order = itertools.count()


class Tensor:
    """Tableau numpy + gradient + enregistrement de l'opération qui l'a produit"""

    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward', '_seq')

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 parents: Tuple['Tensor', ...] = (), name: str = ''):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self._parents = tuple(p for p in parents if p.requires_grad)
        self._backward: Callable[[], None] = lambda: None
        self._seq = next(_creation_order)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(constant(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(constant(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, constant(-1.0, self.dtype))


def constant(value: ArrayLike, dtype=np.float64) -> Tensor:
    """Tenseur sans gradient"""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _lift(a, dtype) -> Tensor:
    return a if isinstance(a, Tensor) else constant(a, dtype)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # seule la diffusion sur les axes de tête (biais, constantes) est prise en charge
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _lift(a, getattr(b, 'dtype', np.float64))
    b = _lift(b, a.dtype)
    out = Tensor(a.data + b.data, parents=(a, b))

    def _backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b.shape))
    out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    a = _lift(a, getattr(b, 'dtype', np.float64))
    b = _lift(b, a.dtype)
    out = Tensor(a.data - b.data, parents=(a, b))

    def _backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-out.grad, b.shape))
    out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a = _lift(a, getattr(b, 'dtype', np.float64))
    b = _lift(b, a.dtype)
    out = Tensor(a.data * b.data, parents=(a, b))

    def _backward():
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))
    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"produit matriciel impossible : {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def _backward():
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)
    out._backward = _backward
    return out


def sigmoid(a: Tensor) -> Tensor:
    # forme stable des deux côtés de zéro
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    out = Tensor(s, parents=(a,))

    def _backward():
        _accumulate(a, out.grad * s * (1.0 - s))
    out._backward = _backward
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t, parents=(a,))

    def _backward():
        _accumulate(a, out.grad * (1.0 - t * t))
    out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    out = Tensor(np.where(positive, a.data, 0).astype(a.dtype), parents=(a,))

    def _backward():
        _accumulate(a, out.grad * positive)
    out._backward = _backward
    return out


def total(a: Tensor) -> Tensor:
    """Somme de tous les éléments (scalaire)"""
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype), parents=(a,))

    def _backward():
        _accumulate(a, np.full_like(a.data, out.grad))
    out._backward = _backward
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Lignes de la table pour chaque identifiant"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids.max() if ids.max() >= table.shape[0] else ids.min()
        raise IdRangeError(f"identifiant {bad} hors de la table '{table.name}' ({table.shape[0]} lignes)")
    out = Tensor(table.data[ids], parents=(table,))

    def _backward():
        if not table.requires_grad:
            return
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _accumulate(table, g)
    out._backward = _backward
    return out


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def blend(mask: np.ndarray, new: Tensor, old: Tensor) -> Tensor:
    """mask * new + (1 - mask) * old, avec un masque constant {0, 1} par ligne"""
    m = constant(mask.reshape(-1, 1).astype(new.dtype), new.dtype)
    return add(mul(m, new), mul(constant(1.0, new.dtype) - m, old))


def softmax_cross_entropy(logits: np.ndarray, target: int) -> Tuple[float, np.ndarray]:
    """
    Entropie croisée d'un vecteur de logits

    Returns:
        (perte, gradient par rapport aux logits)
    """
    logits = np.asarray(logits)
    if not 0 <= target < logits.shape[-1]:
        raise IdRangeError(f"cible {target} hors de [0, {logits.shape[-1]})")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = float(log_z - shifted[target])
    grad = np.exp(shifted - log_z)
    grad[target] -= 1.0
    return loss, grad


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """
    Somme pondérée des entropies croisées ligne par ligne

    Args:
        logits: [N, V]
        targets: [N] identifiants cibles
        weights: [N] poids (0 pour les pas de remplissage)
    """
    x = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[1]):
        raise IdRangeError(f"cible hors de [0, {x.shape[1]})")
    w = np.asarray(weights, dtype=x.dtype)
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(targets))
    losses = log_z - shifted[rows, targets]
    out = Tensor(np.asarray((w * losses).sum(), dtype=x.dtype), parents=(logits,))

    def _backward():
        probs = np.exp(shifted - log_z[:, None])
        probs[rows, targets] -= 1.0
        _accumulate(logits, probs * (w * out.grad)[:, None])
    out._backward = _backward
    return out


def binary_cross_entropy(logits: Tensor, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Somme des entropies croisées binaires sur sorties logistiques"""
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    w = np.ones_like(x) if weights is None else np.broadcast_to(np.asarray(weights, dtype=x.dtype), x.shape)
    # log(1 + exp(-|x|)) + max(x, 0) - x * y
    losses = np.logaddexp(0, -np.abs(x)) + np.maximum(x, 0) - x * y
    out = Tensor(np.asarray((w * losses).sum(), dtype=x.dtype), parents=(logits,))

    def _backward():
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        _accumulate(logits, ((s - y) * w * out.grad).astype(x.dtype))
    out._backward = _backward
    return out


def dropout(x: Tensor, p: float, training: bool,
            rng: Union[np.random.Generator, int, None] = None) -> Tensor:
    """Dropout inversé : zéro avec probabilité p, survivants mis à l'échelle 1/(1-p)"""
    if not 0 <= p < 1:
        raise ParameterError(f"taux de dropout {p} hors de [0, 1)")
    if not training or p == 0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, constant(keep, x.dtype))


def backward(loss: Tensor, params: Optional[Dict[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """
    Rétropropagation depuis une perte scalaire

    Returns:
        gradient de chaque paramètre (zéros pour les paramètres inutilisés)
    """
    if loss.data.size != 1:
        raise ContractError(f"la perte doit être scalaire (forme {loss.shape})")

    # parcours itératif : les séquences longues dépassent la limite de récursion
    reachable: Dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable[id(node)] = node
        stack.extend(p for p in node._parents if id(p) not in reachable)

    # ordre de création décroissant : même ordre d'accumulation quel que soit le graphe englobant
    order = sorted(reachable.values(), key=lambda n: n._seq, reverse=True)
    for node in order:
        node.grad = None
    if params is not None:
        zero_grad(params)
    loss.grad = np.ones_like(loss.data)
    for node in order:
        if node.grad is not None and node._parents:
            node._backward()

    if params is None:
        return {}
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}


def zero_grad(params: Dict[str, Tensor]):
    for p in params.values():
        p.grad = None


# --- GRU ---------------------------------------------------------------------

@dataclass
class GruParams:
    """Poids d'une couche GRU : W_g (d_in x d_h), U_g (d_h x d_h), b_g (d_h) pour g in {z, r, h}"""
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_h: Tensor
    U_h: Tensor
    b_h: Tensor

    @property
    def d_in(self) -> int:
        return self.W_z.shape[0]

    @property
    def d_h(self) -> int:
        return self.U_z.shape[0]

    def named(self, prefix: str) -> Dict[str, Tensor]:
        return OrderedDict((f"{prefix}.{k}", getattr(self, k))
                           for k in ('W_z', 'U_z', 'b_z', 'W_r', 'U_r', 'b_r', 'W_h', 'U_h', 'b_h'))

    @classmethod
    def init(cls, d_in: int, d_h: int, rng: np.random.Generator, dtype=np.float32, prefix: str = 'gru') -> 'GruParams':
        """Initialisation uniforme(-1/sqrt(d_h), 1/sqrt(d_h))"""
        bound = 1.0 / np.sqrt(d_h)
        tensors = {}
        for gate in ('z', 'r', 'h'):
            tensors[f'W_{gate}'] = parameter(rng.uniform(-bound, bound, (d_in, d_h)).astype(dtype), f'{prefix}.W_{gate}')
            tensors[f'U_{gate}'] = parameter(rng.uniform(-bound, bound, (d_h, d_h)).astype(dtype), f'{prefix}.U_{gate}')
            tensors[f'b_{gate}'] = parameter(rng.uniform(-bound, bound, (d_h,)).astype(dtype), f'{prefix}.b_{gate}')
        return cls(**tensors)


def gru_cell(x, h_prev, params: GruParams) -> Tensor:
    """
    Un pas de GRU

    z = σ(W_z x + U_z h + b_z) ; r = σ(W_r x + U_r h + b_r)
    ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h) ; h' = (1 - z) ⊙ h + z ⊙ ĥ
    """
    dtype = params.W_z.dtype
    x = _lift(x, dtype)
    h_prev = _lift(h_prev, dtype)
    if x.data.ndim == 1:
        x = _reshape_row(x)
    if h_prev.data.ndim == 1:
        h_prev = _reshape_row(h_prev)
    if x.shape[-1] != params.d_in:
        raise ShapeError(f"entrée de taille {x.shape[-1]}, couche attend {params.d_in}")
    if h_prev.shape[-1] != params.d_h:
        raise ShapeError(f"état caché de taille {h_prev.shape[-1]}, couche attend {params.d_h}")

    z = sigmoid(affine(x, params.W_z, params.b_z) + matmul(h_prev, params.U_z))
    r = sigmoid(affine(x, params.W_r, params.b_r) + matmul(h_prev, params.U_r))
    h_tilde = tanh(affine(x, params.W_h, params.b_h) + matmul(r * h_prev, params.U_h))
    return (1.0 - z) * h_prev + z * h_tilde


def _reshape_row(a: Tensor) -> Tensor:
    out = Tensor(a.data.reshape(1, -1), parents=(a,))

    def _backward():
        _accumulate(a, out.grad.reshape(a.shape))
    out._backward = _backward
    return out


class GruStack:
    """Pile de couches GRU avec dropout entre les couches"""

    def __init__(self, layers: List[GruParams], dropout_rate: float = 0.0):
        self.layers = layers
        self.dropout_rate = dropout_rate

    @classmethod
    def init(cls, d_in: int, d_h: int, n_layers: int, rng: np.random.Generator,
             dropout_rate: float = 0.0, dtype=np.float32, prefix: str = 'gru') -> 'GruStack':
        layers = [GruParams.init(d_in if i == 0 else d_h, d_h, rng, dtype, f'{prefix}.{i}')
                  for i in range(n_layers)]
        return cls(layers, dropout_rate)

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        params = OrderedDict()
        for i, layer in enumerate(self.layers):
            params.update(layer.named(f'{prefix}.{i}'))
        return params

    def run(self, inputs: Sequence[Tensor], batch_size: int,
            step_mask: Optional[np.ndarray] = None,
            training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tuple[List[Tensor], List[Tensor]]:
        """
        Déroule la pile sur une séquence d'entrées [B, d_in]

        Args:
            step_mask: [B, T] ; aux pas masqués l'état caché est reporté tel quel

        Returns:
            (sorties de la couche supérieure à chaque pas, états finaux par couche)
        """
        dtype = self.layers[0].W_z.dtype
        hidden = [constant(np.zeros((batch_size, layer.d_h), dtype=dtype), dtype) for layer in self.layers]
        outputs = []
        for t, x in enumerate(inputs):
            layer_input = x
            for i, layer in enumerate(self.layers):
                if i > 0:
                    layer_input = dropout(layer_input, self.dropout_rate, training, rng)
                h_new = gru_cell(layer_input, hidden[i], layer)
                if step_mask is not None and not step_mask[:, t].all():
                    h_new = blend(step_mask[:, t], h_new, hidden[i])
                hidden[i] = h_new
                layer_input = h_new
            outputs.append(layer_input)
        return outputs, hidden


# --- Optimisation ------------------------------------------------------------

@dataclass
class AdamState:
    """Moments d'ordre 1 et 2 par paramètre"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = dc_field(default_factory=dict)
    v: Dict[str, np.ndarray] = dc_field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, Tensor], AdamState]:
    """Mise à jour Adam avec correction de biais (les paramètres sont modifiés sur place)"""
    if state.lr <= 0:
        raise ParameterError(f"taux d'apprentissage {state.lr} <= 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"gradient non fini pour le paramètre '{name}'")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if p.data.shape != g.shape:
            raise ShapeError(f"gradient de forme {g.shape} pour '{name}' de forme {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return params, state


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Réduit les gradients si leur norme globale dépasse max_norm ; renvoie la norme initiale"""
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def gradient_check(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor],
                   eps: float = 1e-5) -> Dict[str, float]:
    """
    Compare les gradients analytiques aux différences finies centrées

    Returns:
        erreur relative ||a - n|| / (||a|| + ||n||) par paramètre
    """
    zero_grad(params)
    analytic = {k: g.copy() for k, g in backward(loss_fn(), params).items()}
    errors = {}
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = float(loss_fn().data)
            flat[i] = original - eps
            f_minus = float(loss_fn().data)
            flat[i] = original
            num_flat[i] = (f_plus - f_minus) / (2 * eps)
        denom = np.linalg.norm(analytic[name]) + np.linalg.norm(numeric)
        errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(analytic[name] - numeric) / denom)
    return errors


# --- Points de sauvegarde ----------------------------------------------------

def save_checkpoint(params: Dict[str, Tensor], path: str, metadata: Optional[Dict] = None):
    """
    Format binaire little-endian : magic 'UPCK', u32 version, u32 taille + JSON
    de métadonnées, u32 nombre de paramètres puis pour chacun
    (u16 taille du nom, nom UTF-8, u8 rang, u32 dimensions, float32)
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(meta)))
        f.write(meta)
        f.write(struct.pack('<I', len(params)))
        for name, p in params.items():
            encoded = name.encode('utf-8')
            f.write(struct.pack('<H', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<B', p.data.ndim))
            f.write(struct.pack(f'<{p.data.ndim}I', *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype='<f4').tobytes())
    logger.info(f"✓ Point de sauvegarde écrit : {path} ({len(params)} paramètres)")


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict]:
    """Relit un point de sauvegarde ; renvoie (tableaux par nom, métadonnées)"""
    with open(path, 'rb') as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path} n'est pas un point de sauvegarde uniprofile")
    version, meta_len = struct.unpack_from('<II', blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"version de point de sauvegarde non prise en charge : {version}")
    offset = 12
    metadata = json.loads(blob[offset:offset + meta_len].decode('utf-8'))
    offset += meta_len
    (n_params,) = struct.unpack_from('<I', blob, offset)
    offset += 4
    arrays = OrderedDict()
    for _ in range(n_params):
        (name_len,) = struct.unpack_from('<H', blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode('utf-8')
        offset += name_len
        (ndim,) = struct.unpack_from('<B', blob, offset)
        offset += 1
        shape = struct.unpack_from(f'<{ndim}I', blob, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype='<f4', count=count, offset=offset).reshape(shape).copy()
        offset += 4 * count
    return arrays, metadata
