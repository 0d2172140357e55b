#!/usr/bin/env python3
"""
Tensor & Autodiff
Tenseurs 4-D (n, c, h, w) et différentiation automatique en mode inverse.

Le graphe est une bande (tape) en ajout seul, reconstruite à chaque passe
avant : l'ordre topologique est l'ordre d'insertion des noeuds. Seules les
opérations dont CANet a besoin sont enregistrées.
"""

import contextlib
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from canet_cli.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

SUPPORTED_DTYPES = (np.float32, np.float64)

_precision = {"dtype": np.float32}

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def default_dtype() -> type:
    """Précision courante des tenseurs (float32 par défaut)"""
    return _precision["dtype"]


def set_default_dtype(dtype: Any) -> None:
    """Change la précision utilisée à la création des tenseurs"""
    resolved = np.dtype(dtype).type
    if resolved not in SUPPORTED_DTYPES:
        raise ValueError(f"Précision non supportée: {np.dtype(dtype).name} (float32 ou float64)")
    _precision["dtype"] = resolved


@contextlib.contextmanager
def double_precision() -> Iterator[None]:
    """Active temporairement le mode float64 (vérification de gradients)"""
    previous = default_dtype()
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """
    Tableau dense (batch, canaux, hauteur, largeur)

    Un tenseur sans graphe est une constante ; il peut circuler librement
    entre threads.
    """

    __slots__ = ("data", "graph", "node")

    def __init__(self, data: Any, graph: Optional["Graph"] = None, node: Optional[int] = None):
        array = np.asarray(data, dtype=default_dtype())
        if array.ndim != 4:
            raise ShapeError(f"Un tenseur doit avoir 4 dimensions (n, c, h, w), reçu {array.shape}")
        if min(array.shape) < 1:
            raise ShapeError(f"Tenseur vide: {array.shape}")
        self.data = array
        self.graph = graph
        self.node = node

    @classmethod
    def zeros(cls, shape: Tuple[int, int, int, int]) -> "Tensor":
        return cls(np.zeros(shape, dtype=default_dtype()))

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        """Valeur d'un tenseur 1×1×1×1"""
        if self.data.size != 1:
            raise ShapeError(f"item() attend un tenseur scalaire, reçu {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tracked})"


@dataclass
class Node:
    """Entrée de la bande : opération, entrées, fonction de rétropropagation"""
    op: str
    inputs: Tuple[Optional[int], ...]
    shape: Tuple[int, ...]
    backward: Optional[BackwardFn] = None


class Graph:
    """
    Bande d'opérations en ajout seul

    Les entrées d'un noeud le précèdent toujours ; backward() parcourt la
    bande à l'envers et accumule les gradients de façon additive, dans
    l'ordre d'insertion (résultats reproductibles au bit près).
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._watched: Dict[int, Any] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, data: Any, op: str = "leaf") -> Tensor:
        """Enregistre une feuille dont on veut le gradient"""
        tensor = Tensor(data)
        tensor.graph = self
        tensor.node = self._append(Node(op=op, inputs=(), shape=tensor.shape))
        return tensor

    def watch(self, parameter: Any) -> Tensor:
        """
        Enregistre un paramètre comme feuille

        Args:
            parameter: Objet exposant `name`, `value` et `grad`

        Returns:
            Tensor: Feuille du graphe ; après backward(), le gradient est
            ajouté à `parameter.grad`
        """
        tensor = self.leaf(parameter.value, op=f"param:{parameter.name}")
        self._watched[tensor.node] = parameter
        return tensor

    def record(self, op: str, inputs: Sequence[Tensor], output: np.ndarray, backward: BackwardFn) -> Tensor:
        sources = tuple(t.node if t.graph is self else None for t in inputs)
        tensor = Tensor(output)
        tensor.graph = self
        tensor.node = self._append(Node(op=op, inputs=sources, shape=tensor.shape, backward=backward))
        return tensor

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Rétropropagation depuis une perte scalaire

        Args:
            loss: Tenseur 1×1×1×1 appartenant à ce graphe

        Returns:
            dict: Gradient de chaque noeud atteignable (id de noeud -> tableau)

        Raises:
            ContractError: Si la perte n'est pas scalaire ou hors du graphe
        """
        if loss.graph is not self or loss.node is None:
            raise ContractError("La perte n'appartient pas à ce graphe")
        if loss.shape != (1, 1, 1, 1):
            raise ContractError(f"backward() exige une perte scalaire 1×1×1×1, reçu {loss.shape}")

        grads: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for index in range(loss.node, -1, -1):
            upstream = grads.get(index)
            node = self.nodes[index]
            if upstream is None or node.backward is None:
                continue
            for source, contribution in zip(node.inputs, node.backward(upstream)):
                if source is None or contribution is None:
                    continue
                if contribution.shape != self.nodes[source].shape:
                    raise ShapeError(
                        f"Gradient de forme {contribution.shape} pour le noeud {source} "
                        f"de forme {self.nodes[source].shape} ({node.op})"
                    )
                if source in grads:
                    grads[source] = grads[source] + contribution
                else:
                    grads[source] = contribution

        self.gradients = grads
        for node_id, parameter in self._watched.items():
            gradient = grads.get(node_id)
            if gradient is None:
                continue
            gradient = gradient.astype(parameter.value.dtype)
            parameter.grad = gradient.copy() if parameter.grad is None else parameter.grad + gradient
        return grads

    def grad(self, tensor: Tensor) -> Optional[np.ndarray]:
        if tensor.graph is not self or tensor.node is None:
            return None
        return self.gradients.get(tensor.node)


def record_op(op: str, inputs: Sequence[Tensor], output: np.ndarray, backward: BackwardFn) -> Tensor:
    """
    Enregistre une opération dans le graphe de ses entrées

    Sans graphe parmi les entrées, renvoie une simple constante (inférence).
    """
    graphs = {id(t.graph): t.graph for t in inputs if t.graph is not None}
    if not graphs:
        return Tensor(output)
    if len(graphs) > 1:
        raise ContractError(f"{op}: entrées issues de graphes différents")
    graph = next(iter(graphs.values()))
    return graph.record(op, inputs, output, backward)


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """Rétropropagation depuis `loss` dans son propre graphe"""
    if loss.graph is None:
        raise ContractError("backward() appelé sur un tenseur sans graphe")
    return loss.graph.backward(loss)


# ---------------------------------------------------------------------------
# Opérations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, pad: Optional[int] = None) -> Tensor:
    """
    Corrélation croisée 2-D, pas de 1, remplissage par zéros

    Args:
        x: Entrée (n, ci, h, w)
        weight: Noyaux (co, ci, kh, kw), kh et kw impairs
        bias: Biais (1, co, 1, 1) ou None
        pad: Remplissage ; par défaut kh // 2 (même taille en sortie)

    Returns:
        Tensor: Sortie (n, co, h', w')

    Raises:
        ShapeError: Canaux incompatibles, noyau pair, biais mal formé
    """
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if wci != ci:
        raise ShapeError(f"conv2d: l'entrée a {ci} canaux, le noyau en attend {wci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: noyau {kh}×{kw} non impair")
    if pad is None:
        pad = kh // 2
    if pad < 0 or pad >= min(kh, kw):
        raise ShapeError(f"conv2d: remplissage {pad} invalide pour un noyau {kh}×{kw}")
    out_h, out_w = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: entrée {h}×{w} trop petite pour un noyau {kh}×{kw}")
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ShapeError(f"conv2d: biais de forme {bias.shape}, attendu (1, {co}, 1, 1)")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (n, ci, out_h, out_w, kh, kw) : vue im2col sans copie
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out)

    kernel = weight.data

    def _backward(grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad_weight = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        spread = np.pad(grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        spread_windows = sliding_window_view(spread, (kh, kw), axis=(2, 3))
        flipped = kernel[:, :, ::-1, ::-1]
        grad_padded = np.tensordot(spread_windows, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        grad_input = np.ascontiguousarray(grad_padded[:, :, pad:pad + h, pad:pad + w])
        if bias is None:
            return grad_input, grad_weight
        return grad_input, grad_weight, grad.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv2d", inputs, out, _backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU à pente apprise par canal : x si x >= 0, sinon pente[c]·x"""
    if slope.shape != (1, x.channels, 1, 1):
        raise ShapeError(f"prelu: pente de forme {slope.shape}, attendu (1, {x.channels}, 1, 1)")
    data, alpha = x.data, slope.data
    positive = data >= 0
    out = np.where(positive, data, alpha * data)

    def _backward(grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_input = np.where(positive, grad, alpha * grad)
        grad_slope = np.where(positive, 0.0, grad * data).sum(axis=(0, 2, 3), keepdims=True)
        return grad_input, grad_slope.astype(alpha.dtype)

    return record_op("prelu", (x, slope), out, _backward)


def sigmoid(x: Tensor) -> Tensor:
    # forme stable : exp(-|x|) ne déborde jamais
    data = x.data
    z = np.exp(-np.abs(data))
    out = np.where(data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(data.dtype)

    def _backward(grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * out * (1.0 - out),)

    return record_op("sigmoid", (x,), out, _backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Moyenne spatiale par canal : (n, c, h, w) -> (n, c, 1, 1)"""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _backward(grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(grad / (h * w), (n, c, h, w)).copy(),)

    return record_op("global_avg_pool", (x,), out, _backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concaténation sur l'axe des canaux, dans l'ordre des arguments"""
    if not inputs:
        raise ShapeError("concat_channels: séquence vide")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} incompatible avec {inputs[0].shape}")
    bounds = np.cumsum([0] + [t.channels for t in inputs])
    out = np.concatenate([t.data for t in inputs], axis=1)

    def _backward(grad: np.ndarray) -> List[np.ndarray]:
        return [np.ascontiguousarray(grad[:, bounds[i]:bounds[i + 1]]) for i in range(len(inputs))]

    return record_op("concat_channels", tuple(inputs), out, _backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add: formes différentes {x.shape} et {y.shape}")
    return record_op("add", (x, y), x.data + y.data, lambda grad: (grad, grad))


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Produit élément par élément de deux tenseurs de même forme"""
    if x.shape != y.shape:
        raise ShapeError(f"mul: formes différentes {x.shape} et {y.shape}")
    a, b = x.data, y.data
    return record_op("mul", (x, y), a * b, lambda grad: (grad * b, grad * a))


def broadcast_mul(x: Tensor, weights: Tensor) -> Tensor:
    """
    Pondération d'une carte de caractéristiques

    Args:
        x: Caractéristiques (n, c, h, w)
        weights: Poids par pixel (n, 1, h, w) ou par canal (n, c, 1, 1)

    Returns:
        Tensor: x pondéré, de forme (n, c, h, w)
    """
    n, c, h, w = x.shape
    if weights.shape == (n, 1, h, w):
        axes: Tuple[int, ...] = (1,)
    elif weights.shape == (n, c, 1, 1):
        axes = (2, 3)
    else:
        raise ShapeError(
            f"broadcast_mul: poids {weights.shape} incompatibles avec {x.shape} "
            f"(attendu ({n}, 1, {h}, {w}) ou ({n}, {c}, 1, 1))"
        )
    a, b = x.data, weights.data

    def _backward(grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad * b, (grad * a).sum(axis=axes, keepdims=True)

    return record_op("broadcast_mul", (x, weights), a * b, _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    return record_op("scale", (x,), x.data * factor, lambda grad: (grad * factor,))


def sum_all(x: Tensor) -> Tensor:
    """Somme de toutes les entrées, sous forme de tenseur scalaire"""
    shape = x.shape
    out = x.data.sum().reshape(1, 1, 1, 1)

    def _backward(grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(grad.reshape(1, 1, 1, 1), shape).copy(),)

    return record_op("sum_all", (x,), out, _backward)


# ---------------------------------------------------------------------------
# Vérification par différences finies
# ---------------------------------------------------------------------------

def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def finite_diff_check(
    f: Callable[[Optional[Graph]], Tensor],
    params: Sequence[Any],
    step: float = 1e-5,
    samples: int = 10,
    seed: int = 0,
) -> float:
    """
    Compare gradients analytiques et différences finies centrées

    Args:
        f: Construit la perte scalaire ; reçoit un Graph (passe enregistrée)
           ou None (évaluation simple)
        params: Paramètres (name, value, grad) dont on échantillonne les entrées
        step: Pas h de (f(θ+h) - f(θ-h)) / 2h
        samples: Nombre d'entrées tirées par paramètre
        seed: Graine du tirage des entrées

    Returns:
        float: Pire erreur relative |a-b| / max(1e-8, |a|+|b|)
    """
    if default_dtype() is not np.float64:
        logger.warning("finite_diff_check hors du mode double précision : erreurs attendues plus grandes")

    for parameter in params:
        parameter.grad = None
    graph = Graph()
    graph.backward(f(graph))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for parameter in params:
        analytic = parameter.grad if parameter.grad is not None else np.zeros_like(parameter.value)
        flat = parameter.value.reshape(-1)
        count = min(samples, flat.size)
        for index in rng.choice(flat.size, size=count, replace=False):
            original = flat[index]
            flat[index] = original + step
            upper = f(None).item()
            flat[index] = original - step
            lower = f(None).item()
            flat[index] = original
            numeric = (upper - lower) / (2.0 * step)
            expected = float(analytic.reshape(-1)[index])
            error = relative_error(expected, numeric)
            if error > worst:
                logger.debug("%s[%d]: analytique=%.6g numérique=%.6g", parameter.name, index, expected, numeric)
            worst = max(worst, error)
    return worst
