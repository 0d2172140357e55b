#!/usr/bin/env python3
"""
Neural Network Building Blocks
Paramètres nommés, initialisation, perte L2 et optimiseur Adam
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from canet_cli.errors import ConfigError, ContractError, ShapeError
from canet_cli.tensor import Graph, Tensor, record_op

logger = logging.getLogger(__name__)

# Pente initiale des PReLU
PRELU_INIT = 0.25


@dataclass
class Parameter:
    """
    Paramètre appris

    `value`, `grad`, `m` et `v` ont toujours la même forme ; `step`
    augmente de 1 à chaque pas d'Adam.
    """
    name: str
    value: np.ndarray
    grad: Optional[np.ndarray] = None
    m: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    v: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    step: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.value.shape)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def tensor(self, graph: Optional[Graph] = None) -> Tensor:
        """Vue tenseur du paramètre, suivie par `graph` si fourni"""
        return graph.watch(self) if graph is not None else Tensor(self.value)


class ParameterSet:
    """Ensemble ordonné de paramètres indexés par leur nom pointé"""

    def __init__(self, parameters: Sequence[Parameter] = ()):
        self._params: Dict[str, Parameter] = {}
        for parameter in parameters:
            self.add(parameter)

    def add(self, parameter: Parameter) -> None:
        if parameter.name in self._params:
            raise ContractError(f"Paramètre en double: {parameter.name}")
        self._params[parameter.name] = parameter

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"Paramètre inconnu: {name}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def bind(self, graph: Optional[Graph] = None) -> Dict[str, Tensor]:
        """
        Associe chaque nom à un tenseur

        Args:
            graph: Graphe dans lequel enregistrer les paramètres comme
                   feuilles ; None pour une passe sans gradient

        Returns:
            dict: nom -> Tensor
        """
        return {name: parameter.tensor(graph) for name, parameter in self._params.items()}

    def count(self) -> int:
        return sum(parameter.size for parameter in self)

    def copy(self) -> "ParameterSet":
        copied = []
        for p in self:
            grad = None if p.grad is None else p.grad.copy()
            copied.append(Parameter(p.name, p.value.copy(), grad, p.m.copy(), p.v.copy(), p.step))
        return ParameterSet(copied)

    def astype(self, dtype: Any) -> "ParameterSet":
        """Copie convertie (float64 pour la vérification de gradients)"""
        return ParameterSet([Parameter(p.name, p.value.astype(dtype)) for p in self])

    def zero_grad(self) -> None:
        for parameter in self:
            parameter.grad = np.zeros_like(parameter.value)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in self if p.grad is not None))

    def grad_norms(self) -> Dict[str, float]:
        return {p.name: float(np.linalg.norm(p.grad)) for p in self if p.grad is not None}


@dataclass
class AdamConfig:
    """Hyperparamètres d'Adam (taux d'apprentissage 1e-4 par défaut)"""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None  # écrêtage global par norme, désactivé par défaut

    def validate(self) -> List[str]:
        errors = []
        if not self.lr > 0:
            errors.append(f"lr doit être > 0 (reçu {self.lr})")
        if not 0 <= self.beta1 < 1:
            errors.append(f"beta1 doit être dans [0, 1) (reçu {self.beta1})")
        if not 0 <= self.beta2 < 1:
            errors.append(f"beta2 doit être dans [0, 1) (reçu {self.beta2})")
        if not self.eps > 0:
            errors.append(f"eps doit être > 0 (reçu {self.eps})")
        if self.clip_norm is not None and not self.clip_norm > 0:
            errors.append(f"clip_norm doit être > 0 (reçu {self.clip_norm})")
        return errors

    def check(self) -> None:
        errors = self.validate()
        if errors:
            raise ConfigError("AdamConfig invalide: " + "; ".join(errors))


def init_params(config: Any, seed: int, dtype: Any = np.float32) -> ParameterSet:
    """
    Initialise les paramètres d'un modèle

    Poids : uniforme de borne sqrt(6 / fan_in) ; biais : 0 ; pentes PReLU : 0.25.

    Args:
        config: Objet exposant `parameter_shapes()` -> [(nom, forme)]
        seed: Graine du générateur (résultat identique au bit près)
        dtype: Précision des valeurs

    Returns:
        ParameterSet: Paramètres dans l'ordre de la disposition du modèle
    """
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, shape in config.parameter_shapes():
        kind = name.rsplit(".", 1)[-1]
        if kind == "weight":
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        elif kind == "bias":
            value = np.zeros(shape)
        elif kind == "slope":
            value = np.full(shape, PRELU_INIT)
        else:
            raise ContractError(f"Type de paramètre inconnu: {name}")
        params.add(Parameter(name, value.astype(dtype)))
    return params


def zero_parameters(params: ParameterSet, prefix: str) -> int:
    """Met à zéro les paramètres dont le nom commence par `prefix` ; renvoie leur nombre"""
    touched = 0
    for parameter in params:
        if parameter.name == prefix or parameter.name.startswith(prefix + "."):
            parameter.value[...] = 0
            touched += 1
    if touched == 0:
        raise ContractError(f"Aucun paramètre sous le préfixe {prefix!r}")
    return touched


def l2_loss(output: Tensor, target: Tensor) -> Tensor:
    """
    Perte L2 : moyenne sur le batch de la norme L2 au carré par échantillon

    Returns:
        Tensor: (1/N) Σ ||O - I||², N = taille du batch
    """
    if output.shape != target.shape:
        raise ShapeError(f"l2_loss: formes différentes {output.shape} et {target.shape}")
    batch = output.shape[0]
    diff = output.data - target.data
    value = np.sum(np.square(diff)).reshape(1, 1, 1, 1) / batch

    def _backward(grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g = (2.0 / batch) * diff * grad.reshape(())
        return g, -g

    return record_op("l2_loss", (output, target), value, _backward)


def adam_step(params: ParameterSet, cfg: AdamConfig) -> None:
    """
    Pas d'Adam avec correction de biais, appliqué sur place

    Les gradients sont remis à zéro ensuite.

    Raises:
        ContractError: Si un paramètre n'a jamais reçu de gradient
    """
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise ContractError(f"Gradients non initialisés: {', '.join(missing[:5])}")

    factor = 1.0
    if cfg.clip_norm is not None:
        norm = params.grad_norm()
        if norm > cfg.clip_norm:
            factor = cfg.clip_norm / norm
            logger.debug("Écrêtage des gradients: norme %.4g -> %.4g", norm, cfg.clip_norm)

    for p in params:
        g = p.grad * factor if factor != 1.0 else p.grad
        p.step += 1
        p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * g
        p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * (g * g)
        m_hat = p.m / (1.0 - cfg.beta1 ** p.step)
        v_hat = p.v / (1.0 - cfg.beta2 ** p.step)
        p.value -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.value.dtype)
        p.grad = np.zeros_like(p.value)
