#!/usr/bin/env python3
"""
CANet
Assemblage du réseau complet, variantes d'ablation, comptage des
paramètres, format de checkpoint binaire et restauration d'images
entières par tuiles.

Architecture :
    F_0 = Conv3×3(I)
    F_1 = ABlock_1(F_0)
    F_n = ABlock_n(ALayer(Fuse(F_{n-1}, F_{n-2})))   pour n >= 2
    O_F = H_FF(F_0, ..., F_N)
    O   = Conv3×3(O_F) + I
"""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from canet_cli.attention import (
    ABlockSpec,
    ParamLayout,
    ablock_forward,
    ablock_shapes,
    alayer_forward,
    alayer_shapes,
    conv_layer,
    conv_shapes,
)
from canet_cli.errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
)
from canet_cli.imaging import DegradationTask, ImageBuffer, Raster, as_raster, quantize
from canet_cli.nn import Parameter, ParameterSet, init_params, l2_loss
from canet_cli.tensor import Graph, Tensor, add, concat_channels, double_precision, finite_diff_check

logger = logging.getLogger(__name__)

COMBINE_MODES = ("concat", "add")

MAGIC = b"CANT"
FORMAT_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class ModelConfig:
    """
    Configuration du réseau

    Les trois interrupteurs d'ablation couvrent les variantes étudiées :
    combinaison élément par élément ou concaténation, sélection de
    caractéristiques (convolutions 1×1 après concaténation), attention
    (PA/CA dans les A-layers).
    """
    blocks: int = 5
    layers: int = 6
    channels: int = 64
    pa_hidden: Optional[Tuple[int, int]] = None
    ca_reduction: int = 8
    combine: str = "concat"
    feature_selection: bool = True
    feature_attention: bool = True
    in_channels: int = 3

    def __post_init__(self):
        if self.pa_hidden is not None:
            self.pa_hidden = (int(self.pa_hidden[0]), int(self.pa_hidden[1]))

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        """Configurations nommées : `default` (5×6×64) et `tiny` (2×2×16)"""
        if name == "default":
            return cls()
        if name == "tiny":
            return cls(blocks=2, layers=2, channels=16, pa_hidden=(8, 4), ca_reduction=4)
        raise ConfigError(f"Préréglage inconnu: {name} (default, tiny)")

    def block_spec(self) -> ABlockSpec:
        return ABlockSpec.build(
            layers=self.layers,
            channels=self.channels,
            pa_hidden=self.pa_hidden,
            ca_reduction=self.ca_reduction,
            attention=self.feature_attention,
        )

    def validate(self) -> List[str]:
        errors = []
        if self.blocks < 1:
            errors.append(f"blocks doit être >= 1 (reçu {self.blocks})")
        if self.in_channels not in (1, 3):
            errors.append(f"in_channels doit valoir 1 ou 3 (reçu {self.in_channels})")
        if self.combine not in COMBINE_MODES:
            errors.append(f"combine inconnu: {self.combine} ({', '.join(COMBINE_MODES)})")
        if self.combine == "add" and self.feature_selection:
            errors.append("la sélection de caractéristiques suppose combine='concat'")
        errors.extend(self.block_spec().validate())
        return errors

    def check(self) -> None:
        errors = self.validate()
        if errors:
            raise ConfigError("ModelConfig invalide: " + "; ".join(errors))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["pa_hidden"] = None if self.pa_hidden is None else list(self.pa_hidden)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Clés de configuration modèle inconnues: {', '.join(unknown)}")
        return cls(**data)

    def parameter_shapes(self) -> ParamLayout:
        """Disposition (nom, forme) de tous les paramètres, dans l'ordre du calcul"""
        c = self.channels
        spec = self.block_spec()
        layout = conv_shapes("head", self.in_channels, c, 3)
        layout += ablock_shapes("block1", spec)
        for n in range(2, self.blocks + 1):
            if self.combine == "concat":
                layout += conv_shapes(f"fuse{n}", 2 * c, c, 1 if self.feature_selection else 3)
            layout += alayer_shapes(f"bridge{n}", spec)
            layout += ablock_shapes(f"block{n}", spec)
        stacked = (self.blocks + 1) * c
        if self.combine == "add":
            layout += conv_shapes("fusion.spatial", c, c, 3)
        elif self.feature_selection:
            layout += conv_shapes("fusion.reduce", stacked, c, 1)
            layout += conv_shapes("fusion.spatial", c, c, 3)
        else:
            layout += conv_shapes("fusion.conv", stacked, c, 3)
        layout += conv_shapes("tail", c, self.in_channels, 3)
        return layout

    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.parameter_shapes())


def param_count(params: Union[ParameterSet, ModelConfig]) -> int:
    """Nombre exact de scalaires appris"""
    if isinstance(params, ModelConfig):
        return params.param_count()
    return params.count()


def check_layout(params: ParameterSet, config: ModelConfig) -> None:
    """
    Vérifie que les paramètres correspondent exactement à la configuration

    Raises:
        ContractError: Paramètre manquant, en trop ou de mauvaise forme
    """
    expected = dict(config.parameter_shapes())
    missing = [name for name in expected if name not in params]
    extra = [name for name in params.names() if name not in expected]
    wrong = [name for name in expected if name in params and params[name].shape != tuple(expected[name])]
    if missing or extra or wrong:
        details = []
        if missing:
            details.append(f"manquants: {', '.join(missing[:3])}")
        if extra:
            details.append(f"en trop: {', '.join(extra[:3])}")
        if wrong:
            details.append(f"formes incorrectes: {', '.join(wrong[:3])}")
        raise ContractError("Paramètres incompatibles avec la configuration (" + "; ".join(details) + ")")


# ---------------------------------------------------------------------------
# Passe avant
# ---------------------------------------------------------------------------

def _local_merge(
    current: Tensor, previous: Tensor, params: Mapping[str, Tensor], n: int, config: ModelConfig
) -> Tensor:
    if config.combine == "add":
        return add(current, previous)
    return conv_layer(concat_channels([current, previous]), params, f"fuse{n}")


def _global_fusion(features: Sequence[Tensor], params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    if config.combine == "add":
        total = features[0]
        for feature in features[1:]:
            total = add(total, feature)
        return conv_layer(total, params, "fusion.spatial")
    stacked = concat_channels(features)
    if config.feature_selection:
        return conv_layer(conv_layer(stacked, params, "fusion.reduce"), params, "fusion.spatial")
    return conv_layer(stacked, params, "fusion.conv")


def canet_forward(
    image: Tensor,
    params: Union[ParameterSet, Mapping[str, Tensor]],
    config: ModelConfig,
    graph: Optional[Graph] = None,
) -> Tensor:
    """
    Passe avant complète

    Args:
        image: Entrée dégradée (n, c, h, w), normalisée dans [0, 1]
        params: ParameterSet (lié à `graph` si fourni) ou tenseurs déjà liés
        config: Configuration du modèle
        graph: Graphe d'enregistrement pour la rétropropagation

    Returns:
        Tensor: Image restaurée, même forme que l'entrée, non écrêtée

    Raises:
        ContractError: Configuration et paramètres incompatibles
    """
    config.check()
    if image.channels != config.in_channels:
        raise ContractError(f"Entrée à {image.channels} canaux pour un modèle à {config.in_channels} canaux")
    if isinstance(params, ParameterSet):
        check_layout(params, config)
        bound: Mapping[str, Tensor] = params.bind(graph)
    else:
        bound = params

    spec = config.block_spec()
    features = [conv_layer(image, bound, "head")]
    features.append(ablock_forward(features[0], bound, "block1", spec))
    for n in range(2, config.blocks + 1):
        merged = _local_merge(features[-1], features[-2], bound, n, config)
        bridged = alayer_forward(merged, bound, f"bridge{n}", spec)
        features.append(ablock_forward(bridged, bound, f"block{n}", spec))

    residual = conv_layer(_global_fusion(features, bound, config), bound, "tail")
    return add(residual, image)


def network_gradient_check(
    config: ModelConfig, seed: int = 0, size: int = 8, step: float = 1e-6, samples: int = 5
) -> float:
    """
    Vérifie les gradients du réseau complet en double précision

    Perte L2 entre la sortie et une cible aléatoire sur une entrée (1, c, size, size).

    Returns:
        float: Pire erreur relative sur les entrées échantillonnées
    """
    config.check()
    with double_precision():
        params = init_params(config, seed, dtype=np.float64)
        rng = np.random.default_rng(seed)
        shape = (1, config.in_channels, size, size)
        image = Tensor(rng.uniform(0.0, 1.0, shape))
        target = Tensor(rng.uniform(0.0, 1.0, shape))

        def _loss(graph: Optional[Graph]) -> Tensor:
            return l2_loss(canet_forward(image, params, config, graph), target)

        return finite_diff_check(_loss, list(params), step=step, samples=samples, seed=seed)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Contenu d'un fichier .cant"""
    params: ParameterSet
    config: ModelConfig
    metadata: Dict[str, Any] = field(default_factory=dict)

    def task(self) -> Optional[DegradationTask]:
        """
        Dégradation enregistrée à l'entraînement, None si absente

        Raises:
            CheckpointError: Si l'écho de la tâche est illisible
        """
        echo = self.metadata.get("task")
        if echo is None:
            return None
        if not isinstance(echo, dict):
            raise CheckpointError(f"Écho de tâche illisible: {echo!r}")
        try:
            return DegradationTask(**echo)
        except TypeError as exc:
            raise CheckpointError(f"Écho de tâche illisible: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        end = self.pos + size
        if end > len(self.data):
            raise CheckpointTruncatedError(
                f"Checkpoint tronqué: {size} octets attendus à la position {self.pos}, {self.remaining} disponibles"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def save_checkpoint(
    params: ParameterSet,
    config: ModelConfig,
    path: Union[str, Path],
    metadata: Optional[Mapping[str, Any]] = None,
) -> None:
    """
    Écrit un checkpoint binaire petit-boutiste

    En-tête `CANT` + version, écho JSON {model, meta}, puis une entrée par
    paramètre : nom UTF-8, type (1 = f4, 2 = f8), dimensions et valeurs brutes.
    """
    check_layout(params, config)
    echo = json.dumps({"model": config.to_dict(), "meta": dict(metadata or {})}, sort_keys=True).encode("utf-8")
    tags = {dtype: tag for tag, dtype in DTYPE_TAGS.items()}

    parts = [struct.pack("<4sI", MAGIC, FORMAT_VERSION), struct.pack("<I", len(echo)), echo]
    parts.append(struct.pack("<I", len(params)))
    for parameter in params:
        value = parameter.value
        dtype = value.dtype.newbyteorder("<")
        if dtype not in tags:
            raise ContractError(f"Type non sérialisable pour {parameter.name}: {value.dtype}")
        name = parameter.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<BB", tags[dtype], value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(parts))
    logger.info("Checkpoint écrit: %s (%d paramètres)", path, params.count())


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Lit un checkpoint et valide sa disposition contre la configuration écho

    Raises:
        CheckpointMagicError, CheckpointVersionError, CheckpointShapeError,
        CheckpointTruncatedError, CheckpointError
    """
    reader = _Reader(Path(path).read_bytes())
    magic, version = reader.unpack("<4sI")
    if magic != MAGIC:
        raise CheckpointMagicError(f"Signature inattendue {magic!r} (attendu {MAGIC!r})")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"Version de format {version} non supportée (attendu {FORMAT_VERSION})")

    (echo_size,) = reader.unpack("<I")
    raw_echo = reader.take(echo_size)
    try:
        echo = json.loads(raw_echo.decode("utf-8"))
        config = ModelConfig.from_dict(echo["model"])
        config.check()
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"Écho de configuration illisible: {exc}") from exc

    (count,) = reader.unpack("<I")
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_size,) = reader.unpack("<H")
        name = reader.take(name_size).decode("utf-8")
        tag, ndim = reader.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"Type inconnu {tag} pour {name}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = DTYPE_TAGS[tag]
        raw = reader.take(int(np.prod(shape)) * dtype.itemsize)
        if name in entries:
            raise CheckpointShapeError(f"Paramètre en double: {name}")
        entries[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.remaining:
        raise CheckpointError(f"{reader.remaining} octets inattendus en fin de fichier")

    params = ParameterSet()
    for name, shape in config.parameter_shapes():
        if name not in entries:
            raise CheckpointShapeError(f"Paramètre absent du checkpoint: {name}")
        value = entries.pop(name)
        if value.shape != tuple(shape):
            raise CheckpointShapeError(f"{name}: forme {value.shape}, attendu {tuple(shape)}")
        params.add(Parameter(name, value))
    if entries:
        raise CheckpointShapeError(f"Paramètres inconnus dans le checkpoint: {', '.join(sorted(entries)[:3])}")
    return Checkpoint(params=params, config=config, metadata=dict(echo.get("meta", {})))


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParameterSet, ModelConfig]:
    checkpoint = read_checkpoint(path)
    return checkpoint.params, checkpoint.config


# ---------------------------------------------------------------------------
# Restauration par tuiles
# ---------------------------------------------------------------------------

def tile_starts(size: int, tile: int, overlap: int) -> List[int]:
    """Positions de départ des tuiles ; la dernière est alignée sur le bord"""
    if size <= tile:
        return [0]
    step = tile - overlap
    return list(range(0, size - tile, step)) + [size - tile]


def restore_image(
    img: Raster,
    params: ParameterSet,
    config: ModelConfig,
    tile: int = 48,
    overlap: int = 8,
    workers: int = 1,
) -> ImageBuffer:
    """
    Restaure une image entière par tuiles recouvrantes

    Les recouvrements sont moyennés dans un ordre fixe, puis le résultat est
    écrêté dans [0, 1] et requantifié en 8 bits.

    Args:
        img: Image dégradée (ImageBuffer ou raster 0-255)
        params: Paramètres du modèle
        config: Configuration du modèle
        tile: Côté des tuiles
        overlap: Recouvrement entre tuiles voisines
        workers: Nombre de threads d'inférence

    Returns:
        ImageBuffer: Image restaurée
    """
    if tile <= 2 * overlap or overlap < 0:
        raise ConfigError(f"Tuile {tile} incompatible avec un recouvrement {overlap} (tile > 2·overlap)")
    raster = as_raster(img) / 255.0
    height, width, channels = raster.shape
    if channels != config.in_channels:
        raise ContractError(f"Image à {channels} canaux pour un modèle à {config.in_channels} canaux")
    check_layout(params, config)
    bound = params.bind()

    boxes = [(top, left) for top in tile_starts(height, tile, overlap) for left in tile_starts(width, tile, overlap)]
    th, tw = min(tile, height), min(tile, width)

    def _infer(box: Tuple[int, int]) -> np.ndarray:
        top, left = box
        patch = raster[top:top + th, left:left + tw]
        out = canet_forward(Tensor(patch.transpose(2, 0, 1)[None]), bound, config)
        return out.data[0].transpose(1, 2, 0).astype(np.float64)

    if workers > 1 and len(boxes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_infer, boxes))
    else:
        outputs = [_infer(box) for box in boxes]

    total = np.zeros_like(raster)
    weight = np.zeros((height, width, 1))
    for (top, left), out in zip(boxes, outputs):
        total[top:top + th, left:left + tw] += out
        weight[top:top + th, left:left + tw] += 1.0
    logger.debug("Restauration %d×%d en %d tuile(s)", width, height, len(boxes))
    return quantize(np.clip(total / weight, 0.0, 1.0) * 255.0)


if __name__ == "__main__":
    print("=" * 60)
    print("CANet - nombre de paramètres")
    print("=" * 60)
    for preset in ("tiny", "default"):
        print(f"{preset:8s}: {ModelConfig.preset(preset).param_count():,}")
    print()
    for blocks in range(1, 6):
        print(f"{blocks} A-block(s): {ModelConfig(blocks=blocks).param_count():,}")
