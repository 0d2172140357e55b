#!/usr/bin/env python3
"""
Attention Layers
Attention par pixel (PA), attention par canal (CA), A-layer et A-block.

Une A-layer applique un tronc Conv3×3 -> PReLU -> Conv3×3, puis PA et CA
(PA strictement avant CA), et ajoute le résultat à son entrée. Un A-block
enchaîne ses A-layers par la récurrence O_n = H_n(O_{n-1} + O_{n-2}).
"""

from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

from canet_cli.errors import ConfigError, ContractError, ShapeError
from canet_cli.tensor import Tensor, add, broadcast_mul, conv2d, global_avg_pool, prelu, sigmoid

Shape = Tuple[int, ...]
ParamLayout = List[Tuple[str, Shape]]


@dataclass(frozen=True)
class PixelAttentionSpec:
    """Décroissance des canaux des trois convolutions 1×1 : C -> h1 -> h2 -> 1"""
    channels: int
    hidden: Tuple[int, int]

    @classmethod
    def for_channels(cls, channels: int, hidden: Optional[Sequence[int]] = None) -> "PixelAttentionSpec":
        if hidden is None:
            hidden = (max(1, channels // 2), max(1, channels // 8))
        return cls(channels=channels, hidden=(int(hidden[0]), int(hidden[1])))

    @property
    def schedule(self) -> Tuple[int, int, int, int]:
        return (self.channels, self.hidden[0], self.hidden[1], 1)

    def validate(self) -> List[str]:
        if min(self.schedule) < 1:
            return [f"Décroissance PA invalide {self.schedule}: chaque étage doit avoir au moins 1 canal"]
        return []


@dataclass(frozen=True)
class ChannelAttentionSpec:
    """Réduction C -> C/r -> C de l'attention par canal"""
    channels: int
    reduction: int = 8

    @property
    def reduced(self) -> int:
        return self.channels // self.reduction

    def validate(self) -> List[str]:
        if self.reduction < 1:
            return [f"Facteur de réduction CA invalide: {self.reduction}"]
        if self.channels % self.reduction != 0:
            return [f"{self.channels} canaux non divisibles par le facteur de réduction CA {self.reduction}"]
        return []


@dataclass(frozen=True)
class ABlockSpec:
    """Structure d'un A-block : nombre de couches, largeur, attentions"""
    layers: int
    channels: int
    pa: PixelAttentionSpec
    ca: ChannelAttentionSpec
    attention: bool = True

    @classmethod
    def build(
        cls,
        layers: int = 6,
        channels: int = 64,
        pa_hidden: Optional[Sequence[int]] = None,
        ca_reduction: int = 8,
        attention: bool = True,
    ) -> "ABlockSpec":
        return cls(
            layers=layers,
            channels=channels,
            pa=PixelAttentionSpec.for_channels(channels, pa_hidden),
            ca=ChannelAttentionSpec(channels, ca_reduction),
            attention=attention,
        )

    def validate(self) -> List[str]:
        errors = []
        if self.layers < 1:
            errors.append(f"Un A-block doit contenir au moins 1 A-layer (reçu {self.layers})")
        if self.channels < 1:
            errors.append(f"Largeur invalide: {self.channels}")
        if self.attention:
            errors.extend(self.pa.validate())
            errors.extend(self.ca.validate())
        return errors


# ---------------------------------------------------------------------------
# Disposition des paramètres
# ---------------------------------------------------------------------------

def conv_shapes(prefix: str, in_channels: int, out_channels: int, kernel: int) -> ParamLayout:
    return [
        (f"{prefix}.weight", (out_channels, in_channels, kernel, kernel)),
        (f"{prefix}.bias", (1, out_channels, 1, 1)),
    ]


def slope_shapes(prefix: str, channels: int) -> ParamLayout:
    return [(f"{prefix}.slope", (1, channels, 1, 1))]


def pixel_attention_shapes(prefix: str, spec: PixelAttentionSpec) -> ParamLayout:
    c0, c1, c2, c3 = spec.schedule
    return (
        conv_shapes(f"{prefix}.conv1", c0, c1, 1)
        + slope_shapes(f"{prefix}.act1", c1)
        + conv_shapes(f"{prefix}.conv2", c1, c2, 1)
        + slope_shapes(f"{prefix}.act2", c2)
        + conv_shapes(f"{prefix}.conv3", c2, c3, 1)
    )


def channel_attention_shapes(prefix: str, spec: ChannelAttentionSpec) -> ParamLayout:
    return (
        conv_shapes(f"{prefix}.conv1", spec.channels, spec.reduced, 1)
        + slope_shapes(f"{prefix}.act", spec.reduced)
        + conv_shapes(f"{prefix}.conv2", spec.reduced, spec.channels, 1)
    )


def alayer_shapes(prefix: str, spec: ABlockSpec) -> ParamLayout:
    c = spec.channels
    layout = (
        conv_shapes(f"{prefix}.conv1", c, c, 3)
        + slope_shapes(f"{prefix}.act", c)
        + conv_shapes(f"{prefix}.conv2", c, c, 3)
    )
    if spec.attention:
        layout += pixel_attention_shapes(f"{prefix}.pa", spec.pa)
        layout += channel_attention_shapes(f"{prefix}.ca", spec.ca)
    return layout


def ablock_shapes(prefix: str, spec: ABlockSpec) -> ParamLayout:
    layout: ParamLayout = []
    for index in range(1, spec.layers + 1):
        layout += alayer_shapes(f"{prefix}.layer{index}", spec)
    return layout


# ---------------------------------------------------------------------------
# Passes avant
# ---------------------------------------------------------------------------

def lookup(params: Mapping[str, Tensor], name: str) -> Tensor:
    try:
        return params[name]
    except KeyError:
        raise ContractError(f"Paramètre manquant: {name}") from None


def conv_layer(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Convolution `prefix.weight` / `prefix.bias` à remplissage « same »"""
    weight = lookup(params, f"{prefix}.weight")
    return conv2d(x, weight, lookup(params, f"{prefix}.bias"), pad=weight.shape[2] // 2)


def _activation(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return prelu(x, lookup(params, f"{prefix}.slope"))


def pixel_attention_map(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: PixelAttentionSpec) -> Tensor:
    """
    Carte d'attention par pixel r_p

    Returns:
        Tensor: (n, 1, h, w), valeurs dans (0, 1)
    """
    if x.channels != spec.channels:
        raise ShapeError(f"Attention par pixel: {x.channels} canaux reçus, {spec.channels} attendus")
    h = _activation(conv_layer(x, params, f"{prefix}.conv1"), params, f"{prefix}.act1")
    h = _activation(conv_layer(h, params, f"{prefix}.conv2"), params, f"{prefix}.act2")
    return sigmoid(conv_layer(h, params, f"{prefix}.conv3"))


def pixel_attention(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: PixelAttentionSpec) -> Tensor:
    """y_p = r_p ⊙ x, le même poids pour tous les canaux d'un pixel"""
    return broadcast_mul(x, pixel_attention_map(x, params, prefix, spec))


def channel_attention_map(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: ChannelAttentionSpec) -> Tensor:
    """
    Carte d'attention par canal r_c

    Returns:
        Tensor: (n, C, 1, 1), valeurs dans (0, 1)

    Raises:
        ConfigError: Si C n'est pas divisible par le facteur de réduction
    """
    errors = spec.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    if x.channels != spec.channels:
        raise ShapeError(f"Attention par canal: {x.channels} canaux reçus, {spec.channels} attendus")
    pooled = global_avg_pool(x)
    h = _activation(conv_layer(pooled, params, f"{prefix}.conv1"), params, f"{prefix}.act")
    return sigmoid(conv_layer(h, params, f"{prefix}.conv2"))


def channel_attention(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: ChannelAttentionSpec) -> Tensor:
    return broadcast_mul(x, channel_attention_map(x, params, prefix, spec))


def alayer_forward(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: ABlockSpec) -> Tensor:
    """
    A-layer : x + CA(PA(Conv3×3(PReLU(Conv3×3(x)))))

    Sans attention (ablation), le tronc seul est ajouté à x.
    """
    if x.channels != spec.channels:
        raise ShapeError(f"A-layer {prefix}: {x.channels} canaux reçus, {spec.channels} attendus")
    u = conv_layer(x, params, f"{prefix}.conv1")
    u = conv_layer(_activation(u, params, f"{prefix}.act"), params, f"{prefix}.conv2")
    if spec.attention:
        u = pixel_attention(u, params, f"{prefix}.pa", spec.pa)
        u = channel_attention(u, params, f"{prefix}.ca", spec.ca)
    return add(x, u)


def ablock_forward(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: ABlockSpec) -> Tensor:
    """
    A-block : O_0 = x, O_1 = H_1(O_0), O_n = H_n(O_{n-1} + O_{n-2})

    Returns:
        Tensor: O_N
    """
    previous = x
    current = alayer_forward(x, params, f"{prefix}.layer1", spec)
    for index in range(2, spec.layers + 1):
        previous, current = current, alayer_forward(add(current, previous), params, f"{prefix}.layer{index}", spec)
    return current
