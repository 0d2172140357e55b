#!/usr/bin/env python3
"""
Imaging
Lecture/écriture PPM/PGM, synthèse de dégradations (bruit gaussien, JPEG
de base sans codage entropique), conversions couleur et extraction de
patchs d'entraînement.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from canet_cli.errors import (
    ConfigError,
    ImageHeaderError,
    ImageMaxvalError,
    ImageTruncatedError,
    ShapeError,
)
from canet_cli.tensor import Tensor

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")

# Tables de quantification standard (ITU-T T.81, annexe K)
STD_LUMA_TABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.int64).reshape(8, 8)

STD_CHROMA_TABLE = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
], dtype=np.int64).reshape(8, 8)

# BT.601 pleine échelle (JFIF)
RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
YCBCR_TO_RGB = np.array([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
])
CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)[:, None]
    n = np.arange(8)[None, :]
    matrix = np.sqrt(2.0 / 8.0) * np.cos((2 * n + 1) * k * np.pi / 16.0)
    matrix[0, :] = np.sqrt(1.0 / 8.0)
    return matrix


DCT_MATRIX = _dct_matrix()


@dataclass(eq=False)
class ImageBuffer:
    """
    Image 8 bits entrelacée, ligne par ligne

    `pixels` a la forme (height, width, channels), channels valant 1
    (niveaux de gris) ou 3 (RGB).
    """
    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ShapeError(f"Nombre de canaux non supporté: {self.channels} (1 ou 3)")
        pixels = np.asarray(self.pixels, dtype=np.uint8)
        if pixels.size != self.width * self.height * self.channels:
            raise ShapeError(
                f"{pixels.size} valeurs pour une image {self.width}×{self.height}×{self.channels}"
            )
        self.pixels = pixels.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "ImageBuffer":
        """Construit une image depuis un tableau uint8 (h, w) ou (h, w, c)"""
        array = np.asarray(array)
        if array.ndim == 2:
            array = array[:, :, None]
        if array.ndim != 3:
            raise ShapeError(f"Tableau image de forme invalide: {array.shape}")
        return cls(width=array.shape[1], height=array.shape[0], channels=array.shape[2], pixels=array)

    def to_float(self) -> np.ndarray:
        """Raster flottant (h, w, c) sur l'échelle 0-255"""
        return self.pixels.astype(np.float64)

    def to_tensor(self) -> Tensor:
        """Tenseur (1, c, h, w) normalisé dans [0, 1]"""
        return Tensor((self.to_float() / 255.0).transpose(2, 0, 1)[None])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __repr__(self) -> str:
        return f"ImageBuffer({self.width}×{self.height}×{self.channels})"


Raster = Union[ImageBuffer, np.ndarray]


def as_raster(image: Raster) -> np.ndarray:
    """Raster flottant (h, w, c) depuis une ImageBuffer ou un tableau"""
    if isinstance(image, ImageBuffer):
        return image.to_float()
    array = np.asarray(image, dtype=np.float64)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ShapeError(f"Raster de forme invalide: {array.shape}")
    return array


def quantize(raster: np.ndarray) -> ImageBuffer:
    """Écrête dans [0, 255] puis arrondit (demi vers l'extérieur) en 8 bits"""
    clipped = np.clip(as_raster(raster), 0.0, 255.0)
    return ImageBuffer.from_array(np.floor(clipped + 0.5).astype(np.uint8))


def derive_seed(base: int, index: int) -> int:
    """Graine propre à une image : base ⊕ index"""
    return int(base) ^ int(index)


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def _header_tokens(data: bytes) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageHeaderError(f"En-tête incomplet: {len(tokens)} champ(s) lu(s) sur 4")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageHeaderError("En-tête non terminé par un blanc")
    return tokens, pos + 1


def parse_ppm(data: bytes) -> ImageBuffer:
    """
    Décode un fichier PPM (P6) ou PGM (P5) binaire

    Raises:
        ImageHeaderError: En-tête mal formé
        ImageMaxvalError: Valeur maximale différente de 255
        ImageTruncatedError: Corps trop court
    """
    tokens, offset = _header_tokens(data)
    magic = tokens[0]
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise ImageHeaderError(f"Format non supporté: {magic!r} (P5 ou P6 attendu)")
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError:
        raise ImageHeaderError(f"Dimensions invalides: {b' '.join(tokens[1:])!r}") from None
    if width < 1 or height < 1:
        raise ImageHeaderError(f"Dimensions invalides: {width}×{height}")
    if maxval != 255:
        raise ImageMaxvalError(f"Valeur maximale {maxval} non supportée (255 attendu)")

    expected = width * height * channels
    body = data[offset:offset + expected]
    if len(body) < expected:
        raise ImageTruncatedError(f"Corps tronqué: {len(body)} octets sur {expected}")
    pixels = np.frombuffer(body, dtype=np.uint8).copy()
    return ImageBuffer(width=width, height=height, channels=channels, pixels=pixels)


def read_ppm(path: Union[str, Path]) -> ImageBuffer:
    return parse_ppm(Path(path).read_bytes())


def write_ppm(img: ImageBuffer, path: Union[str, Path]) -> None:
    """Écrit l'image en P6 (RGB) ou P5 (niveaux de gris)"""
    magic = "P6" if img.channels == 3 else "P5"
    header = f"{magic}\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.pixels.tobytes())


def load_image_dir(path: Union[str, Path]) -> List[Tuple[str, ImageBuffer]]:
    """Charge toutes les images PPM/PGM d'un répertoire, triées par nom"""
    directory = Path(path)
    if not directory.is_dir():
        raise ConfigError(f"Répertoire introuvable: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [(p.name, read_ppm(p)) for p in files]


# ---------------------------------------------------------------------------
# Bruit gaussien
# ---------------------------------------------------------------------------

def add_awgn(img: Raster, sigma: float, seed: int) -> np.ndarray:
    """
    Ajoute un bruit blanc gaussien d'écart-type sigma (échelle 0-255)

    Le résultat n'est ni écrêté ni requantifié ; utiliser quantize() pour
    produire une image visualisable.

    Args:
        img: Image propre
        sigma: Écart-type du bruit (>= 0)
        seed: Graine du générateur PCG64

    Returns:
        np.ndarray: Raster flottant (h, w, c)
    """
    if sigma < 0:
        raise ConfigError(f"sigma doit être >= 0 (reçu {sigma})")
    raster = as_raster(img)
    rng = np.random.default_rng(seed)
    return raster + sigma * rng.standard_normal(raster.shape)


# ---------------------------------------------------------------------------
# Couleur
# ---------------------------------------------------------------------------

def ycbcr_from_raster(raster: np.ndarray) -> np.ndarray:
    return raster @ RGB_TO_YCBCR.T + CHROMA_OFFSET


def raster_from_ycbcr(planes: np.ndarray) -> np.ndarray:
    return (planes - CHROMA_OFFSET) @ YCBCR_TO_RGB.T


def rgb_to_ycbcr(img: Raster) -> np.ndarray:
    """Plans Y, Cb, Cr flottants (h, w, 3), BT.601 pleine échelle"""
    raster = as_raster(img)
    if raster.shape[2] != 3:
        raise ShapeError(f"rgb_to_ycbcr attend 3 canaux, reçu {raster.shape[2]}")
    return ycbcr_from_raster(raster)


def ycbcr_to_rgb(planes: np.ndarray) -> ImageBuffer:
    """Image RGB 8 bits depuis des plans Y, Cb, Cr"""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim != 3 or planes.shape[2] != 3:
        raise ShapeError(f"ycbcr_to_rgb attend des plans (h, w, 3), reçu {planes.shape}")
    return quantize(raster_from_ycbcr(planes))


def luma(img: Raster) -> np.ndarray:
    """Plan de luminance Y (h, w) ; une image en niveaux de gris est son propre Y"""
    raster = as_raster(img)
    if raster.shape[2] == 1:
        return raster[:, :, 0]
    return raster @ RGB_TO_YCBCR[0]


# ---------------------------------------------------------------------------
# JPEG (quantification seulement)
# ---------------------------------------------------------------------------

def _check_block(block: np.ndarray) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (8, 8):
        raise ShapeError(f"Bloc 8×8 attendu, reçu {block.shape}")
    return block


def dct8x8(block: np.ndarray) -> np.ndarray:
    """DCT-II orthonormale d'un bloc 8×8 (entrée déjà décalée de -128)"""
    return DCT_MATRIX @ _check_block(block) @ DCT_MATRIX.T


def idct8x8(coefficients: np.ndarray) -> np.ndarray:
    return DCT_MATRIX.T @ _check_block(coefficients) @ DCT_MATRIX


def quality_scale(quality: int) -> int:
    """Facteur d'échelle IJG en pourcentage : 5000/Q sous 50, 200 - 2Q sinon"""
    if not 1 <= quality <= 100:
        raise ConfigError(f"Qualité JPEG hors de [1, 100]: {quality}")
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def scale_table(table: np.ndarray, quality: int) -> np.ndarray:
    scaled = (np.asarray(table, dtype=np.int64) * quality_scale(quality) + 50) // 100
    return np.clip(scaled, 1, 255)


@dataclass(eq=False)
class QuantTables:
    """Tables de quantification luminance/chrominance pour une qualité Q"""
    luma: np.ndarray
    chroma: np.ndarray
    quality: int

    @classmethod
    def for_quality(cls, quality: int) -> "QuantTables":
        return cls(
            luma=scale_table(STD_LUMA_TABLE, quality),
            chroma=scale_table(STD_CHROMA_TABLE, quality),
            quality=quality,
        )


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _pad_to_multiple(plane: np.ndarray, multiple: int) -> np.ndarray:
    h, w = plane.shape
    return np.pad(plane, ((0, -h % multiple), (0, -w % multiple)), mode="edge")


def _codec_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Aller-retour DCT -> quantification -> IDCT d'un plan, blocs 8×8"""
    h, w = plane.shape
    padded = _pad_to_multiple(plane, 8) - 128.0
    ph, pw = padded.shape
    blocks = padded.reshape(ph // 8, 8, pw // 8, 8).transpose(0, 2, 1, 3)
    coefficients = DCT_MATRIX @ blocks @ DCT_MATRIX.T
    dequantized = _round_half_away(coefficients / table) * table
    rebuilt = DCT_MATRIX.T @ dequantized @ DCT_MATRIX
    rebuilt = rebuilt.transpose(0, 2, 1, 3).reshape(ph, pw) + 128.0
    return rebuilt[:h, :w]


def _downsample(plane: np.ndarray) -> np.ndarray:
    padded = _pad_to_multiple(plane, 2)
    ph, pw = padded.shape
    return padded.reshape(ph // 2, 2, pw // 2, 2).mean(axis=(1, 3))


def _upsample(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)[:height, :width]


def jpeg_degrade(img: Raster, quality: int, subsample: bool = True) -> ImageBuffer:
    """
    Aller-retour JPEG de base sans codage entropique

    Le codage entropique étant sans perte, la distorsion est celle de la
    quantification des coefficients DCT.

    Args:
        img: Image propre (RGB ou niveaux de gris)
        quality: Qualité IJG dans [1, 100]
        subsample: Sous-échantillonnage 4:2:0 de la chrominance

    Returns:
        ImageBuffer: Image dégradée, mêmes dimensions que l'entrée

    Raises:
        ConfigError: Si la qualité est hors de [1, 100]
    """
    tables = QuantTables.for_quality(quality)
    raster = as_raster(img)
    height, width, channels = raster.shape
    if channels == 1:
        return quantize(_codec_plane(raster[:, :, 0], tables.luma)[:, :, None])

    ycc = ycbcr_from_raster(raster)
    planes = [_codec_plane(ycc[:, :, 0], tables.luma)]
    for index in (1, 2):
        chroma = ycc[:, :, index]
        if subsample:
            planes.append(_upsample(_codec_plane(_downsample(chroma), tables.chroma), height, width))
        else:
            planes.append(_codec_plane(chroma, tables.chroma))
    return quantize(raster_from_ycbcr(np.stack(planes, axis=2)))


# ---------------------------------------------------------------------------
# Tâches de dégradation
# ---------------------------------------------------------------------------

TASK_KINDS = ("awgn", "jpeg")


@dataclass(frozen=True)
class DegradationTask:
    """Dégradation synthétique : bruit gaussien (sigma) ou JPEG (qualité)"""
    kind: str = "awgn"
    sigma: float = 25.0
    quality: int = 10
    subsample: bool = True

    def validate(self) -> List[str]:
        errors = []
        if self.kind not in TASK_KINDS:
            errors.append(f"Tâche inconnue: {self.kind} ({', '.join(TASK_KINDS)})")
        if self.kind == "awgn" and self.sigma < 0:
            errors.append(f"sigma doit être >= 0 (reçu {self.sigma})")
        if self.kind == "jpeg" and not 1 <= self.quality <= 100:
            errors.append(f"Qualité JPEG hors de [1, 100]: {self.quality}")
        return errors

    def check(self) -> None:
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def apply(self, img: Raster, seed: int) -> np.ndarray:
        """Raster dégradé flottant (h, w, c), déterministe pour une graine donnée"""
        self.check()
        if self.kind == "awgn":
            return add_awgn(img, self.sigma, seed)
        source = img if isinstance(img, ImageBuffer) else quantize(img)
        return jpeg_degrade(source, self.quality, self.subsample).to_float()

    def describe(self) -> str:
        if self.kind == "awgn":
            return f"awgn(sigma={self.sigma:g})"
        return f"jpeg(quality={self.quality}, subsample={'on' if self.subsample else 'off'})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "quality": self.quality, "subsample": self.subsample}


# ---------------------------------------------------------------------------
# Patchs
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PatchPair:
    """Patchs alignés (propre, dégradé) et leur position d'origine"""
    clean: np.ndarray
    degraded: np.ndarray
    top: int
    left: int
    transform: int = 0


def augment_patch(patch: np.ndarray, transform: int) -> np.ndarray:
    """Applique l'une des 8 symétries du carré (rotations de 90°, retournement)"""
    out = np.rot90(patch, k=transform % 4, axes=(0, 1))
    if transform >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def crop_coordinates(
    height: int, width: int, size: int, count: int, rng: np.random.Generator
) -> List[Tuple[int, int]]:
    return [
        (int(rng.integers(0, height - size + 1)), int(rng.integers(0, width - size + 1)))
        for _ in range(count)
    ]


def extract_patches(
    pair: Sequence[Raster],
    size: int = 48,
    count: int = 16,
    seed: int = 0,
    augment: bool = False,
) -> List[PatchPair]:
    """
    Découpe des patchs aux mêmes coordonnées dans l'image propre et la dégradée

    Args:
        pair: (propre, dégradée)
        size: Côté des patchs
        count: Nombre de patchs
        seed: Graine (coordonnées reproductibles)
        augment: Tire une symétrie aléatoire par patch

    Returns:
        List[PatchPair]: Vide si l'image est plus petite que `size`
    """
    clean, degraded = (as_raster(image) for image in pair)
    if clean.shape != degraded.shape:
        raise ShapeError(f"Paire d'images incohérente: {clean.shape} et {degraded.shape}")
    height, width = clean.shape[:2]
    if height < size or width < size:
        logger.warning("Image %d×%d ignorée: plus petite que le patch %d×%d", width, height, size, size)
        return []

    rng = np.random.default_rng(seed)
    patches = []
    for top, left in crop_coordinates(height, width, size, count, rng):
        transform = int(rng.integers(0, 8)) if augment else 0
        window = (slice(top, top + size), slice(left, left + size))
        patches.append(PatchPair(
            clean=augment_patch(clean[window], transform),
            degraded=augment_patch(degraded[window], transform),
            top=top,
            left=left,
            transform=transform,
        ))
    return patches


if __name__ == "__main__":
    print("=" * 60)
    print("Imaging - dégradations synthétiques")
    print("=" * 60)

    ramp = np.linspace(0, 255, 64)
    demo = ImageBuffer.from_array(np.stack(np.broadcast_arrays(ramp[None, :], ramp[:, None], 128.0), axis=2)
                                  .astype(np.uint8))
    for q in (10, 50, 90):
        degraded = jpeg_degrade(demo, q)
        mse = np.mean((degraded.to_float() - demo.to_float()) ** 2)
        print(f"JPEG Q={q:3d} : MSE = {mse:8.3f}")
    noisy = add_awgn(demo, 25.0, seed=7)
    print(f"AWGN σ=25 : écart-type mesuré = {np.std(noisy - demo.to_float()):.3f}")
