#!/usr/bin/env python3
"""
Exceptions
Hiérarchie des erreurs levées par canet_cli
"""

from typing import Any, Dict, Optional


class CanetError(Exception):
    """Racine de toutes les erreurs du paquet"""


class ShapeError(CanetError, ValueError):
    """Incohérence de dimensions entre tenseurs"""


class ConfigError(CanetError, ValueError):
    """Configuration invalide (modèle, entraînement, codec)"""


class ContractError(CanetError, RuntimeError):
    """Précondition d'appel non respectée"""


class TrainingDivergedError(ContractError):
    """Perte non finie pendant l'entraînement"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(CanetError, ValueError):
    """Fichier de checkpoint illisible"""


class CheckpointMagicError(CheckpointError):
    """Signature de fichier inattendue"""


class CheckpointVersionError(CheckpointError):
    """Version de format non supportée"""


class CheckpointShapeError(CheckpointError):
    """Paramètres absents, en trop ou de mauvaise forme"""


class CheckpointTruncatedError(CheckpointError):
    """Fichier tronqué"""


class ImageFormatError(CanetError, ValueError):
    """Fichier PPM/PGM invalide"""


class ImageHeaderError(ImageFormatError):
    """En-tête PPM/PGM mal formé"""


class ImageMaxvalError(ImageFormatError):
    """Valeur maximale différente de 255"""


class ImageTruncatedError(ImageFormatError):
    """Corps de l'image trop court"""
