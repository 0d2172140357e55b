#!/usr/bin/env python3
"""
Metrics
PSNR (tous canaux confondus) et SSIM (plan de luminance), rapports
d'évaluation par image.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from canet_cli.errors import ConfigError, ShapeError
from canet_cli.imaging import Raster, as_raster, luma

PSNR_CAP = 99.0
PEAK = 255.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * PEAK) ** 2
SSIM_C2 = (0.03 * PEAK) ** 2


def _pair(a: Raster, b: Raster) -> Tuple[np.ndarray, np.ndarray]:
    ra, rb = as_raster(a), as_raster(b)
    if ra.shape != rb.shape:
        raise ShapeError(f"Images de dimensions différentes: {ra.shape} et {rb.shape}")
    return ra, rb


def mse(a: Raster, b: Raster) -> float:
    ra, rb = _pair(a, b)
    return float(np.mean(np.square(ra - rb)))


def psnr(a: Raster, b: Raster, cap: float = PSNR_CAP) -> float:
    """
    Rapport signal sur bruit de crête, en dB

    Args:
        a, b: Images de mêmes dimensions (ImageBuffer ou raster 0-255)
        cap: Valeur renvoyée pour des images identiques

    Returns:
        float: 10·log10(255² / MSE), plafonné à `cap`
    """
    error = mse(a, b)
    if error == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(PEAK * PEAK / error))


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Noyau gaussien 1-D normalisé ; la fenêtre 2-D est son produit extérieur"""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def _filter_valid(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    size = kernel.shape[0]
    rows = sliding_window_view(plane, size, axis=0) @ kernel
    return sliding_window_view(rows, size, axis=1) @ kernel


def _ssim_formula(mu1, mu2, var1, var2, cov):
    return ((2.0 * mu1 * mu2 + SSIM_C1) * (2.0 * cov + SSIM_C2)) / (
        (mu1 * mu1 + mu2 * mu2 + SSIM_C1) * (var1 + var2 + SSIM_C2)
    )


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Carte SSIM locale sur les fenêtres 11×11 entièrement contenues dans le plan"""
    kernel = gaussian_kernel()
    mu1 = _filter_valid(x, kernel)
    mu2 = _filter_valid(y, kernel)
    var1 = _filter_valid(x * x, kernel) - mu1 * mu1
    var2 = _filter_valid(y * y, kernel) - mu2 * mu2
    cov = _filter_valid(x * y, kernel) - mu1 * mu2
    return _ssim_formula(mu1, mu2, var1, var2, cov)


def ssim(a: Raster, b: Raster) -> float:
    """
    Similarité structurelle moyenne

    Calculée sur la luminance Y (BT.601) pour les images RGB. Une image plus
    petite que la fenêtre 11×11 est traitée comme une fenêtre unique à
    poids uniformes.
    """
    ra, rb = _pair(a, b)
    x, y = luma(ra), luma(rb)
    if min(x.shape) < SSIM_WINDOW:
        mu1, mu2 = x.mean(), y.mean()
        var1 = np.mean((x - mu1) * (x - mu1))
        var2 = np.mean((y - mu2) * (y - mu2))
        cov = np.mean((x - mu1) * (y - mu2))
        return float(_ssim_formula(mu1, mu2, var1, var2, cov))
    return float(np.mean(ssim_map(x, y)))


@dataclass
class ImageMetrics:
    """Mesures d'une image : restaurée et, si connue, dégradée"""
    name: str
    psnr: float
    ssim: float
    degraded_psnr: Optional[float] = None
    degraded_ssim: Optional[float] = None


@dataclass
class MetricReport:
    """Moyennes PSNR/SSIM et détail par image"""
    psnr: float
    ssim: float
    rows: List[ImageMetrics] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: Sequence[ImageMetrics]) -> "MetricReport":
        if not rows:
            raise ConfigError("Rapport vide: aucune image évaluée")
        return cls(
            psnr=float(np.mean([row.psnr for row in rows])),
            ssim=float(np.mean([row.ssim for row in rows])),
            rows=list(rows),
        )

    @property
    def degraded_psnr(self) -> Optional[float]:
        values = [row.degraded_psnr for row in self.rows if row.degraded_psnr is not None]
        return float(np.mean(values)) if values else None

    @property
    def degraded_ssim(self) -> Optional[float]:
        values = [row.degraded_ssim for row in self.rows if row.degraded_ssim is not None]
        return float(np.mean(values)) if values else None

    def to_lines(self) -> List[str]:
        lines = []
        for row in self.rows:
            line = f"{row.name}: psnr={row.psnr:.2f} ssim={row.ssim:.4f}"
            if row.degraded_psnr is not None:
                line += f" (dégradée psnr={row.degraded_psnr:.2f} ssim={row.degraded_ssim:.4f})"
            lines.append(line)
        lines.append(f"moyenne: psnr={self.psnr:.2f} ssim={self.ssim:.4f}")
        return lines

    def to_records(self) -> List[Dict[str, Any]]:
        return [asdict(row) for row in self.rows]

    def summary(self) -> Dict[str, Any]:
        return {
            "images": len(self.rows),
            "psnr": round(self.psnr, 4),
            "ssim": round(self.ssim, 6),
            "degraded_psnr": None if self.degraded_psnr is None else round(self.degraded_psnr, 4),
            "degraded_ssim": None if self.degraded_ssim is None else round(self.degraded_ssim, 6),
        }


if __name__ == "__main__":
    print("=" * 60)
    print("Metrics - PSNR / SSIM")
    print("=" * 60)
    base = np.full((32, 32, 3), 100.0)
    for offset in (0, 16, 155):
        print(f"écart uniforme {offset:3d}: psnr = {psnr(base, base + offset):6.2f} dB, "
              f"ssim = {ssim(base, base + offset):.4f}")
