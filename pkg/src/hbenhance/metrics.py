"""PSNR / SSIM and the evaluation report writer."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = (0.299, 0.587, 0.114)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical inputs give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    if img.shape[-1] == 3:
        return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
    raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, on luminance for colour inputs."""
    return float(np.mean(ssim_map(a, b)))


# ---------------------------------------------------------------------------
# reports

TEXT_COLUMNS = ("group", "n", "psnr_db", "ssim")
COST_COLUMNS = ("model", "image_size", "flops_g", "params_m")


class ReportError(Exception):
    pass


@dataclass
class ImageResult:
    name: str
    variant_tag: str
    psnr: float
    ssim: float


@dataclass
class QualityReport:
    per_image: List[ImageResult]
    per_variant: Dict[str, Dict[str, float]]
    overall: Dict[str, float]
    costs: Dict[str, Dict[str, float]] = field(default_factory=dict)
    extra: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_image": [asdict(r) for r in self.per_image],
            "per_variant": self.per_variant,
            "overall": self.overall,
            "costs": self.costs,
            "extra": self.extra,
        }

    def text_table(self) -> str:
        rows = [[g, str(int(v["n"])), f"{v['psnr']:.4f}", f"{v['ssim']:.4f}"]
                for g, v in sorted(self.per_variant.items())]
        rows.append(["overall", str(int(self.overall["n"])), f"{self.overall['psnr']:.4f}",
                     f"{self.overall['ssim']:.4f}"])
        out = _aligned(TEXT_COLUMNS, rows)
        if self.costs:
            crow = [[m, c.get("image_size", ""), f"{c['flops_g']:.2f}", f"{c['params_m']:.4f}"]
                    for m, c in sorted(self.costs.items())]
            out += "\n\n" + _aligned(COST_COLUMNS, crow)
        return out


def _aligned(header: Sequence[str], rows: List[List[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [list(header)] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [list(header)] + rows]
    return "\n".join(lines)


def aggregate(results: Sequence[ImageResult]) -> QualityReport:
    groups = defaultdict(list)
    for r in results:
        groups[r.variant_tag].append(r)

    def summary(rs):
        return {"n": len(rs), "psnr": float(np.mean([r.psnr for r in rs])),
                "ssim": float(np.mean([r.ssim for r in rs]))}

    return QualityReport(list(results), {k: summary(v) for k, v in groups.items()}, summary(results))


def emit_report(results: Sequence[ImageResult], costs: Optional[Mapping[str, Mapping[str, float]]] = None,
                out_dir=None, extra: Optional[dict] = None) -> QualityReport:
    """Aggregate per-image results; with ``out_dir`` also write ``report.json`` and ``report.txt``."""
    if not results:
        raise ReportError("no results to report")
    report = aggregate(results)
    report.costs = {k: dict(v) for k, v in (costs or {}).items()}
    report.extra = dict(extra or {})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        (out_dir / "report.txt").write_text(report.text_table() + "\n")
    return report


def parse_text_table(text: str) -> Dict[str, Dict[str, float]]:
    """Read back the quality block of :meth:`QualityReport.text_table`."""
    block = text.strip().split("\n\n")[0].splitlines()
    out = {}
    for line in block[1:]:
        group, n, p, s = line.split()
        out[group] = {"n": int(n), "psnr": float(p), "ssim": float(s)}
    return out
