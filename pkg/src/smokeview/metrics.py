"""PSNR / SSIM and the metric report tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import Image, luminance

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_C1 = (SSIM_K1 * 1.0) ** 2
SSIM_C2 = (SSIM_K2 * 1.0) ** 2


def _gauss_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


GAUSS_1D = _gauss_1d()


def filter_valid(x: np.ndarray, g: np.ndarray = GAUSS_1D) -> np.ndarray:
    """Separable correlation keeping only windows fully inside ``x``."""
    k = len(g)
    rows = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def filter_valid_adjoint(m: np.ndarray, g: np.ndarray = GAUSS_1D) -> np.ndarray:
    """Adjoint of :func:`filter_valid`: scatters window responses back to pixels."""
    k = len(g)
    padded = np.pad(m, k - 1)
    flipped = g[::-1]
    rows = sliding_window_view(padded, k, axis=0) @ flipped
    return sliding_window_view(rows, k, axis=1) @ flipped


def _check_pair(a: Image, b: Image):
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


def mse(a: Image, b: Image) -> float:
    _check_pair(a, b)
    return float(np.mean((a.data - b.data) ** 2))


def psnr(a: Image, b: Image, peak: float = 1.0) -> float:
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return float(-10.0 * np.log10(err / peak**2))


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    mx, my = filter_valid(x), filter_valid(y)
    exx, eyy, exy = filter_valid(x * x), filter_valid(y * y), filter_valid(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim_gray(x: np.ndarray, y: np.ndarray) -> float:
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_gray_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM of two grayscale maps and its gradient with respect to ``x``."""
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    den = b1 * b2
    s = a1 * a2 / den
    n = s.size
    # derivatives per window with respect to E[x], E[x^2], E[xy]
    ds_dvx = -s / b2
    ds_dcxy = 2 * a1 / den
    ds_dmx = 2 * my * a2 / den - s * 2 * mx / b1 - 2 * mx * ds_dvx - my * ds_dcxy
    grad = (
        filter_valid_adjoint(ds_dmx)
        + 2 * x * filter_valid_adjoint(ds_dvx)
        + y * filter_valid_adjoint(ds_dcxy)
    ) / n
    return float(np.mean(s)), grad


def ssim(a: Image, b: Image) -> float:
    """Luminance SSIM, 11x11 Gaussian window (sigma 1.5), mean over valid centers."""
    _check_pair(a, b)
    return ssim_gray(luminance(a), luminance(b))


@dataclass
class MetricRow:
    scene: str
    view_id: str
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    rows: list[MetricRow]
    scene_means: dict[str, tuple[float, float]] = field(default_factory=dict)
    mean_psnr: float = math.nan
    mean_ssim: float = math.nan

    @classmethod
    def from_rows(cls, rows: list[MetricRow]) -> MetricReport:
        rows = sorted(rows, key=lambda r: (r.scene, r.view_id))
        scenes: dict[str, list[MetricRow]] = {}
        for r in rows:
            scenes.setdefault(r.scene, []).append(r)
        means = {
            name: (_mean([r.psnr_db for r in rs]), _mean([r.ssim for r in rs]))
            for name, rs in scenes.items()
        }
        return cls(
            rows=rows,
            scene_means=means,
            mean_psnr=_mean([r.psnr_db for r in rows]),
            mean_ssim=_mean([r.ssim for r in rows]),
        )

    def to_dict(self) -> dict:
        return {
            "rows": [vars(r) for r in self.rows],
            "scene_means": {k: {"psnr_db": v[0], "ssim": v[1]} for k, v in self.scene_means.items()},
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "psnr_pooling": "arithmetic mean of per-view dB",
        }


def _mean(values: list[float]) -> float:
    if not values:
        return math.nan
    if any(math.isinf(v) for v in values):
        return math.inf if all(v > 0 for v in values if math.isinf(v)) else math.nan
    return math.fsum(values) / len(values)


def evaluate(rendered: list[Image], ground_truth: list[Image], labels) -> MetricReport:
    """Score aligned render/ground-truth pairs; ``labels`` holds (scene, view_id) pairs."""
    labels = list(labels)
    if not (len(rendered) == len(ground_truth) == len(labels)):
        raise ValueError(
            f"length mismatch: {len(rendered)} rendered, {len(ground_truth)} ground truth, {len(labels)} labels"
        )
    rows = [
        MetricRow(str(scene), str(view), psnr(r, g), ssim(r, g))
        for r, g, (scene, view) in zip(rendered, ground_truth, labels)
    ]
    return MetricReport.from_rows(rows)


def _fmt(v: float, digits: int) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return f"{v:.{digits}f}"


def write_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "view_id", "psnr_db", "ssim", "lpips"])
        for r in report.rows:
            w.writerow([r.scene, r.view_id, _fmt(r.psnr_db, 6), _fmt(r.ssim, 6), "n/a"])
        for scene, (p, s) in report.scene_means.items():
            w.writerow([scene, "mean", _fmt(p, 6), _fmt(s, 6), "n/a"])
        w.writerow(["all", "mean", _fmt(report.mean_psnr, 6), _fmt(report.mean_ssim, 6), "n/a"])


def markdown_table(report: MetricReport, method: str = "smokeview") -> str:
    lines = [
        "<!-- PSNR pooled as the arithmetic mean of per-view dB values; LPIPS not computed -->",
        "| Method | PSNR↑ | SSIM↑ | LPIPS↓ |",
        "|---|---|---|---|",
        f"| {method} | {_fmt(report.mean_psnr, 2)} | {_fmt(report.mean_ssim, 3)} | n/a |",
        "",
        "| Scene | PSNR↑ | SSIM↑ |",
        "|---|---|---|",
    ]
    for scene, (p, s) in report.scene_means.items():
        lines.append(f"| {scene} | {_fmt(p, 2)} | {_fmt(s, 3)} |")
    lines.append(f"| **Average** | **{_fmt(report.mean_psnr, 2)}** | **{_fmt(report.mean_ssim, 3)}** |")
    return "\n".join(lines) + "\n"


def write_report(report: MetricReport, csv_path, method: str = "smokeview") -> Path:
    """Write the CSV and a sibling Markdown table; returns the Markdown path."""
    csv_path = Path(csv_path)
    write_csv(report, csv_path)
    md_path = csv_path.with_suffix(".md")
    md_path.write_text(markdown_table(report, method))
    return md_path
