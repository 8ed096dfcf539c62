"""Dark-channel-prior dehazing with guided-filter transmission refinement.

The forward haze model ``I = J * t + A * (1 - t)`` is implemented alongside
its inverse; it doubles as the synthetic smoke generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import Image, luminance

AIRLIGHT_FLOOR = 1e-3


@dataclass(frozen=True)
class DehazeParams:
    patch_radius: int = 7
    omega: float = 0.95
    airlight_fraction: float = 0.001
    t_floor: float = 0.1
    guided_radius: int = 30
    guided_eps: float = 1e-3

    def __post_init__(self):
        if self.patch_radius < 0 or self.guided_radius < 0:
            raise ValueError("window radii must be non-negative")
        if not 0 < self.omega <= 1:
            raise ValueError("omega must lie in (0, 1]")
        if not 0 < self.airlight_fraction <= 1:
            raise ValueError("airlight_fraction must lie in (0, 1]")
        if not 0 < self.t_floor < 1:
            raise ValueError("t_floor must lie in (0, 1)")
        if not self.guided_eps > 0:
            raise ValueError("guided_eps must be positive")


@dataclass(frozen=True, eq=False)
class Airlight:
    a: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64).reshape(3)
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("airlight channels must lie in (0, 1]")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)


@dataclass(frozen=True, eq=False)
class TransmissionMap:
    t: np.ndarray

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64)
        if t.ndim != 2:
            raise ValueError("transmission map must be 2-D")
        if np.any(~np.isfinite(t)) or t.min() < 0 or t.max() > 1:
            raise ValueError("transmission values must lie in [0, 1]")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @property
    def shape(self) -> tuple[int, int]:
        return self.t.shape

    @classmethod
    def constant(cls, height: int, width: int, value: float) -> TransmissionMap:
        return cls(np.full((height, width), float(value)))


def min_filter(values: np.ndarray, radius: int) -> np.ndarray:
    """Windowed minimum over a (2r+1)^2 square, clamped at the borders."""
    if radius == 0:
        return values.copy()
    k = 2 * radius + 1
    padded = np.pad(values, radius, mode="edge")
    rows = sliding_window_view(padded, k, axis=0).min(axis=-1)
    return sliding_window_view(rows, k, axis=1).min(axis=-1)


def box_mean(values: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the (2r+1)^2 window truncated to the image."""
    h, w = values.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
    ys = np.arange(h)
    xs = np.arange(w)
    y0, y1 = np.clip(ys - radius, 0, h), np.clip(ys + radius + 1, 0, h)
    x0, x1 = np.clip(xs - radius, 0, w), np.clip(xs + radius + 1, 0, w)
    sums = (
        integral[y1][:, x1]
        - integral[y0][:, x1]
        - integral[y1][:, x0]
        + integral[y0][:, x0]
    )
    counts = np.outer(y1 - y0, x1 - x0)
    return sums / counts


def dark_channel(img: Image, patch_radius: int) -> np.ndarray:
    return min_filter(img.data.min(axis=2), patch_radius)


def estimate_airlight(img: Image, dark: np.ndarray, fraction: float) -> Airlight:
    if dark.shape != img.shape:
        raise ValueError("dark channel does not match image dimensions")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = dark.size
    count = max(1, math.ceil(fraction * n))
    # stable sort on the negated values keeps the lower row-major index first among ties
    order = np.argsort(-dark.ravel(), kind="stable")[:count]
    colors = img.data.reshape(-1, 3)[order]
    return Airlight(np.maximum(colors.mean(axis=0), AIRLIGHT_FLOOR))


def estimate_transmission(img: Image, a: Airlight, omega: float, patch_radius: int) -> TransmissionMap:
    normalized = np.minimum(img.data / a.a, 1.0)
    dark = min_filter(normalized.min(axis=2), patch_radius)
    return TransmissionMap(np.clip(1.0 - omega * dark, 0.0, 1.0))


def guided_filter(guide: np.ndarray, src: np.ndarray, radius: int, eps: float) -> np.ndarray:
    if guide.shape != src.shape:
        raise ValueError("guide and source must have the same dimensions")
    if not eps > 0:
        raise ValueError("eps must be positive")
    mean_i = box_mean(guide, radius)
    mean_p = box_mean(src, radius)
    cov_ip = box_mean(guide * src, radius) - mean_i * mean_p
    var_i = box_mean(guide * guide, radius) - mean_i * mean_i
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    return box_mean(a, radius) * guide + box_mean(b, radius)


def _check_map(img: Image, t: TransmissionMap):
    if t.shape != img.shape:
        raise ValueError(f"transmission map {t.shape} does not match image {img.shape}")


def recover_radiance_raw(img: Image, a: Airlight, t: TransmissionMap, t_floor: float) -> np.ndarray:
    """Inverse haze model before clamping to [0, 1]."""
    _check_map(img, t)
    tt = np.maximum(t.t, t_floor)[..., None]
    # I + (I - A)(1 - t)/t is (I - A)/t + A, exact when t == 1 or I == A
    return img.data + (img.data - a.a) * ((1.0 - tt) / tt)


def recover_radiance(img: Image, a: Airlight, t: TransmissionMap, t_floor: float) -> Image:
    return Image.from_array(recover_radiance_raw(img, a, t, t_floor))


def apply_haze(clean: Image, t: TransmissionMap, a: Airlight) -> Image:
    _check_map(clean, t)
    tt = t.t[..., None]
    return Image.from_array(clean.data * tt + a.a * (1.0 - tt))


@dataclass
class DehazeResult:
    image: Image
    airlight: Airlight
    raw_transmission: TransmissionMap
    transmission: TransmissionMap


def dehaze_detailed(img: Image, params: DehazeParams = DehazeParams()) -> DehazeResult:
    dark = dark_channel(img, params.patch_radius)
    air = estimate_airlight(img, dark, params.airlight_fraction)
    raw = estimate_transmission(img, air, params.omega, params.patch_radius)
    refined = guided_filter(luminance(img), raw.t, params.guided_radius, params.guided_eps)
    t = TransmissionMap(np.clip(refined, 0.0, 1.0))
    return DehazeResult(recover_radiance(img, air, t, params.t_floor), air, raw, t)


def dehaze(img: Image, params: DehazeParams = DehazeParams()) -> Image:
    return dehaze_detailed(img, params).image
