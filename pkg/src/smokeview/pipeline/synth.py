"""Deterministic synthetic smoke scenes: Gaussian blobs and flat quads on a camera ring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..dehaze import Airlight, TransmissionMap, apply_haze
from ..image import CameraView, Dataset, Image
from ..splat.render import render_raw
from ..splat.scene import GaussianScene, logit


class SynthSceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    scene_name: str = "synthetic"
    n_blobs: int = Field(16, ge=0)
    n_quads: int = Field(4, ge=0)
    scene_radius: float = Field(1.0, gt=0)
    ring_radius: float = Field(4.0, gt=0)
    ring_height: float = 1.0
    n_cameras: int = Field(8, ge=2)
    n_test: int = Field(4, ge=0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    width: int = Field(64, ge=1)
    height: int = Field(64, ge=1)
    focal: float = Field(70.0, gt=0)
    background: tuple[float, float, float] = (0.8, 0.8, 0.82)
    background_depth: float = Field(7.0, gt=0)
    airlight: tuple[float, float, float] = (0.8, 0.8, 0.82)
    beta: float = Field(0.25, ge=0)

    @field_validator("airlight")
    @classmethod
    def _airlight_range(cls, v):
        if any(not 0 < c <= 1 for c in v):
            raise ValueError("airlight channels must lie in (0, 1]")
        return v

    @field_validator("background")
    @classmethod
    def _background_range(cls, v):
        if any(not 0 <= c <= 1 for c in v):
            raise ValueError("background channels must lie in [0, 1]")
        return v


@dataclass
class SynthScene:
    clean: Dataset
    smoked: Dataset
    train_depth: list[np.ndarray]
    test_depth: list[np.ndarray]
    scene: GaussianScene


def _saturated_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    """Vivid colors with at least one near-zero channel, as in haze-free scenes."""
    cols = rng.uniform(0.35, 1.0, size=(n, 3))
    dark = rng.integers(0, 3, size=n)
    cols[np.arange(n), dark] = rng.uniform(0.0, 0.06, size=n)
    return cols


def _random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def build_scene(spec: SynthSceneSpec) -> GaussianScene:
    rng = np.random.default_rng([spec.seed, 17])
    n = spec.n_blobs + spec.n_quads
    center = np.asarray(spec.look_at)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = spec.scene_radius * rng.uniform(0.0, 1.0, size=n) ** (1 / 3)
    positions = center + dirs * radii[:, None]
    scales = np.empty((n, 3))
    scales[: spec.n_blobs] = spec.scene_radius * rng.uniform(0.1, 0.3, size=(spec.n_blobs, 3))
    quad = spec.scene_radius * rng.uniform(0.2, 0.4, size=(spec.n_quads, 3))
    quad[:, 2] = 0.01 * spec.scene_radius
    scales[spec.n_blobs:] = quad
    return GaussianScene(
        positions=positions,
        log_scales=np.log(scales),
        quats=_random_quats(rng, n),
        opacity_logits=logit(rng.uniform(0.85, 0.98, size=n)),
        colors=_saturated_colors(rng, n),
        background=spec.background,
    )


def ring_cameras(spec: SynthSceneSpec, angles) -> list[CameraView]:
    target = np.asarray(spec.look_at)
    up = np.array([0.0, -1.0, 0.0])
    cams = []
    for ang in angles:
        eye = target + np.array([spec.ring_radius * np.cos(ang), -spec.ring_height, spec.ring_radius * np.sin(ang)])
        if np.linalg.norm(np.cross(target - eye, up)) < 1e-9 * max(np.linalg.norm(target - eye), 1.0):
            raise ValueError("degenerate camera ring: cameras collinear with the look-at point")
        cams.append(CameraView.look_at(eye, target, up, spec.focal, spec.width, spec.height))
    return cams


def ring_angles(spec: SynthSceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Training angles evenly spaced; test angles halfway between training cameras."""
    train = 2 * np.pi * np.arange(spec.n_cameras) / spec.n_cameras
    slots = np.floor(np.arange(spec.n_test) * spec.n_cameras / max(spec.n_test, 1))
    test = 2 * np.pi * (slots + 0.5) / spec.n_cameras
    return train, test


def transmission_from_depth(depth: np.ndarray, beta: float) -> TransmissionMap:
    return TransmissionMap(np.clip(np.exp(-beta * depth), 0.0, 1.0))


def synth_scene(spec: SynthSceneSpec) -> SynthScene:
    """Render clean and smoked datasets; test views stay clean in both."""
    scene = build_scene(spec)
    train_angles, test_angles = ring_angles(spec)
    train_cams = ring_cameras(spec, train_angles)
    test_cams = ring_cameras(spec, test_angles)
    air = Airlight(spec.airlight)

    def shoot(cams):
        imgs, depths = [], []
        for cam in cams:
            out = render_raw(scene, cam)
            imgs.append(Image.from_array(out.color))
            depths.append(out.depth(spec.background_depth))
        return imgs, depths

    train_imgs, train_depth = shoot(train_cams)
    test_imgs, test_depth = shoot(test_cams)
    smoked_imgs = [
        apply_haze(img, transmission_from_depth(d, spec.beta), air) for img, d in zip(train_imgs, train_depth)
    ]
    clean = Dataset(spec.scene_name, list(zip(train_imgs, train_cams)), test_cams, test_imgs or None)
    smoked = Dataset(spec.scene_name, list(zip(smoked_imgs, train_cams)), test_cams, test_imgs or None)
    return SynthScene(clean, smoked, train_depth, test_depth, scene)
