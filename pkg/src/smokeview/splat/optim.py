"""Adam, fixed-budget MCMC relocation and the scene optimization loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..image import CameraView, Image
from .render import DEFAULT_SETTINGS, RenderSettings, backward
from .scene import LOG_SCALE_MAX, LOG_SCALE_MIN, GaussianScene, logit, normalize_quats

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15

PAPER_ITERATIONS = 30_000
DESK_ITERATIONS = 2_000


class OptimizationError(ValueError):
    pass


@dataclass(frozen=True)
class LearningRates:
    positions: float = 2e-3  # fraction of the scene extent per step
    positions_final: float = 2e-5
    log_scales: float = 1e-2
    quats: float = 5e-3
    opacity_logits: float = 5e-2
    colors: float = 1e-2
    background: float = 5e-3


@dataclass(frozen=True)
class OptimConfig:
    iterations: int = DESK_ITERATIONS
    budget: int = 200
    lr: LearningRates = field(default_factory=LearningRates)
    relocation_interval: int = 100
    relocation_until: float = 0.8  # fraction of iterations after which relocation stops
    dead_opacity: float = 0.005
    opacity_reg: float = 0.01
    scale_reg: float = 0.01
    noise_scale: float = 0.5
    loss_lambda: float = 0.2
    seed: int = 0
    init_opacity: float = 0.5
    render: RenderSettings = DEFAULT_SETTINGS

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if not 0 <= self.loss_lambda <= 1:
            raise ValueError("loss lambda must lie in [0, 1]")
        if self.relocation_interval < 1:
            raise ValueError("relocation_interval must be at least 1")

    def with_seed(self, seed: int) -> OptimConfig:
        return replace(self, seed=int(seed))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})

    def reset_rows(self, rows: np.ndarray) -> None:
        """Zero the moments of the given Gaussians (background is not per-row)."""
        for k in self.m:
            if k != "background":
                self.m[k][rows] = 0.0
                self.v[k][rows] = 0.0


def adam_step(params: dict, grads: dict, state: AdamState, lr, iteration: int | None = None):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    ``lr`` is a float or a per-parameter dict. ``iteration`` is the 1-based step
    used for bias correction (defaults to ``state.step + 1``). Quaternions are
    renormalized after the update.
    """
    t = state.step + 1 if iteration is None else int(iteration)
    b1, b2 = ADAM_BETAS
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            new_params[k], new_m[k], new_v[k] = p.copy(), state.m[k].copy(), state.v[k].copy()
            continue
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        rate = lr[k] if isinstance(lr, dict) else lr
        new_params[k] = p - rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        new_m[k], new_v[k] = m, v
    if "quats" in new_params:
        new_params["quats"] = normalize_quats(new_params["quats"])
    return new_params, AdamState(new_m, new_v, t)


def mcmc_relocate(scene: GaussianScene, rng: np.random.Generator, cfg: OptimConfig,
                  state: AdamState | None = None) -> GaussianScene:
    """Recycle dead Gaussians onto opacity-sampled live donors, then jitter positions.

    A donor picked by ``k`` dead Gaussians ends up as ``k + 1`` coincident copies
    whose stacked opacity equals the donor's: ``1 - (1 - o_new)^(k+1) = o_donor``.
    """
    out = scene.copy()
    opac = out.opacities
    dead = np.flatnonzero(opac < cfg.dead_opacity)
    live = np.flatnonzero(opac >= cfg.dead_opacity)
    if len(dead) and len(live):
        probs = opac[live] / opac[live].sum()
        donors = live[rng.choice(len(live), size=len(dead), p=probs)]
        counts = np.bincount(donors, minlength=out.budget)
        picked = np.flatnonzero(counts)
        new_opac = 1.0 - (1.0 - opac[picked]) ** (1.0 / (counts[picked] + 1.0))
        new_logit = logit(np.clip(new_opac, 1e-12, 1 - 1e-12))
        out.opacity_logits[picked] = new_logit
        for d, src in zip(dead, donors):
            out.positions[d] = out.positions[src]
            out.log_scales[d] = out.log_scales[src]
            out.quats[d] = out.quats[src]
            out.colors[d] = out.colors[src]
            out.opacity_logits[d] = out.opacity_logits[src]
        if state is not None:
            state.reset_rows(np.concatenate([dead, picked]))
    if cfg.noise_scale > 0:
        opac = out.opacities
        std = cfg.noise_scale * (1.0 - opac) * np.exp(out.log_scales.mean(axis=1))
        out.positions += rng.normal(size=out.positions.shape) * std[:, None]
    return out


def _scene_frame(cams: list[CameraView]) -> tuple[np.ndarray, float]:
    """Point closest to every optical axis, and the mean camera distance to it."""
    lhs = np.zeros((3, 3))
    rhs = np.zeros(3)
    centers = np.array([c.center for c in cams])
    for cam, o in zip(cams, centers):
        d = cam.rotation[2]
        proj = np.eye(3) - np.outer(d, d)
        lhs += proj
        rhs += proj @ o
    center = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    extent = float(np.mean(np.linalg.norm(centers - center, axis=1)))
    return center, max(extent, 1e-6)


def _visibility(points: np.ndarray, cam: CameraView, z_near: float):
    pc = points @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    safe = np.where(z > z_near, z, 1.0)
    u = cam.fx * pc[:, 0] / safe + cam.cx
    v = cam.fy * pc[:, 1] / safe + cam.cy
    inside = (z > z_near) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return inside, u, v


def initialize_scene(views: list[tuple[Image, CameraView]], cfg: OptimConfig,
                     points: np.ndarray | None = None) -> GaussianScene:
    """Seeded initialization inside the intersection of the training frusta."""
    rng = np.random.default_rng(cfg.seed)
    cams = [c for _, c in views]
    center, extent = _scene_frame(cams)
    b = cfg.budget
    if points is not None:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        pts = pts[rng.choice(len(pts), size=b, replace=len(pts) < b)]
    else:
        accepted: list[np.ndarray] = []
        fallback: list[np.ndarray] = []
        for _ in range(500):
            cand = center + rng.uniform(-extent, extent, size=(4 * b, 3))
            counts = sum(_visibility(cand, c, cfg.render.z_near)[0].astype(int) for c in cams)
            accepted.extend(cand[counts == len(cams)])
            fallback.extend(cand[counts > 0])
            if len(accepted) >= b:
                break
        pool = accepted if len(accepted) >= b else accepted + fallback
        if len(pool) < b:
            raise OptimizationError("could not place Gaussians inside any camera frustum")
        pts = np.array(pool[:b])

    colors = np.zeros((b, 3))
    hits = np.zeros(b)
    for img, cam in views:
        inside, u, v = _visibility(pts, cam, cfg.render.z_near)
        cols = np.clip(u[inside].astype(int), 0, cam.width - 1)
        rows = np.clip(v[inside].astype(int), 0, cam.height - 1)
        colors[inside] += img.data[rows, cols]
        hits[inside] += 1
    mean_color = np.mean([img.data.reshape(-1, 3).mean(axis=0) for img, _ in views], axis=0)
    colors = np.where(hits[:, None] > 0, colors / np.maximum(hits, 1)[:, None], mean_color)

    if b > 1:
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        k = min(3, b - 1)
        nn = np.sqrt(np.sort(d2, axis=1)[:, :k]).mean(axis=1)
    else:
        nn = np.full(1, 0.1 * extent)
    log_s = np.clip(np.log(np.maximum(0.5 * nn, 1e-4)), LOG_SCALE_MIN, LOG_SCALE_MAX)

    border = np.concatenate(
        [np.concatenate([img.data[0], img.data[-1], img.data[:, 0], img.data[:, -1]]) for img, _ in views]
    )
    return GaussianScene(
        positions=pts,
        log_scales=np.repeat(log_s[:, None], 3, axis=1),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (b, 1)),
        opacity_logits=np.full(b, float(logit(cfg.init_opacity))),
        colors=np.clip(colors, 0.0, 1.0),
        background=np.median(border, axis=0),
    )


def _check_views(views):
    if not views:
        raise OptimizationError("optimize needs at least one view")
    for i, (img, cam) in enumerate(views):
        if img.shape != (cam.height, cam.width):
            raise OptimizationError(f"view {i}: image {img.shape} does not match its camera")


def _constrain(params: dict) -> None:
    np.clip(params["log_scales"], LOG_SCALE_MIN, LOG_SCALE_MAX, out=params["log_scales"])
    np.clip(params["colors"], 0.0, 1.0, out=params["colors"])
    np.clip(params["background"], 0.0, 1.0, out=params["background"])


def optimize(views: list[tuple[Image, CameraView]], cfg: OptimConfig, init: GaussianScene | None = None,
             points: np.ndarray | None = None, history: list | None = None) -> GaussianScene:
    """Fit a fixed-budget Gaussian scene to posed views.

    Deterministic for a given ``(cfg.seed, views)``. ``history``, when given,
    receives the per-iteration training loss.
    """
    _check_views(views)
    if init is not None:
        scene = init.copy()
        if scene.budget != cfg.budget:
            raise OptimizationError(f"initial scene has {scene.budget} Gaussians, budget is {cfg.budget}")
    else:
        scene = initialize_scene(views, cfg, points)
    if cfg.iterations == 0:
        return scene

    _, extent = _scene_frame([c for _, c in views])
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState.zeros_like(scene.params())
    lr = cfg.lr
    reloc_stop = int(cfg.relocation_until * cfg.iterations)
    b = scene.budget
    for it in range(cfg.iterations):
        img, cam = views[it % len(views)]
        value, grads = backward(scene, cam, img, cfg.loss_lambda, cfg.render)
        opac = scene.opacities
        grads["opacity_logits"] = grads["opacity_logits"] + cfg.opacity_reg * opac * (1 - opac) / b
        scales = np.exp(scene.log_scales)
        grads["log_scales"] = grads["log_scales"] + cfg.scale_reg * scales / scales.size
        frac = it / max(cfg.iterations - 1, 1)
        pos_lr = extent * lr.positions * (lr.positions_final / lr.positions) ** frac
        rates = {
            "positions": pos_lr,
            "log_scales": lr.log_scales,
            "quats": lr.quats,
            "opacity_logits": lr.opacity_logits,
            "colors": lr.colors,
            "background": lr.background,
        }
        params, state = adam_step(scene.params(), grads, state, rates)
        _constrain(params)
        scene = GaussianScene.from_params(params)
        if history is not None:
            history.append(value)
        step = it + 1
        if step % cfg.relocation_interval == 0 and step < reloc_stop:
            scene = mcmc_relocate(scene, rng, cfg, state)
        assert scene.budget == b
    return scene

