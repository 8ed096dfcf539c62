"""Projection, front-to-back compositing and the analytic backward pass.

Pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)`` in the
same pixel units as the camera intrinsics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ..image import LUMA_WEIGHTS, CameraView, Image
from ..metrics import ssim_gray, ssim_gray_grad
from .scene import GaussianScene, normalize_quats, quat_to_rotmat, sigmoid


@dataclass(frozen=True)
class RenderSettings:
    z_near: float = 0.01
    cov_floor: float = 0.3
    alpha_max: float = 0.995
    alpha_min: float = 1.0 / 255.0
    sigma_cutoff: float = 3.0


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    culled: bool


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities plus what the backward pass reuses."""

    p_cam: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    radii: np.ndarray
    culled: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    cov3d: np.ndarray
    jac: np.ndarray
    m: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray

    @property
    def depths(self) -> np.ndarray:
        return self.p_cam[:, 2]

    def depth_order(self) -> np.ndarray:
        """Indices of visible Gaussians sorted by depth, ties by index."""
        idx = np.flatnonzero(~self.culled)
        z = self.p_cam[idx, 2]
        return idx[np.lexsort((idx, z))].astype(np.int64)


def project(scene: GaussianScene, cam: CameraView, settings: RenderSettings = DEFAULT_SETTINGS) -> Projection:
    w = cam.rotation
    p_cam = scene.positions @ w.T + cam.translation
    culled = p_cam[:, 2] <= settings.z_near
    z = np.where(culled, 1.0, p_cam[:, 2])
    x, y = p_cam[:, 0], p_cam[:, 1]
    means2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    qnorm = np.linalg.norm(scene.quats, axis=1)
    qunit = normalize_quats(scene.quats)
    rot = quat_to_rotmat(qunit)
    scales = np.exp(scene.log_scales)
    cov3d = np.einsum("nij,nj,nkj->nik", rot, scales**2, rot)

    n = len(z)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z**2
    m = jac @ w
    cov2d = m @ cov3d @ np.transpose(m, (0, 2, 1))
    cov2d[:, 0, 0] += settings.cov_floor
    cov2d[:, 1, 1] += settings.cov_floor

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    radii = settings.sigma_cutoff * np.sqrt(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1))
    return Projection(p_cam, means2d, cov2d, conics, radii, culled, rot, scales, cov3d, jac, m, qunit, qnorm)


def project_gaussian(g, cam: CameraView, settings: RenderSettings = DEFAULT_SETTINGS) -> Splat2D:
    scene = GaussianScene([g.position], [g.log_scale], [g.rotation], [g.opacity_logit], [g.color], np.zeros(3))
    p = project(scene, cam, settings)
    return Splat2D(p.means2d[0], p.cov2d[0], float(p.p_cam[0, 2]), bool(p.culled[0]))


@njit(cache=True)
def _bbox(mx, my, rx, ry, width, height):
    if not (math.isfinite(mx) and math.isfinite(my) and math.isfinite(rx) and math.isfinite(ry)):
        return 0, -1, 0, -1
    fx0 = math.ceil(mx - rx - 0.5)
    fx1 = math.floor(mx + rx - 0.5)
    fy0 = math.ceil(my - ry - 0.5)
    fy1 = math.floor(my + ry - 0.5)
    if fx1 < 0 or fy1 < 0 or fx0 > width - 1 or fy0 > height - 1:
        return 0, -1, 0, -1
    return int(max(fx0, 0)), int(min(fx1, width - 1)), int(max(fy0, 0)), int(min(fy1, height - 1))


@njit(cache=True)
def _composite_forward(order, means, conics, radii, opac, colors, depths, bg, alpha_max, alpha_min,
                       out_color, out_t, out_depth):
    height, width = out_t.shape
    for k in range(order.shape[0]):
        i = order[k]
        x0, x1, y0, y1 = _bbox(means[i, 0], means[i, 1], radii[i, 0], radii[i, 1], width, height)
        a, b, c = conics[i, 0], conics[i, 1], conics[i, 2]
        for py in range(y0, y1 + 1):
            dy = py + 0.5 - means[i, 1]
            for px in range(x0, x1 + 1):
                dx = px + 0.5 - means[i, 0]
                g = math.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
                alpha = opac[i] * g
                if alpha > alpha_max:
                    alpha = alpha_max
                if alpha < alpha_min:
                    continue
                t = out_t[py, px]
                wgt = alpha * t
                for ch in range(3):
                    out_color[py, px, ch] += wgt * colors[i, ch]
                out_depth[py, px] += wgt * depths[i]
                out_t[py, px] = t * (1.0 - alpha)
    for py in range(height):
        for px in range(width):
            for ch in range(3):
                out_color[py, px, ch] += bg[ch] * out_t[py, px]


@njit(cache=True)
def _composite_backward(order, means, conics, radii, opac, colors, alpha_max, alpha_min,
                        t_final, suffix, grad_color_img, g_means, g_conics, g_opac, g_colors):
    height, width = t_final.shape
    t_cur = t_final.copy()
    for k in range(order.shape[0] - 1, -1, -1):
        i = order[k]
        x0, x1, y0, y1 = _bbox(means[i, 0], means[i, 1], radii[i, 0], radii[i, 1], width, height)
        a, b, c = conics[i, 0], conics[i, 1], conics[i, 2]
        for py in range(y0, y1 + 1):
            dy = py + 0.5 - means[i, 1]
            for px in range(x0, x1 + 1):
                dx = px + 0.5 - means[i, 0]
                g = math.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
                alpha = opac[i] * g
                clamped = False
                if alpha > alpha_max:
                    alpha = alpha_max
                    clamped = True
                if alpha < alpha_min:
                    continue
                one_minus = 1.0 - alpha
                t = t_cur[py, px] / one_minus
                g_alpha = 0.0
                for ch in range(3):
                    gc = grad_color_img[py, px, ch]
                    g_colors[i, ch] += alpha * t * gc
                    g_alpha += gc * (colors[i, ch] * t - suffix[py, px, ch] / one_minus)
                    suffix[py, px, ch] += colors[i, ch] * alpha * t
                t_cur[py, px] = t
                if not clamped:
                    g_opac[i] += g_alpha * g
                    g_q = -0.5 * g_alpha * opac[i] * g
                    g_means[i, 0] += -2.0 * g_q * (a * dx + b * dy)
                    g_means[i, 1] += -2.0 * g_q * (b * dx + c * dy)
                    g_conics[i, 0] += g_q * dx * dx
                    g_conics[i, 1] += 2.0 * g_q * dx * dy
                    g_conics[i, 2] += g_q * dy * dy


@dataclass
class RenderOutput:
    color: np.ndarray
    transmittance: np.ndarray
    depth_sum: np.ndarray
    projection: Projection
    order: np.ndarray

    def depth(self, background_depth: float) -> np.ndarray:
        """Alpha-weighted expected depth, with the background at ``background_depth``."""
        return self.depth_sum + self.transmittance * background_depth


def render_raw(scene: GaussianScene, cam: CameraView, settings: RenderSettings = DEFAULT_SETTINGS) -> RenderOutput:
    proj = project(scene, cam, settings)
    order = proj.depth_order()
    color = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))
    depth = np.zeros((cam.height, cam.width))
    _composite_forward(
        order, proj.means2d, proj.conics, proj.radii, sigmoid(scene.opacity_logits),
        scene.colors, proj.p_cam[:, 2].copy(), scene.background,
        settings.alpha_max, settings.alpha_min, color, trans, depth,
    )
    return RenderOutput(color, trans, depth, proj, order)


def render(scene: GaussianScene, cam: CameraView, settings: RenderSettings = DEFAULT_SETTINGS) -> Image:
    return Image.from_array(render_raw(scene, cam, settings).color)


def _loss_and_grad(color: np.ndarray, target: np.ndarray, lam: float, need_grad: bool = True):
    diff = color - target
    l1 = float(np.mean(np.abs(diff)))
    value = (1.0 - lam) * l1
    grad = (1.0 - lam) * np.sign(diff) / diff.size if need_grad else None
    if lam > 0:
        y_r, y_t = color @ LUMA_WEIGHTS, target @ LUMA_WEIGHTS
        if need_grad:
            s, g_y = ssim_gray_grad(y_r, y_t)
            grad = grad - lam * g_y[..., None] * LUMA_WEIGHTS
        else:
            s = ssim_gray(y_r, y_t)
        value += lam * (1.0 - s)
    return value, grad


def loss(rendered: Image, target: Image, lam: float = 0.2) -> float:
    """``(1 - lam) * L1 + lam * (1 - SSIM)``."""
    if rendered.shape != target.shape:
        raise ValueError("rendered and target images differ in size")
    return _loss_and_grad(rendered.data, target.data, lam, need_grad=False)[0]


def scene_loss(scene: GaussianScene, cam: CameraView, target: Image, lam: float = 0.2,
               settings: RenderSettings = DEFAULT_SETTINGS) -> float:
    """Loss of the unclipped render; the function ``backward`` differentiates."""
    return _loss_and_grad(render_raw(scene, cam, settings).color, target.data, lam, need_grad=False)[0]


def _projection_backward(proj: Projection, cam: CameraView, g_means: np.ndarray, g_conics: np.ndarray):
    w = cam.rotation
    vis = ~proj.culled
    z = np.where(proj.culled, 1.0, proj.p_cam[:, 2])
    x, y = proj.p_cam[:, 0], proj.p_cam[:, 1]
    fx, fy = cam.fx, cam.fy

    # conic -> 2D covariance: dL/dS = -A G A with A the inverse covariance
    a, b, c = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    inv = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    g_inv = np.stack(
        [np.stack([g_conics[:, 0], 0.5 * g_conics[:, 1]], -1), np.stack([0.5 * g_conics[:, 1], g_conics[:, 2]], -1)],
        -2,
    )
    g_cov2d = -inv @ g_inv @ inv

    m = proj.m
    g_m = 2.0 * g_cov2d @ m @ proj.cov3d
    g_cov3d = np.transpose(m, (0, 2, 1)) @ g_cov2d @ m
    g_jac = g_m @ w.T

    g_pcam = np.zeros_like(proj.p_cam)
    g_pcam[:, 0] = g_means[:, 0] * fx / z - g_jac[:, 0, 2] * fx / z**2
    g_pcam[:, 1] = g_means[:, 1] * fy / z - g_jac[:, 1, 2] * fy / z**2
    g_pcam[:, 2] = (
        -g_means[:, 0] * fx * x / z**2
        - g_means[:, 1] * fy * y / z**2
        - g_jac[:, 0, 0] * fx / z**2
        - g_jac[:, 1, 1] * fy / z**2
        + g_jac[:, 0, 2] * 2 * fx * x / z**3
        + g_jac[:, 1, 2] * 2 * fy * y / z**3
    )
    g_pos = g_pcam @ w

    rot = proj.rot
    s2 = proj.scales**2
    g_rot = 2.0 * g_cov3d @ rot * s2[:, None, :]
    g_diag = np.einsum("nji,njk,nki->ni", rot, g_cov3d, rot)
    g_log_scales = g_diag * 2.0 * s2

    qw, qx, qy, qz = (proj.quat_unit[:, i] for i in range(4))
    gr = g_rot
    g_qunit = 2.0 * np.stack(
        [
            -qz * gr[:, 0, 1] + qy * gr[:, 0, 2] + qz * gr[:, 1, 0] - qx * gr[:, 1, 2] - qy * gr[:, 2, 0] + qx * gr[:, 2, 1],
            qy * gr[:, 0, 1] + qz * gr[:, 0, 2] + qy * gr[:, 1, 0] - 2 * qx * gr[:, 1, 1] - qw * gr[:, 1, 2]
            + qz * gr[:, 2, 0] + qw * gr[:, 2, 1] - 2 * qx * gr[:, 2, 2],
            -2 * qy * gr[:, 0, 0] + qx * gr[:, 0, 1] + qw * gr[:, 0, 2] + qx * gr[:, 1, 0] + qz * gr[:, 1, 2]
            - qw * gr[:, 2, 0] + qz * gr[:, 2, 1] - 2 * qy * gr[:, 2, 2],
            -2 * qz * gr[:, 0, 0] - qw * gr[:, 0, 1] + qx * gr[:, 0, 2] + qw * gr[:, 1, 0] - 2 * qz * gr[:, 1, 1]
            + qy * gr[:, 1, 2] + qx * gr[:, 2, 0] + qy * gr[:, 2, 1],
        ],
        axis=1,
    )
    radial = np.sum(g_qunit * proj.quat_unit, axis=1, keepdims=True)
    norm = np.where(proj.quat_norm > 0, proj.quat_norm, 1.0)[:, None]
    g_quats = (g_qunit - proj.quat_unit * radial) / norm

    for arr in (g_pos, g_log_scales, g_quats):
        arr[~vis] = 0.0
    return g_pos, g_log_scales, g_quats


def backward(scene: GaussianScene, cam: CameraView, target: Image, lam: float = 0.2,
             settings: RenderSettings = DEFAULT_SETTINGS, out: RenderOutput | None = None):
    """Loss of ``render(scene, cam)`` against ``target`` and its exact parameter gradients.

    Returns ``(loss_value, grads)`` with ``grads`` keyed like ``GaussianScene.params()``.
    Clamped or skipped compositing branches contribute no gradient.
    """
    if (cam.height, cam.width) != target.shape:
        raise ValueError("target does not match camera raster")
    if out is None:
        out = render_raw(scene, cam, settings)
    value, g_img = _loss_and_grad(out.color, target.data, lam)
    proj = out.projection
    n = scene.budget
    opac = sigmoid(scene.opacity_logits)

    g_means = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_colors = np.zeros((n, 3))
    suffix = scene.background[None, None, :] * out.transmittance[..., None]
    _composite_backward(
        out.order, proj.means2d, proj.conics, proj.radii, opac, scene.colors,
        settings.alpha_max, settings.alpha_min, out.transmittance, suffix,
        np.ascontiguousarray(g_img), g_means, g_conics, g_opac, g_colors,
    )
    g_pos, g_log_scales, g_quats = _projection_backward(proj, cam, g_means, g_conics)
    grads = {
        "positions": g_pos,
        "log_scales": g_log_scales,
        "quats": g_quats,
        "opacity_logits": g_opac * opac * (1.0 - opac),
        "colors": g_colors,
        "background": np.einsum("hwc,hw->c", g_img, out.transmittance),
    }
    return value, grads
