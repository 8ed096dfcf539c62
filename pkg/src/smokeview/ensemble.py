"""Independent seeded optimization runs and per-pixel averaging of their renders."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .image import CameraView, Image
from .splat.optim import OptimConfig, optimize
from .splat.render import render
from .splat.scene import GaussianScene

PAPER_RUNS = 91
DESK_RUNS = 8


class EnsembleError(RuntimeError):
    def __init__(self, run: int, cause: BaseException):
        self.run = run
        super().__init__(f"run {run}: {cause}")


@dataclass(frozen=True)
class EnsembleConfig:
    n_runs: int = DESK_RUNS
    base_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def seeds(self) -> list[int]:
        return [self.base_seed + k for k in range(self.n_runs)]


@dataclass
class RunSet:
    """``views[k][j]`` is run ``k`` rendered from target camera ``j``."""

    views: list[list[Image]]
    seeds: list[int] = field(default_factory=list)
    scenes: list[GaussianScene] | None = None

    def __post_init__(self):
        if not self.views or not self.views[0]:
            raise ValueError("a run set needs at least one run and one view")
        t = len(self.views[0])
        shapes = [img.shape for img in self.views[0]]
        for k, row in enumerate(self.views):
            if len(row) != t:
                raise ValueError(f"run {k} has {len(row)} views, expected {t}")
            if [img.shape for img in row] != shapes:
                raise ValueError(f"run {k}: view dimensions differ from run 0")

    @property
    def n_runs(self) -> int:
        return len(self.views)

    @property
    def n_views(self) -> int:
        return len(self.views[0])

    def stack(self, view_index: int) -> np.ndarray:
        return np.stack([row[view_index].data for row in self.views])


def single_run(views, opt_cfg: OptimConfig, seed: int, targets: list[CameraView]):
    scene = optimize(views, opt_cfg.with_seed(seed))
    return scene, [render(scene, cam, opt_cfg.render) for cam in targets]


def _tagged_run(args):
    k, views, opt_cfg, seed, targets = args
    try:
        return single_run(views, opt_cfg, seed, targets)
    except Exception as exc:  # re-raised with the run index attached
        raise EnsembleError(k, exc) from exc


def run_ensemble(views, opt_cfg: OptimConfig, ens_cfg: EnsembleConfig, targets: list[CameraView],
                 keep_scenes: bool = False, seeds: list[int] | None = None) -> RunSet:
    """Optimize once per seed (``base_seed + k``) and render every target camera."""
    if not targets:
        raise ValueError("run_ensemble needs at least one target camera")
    seeds = list(seeds) if seeds is not None else ens_cfg.seeds()
    jobs = [(k, views, opt_cfg, s, targets) for k, s in enumerate(seeds)]
    if ens_cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(ens_cfg.workers, len(jobs))) as pool:
            results = list(pool.map(_tagged_run, jobs))
    else:
        results = [_tagged_run(job) for job in jobs]
    return RunSet(
        views=[imgs for _, imgs in results],
        seeds=seeds,
        scenes=[scene for scene, _ in results] if keep_scenes else None,
    )


def compensated_mean(stack: np.ndarray) -> np.ndarray:
    """Mean over axis 0, Neumaier-compensated in index order.

    Deviations from the first entry are summed, so identical inputs average to
    themselves bit for bit.
    """
    ref = stack[0]
    total = np.zeros(stack.shape[1:])
    comp = np.zeros(stack.shape[1:])
    for x in stack[1:] - ref:
        t = total + x
        comp += np.where(np.abs(total) >= np.abs(x), (total - t) + x, (x - t) + total)
        total = t
    return ref + (total + comp) / len(stack)


def average_views(runs: RunSet) -> list[Image]:
    return [Image.from_array(compensated_mean(runs.stack(j))) for j in range(runs.n_views)]


def variance_map_raw(runs: RunSet, view_index: int) -> np.ndarray:
    """Population variance across runs, averaged over channels."""
    stack = runs.stack(view_index)
    mean = compensated_mean(stack)
    return np.mean(compensated_mean((stack - mean) ** 2), axis=-1)


def variance_map(runs: RunSet, view_index: int) -> tuple[np.ndarray, float]:
    """Variance map scaled to [0, 1] by its maximum; returns ``(map, max)``."""
    if runs.n_runs < 2:
        raise ValueError("variance needs at least two runs")
    var = variance_map_raw(runs, view_index)
    peak = float(var.max())
    return (var / peak if peak > 0 else np.zeros_like(var)), peak


def mse_decomposition(runs: RunSet, view_index: int, truth: Image) -> tuple[float, float, float]:
    """``(mean_k MSE(V_k, g), MSE(mean V, g), mean_k MSE(V_k, mean V))``; first = second + third."""
    stack = runs.stack(view_index)
    avg = compensated_mean(stack)
    per_run = float(np.mean((stack - truth.data) ** 2))
    of_mean = float(np.mean((avg - truth.data) ** 2))
    spread = float(np.mean((stack - avg) ** 2))
    return per_run, of_mean, spread
