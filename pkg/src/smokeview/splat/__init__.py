from .optim import OptimConfig, adam_step, mcmc_relocate, optimize
from .render import backward, loss, project_gaussian, render
from .scene import Gaussian, GaussianScene, load_checkpoint, save_checkpoint

__all__ = [
    "Gaussian", "GaussianScene", "OptimConfig", "adam_step", "backward", "load_checkpoint", "loss",
    "mcmc_relocate", "optimize", "project_gaussian", "render", "save_checkpoint",
]
