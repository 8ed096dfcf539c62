"""Novel view synthesis from smoke-degraded images at desk scale."""

__version__ = "0.1.0"

from .image import CameraView, Dataset, Image, load_dataset, load_image, save_dataset, save_image  # noqa: E402
from .dehaze import DehazeParams, dehaze  # noqa: E402
from .metrics import psnr, ssim  # noqa: E402

__all__ = [
    "CameraView", "Dataset", "DehazeParams", "Image", "dehaze", "load_dataset", "load_image",
    "psnr", "save_dataset", "save_image", "ssim",
]
