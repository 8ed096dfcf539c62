"""Images, pinhole cameras, datasets and raster file I/O.

Images are float64 RGB rasters in [0, 1], row-major with a top-left origin,
held as read-only ``(height, width, 3)`` numpy arrays.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageIOError(Exception):
    """Base class for raster read/write failures."""


class ImageNotFoundError(ImageIOError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageIOError):
    pass


class CorruptImageError(ImageIOError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Image:
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image data must have shape (H, W, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image channels must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr, clip: bool = True) -> Image:
        arr = np.asarray(arr, dtype=np.float64)
        if clip:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr)

    @classmethod
    def constant(cls, height: int, width: int, rgb) -> Image:
        arr = np.empty((height, width, 3))
        arr[...] = np.asarray(rgb, dtype=np.float64)
        return cls(arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera with a world-to-camera pose: ``p_cam = R @ p + t``."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the raster")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, f: float, width: int, height: int) -> CameraView:
        """Camera at ``eye`` looking at ``target``; +x right, +y down, +z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= norm
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(f, f, width / 2.0, height / 2.0, rot, -rot @ eye, width, height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
            "width": self.width,
            "height": self.height,
        }


@dataclass
class Dataset:
    scene_name: str
    training_views: list[tuple[Image, CameraView]]
    target_views: list[CameraView]
    ground_truth: list[Image] | None = None
    image_names: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.training_views) < 2:
            raise DatasetError("a dataset needs at least two training views")
        for i, (img, cam) in enumerate(self.training_views):
            if img.shape != (cam.height, cam.width):
                raise DatasetError(f"training view {i}: image {img.shape} does not match camera")
        if self.ground_truth is not None:
            if len(self.ground_truth) != len(self.target_views):
                raise DatasetError("ground truth count does not match target views")
            for j, (img, cam) in enumerate(zip(self.ground_truth, self.target_views)):
                if img.shape != (cam.height, cam.width):
                    raise DatasetError(f"target view {j}: image {img.shape} does not match camera")


def luminance(img: Image) -> np.ndarray:
    return img.data @ LUMA_WEIGHTS


def quantize(data: np.ndarray) -> np.ndarray:
    """Round-half-up 8-bit quantization of values in [0, 1]."""
    return np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _parse_ppm(raw: bytes, path) -> np.ndarray:
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise CorruptImageError(f"{path}: truncated PPM header")
        tok = raw[start:pos]
        if not tok.isdigit():
            raise CorruptImageError(f"{path}: invalid PPM header field {tok!r}")
        tokens.append(int(tok))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise CorruptImageError(f"{path}: missing whitespace after PPM header")
    pos += 1
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise CorruptImageError(f"{path}: invalid PPM dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    n = width * height * 3
    body = raw[pos:pos + n]
    if len(body) != n:
        raise CorruptImageError(f"{path}: PPM pixel data truncated ({len(body)} of {n} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


def load_image(path) -> Image:
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"{path}: no such file")
    raw = path.read_bytes()
    if raw.startswith(b"P6"):
        arr = _parse_ppm(raw, path)
    elif raw.startswith(_PNG_SIGNATURE):
        try:
            with PILImage.open(path) as im:
                im.load()
                if im.mode in ("RGB", "RGBA", "L", "LA", "P"):
                    arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
                else:
                    raise UnsupportedFormatError(f"{path}: unsupported PNG mode {im.mode}")
        except UnsupportedFormatError:
            raise
        except Exception as exc:
            raise CorruptImageError(f"{path}: cannot decode PNG ({exc})") from exc
    else:
        raise UnsupportedFormatError(f"{path}: not a PNG or binary PPM (P6) file")
    return Image(arr.astype(np.float64) / 255.0)


def encode_png(img: Image) -> bytes:
    import io

    buf = io.BytesIO()
    PILImage.fromarray(quantize(img.data), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(payload: bytes) -> Image:
    import io

    if not payload.startswith(_PNG_SIGNATURE):
        raise UnsupportedFormatError("payload is not a PNG stream")
    try:
        with PILImage.open(io.BytesIO(payload)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise CorruptImageError(f"cannot decode PNG payload ({exc})") from exc
    return Image(arr.astype(np.float64) / 255.0)


def save_image(img: Image, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise ImageIOError(f"{path.parent}: directory does not exist")
    q = quantize(img.data)
    try:
        if path.suffix.lower() == ".ppm":
            header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
            path.write_bytes(header + q.tobytes())
        else:
            PILImage.fromarray(q, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc


def save_gray(values: np.ndarray, path) -> None:
    """Write a [0, 1] grayscale map as an 8-bit PNG."""
    PILImage.fromarray(quantize(values), mode="L").save(Path(path), format="PNG")


def _camera_from_entry(entry: dict, width: int, height: int) -> CameraView:
    try:
        return CameraView(
            float(entry["fx"]),
            float(entry["fy"]),
            float(entry["cx"]),
            float(entry["cy"]),
            np.asarray(entry["rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(entry["translation"], dtype=np.float64).reshape(3),
            int(entry.get("width", width)),
            int(entry.get("height", height)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"invalid camera entry: {exc}") from exc


def load_dataset(root) -> Dataset:
    """Read ``<root>/cameras.json`` with ``train`` and ``test`` arrays."""
    root = Path(root)
    manifest = root / "cameras.json"
    if not manifest.is_file():
        raise DatasetError(f"{manifest}: missing camera manifest")
    try:
        doc = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest}: {exc}") from exc
    train, train_names = [], []
    for entry in doc.get("train", []):
        if "image" not in entry:
            raise DatasetError("training views require an image path")
        img = load_image(root / entry["image"])
        train.append((img, _camera_from_entry(entry, img.width, img.height)))
        train_names.append(entry["image"])
    targets, gt, test_names = [], [], []
    for entry in doc.get("test", []):
        if "image" in entry:
            img = load_image(root / entry["image"])
            gt.append(img)
            test_names.append(entry["image"])
            targets.append(_camera_from_entry(entry, img.width, img.height))
        else:
            if "width" not in entry or "height" not in entry:
                raise DatasetError("test views without images need width and height")
            targets.append(_camera_from_entry(entry, 0, 0))
    if gt and len(gt) != len(targets):
        raise DatasetError("either all or none of the test views carry ground truth")
    return Dataset(
        scene_name=doc.get("scene", root.name),
        training_views=train,
        target_views=targets,
        ground_truth=gt or None,
        image_names={"train": train_names, "test": test_names},
    )


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    doc = {"scene": ds.scene_name, "train": [], "test": []}
    for i, (img, cam) in enumerate(ds.training_views):
        rel = f"images/train_{i:04d}.png"
        save_image(img, root / rel)
        doc["train"].append({**cam.to_dict(), "image": rel})
    for j, cam in enumerate(ds.target_views):
        entry = cam.to_dict()
        if ds.ground_truth is not None:
            rel = f"images/test_{j:04d}.png"
            save_image(ds.ground_truth[j], root / rel)
            entry["image"] = rel
        doc["test"].append(entry)
    tmp = root / "cameras.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2))
    os.replace(tmp, root / "cameras.json")
