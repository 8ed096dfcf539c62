"""Gaussian scene representation and the binary checkpoint format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_SCALE_MIN = float(np.log(1e-4))
LOG_SCALE_MAX = float(np.log(1e2))

PARAM_NAMES = ("positions", "log_scales", "quats", "opacity_logits", "colors", "background")

CHECKPOINT_MAGIC = "smokeview-scene"
# per-Gaussian record: 3 position, 3 log_scale, 4 quaternion (wxyz), 1 opacity logit, 3 color
RECORD_LAYOUT = [("position", 3), ("log_scale", 3), ("quat_wxyz", 4), ("opacity_logit", 1), ("color", 3)]
RECORD_LEN = sum(n for _, n in RECORD_LAYOUT)


class CheckpointError(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (N, 4) unit quaternions in wxyz order."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def normalize_quats(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    out = q / np.where(norm > 0, norm, 1.0)
    out[norm[..., 0] == 0] = (1.0, 0.0, 0.0, 0.0)
    return out


@dataclass
class Gaussian:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass(eq=False)
class GaussianScene:
    """Fixed-budget Gaussian set stored as parameter arrays (structure of arrays)."""

    positions: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.array(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.array(self.colors, dtype=np.float64).reshape(n, 3)
        self.background = np.array(self.background, dtype=np.float64).reshape(3)

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian], background) -> GaussianScene:
        return cls(
            positions=[g.position for g in gaussians],
            log_scales=[g.log_scale for g in gaussians],
            quats=[g.rotation for g in gaussians],
            opacity_logits=[g.opacity_logit for g in gaussians],
            colors=[g.color for g in gaussians],
            background=background,
        )

    @property
    def budget(self) -> int:
        return len(self.positions)

    def __len__(self) -> int:
        return self.budget

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            self.positions[i].copy(),
            self.log_scales[i].copy(),
            self.quats[i].copy(),
            float(self.opacity_logits[i]),
            self.colors[i].copy(),
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> GaussianScene:
        return cls(**{name: params[name] for name in PARAM_NAMES})

    def copy(self) -> GaussianScene:
        return GaussianScene.from_params({k: v.copy() for k, v in self.params().items()})

    def equals(self, other: GaussianScene) -> bool:
        """Bitwise equality of every parameter array."""
        return all(np.array_equal(a, other.params()[k]) for k, a in self.params().items())

    def records(self) -> np.ndarray:
        return np.concatenate(
            [self.positions, self.log_scales, self.quats, self.opacity_logits[:, None], self.colors],
            axis=1,
        )


def save_checkpoint(scene: GaussianScene, path, iteration: int = 0) -> None:
    """JSON header line followed by little-endian float64 records in index order."""
    header = {
        "format": CHECKPOINT_MAGIC,
        "budget": scene.budget,
        "background": [float(v) for v in scene.background],
        "iteration": int(iteration),
        "record": [{"field": f, "count": n} for f, n in RECORD_LAYOUT],
        "dtype": "<f8",
    }
    payload = np.ascontiguousarray(scene.records(), dtype="<f8").tobytes()
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)


def load_checkpoint(path) -> tuple[GaussianScene, int]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(raw[:newline])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    if header.get("format") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a scene checkpoint")
    budget = int(header["budget"])
    body = raw[newline + 1:]
    if len(body) != budget * RECORD_LEN * 8:
        raise CheckpointError(f"{path}: expected {budget} records, got {len(body)} bytes")
    rec = np.frombuffer(body, dtype="<f8").reshape(budget, RECORD_LEN).astype(np.float64)
    scene = GaussianScene(
        positions=rec[:, 0:3],
        log_scales=rec[:, 3:6],
        quats=rec[:, 6:10],
        opacity_logits=rec[:, 10],
        colors=rec[:, 11:14],
        background=header["background"],
    )
    return scene, int(header.get("iteration", 0))
