"""Preliminary restoration stand-ins and structure-gated image enhancement.

Enhancement is delegated to an external image-to-image service (or a local
mock). Whatever comes back is only accepted if its luminance SSIM against the
input clears a threshold; otherwise the input passes through untouched.
"""

from __future__ import annotations

import base64
import binascii
import enum
import hashlib
import json
import logging
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import httpx
import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .image import LUMA_WEIGHTS, Image, ImageIOError, decode_png, encode_png, luminance
from .metrics import ssim_gray

log = logging.getLogger(__name__)

ENV_URL = "SMOKEVIEW_ENHANCE_URL"
ENV_KEY = "SMOKEVIEW_ENHANCE_API_KEY"
ENV_MODEL = "SMOKEVIEW_ENHANCE_MODEL"
DEFAULT_MODEL = "gpt-image-1.5"

DEFAULT_PROMPT_TEXT = (
    "Clean up this smoke-degraded photograph. Raise visibility and contrast, remove haze and "
    "sensor noise, and recover fine detail where it is clearly supported by the image. Keep the "
    "scene geometry, the layout of every object, object outlines and local textures exactly where "
    "they are: do not add, remove, move, or reshape anything, and do not change the framing."
)


class StageError(RuntimeError):
    def __init__(self, message: str, view: str | None = None):
        self.view = view
        super().__init__(f"view {view}: {message}" if view is not None else message)


class EnhanceError(StageError):
    pass


class RestoreStageKind(str, enum.Enum):
    IDENTITY = "identity"
    GRAY_WORLD_STRETCH = "gray_world_stretch"
    EXTERNAL_COMMAND = "external_command"


def gray_world_stretch(img: Image, low_pct: float = 1.0, high_pct: float = 99.0) -> Image:
    data = img.data
    means = data.reshape(-1, 3).mean(axis=0)
    target = means.mean()
    gains = np.where(means > 0, target / np.where(means > 0, means, 1.0), 1.0)
    balanced = data * gains
    lum = balanced @ LUMA_WEIGHTS
    lo, hi = np.percentile(lum, [low_pct, high_pct])
    if hi - lo > 1e-6:
        balanced = (balanced - lo) / (hi - lo)
    return Image.from_array(balanced)


def run_external(img: Image, command: list[str], view: str | None = None, timeout: float = 600.0) -> Image:
    """Pipe ``img`` as PNG through ``command`` (PNG on stdin, PNG on stdout)."""
    try:
        proc = subprocess.run(command, input=encode_png(img), capture_output=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise StageError(f"restore command {command[0]!r} failed to run: {exc}", view) from exc
    if proc.returncode != 0:
        err = proc.stderr.decode(errors="replace").strip()
        raise StageError(f"restore command exited with status {proc.returncode}: {err}", view)
    try:
        out = decode_png(proc.stdout)
    except ImageIOError as exc:
        raise StageError(f"restore command produced an unreadable image: {exc}", view) from exc
    if out.shape != img.shape:
        raise StageError(f"restore command changed the image size {img.shape} -> {out.shape}", view)
    return out


def restore_stage(img: Image, kind: RestoreStageKind | str = RestoreStageKind.GRAY_WORLD_STRETCH,
                  command: list[str] | None = None, view: str | None = None) -> Image:
    kind = RestoreStageKind(kind)
    if kind is RestoreStageKind.IDENTITY:
        return img
    if kind is RestoreStageKind.GRAY_WORLD_STRETCH:
        return gray_world_stretch(img)
    if not command:
        raise StageError("external_command restore stage needs a command", view)
    return run_external(img, command, view)


@dataclass(frozen=True)
class EnhancePrompt:
    text: str = DEFAULT_PROMPT_TEXT

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("prompt text must be non-empty")


@dataclass(frozen=True)
class GateConfig:
    ssim_threshold: float = 0.6
    action_on_reject: str = "fallback_to_input"

    def __post_init__(self):
        if not np.isfinite(self.ssim_threshold):
            raise ValueError("ssim_threshold must be finite")
        if self.action_on_reject != "fallback_to_input":
            raise ValueError(f"unsupported reject action {self.action_on_reject!r}")


@dataclass(frozen=True)
class GateResult:
    accepted: bool
    ssim: float

    def __bool__(self):
        return self.accepted


def structure_gate(original: Image, candidate: Image, gate: GateConfig = GateConfig()) -> GateResult:
    if original.shape != candidate.shape:
        raise ValueError("gate images must share dimensions")
    score = ssim_gray(luminance(original), luminance(candidate))
    return GateResult(score >= gate.ssim_threshold, score)


def mock_enhance(img: Image, gamma: float = 1.0, gain: float = 1.0) -> Image:
    if not (gamma > 0 and gain > 0):
        raise ValueError("gamma and gain must be positive")
    if gamma == 1.0 and gain == 1.0:
        return img
    return Image.from_array(np.power(img.data, gamma) * gain)


class EnhanceRequest(BaseModel):
    """Wire body sent to the enhancement service."""

    model_config = ConfigDict(extra="forbid")

    model: str
    prompt: str
    image_b64: str


class EnhanceResponse(BaseModel):
    model_config = ConfigDict(extra="ignore")

    image_b64: str | None = None
    error: str | None = None


class EnhancementClient(Protocol):
    def __call__(self, img: Image, prompt: EnhancePrompt) -> Image: ...


class MockClient:
    """Offline stand-in: a deterministic per-pixel tone map, or any callable."""

    def __init__(self, gamma: float = 1.0, gain: float = 1.0, fn: Callable[[Image], Image] | None = None):
        self.gamma, self.gain, self.fn = gamma, gain, fn

    def __call__(self, img: Image, prompt: EnhancePrompt) -> Image:
        if self.fn is not None:
            return self.fn(img)
        return mock_enhance(img, self.gamma, self.gain)

    def describe(self) -> dict:
        return {"kind": "mock", "gamma": self.gamma, "gain": self.gain}


def build_request(img: Image, prompt: EnhancePrompt, model: str) -> EnhanceRequest:
    return EnhanceRequest(model=model, prompt=prompt.text, image_b64=base64.b64encode(encode_png(img)).decode("ascii"))


def parse_response(payload) -> Image:
    try:
        resp = EnhanceResponse.model_validate(payload)
    except ValidationError as exc:
        raise EnhanceError(f"malformed enhancement response: {exc}") from exc
    if resp.error is not None:
        raise EnhanceError(f"enhancement service error: {resp.error}")
    if resp.image_b64 is None:
        raise EnhanceError("enhancement response carries neither image_b64 nor error")
    try:
        raw = base64.b64decode(resp.image_b64, validate=True)
        return decode_png(raw)
    except (binascii.Error, ImageIOError) as exc:
        raise EnhanceError(f"enhancement response image is not a valid PNG: {exc}") from exc


class HttpClient:
    """JSON-over-HTTP client with retry and exponential backoff."""

    def __init__(self, url: str | None = None, api_key: str | None = None, model: str | None = None,
                 retries: int = 3, backoff: float = 1.0, timeout: float = 300.0,
                 transport: httpx.BaseTransport | None = None, sleep: Callable[[float], None] = time.sleep):
        self.url = url or os.environ.get(ENV_URL)
        if not self.url:
            raise EnhanceError(f"no enhancement endpoint configured (set {ENV_URL} or use the mock)")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_KEY)
        self.model = model or os.environ.get(ENV_MODEL, DEFAULT_MODEL)
        self.retries = retries
        self.backoff = backoff
        self.sleep = sleep
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def describe(self) -> dict:
        return {"kind": "http", "url": self.url, "model": self.model}

    def __call__(self, img: Image, prompt: EnhancePrompt) -> Image:
        body = build_request(img, prompt, self.model).model_dump()
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                r = self._client.post(self.url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last = exc
                continue
            if r.status_code >= 500 or r.status_code == 429:
                last = EnhanceError(f"service returned HTTP {r.status_code}")
                continue
            try:
                payload = r.json()
            except json.JSONDecodeError as exc:
                raise EnhanceError(f"enhancement response is not JSON (HTTP {r.status_code})") from exc
            if r.status_code >= 400 and not (isinstance(payload, dict) and "error" in payload):
                raise EnhanceError(f"service returned HTTP {r.status_code}")
            return parse_response(payload)
        raise EnhanceError(f"enhancement request failed after {self.retries} attempts: {last}")


class ReplayClient:
    """Serves recorded responses keyed by request hash; records through ``inner`` when given."""

    def __init__(self, directory, inner: EnhancementClient | None = None, model: str = DEFAULT_MODEL):
        self.directory = Path(directory)
        self.inner = inner
        self.model = model

    def key(self, img: Image, prompt: EnhancePrompt) -> str:
        h = hashlib.sha256()
        h.update(self.model.encode())
        h.update(b"\0")
        h.update(prompt.text.encode())
        h.update(b"\0")
        h.update(encode_png(img))
        return h.hexdigest()

    def describe(self) -> dict:
        return {"kind": "replay", "directory": str(self.directory), "model": self.model}

    def __call__(self, img: Image, prompt: EnhancePrompt) -> Image:
        path = self.directory / f"{self.key(img, prompt)}.json"
        if path.is_file():
            return parse_response(json.loads(path.read_text()))
        if self.inner is None:
            raise EnhanceError(f"no recorded response for this request ({path.name})")
        out = self.inner(img, prompt)
        self.directory.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"image_b64": base64.b64encode(encode_png(out)).decode("ascii")}))
        return out


def enhance_image(img: Image, prompt: EnhancePrompt, client: EnhancementClient, gate: GateConfig = GateConfig(),
                  view: str | None = None) -> Image:
    """Enhance one view; a gate rejection returns ``img`` itself."""
    try:
        out = client(img, prompt)
    except EnhanceError as exc:
        if exc.view is not None or view is None:
            raise
        raise EnhanceError(str(exc), view) from exc
    except httpx.HTTPError as exc:
        raise EnhanceError(f"transport failure: {exc}", view) from exc
    if out.shape != img.shape:
        raise EnhanceError(f"enhanced image size {out.shape} differs from input {img.shape}", view)
    decision = structure_gate(img, out, gate)
    if not decision.accepted:
        log.warning("view %s: enhancement rejected by structure gate (SSIM %.4f < %.4f), keeping input",
                    view, decision.ssim, gate.ssim_threshold)
        return img
    return out


def enhance_views(images: list[Image], prompt: EnhancePrompt, client: EnhancementClient,
                  gate: GateConfig = GateConfig(), max_workers: int = 1, names: list[str] | None = None) -> list[Image]:
    """Enhance views independently; results are in input order regardless of scheduling."""
    names = names or [str(i) for i in range(len(images))]
    if max_workers <= 1:
        return [enhance_image(im, prompt, client, gate, n) for im, n in zip(images, names)]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda pair: enhance_image(pair[0], prompt, client, gate, pair[1]), zip(images, names)))
