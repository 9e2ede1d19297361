"""Trigger families and the poison generator ``T(x, t)``."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .errors import TriggerError
from .imaging import as_batch, match_channels, pil_to_tensor, resize_bilinear, tensor_to_pil
from .optim import NoiseMap, linf_bound, load_noise_map, save_noise_map

BLEND_DEFAULT_LAMBDA = 0.15
DEFAULT_PATTERN = "blend_pattern.png"


@dataclass(frozen=True)
class Patch:
    """``pixels`` is ``C x p x p``; ``position`` is the (row, col) of its top-left corner."""

    pixels: torch.Tensor
    position: tuple[int, int]

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]


@dataclass(frozen=True)
class Blend:
    pattern: torch.Tensor
    lam: float = BLEND_DEFAULT_LAMBDA

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise TriggerError(f"blend ratio λ∉[0,1]: {self.lam}")


@dataclass(frozen=True)
class Additive:
    noise: NoiseMap


Trigger = Union[Patch, Blend, Additive]


def apply_trigger(image: torch.Tensor, trigger: Trigger) -> torch.Tensor:
    """Return a new tensor with ``trigger`` applied to one image or a batch."""
    batch, single = as_batch(image)
    c, h, w = batch.shape[1:]
    if isinstance(trigger, Patch):
        p = trigger.size
        r, col = trigger.position
        if trigger.pixels.shape[0] != c:
            raise TriggerError(f"patch has {trigger.pixels.shape[0]} channels, image has {c}")
        if r < 0 or col < 0 or r + p > h or col + p > w:
            raise TriggerError(f"patch of side {p} at {trigger.position} is out of bounds "
                               f"for {h}x{w}")
        out = batch.clone()
        out[:, :, r:r + p, col:col + p] = trigger.pixels.to(out.dtype)
    elif isinstance(trigger, Blend):
        if tuple(trigger.pattern.shape) != (c, h, w):
            raise TriggerError(f"blend pattern shape {tuple(trigger.pattern.shape)} != image "
                               f"shape {(c, h, w)}")
        pattern = trigger.pattern.to(batch.dtype)
        out = trigger.lam * pattern + (1 - trigger.lam) * batch
    elif isinstance(trigger, Additive):
        delta = trigger.noise.delta.to(batch.dtype)
        if tuple(delta.shape[-3:]) != (c, h, w):
            raise TriggerError(f"noise shape {tuple(delta.shape)} != image shape {(c, h, w)}")
        out = (batch + delta).clamp(0, 1)
    else:
        raise TriggerError(f"unknown trigger type {type(trigger).__name__}")
    return out[0] if single else out


def make_badnets_trigger(image_shape, p: int = 2, position: tuple[int, int] | None = None,
                         value: float | torch.Tensor = 1.0) -> Patch:
    """``p x p`` patch; defaults to an all-white square in the bottom-right corner."""
    c, h, w = image_shape
    if p < 1:
        raise TriggerError("patch side must be >= 1")
    if position is None:
        position = (h - p, w - p)
    r, col = position
    if r < 0 or col < 0 or r + p > h or col + p > w:
        raise TriggerError(f"position {position} with side {p} lies outside a {h}x{w} image")
    if torch.is_tensor(value):
        pixels = value.to(torch.float32).expand(c, p, p).clone()
    else:
        pixels = torch.full((c, p, p), float(value))
    return Patch(pixels, (int(r), int(col)))


def default_blend_pattern_path() -> Path:
    return Path(str(resources.files("poisonlab") / "assets" / DEFAULT_PATTERN))


def load_pattern(path, image_shape) -> torch.Tensor:
    """Load a pattern image, resize bilinearly and replicate grey to all channels."""
    from PIL import Image, UnidentifiedImageError

    c, h, w = image_shape
    try:
        with Image.open(path) as img:
            img.load()
            mode = "L" if img.mode in ("L", "LA", "1", "I", "I;16") else "RGB"
            tensor = pil_to_tensor(img, mode)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise TriggerError(f"unreadable pattern {path}: {exc}") from exc
    try:
        tensor = match_channels(tensor, c)
    except ValueError as exc:
        raise TriggerError(str(exc)) from exc
    return resize_bilinear(tensor, (h, w)).clamp(0, 1)


def make_blended_trigger(pattern_path=None, lam: float = BLEND_DEFAULT_LAMBDA,
                         image_shape=(3, 32, 32)) -> Blend:
    if not 0.0 <= lam <= 1.0:
        raise TriggerError(f"blend ratio λ∉[0,1]: {lam}")
    path = default_blend_pattern_path() if pattern_path is None else pattern_path
    return Blend(load_pattern(path, image_shape), float(lam))


def trigger_id(trigger: Trigger) -> str:
    h = hashlib.sha256()
    if isinstance(trigger, Patch):
        name = "badnets"
        h.update(repr(trigger.position).encode())
        h.update(trigger.pixels.numpy().astype("<f4").tobytes())
    elif isinstance(trigger, Blend):
        name = "blended"
        h.update(repr(trigger.lam).encode())
        h.update(trigger.pattern.numpy().astype("<f4").tobytes())
    elif isinstance(trigger, Additive):
        name = trigger.noise.kind.split("_")[0]
        h.update(trigger.noise.delta.detach().numpy().astype("<f4").tobytes())
    else:
        raise TriggerError(f"unknown trigger type {type(trigger).__name__}")
    return f"{name}-{h.hexdigest()[:12]}"


def save_trigger(trigger: Trigger, path) -> Path:
    """Additive -> NoiseMap file; Patch/Blend -> PNG plus a ``.json`` sidecar."""
    path = Path(path)
    if isinstance(trigger, Additive):
        return save_noise_map(trigger.noise, path)
    path = path.with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(trigger, Patch):
        tensor_to_pil(trigger.pixels).save(path)
        meta = {"type": "patch", "position": list(trigger.position),
                "pixels": trigger.pixels.tolist()}
    elif isinstance(trigger, Blend):
        tensor_to_pil(trigger.pattern).save(path)
        meta = {"type": "blend", "lambda": trigger.lam,
                "pattern_shape": list(trigger.pattern.shape)}
        np.save(path.with_suffix(".npy"), trigger.pattern.numpy().astype(np.float32))
    else:
        raise TriggerError(f"unknown trigger type {type(trigger).__name__}")
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return path


def load_trigger(path) -> Trigger:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        return Additive(load_noise_map(path))
    meta = json.loads(sidecar.read_text())
    if meta["type"] == "patch":
        return Patch(torch.tensor(meta["pixels"], dtype=torch.float32), tuple(meta["position"]))
    if meta["type"] == "blend":
        exact = path.with_suffix(".npy")
        if exact.exists():
            pattern = torch.from_numpy(np.load(exact))
        else:
            pattern = load_pattern(path.with_suffix(".png"), meta["pattern_shape"])
        return Blend(pattern, float(meta["lambda"]))
    raise TriggerError(f"unknown trigger type in {sidecar}: {meta['type']!r}")


def additive_within_budget(trigger: Additive) -> bool:
    noise = trigger.noise
    return noise.linf <= linf_bound(noise.budget.epsilon, noise.delta.dtype)
