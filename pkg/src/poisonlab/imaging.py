"""Small tensor helpers shared by the data, encoder and trigger modules."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


def as_batch(images: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Return a 4-D view of ``images`` and whether the input was a single image."""
    if images.dim() == 3:
        return images.unsqueeze(0), True
    if images.dim() == 4:
        return images, False
    raise ValueError(f"expected C x H x W or N x C x H x W, got shape {tuple(images.shape)}")


def resize_bilinear(images: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize that keeps autograd intact; no-op when already at ``size``."""
    batch, single = as_batch(images)
    if tuple(batch.shape[-2:]) != tuple(size):
        shrinking = batch.shape[-2] > size[0] or batch.shape[-1] > size[1]
        batch = F.interpolate(batch, size=size, mode="bilinear", align_corners=False,
                              antialias=shrinking)
    return batch[0] if single else batch


def match_channels(images: torch.Tensor, channels: int) -> torch.Tensor:
    """Replicate a single channel to ``channels``; any other mismatch is an error."""
    batch, single = as_batch(images)
    have = batch.shape[1]
    if have != channels:
        if have != 1:
            raise ValueError(f"cannot convert {have}-channel image to {channels} channels")
        batch = batch.expand(-1, channels, -1, -1).clone()
    return batch[0] if single else batch


def pil_to_tensor(img: Image.Image, mode: str | None = "RGB") -> torch.Tensor:
    if mode is not None and img.mode != mode:
        img = img.convert(mode)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def tensor_to_pil(image: torch.Tensor) -> Image.Image:
    arr = image.detach().cpu().clamp(0, 1).numpy()
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0], mode="L")
    return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")


def first_argmax(values: torch.Tensor) -> torch.Tensor:
    """Argmax along the last axis that always picks the lowest index on ties."""
    n = values.shape[-1]
    is_max = values == values.max(dim=-1, keepdim=True).values
    idx = torch.arange(n).expand_as(values)
    return torch.where(is_max, idx, torch.full_like(idx, n)).min(dim=-1).values
