"""Procedural "desk" fixture: a CPU-sized stand-in for CIFAR-10 plus an image-text encoder.

Each class is a fixed low-frequency colour prototype (a few Gaussian blobs).
An image is a smooth random background plus a jittered, randomly scaled copy
of its class prototype plus pixel noise.  The external pool renders the same
prototypes over backgrounds from a different distribution, which plays the
role of out-of-domain data (ImageNet images poisoning a CIFAR victim).

:func:`fit_desk_encoder` trains a small conv image tower against fixed n-gram prompt
embeddings on the external pool only, so the encoder never sees victim data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset
from .encoder import ConvImageTower, EncoderHandle, build_prompts, toy_encoder

DESK_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship",
                "truck")


@dataclass(frozen=True)
class DeskStyle:
    signal: tuple[float, float] = (0.10, 0.22)
    background_level: tuple[float, float] = (0.25, 0.75)
    texture: float = 0.10
    texture_grid: int = 6
    pixel_noise: float = 0.04
    jitter: int = 2


# bump whenever fit_desk_encoder changes so cached triggers are not reused
DESK_ENCODER_REVISION = 2

IN_DOMAIN_STYLE = DeskStyle()
EXTERNAL_STYLE = DeskStyle(background_level=(0.35, 0.85), texture=0.16, texture_grid=10,
                           pixel_noise=0.06)


@dataclass(frozen=True)
class DeskFixture:
    train: Dataset
    test: Dataset
    external: Dataset
    prototypes: torch.Tensor

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.train.class_names


def class_prototypes(num_classes: int = 10, size: int = 32, blobs: int = 3,
                     seed: int = 1234) -> torch.Tensor:
    """``num_classes x 3 x size x size`` patterns scaled to max |value| = 1."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    protos = []
    for _ in range(num_classes):
        img = np.zeros((3, size, size))
        for _ in range(blobs):
            cy, cx = rng.uniform(4, size - 4, size=2)
            width = rng.uniform(size / 7, size / 4)
            colour = rng.uniform(-1, 1, size=3)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            img += colour[:, None, None] * bump
        protos.append(img / np.abs(img).max())
    return torch.tensor(np.stack(protos), dtype=torch.float32)


def _render(labels: np.ndarray, protos: torch.Tensor, style: DeskStyle,
            rng: np.random.Generator) -> torch.Tensor:
    n = len(labels)
    size = protos.shape[-1]
    g = style.texture_grid
    level = rng.uniform(*style.background_level, size=(n, 1, 1, 1))
    tint = rng.normal(0, 0.05, size=(n, 3, 1, 1))
    coarse = torch.tensor(rng.normal(0, 1, size=(n, 3, g, g)), dtype=torch.float32)
    texture = F.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=False)
    amp = rng.uniform(*style.signal, size=(n, 1, 1, 1))
    shifts = rng.integers(-style.jitter, style.jitter + 1, size=(n, 2))
    signal = torch.stack([torch.roll(protos[y], shifts=(int(dy), int(dx)), dims=(1, 2))
                          for y, (dy, dx) in zip(labels, shifts)])
    noise = rng.normal(0, style.pixel_noise, size=(n, 3, size, size))
    img = (torch.tensor(level + tint, dtype=torch.float32) + style.texture * texture
           + torch.tensor(amp, dtype=torch.float32) * signal
           + torch.tensor(noise, dtype=torch.float32))
    return img.clamp(0, 1)


def _make_split(n, protos, style, rng, split, prefix, names):
    c = protos.shape[0]
    labels = np.arange(n) % c
    rng.shuffle(labels)
    images = _render(labels, protos, style, rng)
    width = len(str(n - 1))
    ids = tuple(f"{prefix}{i:0{width}d}" for i in range(n))
    return Dataset(images, torch.tensor(labels, dtype=torch.int64), ids, names, split)


def make_desk_fixture(seed: int = 0, n_train: int = 5000, n_test: int = 1000,
                      n_external: int = 2000, num_classes: int = 10, size: int = 32,
                      prototype_seed: int = 1234) -> DeskFixture:
    names = DESK_CLASSES[:num_classes] if num_classes <= len(DESK_CLASSES) else tuple(
        f"class{i}" for i in range(num_classes))
    protos = class_prototypes(num_classes, size, seed=prototype_seed)
    rng = np.random.default_rng(seed)
    train = _make_split(n_train, protos, IN_DOMAIN_STYLE, rng, "train", "train/", names)
    test = _make_split(n_test, protos, IN_DOMAIN_STYLE, rng, "test", "test/", names)
    external = _make_split(n_external, protos, EXTERNAL_STYLE, rng, "external_pool", "ext/",
                           names)
    return DeskFixture(train, test, external, protos)


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Random brightness/contrast, pixel noise and a small circular shift."""
    n = x.shape[0]
    gain = 1 + 0.4 * (torch.rand(n, 1, 1, 1, generator=gen) - 0.5)
    bias = 0.3 * (torch.rand(n, 1, 1, 1, generator=gen) - 0.5)
    sigma = 0.05 * torch.rand(n, 1, 1, 1, generator=gen)
    shift = torch.randint(-3, 4, (2,), generator=gen).tolist()
    x = torch.roll(x, shift, (2, 3)) * gain + bias + sigma * torch.randn(x.shape, generator=gen)
    return x.clamp(0, 1)


def fit_desk_encoder(pool: Dataset, seed: int = 0, d: int = 64, width: int = 32,
                     steps: int = 1500, batch_size: int = 128, lr: float = 3e-3,
                     logit_scale: float = 30.0, mean_cosine: float = 0.3,
                     augment: bool = True) -> EncoderHandle:
    """Fit a small conv image tower to fixed prompt embeddings, CLIP-style, on ``pool``.

    The text tower is the seeded n-gram projection of the toy encoder.  A second
    term holds each image's average prompt cosine near ``mean_cosine`` so that,
    as with real CLIP, all cosines sit in a positive band and their sum stays
    well away from zero.  Photometric augmentation stands in for the data
    diversity that makes real CLIP features transfer across domains.
    """
    torch.manual_seed(seed)
    text_tower = toy_encoder(seed=seed, d=d).text_tower
    image_tower = ConvImageTower(d, pool.image_shape[1:], pool.image_shape[0], width)
    handle = EncoderHandle(image_tower, text_tower, d, pool.image_shape[1:], "desk-untrained",
                           text_tower)
    txt = F.normalize(build_prompts(pool.class_names, handle).embeddings, dim=-1)
    image_tower.train()
    for p in image_tower.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(image_tower.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randint(0, len(pool), (batch_size,), generator=gen)
        x = pool.images[idx]
        if augment:
            x = _augment(x, gen)
        cos = F.normalize(image_tower(x), dim=-1) @ txt.T
        loss = (F.cross_entropy(logit_scale * cos, pool.labels[idx])
                + ((cos.mean(-1) - mean_cosine) ** 2).mean() * 10.0)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return EncoderHandle(image_tower, text_tower, d, pool.image_shape[1:],
                         f"desk-s{seed}-d{d}", text_tower)
