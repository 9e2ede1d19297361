"""Victim classifiers trained on the mixed clean + poison set.

Checkpoint layout (little-endian)::

    8s   magic  b"PLCKPT01"
    u32  format version
    u32  arch-id byte length, then the UTF-8 arch id
    u32  class count, u32 channels, u32 height, u32 width
    u64  parameter byte length, then float32 values of every state_dict entry
         in state_dict order
    u32  JSON byte length, then the JSON training log
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import Dataset, PoisonSet, mixed_training_set
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .imaging import as_batch, first_argmax

log = logging.getLogger(__name__)

ARCHS = ("small_cnn", "vgg16", "resnet18", "mobilenet_v2")
CKPT_MAGIC = b"PLCKPT01"
CKPT_VERSION = 1

# (arch, dataset) -> initial learning rate as listed for the paper profile
PAPER_LR = {
    ("vgg16", "cifar10"): 0.01, ("resnet18", "cifar10"): 0.01, ("mobilenet_v2", "cifar10"): 0.1,
    ("vgg16", "cifar100"): 0.01, ("resnet18", "cifar100"): 0.01,
    ("mobilenet_v2", "cifar100"): 0.1,
    ("vgg16", "imagenet50"): 0.01, ("mobilenet_v2", "imagenet50"): 0.05,
}


@dataclass(frozen=True)
class VictimConfig:
    arch: str = "small_cnn"
    epochs: int = 15
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epochs: tuple[int, ...] = (10, 13)
    seed: int = 0
    balanced_loss: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_epochs", tuple(int(e) for e in self.lr_drop_epochs))
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def desk_profile(seed: int = 0, **overrides) -> VictimConfig:
    return replace(VictimConfig(seed=seed), **overrides)


def paper_profile(arch: str, dataset: str, seed: int = 0) -> VictimConfig:
    """Full-length schedule: SGD(0.9, 5e-4), 70 epochs, x0.1 at 35 and 55."""
    try:
        lr = PAPER_LR[(arch, dataset)]
    except KeyError:
        raise ConfigError(f"no paper learning rate declared for arch={arch!r} "
                          f"dataset={dataset!r}") from None
    return VictimConfig(arch=arch, epochs=70, batch_size=256, lr=lr, momentum=0.9,
                        weight_decay=5e-4, lr_drop_epochs=(35, 55), seed=seed)


class SmallCNN(nn.Module):
    """Three strided conv blocks and a linear head; cheap enough for CPU CI."""

    def __init__(self, num_classes: int = 10, in_channels: int = 3, image_size=(32, 32)):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1), nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.BatchNorm2d(32), nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.BatchNorm2d(32), nn.ReLU(inplace=True),
        )
        h, w = (-(-image_size[0] // 8), -(-image_size[1] // 8))
        self.classifier = nn.Linear(32 * h * w, num_classes)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


_VGG16 = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


class VGG16(nn.Module):
    def __init__(self, num_classes: int = 10, in_channels: int = 3):
        super().__init__()
        layers, c = [], in_channels
        for v in _VGG16:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(c, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU(inplace=True)]
                c = v
        self.features = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1))
        self.classifier = nn.Linear(512, num_classes)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


def build_network(arch: str, num_classes: int, image_shape) -> nn.Module:
    c, h, w = image_shape
    if arch == "small_cnn":
        return SmallCNN(num_classes, c, (h, w))
    if arch == "vgg16":
        return VGG16(num_classes, c)
    import torchvision

    if arch == "resnet18":
        net = torchvision.models.resnet18(num_classes=num_classes)
        net.conv1 = nn.Conv2d(c, 64, 3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
        return net
    if arch == "mobilenet_v2":
        net = torchvision.models.mobilenet_v2(num_classes=num_classes)
        first = net.features[0][0]
        net.features[0][0] = nn.Conv2d(c, first.out_channels, 3, stride=1, padding=1, bias=False)
        return net
    raise ConfigError(f"unknown arch {arch!r}")


@dataclass
class TrainedModel:
    network: nn.Module
    arch: str
    class_count: int
    image_shape: tuple[int, int, int]
    log: list[dict] = field(default_factory=list)
    initial_loss: float | None = None

    def logits(self, images: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
        batch, _ = as_batch(images)
        if tuple(batch.shape[1:]) != tuple(self.image_shape):
            raise ValueError(f"image shape {tuple(batch.shape[1:])} does not match model input "
                             f"{tuple(self.image_shape)}")
        self.network.eval()
        with torch.no_grad():
            return torch.cat([self.network(batch[s:s + batch_size].float())
                              for s in range(0, batch.shape[0], batch_size)])


def predict(model: TrainedModel, images: torch.Tensor):
    """Class indices (argmax of logits, lowest index on ties)."""
    _, single = as_batch(images)
    pred = first_argmax(model.logits(images))
    return int(pred[0]) if single else pred


def _sample_weights(n_clean: int, n_poison: int, balanced: bool) -> torch.Tensor:
    if not balanced or n_poison == 0:
        return torch.ones(n_clean + n_poison)
    total = n_clean + n_poison
    return torch.cat([torch.full((n_clean,), total / n_clean),
                      torch.full((n_poison,), total / n_poison)])


def _eval_loss(net: nn.Module, images: Tensor, labels: Tensor) -> float:
    """Mean unweighted cross-entropy over the whole training set in eval mode."""
    net.eval()
    with torch.no_grad():
        total = sum(float(F.cross_entropy(net(images[s:s + 1024]), labels[s:s + 1024],
                                          reduction="sum"))
                    for s in range(0, images.shape[0], 1024))
    return total / images.shape[0]


def train_victim(clean: Dataset, poison: PoisonSet | None, cfg: VictimConfig) -> TrainedModel:
    """Cross-entropy training on ``D ∪ P`` with seeded per-epoch shuffling.

    With ``cfg.balanced_loss`` each clean term is weighted by ``1/N`` and each
    poison term by ``1/P`` (rescaled so the average weight is about one).
    """
    poison = poison if poison is not None else PoisonSet.empty(clean.image_shape)
    images, labels = mixed_training_set(clean, poison)
    weights = _sample_weights(len(clean), len(poison), cfg.balanced_loss)
    n = images.shape[0]

    torch.manual_seed(cfg.seed)
    net = build_network(cfg.arch, clean.class_count, clean.image_shape)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.lr_drop_epochs),
                                                 gamma=0.1)
    model = TrainedModel(net, cfg.arch, clean.class_count, clean.image_shape)
    model.initial_loss = _eval_loss(net, images, labels)

    for epoch in range(cfg.epochs):
        net.train()
        order = torch.randperm(n, generator=gen)
        total_loss, correct = 0.0, 0
        for idx in torch.split(order, cfg.batch_size):
            out = net(images[idx])
            per = F.cross_entropy(out, labels[idx], reduction="none")
            loss = (per * weights[idx]).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, float(loss))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total_loss += float(per.detach().sum())
            correct += int((out.detach().argmax(1) == labels[idx]).sum())
        sched.step()
        entry = {"epoch": epoch, "loss": total_loss / n, "train_acc": correct / n,
                 "eval_loss": _eval_loss(net, images, labels), "lr": opt.param_groups[0]["lr"]}
        model.log.append(entry)
        log.debug("epoch %d loss %.4f acc %.4f", epoch, entry["loss"], entry["train_acc"])
    net.eval()
    return model


# -- checkpoints ----------------------------------------------------------------------------------


def save_checkpoint(model: TrainedModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.network.state_dict()
    params = b"".join(t.detach().cpu().numpy().astype("<f4").tobytes() for t in state.values())
    arch = model.arch.encode("utf-8")
    meta = json.dumps({"log": model.log, "initial_loss": model.initial_loss}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sII", CKPT_MAGIC, CKPT_VERSION, len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<IIIIQ", model.class_count, *model.image_shape, len(params)))
        fh.write(params)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
    return path


def load_checkpoint(path, arch: str | None = None) -> TrainedModel:
    """Inverse of :func:`save_checkpoint`; ``arch`` guards against cross-arch loads."""
    raw = Path(path).read_bytes()

    def take(fmt_or_n, off):
        size = struct.calcsize(fmt_or_n) if isinstance(fmt_or_n, str) else fmt_or_n
        if off + size > len(raw):
            raise CheckpointError(f"checkpoint {path} is truncated")
        if isinstance(fmt_or_n, str):
            return struct.unpack_from(fmt_or_n, raw, off), off + size
        return raw[off:off + size], off + size

    (magic, version, arch_len), off = take("<8sII", 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a poisonlab checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected "
                              f"{CKPT_VERSION})")
    arch_bytes, off = take(arch_len, off)
    stored_arch = arch_bytes.decode("utf-8")
    if arch is not None and arch != stored_arch:
        raise CheckpointError(f"arch mismatch: checkpoint holds {stored_arch!r}, asked for "
                              f"{arch!r}")
    (c, ch, h, w, nbytes), off = take("<IIIIQ", off)
    params, off = take(nbytes, off)
    (meta_len,), off = take("<I", off)
    meta_raw, off = take(meta_len, off)
    if off != len(raw):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")

    net = build_network(stored_arch, c, (ch, h, w))
    state = net.state_dict()
    expected = sum(t.numel() for t in state.values()) * 4
    if expected != nbytes:
        raise CheckpointError(f"parameter payload is {nbytes} bytes, {stored_arch} needs "
                              f"{expected}")
    flat = np.frombuffer(params, dtype="<f4")
    pos, new_state = 0, {}
    for key, t in state.items():
        chunk = flat[pos:pos + t.numel()].reshape(t.shape)
        new_state[key] = torch.from_numpy(chunk.astype(np.float32)).to(t.dtype)
        pos += t.numel()
    net.load_state_dict(new_state)
    net.eval()
    meta = json.loads(meta_raw.decode("utf-8"))
    return TrainedModel(net, stored_arch, c, (ch, h, w), meta.get("log", []),
                        meta.get("initial_loss"))
