"""Datasets, attacker-accessible subsets and poison-set assembly.

Images are float tensors in ``[0, 1]`` laid out channel-first.  A
:class:`Dataset` stores them as one stacked ``N x C x H x W`` tensor and hands
out :class:`LabeledExample` views on indexing.

Two on-disk layouts are understood by :func:`load_dataset`:

``folder``
    ``root/<class_name>/<image>.png``.  Class indices follow the sorted class
    directory names.
``packed``
    A little-endian binary file: 8-byte magic ``PLPACK01``, ``u32`` count,
    ``u32`` channels, ``u32`` height, ``u32`` width, ``count*C*H*W`` float32
    pixels, then ``count`` ``u32`` labels.  Class names are read from an
    optional ``<file>.classes.txt`` sidecar (one name per line).
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np
import torch

from .errors import DataError, ScenarioError
from .imaging import match_channels, pil_to_tensor, resize_bilinear, tensor_to_pil

if TYPE_CHECKING:
    from .triggers import Trigger

IN_DOMAIN = "in_domain"
EXTERNAL = "external"
SPLITS = ("train", "test", "external_pool")

PACK_MAGIC = b"PLPACK01"
_PACK_HEADER = struct.Struct("<8sIIII")
MANIFEST_FIELDS = ("index", "source_id", "original_label", "assigned_label", "trigger_id",
                   "cfe_applied")


@dataclass(frozen=True)
class LabeledExample:
    image: torch.Tensor
    label: int
    source_id: str
    domain_tag: str = IN_DOMAIN


def _check_pixels(images: torch.Tensor, what: str) -> None:
    if images.dim() != 4:
        raise DataError(f"{what}: expected N x C x H x W images, got {tuple(images.shape)}")
    if images.numel() == 0:
        return
    if not torch.isfinite(images).all():
        raise DataError(f"{what}: non-finite pixel values")
    if images.min() < 0 or images.max() > 1:
        raise DataError(f"{what}: pixel values outside [0, 1]")


@dataclass(frozen=True)
class Dataset:
    images: torch.Tensor
    labels: torch.Tensor
    source_ids: tuple[str, ...]
    class_names: tuple[str, ...]
    split: str = "train"
    domain_tags: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "source_ids", tuple(self.source_ids))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        labels = torch.as_tensor(self.labels, dtype=torch.int64)
        object.__setattr__(self, "labels", labels)
        if self.domain_tags is None:
            default = EXTERNAL if self.split == "external_pool" else IN_DOMAIN
            object.__setattr__(self, "domain_tags", (default,) * len(self.source_ids))
        else:
            object.__setattr__(self, "domain_tags", tuple(self.domain_tags))

        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if not self.class_names:
            raise DataError("class_names must be nonempty")
        if any(not name for name in self.class_names):
            raise DataError("empty class name")
        n = self.images.shape[0] if self.images.dim() == 4 else -1
        if not (n == labels.shape[0] == len(self.source_ids) == len(self.domain_tags)):
            raise DataError("images, labels, source_ids and domain_tags differ in length")
        _check_pixels(self.images, "dataset")
        if n and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise DataError(f"label out of range for {len(self.class_names)} classes")
        if len(set(self.source_ids)) != len(self.source_ids):
            raise DataError("source_id values must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.source_ids)

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]), self.source_ids[i],
                              self.domain_tags[i])

    def __iter__(self) -> Iterator[LabeledExample]:
        return (self[i] for i in range(len(self)))

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], split: str | None = None) -> "Dataset":
        idx = torch.as_tensor(list(indices), dtype=torch.int64)
        return Dataset(self.images[idx], self.labels[idx],
                       tuple(self.source_ids[i] for i in idx.tolist()), self.class_names,
                       split or self.split, tuple(self.domain_tags[i] for i in idx.tolist()))


def load_dataset(path, format: str = "folder", split: str = "train",
                 class_names: Sequence[str] | None = None) -> Dataset:
    """Read a dataset from disk.

    Examples are ordered lexicographically by ``source_id``.  Corrupt images and
    out-of-range labels raise :class:`DataError`; nothing is skipped silently.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset path does not exist: {path}")
    if format == "folder":
        return _load_folder(path, split)
    if format == "packed":
        return _load_packed(path, split, class_names)
    raise DataError(f"unknown dataset format {format!r} (expected 'folder' or 'packed')")


def _load_folder(root: Path, split: str) -> Dataset:
    from PIL import Image, UnidentifiedImageError

    if not root.is_dir():
        raise DataError(f"folder layout expects a directory: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    records = []
    for label, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if f.is_file() and f.suffix.lower() == ".png":
                records.append((f"{cdir.name}/{f.name}", label, f))
    if not records:
        raise DataError(f"no examples found under {root}")
    records.sort(key=lambda r: r[0])

    images = []
    for sid, _, f in records:
        try:
            with Image.open(f) as img:
                img.load()
                images.append(pil_to_tensor(img, "RGB"))
        except (UnidentifiedImageError, OSError) as exc:
            raise DataError(f"malformed image {f}: {exc}") from exc
    shapes = {tuple(t.shape) for t in images}
    if len(shapes) != 1:
        raise DataError(f"inconsistent image shapes in {root}: {sorted(shapes)}")
    return Dataset(torch.stack(images), torch.tensor([r[1] for r in records]),
                   tuple(r[0] for r in records), tuple(d.name for d in class_dirs), split)


def _load_packed(path: Path, split: str, class_names: Sequence[str] | None) -> Dataset:
    raw = path.read_bytes()
    if len(raw) < _PACK_HEADER.size:
        raise DataError(f"packed file too short: {path}")
    magic, count, c, h, w = _PACK_HEADER.unpack_from(raw)
    if magic != PACK_MAGIC:
        raise DataError(f"bad magic in packed file {path}")
    if count == 0:
        raise DataError(f"no examples found in {path}")
    n_pix = count * c * h * w
    expected = _PACK_HEADER.size + 4 * n_pix + 4 * count
    if len(raw) != expected:
        raise DataError(f"packed file {path} has {len(raw)} bytes, header implies {expected}")
    pixels = np.frombuffer(raw, dtype="<f4", count=n_pix, offset=_PACK_HEADER.size)
    labels = np.frombuffer(raw, dtype="<u4", count=count, offset=_PACK_HEADER.size + 4 * n_pix)

    if class_names is None:
        sidecar = path.with_name(path.name + ".classes.txt")
        if sidecar.exists():
            class_names = read_class_names(sidecar)
        else:
            class_names = [str(i) for i in range(int(labels.max()) + 1)]
    if int(labels.max()) >= len(class_names):
        raise DataError(f"label {int(labels.max())} out of range for {len(class_names)} classes")
    images = torch.from_numpy(pixels.astype(np.float32).reshape(count, c, h, w))
    width = max(6, len(str(count - 1)))
    ids = tuple(f"{path.stem}:{i:0{width}d}" for i in range(count))
    return Dataset(images, torch.from_numpy(labels.astype(np.int64)), ids, tuple(class_names),
                   split)


def read_class_names(path) -> list[str]:
    names = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if not names:
        raise DataError(f"no class names in {path}")
    return names


def save_packed(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(_PACK_HEADER.pack(PACK_MAGIC, n, c, h, w))
        fh.write(dataset.images.detach().cpu().numpy().astype("<f4").tobytes())
        fh.write(dataset.labels.numpy().astype("<u4").tobytes())
    path.with_name(path.name + ".classes.txt").write_text(
        "\n".join(dataset.class_names) + "\n", encoding="utf-8")
    return path


def save_folder(dataset: Dataset, root) -> Path:
    """Write PNGs in the folder layout (pixels are quantised to 8 bits)."""
    root = Path(root)
    for name in dataset.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, ex in enumerate(dataset):
        tensor_to_pil(ex.image).save(root / dataset.class_names[ex.label] / f"{i:06d}.png")
    return root


@dataclass(frozen=True)
class ScenarioSpec:
    """Attacker constraint: how many, which classes, and from which domain.

    ``domain_rate`` is the fraction of the poison base drawn from the victim's
    own training distribution; ``0`` means every base image is external.
    """

    poison_count: int
    class_subset: frozenset[int] | None = None
    domain_rate: float = 1.0
    target_label: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.class_subset is not None:
            object.__setattr__(self, "class_subset", frozenset(int(c) for c in self.class_subset))
            if not self.class_subset:
                raise ScenarioError("class_subset must be nonempty when given")
        if self.poison_count < 1:
            raise ScenarioError("poison_count must be positive")
        if not 0.0 <= self.domain_rate <= 1.0:
            raise ScenarioError("domain_rate must lie in [0, 1]")

    @property
    def in_domain_count(self) -> int:
        return int(math.floor(self.poison_count * self.domain_rate + 0.5))

    @property
    def kind(self) -> str:
        if self.domain_rate < 1.0:
            return "domain_constrained"
        if self.class_subset is None:
            return "number_constrained"
        if self.class_subset == {self.target_label}:
            return "clean_label_single_class"
        if len(self.class_subset) == 1:
            return "dirty_label_single_class"
        return "class_constrained"


@dataclass(frozen=True)
class AccessibleSet:
    images: torch.Tensor
    labels: torch.Tensor
    source_ids: tuple[str, ...]
    domain_tags: tuple[str, ...]
    spec: ScenarioSpec

    def __len__(self) -> int:
        return len(self.source_ids)

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]), self.source_ids[i],
                              self.domain_tags[i])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images.detach().cpu().numpy(), dtype="<f4").tobytes())
        h.update("\n".join(self.source_ids).encode())
        h.update("\n".join(self.domain_tags).encode())
        return h.hexdigest()


def _filter_pool(ds: Dataset, class_subset) -> list[int]:
    if class_subset is None:
        return list(range(len(ds)))
    keep = set(class_subset)
    return [i for i, y in enumerate(ds.labels.tolist()) if y in keep]


def sample_accessible_set(train: Dataset, external: Dataset | None,
                          spec: ScenarioSpec) -> AccessibleSet:
    """Draw the attacker's accessible base set ``D'`` for ``spec``.

    ``round(P * domain_rate)`` examples come from ``train`` and the rest from
    ``external`` (resized to the train resolution).  Both pools are restricted to
    ``spec.class_subset`` when it is set.  Sampling is without replacement and
    fully determined by ``spec.seed``.
    """
    if spec.class_subset is not None:
        bad = [c for c in spec.class_subset if not 0 <= c < train.class_count]
        if bad:
            raise ScenarioError(f"class_subset contains unknown classes {sorted(bad)}")
    n_in = spec.in_domain_count
    n_ext = spec.poison_count - n_in
    rng = np.random.default_rng(spec.seed)

    parts = []
    pool = _filter_pool(train, spec.class_subset)
    if n_in > len(pool):
        raise ScenarioError(f"insufficient pool: need {n_in} in-domain examples, have {len(pool)}")
    if n_in:
        pick = np.sort(rng.choice(len(pool), size=n_in, replace=False))
        parts.append((train, [pool[i] for i in pick], IN_DOMAIN))
    if n_ext:
        if external is None:
            raise ScenarioError("domain_rate < 1 requires an external pool")
        ext_pool = _filter_pool(external, spec.class_subset)
        if n_ext > len(ext_pool):
            raise ScenarioError(
                f"insufficient pool: need {n_ext} external examples, have {len(ext_pool)}")
        pick = np.sort(rng.choice(len(ext_pool), size=n_ext, replace=False))
        parts.append((external, [ext_pool[i] for i in pick], EXTERNAL))

    c, h, w = train.image_shape
    images, labels, ids, tags = [], [], [], []
    for ds, idx, tag in parts:
        imgs = ds.images[torch.as_tensor(idx, dtype=torch.int64)]
        if imgs.shape[1:] != train.images.shape[1:]:
            imgs = resize_bilinear(match_channels(imgs, c), (h, w)).clamp(0, 1)
        images.append(imgs)
        labels.append(ds.labels[torch.as_tensor(idx, dtype=torch.int64)])
        ids.extend(ds.source_ids[i] for i in idx)
        tags.extend([tag] * len(idx))
    if len(set(ids)) != len(ids):
        raise ScenarioError("train and external pools share source_id values")
    return AccessibleSet(torch.cat(images), torch.cat(labels), tuple(ids), tuple(tags), spec)


@dataclass(frozen=True)
class PoisonSet:
    images: torch.Tensor
    target_label: int
    source_ids: tuple[str, ...]
    original_labels: tuple[int, ...]
    trigger_id: str
    cfe_applied: bool = False

    def __len__(self) -> int:
        return len(self.source_ids)

    @property
    def assigned_labels(self) -> torch.Tensor:
        return torch.full((len(self),), self.target_label, dtype=torch.int64)

    @classmethod
    def empty(cls, image_shape: Sequence[int], target_label: int = 0) -> "PoisonSet":
        return cls(torch.zeros((0, *image_shape)), target_label, (), (), "none", False)

    def manifest_rows(self) -> list[dict]:
        return [
            {"index": i, "source_id": sid, "original_label": orig,
             "assigned_label": self.target_label, "trigger_id": self.trigger_id,
             "cfe_applied": int(self.cfe_applied)}
            for i, (sid, orig) in enumerate(zip(self.source_ids, self.original_labels))
        ]

    def manifest_hash(self) -> str:
        h = hashlib.sha256()
        for row in self.manifest_rows():
            h.update(",".join(str(row[k]) for k in MANIFEST_FIELDS).encode())
            h.update(b"\n")
        h.update(np.ascontiguousarray(self.images.detach().cpu().numpy(), dtype="<f4").tobytes())
        return h.hexdigest()

    def write_manifest(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
            writer.writeheader()
            writer.writerows(self.manifest_rows())
        return path


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise DataError(f"unexpected manifest header in {path}: {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({"index": int(row["index"]), "source_id": row["source_id"],
                         "original_label": int(row["original_label"]),
                         "assigned_label": int(row["assigned_label"]),
                         "trigger_id": row["trigger_id"],
                         "cfe_applied": bool(int(row["cfe_applied"]))})
        return rows


def _noise_tensor(cfe_noise) -> torch.Tensor:
    from .optim import NoiseMap, linf_bound

    if isinstance(cfe_noise, NoiseMap):
        delta = cfe_noise.delta
        if delta.abs().max() > linf_bound(cfe_noise.budget.epsilon, delta.dtype):
            raise DataError("CFE noise exceeds its epsilon budget")
        return delta
    if isinstance(cfe_noise, (list, tuple)):
        return torch.stack([_noise_tensor(n) for n in cfe_noise])
    return torch.as_tensor(cfe_noise)


def assemble_poison_set(base: AccessibleSet, trigger: "Trigger", cfe_noise=None,
                        k: int | None = None) -> PoisonSet:
    """Erase (optionally), stamp the trigger, clamp to ``[0, 1]`` and relabel to ``k``."""
    from .triggers import apply_trigger, trigger_id

    k = base.spec.target_label if k is None else int(k)
    x = base.images
    if cfe_noise is not None:
        noise = _noise_tensor(cfe_noise).to(x.dtype)
        if noise.dim() == 3:
            noise = noise.unsqueeze(0)
        if noise.shape[0] != x.shape[0]:
            raise DataError(f"got {noise.shape[0]} noise maps for {x.shape[0]} base examples")
        if noise.shape[1:] != x.shape[1:]:
            raise DataError(f"noise shape {tuple(noise.shape[1:])} != image shape "
                            f"{tuple(x.shape[1:])}")
        x = (x + noise).clamp(0, 1)
    poisoned = apply_trigger(x, trigger).clamp(0, 1)
    originals = tuple(int(y) if tag == IN_DOMAIN else -1
                      for y, tag in zip(base.labels.tolist(), base.domain_tags))
    return PoisonSet(poisoned.detach().clone(), k, base.source_ids, originals,
                     trigger_id(trigger), cfe_noise is not None)


def mixed_training_set(clean: Dataset, poison: PoisonSet) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenate ``D`` and ``P`` without deduplication (size ``N + P``)."""
    if len(poison) and tuple(poison.images.shape[1:]) != clean.image_shape:
        raise DataError("poison images do not match the clean image shape")
    images = torch.cat([clean.images, poison.images.to(clean.images.dtype)])
    labels = torch.cat([clean.labels, poison.assigned_labels])
    return images, labels
