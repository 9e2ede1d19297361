"""Frozen image/text encoders and the zero-shot scoring head.

Every optimiser in :mod:`poisonlab.optim` talks to an encoder through
:class:`EncoderHandle`.  Three adapters are available from :func:`load_encoder`:

``toy``
    Seeded random linear projection of 8x8 average-pooled pixels for images and
    of hashed character n-gram counts for text.  Needs no files.
``projection``
    Same architecture (optionally with a hidden layer) read from a
    ``.safetensors`` file, e.g. one produced by :func:`save_encoder`.
``clip``
    A Hugging Face CLIP checkpoint directory (``config.json``, weights and
    tokenizer files as written by ``save_pretrained``).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateScoresError, EncoderError
from .imaging import as_batch, first_argmax, resize_bilinear

PROMPT_TEMPLATE = "a photo of a {}"
DEGENERATE_EPS = 1e-8
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
DEFAULT_ADAPTER = "toy"


def _normalize_channels(x: torch.Tensor, mean, std) -> torch.Tensor:
    c = x.shape[1]
    m = torch.tensor(mean[:c] if len(mean) >= c else mean[:1] * c, dtype=x.dtype)
    s = torch.tensor(std[:c] if len(std) >= c else std[:1] * c, dtype=x.dtype)
    return (x - m.view(1, -1, 1, 1)) / s.view(1, -1, 1, 1)


class ProjectionImageTower(nn.Module):
    """resize -> channel-normalise -> average-pool to ``grid`` -> (MLP) -> d."""

    def __init__(self, d: int = 64, input_resolution=(32, 32), grid: int = 8, channels: int = 3,
                 hidden: int = 0):
        super().__init__()
        self.input_resolution = tuple(input_resolution)
        self.grid = grid
        self.channels = channels
        self.hidden = hidden
        n_in = channels * grid * grid
        if hidden:
            self.body = nn.Sequential(nn.Linear(n_in, hidden), nn.Tanh(), nn.Linear(hidden, d))
        else:
            self.body = nn.Sequential(nn.Linear(n_in, d, bias=False))

    @property
    def out_dim(self) -> int:
        return self.body[-1].out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = resize_bilinear(x, self.input_resolution)
        x = _normalize_channels(x, CLIP_MEAN, CLIP_STD)
        x = F.adaptive_avg_pool2d(x, self.grid).flatten(1)
        return self.body(x)


class ConvImageTower(nn.Module):
    """resize -> channel-normalise -> three 3x3 convs -> global average pool -> d."""

    def __init__(self, d: int = 64, input_resolution=(32, 32), channels: int = 3,
                 width: int = 32):
        super().__init__()
        self.input_resolution = tuple(input_resolution)
        self.channels = channels
        self.width = width
        self.body = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(2 * width, d))

    @property
    def out_dim(self) -> int:
        return self.body[-1].out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = resize_bilinear(x, self.input_resolution)
        return self.body(_normalize_channels(x, CLIP_MEAN, CLIP_STD))


def ngram_counts(text: str, buckets: int = 1024, orders=(2, 3, 4)) -> torch.Tensor:
    """Hashed character n-gram counts (crc32, so stable across processes)."""
    padded = f" {text.lower().strip()} "
    counts = torch.zeros(buckets, dtype=torch.float64)
    for n in orders:
        for i in range(len(padded) - n + 1):
            counts[zlib.crc32(padded[i:i + n].encode("utf-8")) % buckets] += 1
    return counts


class NGramTextTower(nn.Module):
    def __init__(self, d: int = 64, buckets: int = 1024):
        super().__init__()
        self.buckets = buckets
        self.proj = nn.Linear(buckets, d, bias=False)

    @property
    def out_dim(self) -> int:
        return self.proj.out_features

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        feats = torch.stack([ngram_counts(t, self.buckets) for t in texts])
        return self.proj(feats.to(self.proj.weight.dtype))


class EncoderHandle:
    """Read-only pair of embedding towers with a common dimension ``d``.

    ``image_embed`` accepts a single ``C x H x W`` image or a batch and is
    differentiable with respect to the pixels.
    """

    def __init__(self, image_tower: nn.Module, text_fn: Callable[[Sequence[str]], torch.Tensor],
                 d: int, input_resolution: tuple[int, int], id: str,
                 text_tower: nn.Module | None = None):
        self.image_tower = image_tower.eval()
        self._text_fn = text_fn
        self.text_tower = text_tower
        self.d = d
        self.input_resolution = tuple(input_resolution)
        self.id = id
        for p in self.image_tower.parameters():
            p.requires_grad_(False)
        if text_tower is not None:
            for p in text_tower.parameters():
                p.requires_grad_(False)

    @property
    def dtype(self) -> torch.dtype:
        for p in self.image_tower.parameters():
            return p.dtype
        return torch.float32

    def image_embed(self, images: torch.Tensor) -> torch.Tensor:
        batch, single = as_batch(images)
        out = self.image_tower(batch.to(self.dtype))
        return out[0] if single else out

    @torch.no_grad()
    def text_embed(self, texts: str | Sequence[str]) -> torch.Tensor:
        if isinstance(texts, str):
            return self._text_fn([texts])[0]
        return self._text_fn(list(texts))

    def to(self, dtype: torch.dtype) -> "EncoderHandle":
        """Return a copy of the handle in ``dtype`` (used for float64 gradient checks)."""
        import copy

        image_tower = copy.deepcopy(self.image_tower).to(dtype)
        text_tower = copy.deepcopy(self.text_tower).to(dtype) if self.text_tower else None
        if text_tower is not None:
            text_fn = text_tower
        else:
            base_fn = self._text_fn
            text_fn = lambda texts: base_fn(texts).to(dtype)  # noqa: E731
        return EncoderHandle(image_tower, text_fn, self.d, self.input_resolution, self.id,
                             text_tower)

    def __repr__(self) -> str:
        return f"EncoderHandle(id={self.id!r}, d={self.d}, input_resolution={self.input_resolution})"


@dataclass(frozen=True)
class PromptSet:
    class_names: tuple[str, ...]
    prompts: tuple[str, ...]
    embeddings: torch.Tensor
    encoder_id: str

    def __len__(self) -> int:
        return len(self.prompts)


def build_prompts(class_names: Sequence[str], encoder: EncoderHandle) -> PromptSet:
    """Render ``"a photo of a {name}"`` per class and cache the text embeddings."""
    names = tuple(class_names)
    if len(names) < 2:
        raise EncoderError("need >=2 classes for zero-shot scoring")
    if any(not str(n).strip() for n in names):
        raise EncoderError("empty class name")
    prompts = tuple(PROMPT_TEMPLATE.format(n) for n in names)
    emb = encoder.text_embed(prompts).detach().clone()
    return PromptSet(names, prompts, emb, encoder.id)


def cosine_similarities(encoder: EncoderHandle, prompts: PromptSet,
                        images: torch.Tensor) -> torch.Tensor:
    """Cosine between each image embedding and each prompt embedding, ``(..., C)``."""
    img = F.normalize(encoder.image_embed(images), dim=-1)
    txt = F.normalize(prompts.embeddings.to(img.dtype), dim=-1)
    return img @ txt.T


def scores_from_cosines(cos: torch.Tensor, mode: str = "linear",
                        logit_scale: float = 100.0) -> torch.Tensor:
    """Turn prompt cosines into a score vector that sums to one.

    ``linear`` divides every cosine by the sum of all of them; ``softmax`` is the
    opt-in variant that stays positive when cosines are negative.
    """
    if mode == "softmax":
        return torch.softmax(logit_scale * cos, dim=-1)
    if mode != "linear":
        raise EncoderError(f"unknown score mode {mode!r}")
    denom = cos.sum(dim=-1, keepdim=True)
    if (denom.abs() < DEGENERATE_EPS).any():
        raise DegenerateScoresError("sum of prompt cosines is ~0; scores undefined")
    return cos / denom


def safe_scores(cos: torch.Tensor, mode: str = "linear",
                logit_scale: float = 100.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Like :func:`scores_from_cosines` for batches, returning a degenerate-row mask
    instead of raising.  Masked rows carry meaningless but finite scores."""
    if mode == "softmax":
        return torch.softmax(logit_scale * cos, dim=-1), torch.zeros(cos.shape[:-1], dtype=torch.bool)
    denom = cos.sum(dim=-1, keepdim=True)
    bad = denom.abs() < DEGENERATE_EPS
    return cos / torch.where(bad, torch.ones_like(denom), denom), bad.squeeze(-1)


def zero_shot_scores(encoder: EncoderHandle, prompts: PromptSet, image: torch.Tensor,
                     mode: str = "linear") -> torch.Tensor:
    return scores_from_cosines(cosine_similarities(encoder, prompts, image), mode)


def classify_from_cosines(cos: torch.Tensor) -> torch.Tensor:
    return first_argmax(cos)


def zero_shot_classify(encoder: EncoderHandle, prompts: PromptSet, image: torch.Tensor):
    """Argmax over raw cosine similarity, lowest index on ties."""
    with torch.no_grad():
        pred = classify_from_cosines(cosine_similarities(encoder, prompts, image))
    return int(pred) if pred.dim() == 0 else pred


# -- loading -----------------------------------------------------------------------------------


def toy_encoder(seed: int = 7, d: int = 64, input_resolution=(32, 32), grid: int = 8,
                channels: int = 3, buckets: int = 1024) -> EncoderHandle:
    gen = torch.Generator().manual_seed(seed)
    image_tower = ProjectionImageTower(d, input_resolution, grid, channels)
    text_tower = NGramTextTower(d, buckets)
    with torch.no_grad():
        w = image_tower.body[0].weight
        w.copy_(torch.randn(w.shape, generator=gen) / (w.shape[1] ** 0.5))
        t = text_tower.proj.weight
        t.copy_(torch.randn(t.shape, generator=gen) / (t.shape[1] ** 0.5))
    return EncoderHandle(image_tower, text_tower, d, input_resolution, f"toy-s{seed}-d{d}",
                         text_tower)


def save_encoder(encoder: EncoderHandle, path) -> Path:
    """Write a projection- or conv-tower encoder as one ``.safetensors`` file."""
    from safetensors.torch import save_file

    tower = encoder.image_tower
    if not isinstance(tower, (ProjectionImageTower, ConvImageTower)) or not isinstance(
            encoder.text_tower, NGramTextTower):
        raise EncoderError("only projection or conv encoders can be saved with save_encoder")
    tensors = {f"image.{k}": v.detach().float().contiguous() for k, v in tower.state_dict().items()}
    tensors.update({f"text.{k}": v.detach().float().contiguous()
                    for k, v in encoder.text_tower.state_dict().items()})
    meta = {"adapter": "projection", "id": encoder.id, "channels": str(tower.channels),
            "input_resolution": json.dumps(list(tower.input_resolution)),
            "buckets": str(encoder.text_tower.buckets)}
    if isinstance(tower, ConvImageTower):
        meta.update(tower="conv", width=str(tower.width))
    else:
        meta.update(tower="projection", grid=str(tower.grid), hidden=str(tower.hidden))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata=meta)
    return path


def _load_projection(path: Path) -> EncoderHandle:
    from safetensors import SafetensorError, safe_open

    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
            tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    except (SafetensorError, OSError, ValueError) as exc:
        raise EncoderError(f"unreadable encoder weights {path}: {exc}") from exc
    kind = meta.get("tower", "projection")
    try:
        channels = int(meta["channels"])
        res = tuple(json.loads(meta["input_resolution"]))
        buckets = int(meta["buckets"])
        if kind == "conv":
            width = int(meta["width"])
        else:
            grid, hidden = int(meta["grid"]), int(meta["hidden"])
    except (KeyError, ValueError) as exc:
        raise EncoderError(f"encoder metadata incomplete in {path}") from exc
    img_state = {k[len("image."):]: v for k, v in tensors.items() if k.startswith("image.")}
    txt_state = {k[len("text."):]: v for k, v in tensors.items() if k.startswith("text.")}
    if "proj.weight" not in txt_state:
        raise EncoderError(f"text tower missing from {path}")
    last = max((k for k in img_state if k.endswith("weight")), key=lambda k: int(k.split(".")[1]))
    d_img = img_state[last].shape[0]
    d_txt = txt_state["proj.weight"].shape[0]
    if d_img != d_txt:
        raise EncoderError(f"dimension mismatch: image tower d={d_img}, text tower d={d_txt}")
    if kind == "conv":
        image_tower = ConvImageTower(d_img, res, channels, width)
    else:
        image_tower = ProjectionImageTower(d_img, res, grid, channels, hidden)
    text_tower = NGramTextTower(d_txt, buckets)
    try:
        image_tower.load_state_dict(img_state)
        text_tower.load_state_dict(txt_state)
    except RuntimeError as exc:
        raise EncoderError(f"weights in {path} do not match their metadata: {exc}") from exc
    return EncoderHandle(image_tower, text_tower, d_img, res, meta.get("id", path.stem),
                         text_tower)


class _ClipImageTower(nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model
        size = model.config.vision_config.image_size
        self.input_resolution = (size, size)

    def forward(self, x):
        x = resize_bilinear(x, self.input_resolution)
        x = _normalize_channels(x, CLIP_MEAN, CLIP_STD)
        out = self.model.get_image_features(pixel_values=x)
        return out if torch.is_tensor(out) else out.pooler_output


def _load_clip(path: Path) -> EncoderHandle:
    try:
        from transformers import AutoTokenizer, CLIPModel
    except ImportError as exc:  # pragma: no cover - transformers is a declared dependency
        raise EncoderError("the clip adapter needs the transformers package") from exc
    try:
        model = CLIPModel.from_pretrained(str(path))
        tokenizer = AutoTokenizer.from_pretrained(str(path))
    except (OSError, ValueError) as exc:
        raise EncoderError(f"unreadable CLIP checkpoint {path}: {exc}") from exc
    model.eval()
    d_img = model.visual_projection.out_features
    d_txt = model.text_projection.out_features
    if d_img != d_txt:
        raise EncoderError(f"dimension mismatch: image tower d={d_img}, text tower d={d_txt}")
    image_tower = _ClipImageTower(model)

    def text_fn(texts):
        tokens = tokenizer(list(texts), padding=True, return_tensors="pt")
        with torch.no_grad():
            out = model.get_text_features(**tokens)
        out = out if torch.is_tensor(out) else out.pooler_output
        return out.to(image_tower.model.dtype)

    return EncoderHandle(image_tower, text_fn, d_img, image_tower.input_resolution,
                         f"clip:{path.name}")


def load_encoder(weights_path=None, adapter_id: str = DEFAULT_ADAPTER, seed: int = 7,
                 d: int = 64) -> EncoderHandle:
    """Load an encoder; ``adapter_id='toy'`` needs no weights file."""
    if adapter_id == "toy":
        return toy_encoder(seed=seed, d=d)
    if weights_path is None:
        raise EncoderError(f"adapter {adapter_id!r} needs a weights path")
    path = Path(weights_path)
    if not path.exists():
        raise EncoderError(f"unreadable weights: {path} does not exist")
    if adapter_id == "projection":
        return _load_projection(path)
    if adapter_id == "clip":
        return _load_clip(path)
    raise EncoderError(f"unknown adapter {adapter_id!r}")
