"""Projected signed-gradient optimisation of bounded perturbations.

All optimisers share the same step (:func:`pgd_step`) and return the iterate with
the lowest objective seen, so the result is never worse than the starting point.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import EncoderHandle, PromptSet, cosine_similarities, safe_scores, scores_from_cosines
from .errors import OptimizationError
from .imaging import as_batch

log = logging.getLogger(__name__)

KINDS = ("cfe_per_sample", "uap_universal", "cfa_universal")
INITS = ("zeros", "uniform_random")
NOISE_MAGIC = b"PLNOISE1"
_NOISE_HEADER = struct.Struct("<8sIddII")
CONTRASTIVE_CLAMP = 1e-6
_CHUNK = 1024


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 50
    norm: str = "linf"
    init: str = "zeros"
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.alpha < 0 or self.steps < 0:
            raise ValueError("epsilon, alpha and steps must be non-negative")
        if self.norm != "linf":
            raise ValueError(f"unsupported norm {self.norm!r}; only 'linf' is implemented")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")


def linf_bound(epsilon: float, dtype: torch.dtype = torch.float32) -> float:
    """Largest ``dtype`` value that does not exceed ``epsilon``.

    Clamping to this (instead of ``dtype(epsilon)``, which may round up) keeps
    ``|delta| <= epsilon`` true in exact arithmetic.
    """
    b = torch.tensor(epsilon, dtype=dtype)
    if b.item() > epsilon:
        b = torch.nextafter(b, torch.zeros((), dtype=dtype))
    return b.item()


@dataclass(frozen=True)
class NoiseMap:
    delta: torch.Tensor
    budget: PerturbationBudget
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.delta.numel() and self.delta.abs().max().item() > linf_bound(
                self.budget.epsilon, self.delta.dtype):
            raise ValueError("noise exceeds its epsilon budget")

    @property
    def linf(self) -> float:
        return self.delta.abs().max().item() if self.delta.numel() else 0.0

    def __getitem__(self, i: int) -> "NoiseMap":
        return NoiseMap(self.delta[i], self.budget, self.kind)

    def __len__(self) -> int:
        return self.delta.shape[0]


def project_linf(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    bound = linf_bound(epsilon, delta.dtype)
    return delta.clamp(-bound, bound)


def pgd_step(delta: torch.Tensor, gradient: torch.Tensor,
             budget: PerturbationBudget) -> torch.Tensor:
    """One descent step ``proj(delta - alpha * sign(grad))``; ``sign(0) == 0``."""
    if delta.shape != gradient.shape:
        raise ValueError(f"shape mismatch: delta {tuple(delta.shape)} vs gradient "
                         f"{tuple(gradient.shape)}")
    if not torch.isfinite(gradient).all():
        bad = (~torch.isfinite(gradient)).sum().item()
        raise OptimizationError(f"non-finite gradient ({bad} entries); aborting PGD")
    return project_linf(delta - budget.alpha * torch.sign(gradient), budget.epsilon)


def init_delta(shape, budget: PerturbationBudget, dtype=torch.float32) -> torch.Tensor:
    if budget.init == "zeros" or budget.epsilon == 0:
        return torch.zeros(shape, dtype=dtype)
    gen = torch.Generator().manual_seed(budget.seed)
    bound = linf_bound(budget.epsilon, dtype)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).to(dtype) * bound


def _grad(loss: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """d loss / d delta; a loss that does not depend on ``delta`` has zero gradient."""
    if not loss.requires_grad:
        return torch.zeros_like(delta)
    (grad,) = torch.autograd.grad(loss, delta, allow_unused=True)
    return torch.zeros_like(delta) if grad is None else grad


def pgd_minimize(loss_fn, delta0: torch.Tensor, budget: PerturbationBudget):
    """Minimise independent per-row losses by PGD with best-iterate tracking.

    ``loss_fn(delta)`` must return one loss per leading index of ``delta``
    (``+inf`` marks an unusable iterate).  Returns ``(best_delta, best_loss)``.
    """
    delta = project_linf(delta0.clone(), budget.epsilon)
    best = delta.clone()
    best_loss = torch.full((delta.shape[0],), float("inf"), dtype=torch.float64)
    for t in range(budget.steps + 1):
        d = delta.detach().requires_grad_(t < budget.steps)
        losses = loss_fn(d)
        vals = losses.detach().to(torch.float64)
        better = vals < best_loss
        if better.any():
            best[better] = d.detach()[better]
            best_loss = torch.where(better, vals, best_loss)
        if t == budget.steps:
            break
        delta = pgd_step(d.detach(), _grad(losses.sum(), d), budget)
    return best, best_loss


# -- zero-shot losses ----------------------------------------------------------------------------


def unbiased_target(c: int, dtype=torch.float32) -> torch.Tensor:
    return torch.full((c,), 1.0 / c, dtype=dtype)


def _target_losses(encoder, prompts, images, target, loss="mse", score_mode="linear"):
    """Per-image loss of zero-shot scores against ``target``; ``inf`` where degenerate."""
    cos = cosine_similarities(encoder, prompts, images)
    if loss == "ce":
        logp = torch.log_softmax(100.0 * cos, dim=-1)
        return -(target.to(cos.dtype) * logp).sum(-1)
    if loss != "mse":
        raise ValueError(f"unknown loss {loss!r}")
    scores, bad = safe_scores(cos, score_mode)
    out = ((scores - target.to(cos.dtype)) ** 2).sum(-1)
    return torch.where(bad, torch.full_like(out, float("inf")), out)


def cfe_loss(encoder: EncoderHandle, prompts: PromptSet, image: torch.Tensor,
             delta: torch.Tensor, score_mode: str = "linear") -> torch.Tensor:
    """``||scores(image + delta) - y_m||^2``; per image when given a batch."""
    scores = scores_from_cosines(cosine_similarities(encoder, prompts, image + delta), score_mode)
    return ((scores - unbiased_target(len(prompts), scores.dtype)) ** 2).sum(-1)


def _per_sample(encoder, prompts, images, budget, target, loss="mse", score_mode="linear"):
    batch, single = as_batch(images)
    dtype = encoder.dtype
    batch = batch.to(dtype)
    delta0 = init_delta(batch.shape, budget, dtype)
    if budget.epsilon == 0:
        return torch.zeros_like(batch)[0] if single else torch.zeros_like(batch)
    out = []
    for s in range(0, batch.shape[0], _CHUNK):
        x = batch[s:s + _CHUNK]
        best, best_loss = pgd_minimize(
            lambda d: _target_losses(encoder, prompts, x + d, target, loss, score_mode),
            delta0[s:s + _CHUNK], budget)
        if torch.isinf(best_loss).any():
            raise OptimizationError("every PGD iterate had degenerate zero-shot scores")
        out.append(best)
    delta = torch.cat(out)
    return delta[0] if single else delta


def erase_clean_features(encoder: EncoderHandle, prompts: PromptSet, image: torch.Tensor,
                         budget: PerturbationBudget = PerturbationBudget(),
                         score_mode: str = "linear") -> NoiseMap:
    """Per-image noise pushing the zero-shot scores toward the uniform vector.

    Accepts one image or a batch; each image gets its own independent PGD run.
    """
    target = unbiased_target(len(prompts), encoder.dtype)
    delta = _per_sample(encoder, prompts, image, budget, target, "mse", score_mode)
    return NoiseMap(delta.detach(), budget, "cfe_per_sample")


def _images_of(accessible) -> torch.Tensor:
    images = getattr(accessible, "images", accessible)
    if images.dim() == 3:
        images = images.unsqueeze(0)
    return images


def _universal_pgd(batch_loss, objective, shape, n, budget, batch_size, seed, dtype,
                   min_batch=1):
    """Shared outer loop for universal perturbations.

    One outer step is one pass over a freshly shuffled batch schedule, applying
    one signed step per batch.  The full-set ``objective`` decides the best
    iterate.
    """
    delta = init_delta(shape, budget, dtype)
    if budget.epsilon == 0:
        return torch.zeros(shape, dtype=dtype), float(objective(torch.zeros(shape, dtype=dtype)))
    gen = torch.Generator().manual_seed(seed)
    best, best_val = delta.clone(), float("inf")
    for t in range(budget.steps + 1):
        val = float(objective(delta))
        if not np.isfinite(val):
            raise OptimizationError(f"non-finite objective at outer step {t}")
        if val < best_val:
            best, best_val = delta.clone(), val
        if t == budget.steps:
            break
        order = torch.randperm(n, generator=gen)
        batches = list(torch.split(order, batch_size))
        if len(batches) > 1 and len(batches[-1]) < min_batch:
            batches[-2] = torch.cat([batches[-2], batches.pop()])
        for idx in batches:
            d = delta.detach().requires_grad_(True)
            loss = batch_loss(idx, d)
            if not torch.isfinite(loss):
                raise OptimizationError(f"non-finite loss at outer step {t}")
            delta = pgd_step(d.detach(), _grad(loss, d), budget)
    return best, best_val


def optimize_clip_uap(encoder: EncoderHandle, prompts: PromptSet, accessible, k: int,
                      budget: PerturbationBudget = PerturbationBudget(), batch_size: int = 64,
                      loss: str = "mse", score_mode: str = "linear") -> NoiseMap:
    """Universal perturbation that drives zero-shot scores of every image toward class ``k``.

    ``loss='mse'`` compares Eq.-style linear scores with the one-hot vector of
    ``k``; ``loss='ce'`` is softmax cross-entropy on the prompt cosines.
    """
    images = _images_of(accessible).to(encoder.dtype)
    if images.shape[0] == 0:
        raise OptimizationError("accessible set is empty")
    c = len(prompts)
    if not 0 <= k < c:
        raise ValueError(f"target class {k} out of range for {c} prompts")
    target = F.one_hot(torch.tensor(k), c).to(encoder.dtype)

    def losses(x, d):
        out = _target_losses(encoder, prompts, x + d, target, loss, score_mode)
        ok = torch.isfinite(out)
        if not ok.any():
            return out.sum()
        return out[ok].mean()

    @torch.no_grad()
    def objective(d):
        vals = torch.cat([_target_losses(encoder, prompts, images[s:s + _CHUNK] + d, target,
                                         loss, score_mode)
                          for s in range(0, images.shape[0], _CHUNK)])
        ok = torch.isfinite(vals)
        return vals[ok].mean() if ok.any() else float("inf")

    delta, _ = _universal_pgd(lambda idx, d: losses(images[idx], d), objective,
                              images.shape[1:], images.shape[0], budget, batch_size,
                              budget.seed, encoder.dtype)
    return NoiseMap(delta.detach(), budget, "uap_universal")


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def contrastive_loss(v_q: torch.Tensor, v_plus: torch.Tensor, v_minus: torch.Tensor,
                     clamp: float = CONTRASTIVE_CLAMP) -> torch.Tensor:
    """``-cos(q, +) / cos(q, -)`` with the denominator kept at least ``clamp`` in magnitude."""
    for name, v in (("v_q", v_q), ("v_plus", v_plus), ("v_minus", v_minus)):
        if (v.detach().norm(dim=-1) == 0).any():
            raise ValueError(f"{name} contains a zero vector")
    pos = _cos(v_q, v_plus)
    neg = _cos(v_q, v_minus)
    sign = torch.where(neg < 0, -torch.ones_like(neg), torch.ones_like(neg))
    neg = torch.where(neg.abs() < clamp, sign * clamp, neg)
    return -pos / neg


def derangement_partners(order: torch.Tensor) -> torch.Tensor:
    """Partner of ``order[i]`` is ``order[i+1]`` (cyclically); no self-pairs for n >= 2."""
    partners = torch.empty_like(order)
    partners[order] = order.roll(-1)
    return partners


def optimize_clip_cfa(encoder: EncoderHandle, accessible,
                      budget: PerturbationBudget = PerturbationBudget(), pairing_seed: int = 0,
                      batch_size: int = 64) -> NoiseMap:
    """Label-free universal trigger that makes poisoned views agree with each other.

    Each image ``x`` is paired with a different image ``x1`` from its batch;
    the query ``x + delta`` is pulled toward ``x1 + delta`` relative to the clean
    ``x``.  Labels are never read.
    """
    images = _images_of(accessible).to(encoder.dtype)
    n = images.shape[0]
    if n < 2:
        raise OptimizationError("CLIP-CFA needs at least 2 accessible examples")
    with torch.no_grad():
        clean = torch.cat([encoder.image_embed(images[s:s + _CHUNK])
                           for s in range(0, n, _CHUNK)])
    eval_order = torch.randperm(n, generator=torch.Generator().manual_seed(pairing_seed))
    eval_partner = derangement_partners(eval_order)

    def batch_loss(idx, d):
        if len(idx) < 2:
            return torch.zeros((), dtype=d.dtype) * d.sum()
        poisoned = encoder.image_embed(images[idx] + d)
        return contrastive_loss(poisoned, poisoned.roll(-1, dims=0), clean[idx]).mean()

    @torch.no_grad()
    def objective(d):
        total = 0.0
        for s in range(0, n, _CHUNK):
            q_idx = torch.arange(s, min(n, s + _CHUNK))
            q = encoder.image_embed(images[q_idx] + d)
            p = encoder.image_embed(images[eval_partner[q_idx]] + d)
            total += contrastive_loss(q, p, clean[q_idx]).sum().item()
        return total / n

    delta, _ = _universal_pgd(batch_loss, objective, images.shape[1:], n, budget,
                              max(2, batch_size), pairing_seed, encoder.dtype, min_batch=2)
    return NoiseMap(delta.detach(), budget, "cfa_universal")


def optimize_proxy_uap(proxy_model, full_train, k: int,
                       budget: PerturbationBudget = PerturbationBudget(),
                       batch_size: int = 128) -> NoiseMap:
    """Classic UAP baseline against a proxy classifier trained on the full training set.

    This baseline needs the whole training set and a model trained on it, so it
    is outside the data-constrained threat model by construction.
    """
    if not getattr(proxy_model, "log", None):
        raise OptimizationError("proxy model has no training history; train it first")
    log.warning("proxy UAP uses full training-set access (baseline only)")
    net = proxy_model.network.eval()
    images = _images_of(full_train)
    n = images.shape[0]
    dtype = next(net.parameters()).dtype

    def batch_loss(idx, d):
        logits = net((images[idx].to(dtype) + d))
        return F.cross_entropy(logits, torch.full((len(idx),), k, dtype=torch.int64))

    @torch.no_grad()
    def objective(d):
        total = 0.0
        for s in range(0, n, _CHUNK):
            x = images[s:s + _CHUNK].to(dtype) + d
            total += F.cross_entropy(net(x), torch.full((x.shape[0],), k, dtype=torch.int64),
                                     reduction="sum").item()
        return total / n

    for p in net.parameters():
        p.requires_grad_(False)
    try:
        delta, _ = _universal_pgd(batch_loss, objective, images.shape[1:], n, budget, batch_size,
                                  budget.seed, dtype)
    finally:
        for p in net.parameters():
            p.requires_grad_(True)
    return NoiseMap(delta.detach(), budget, "uap_universal")


# -- persistence ----------------------------------------------------------------------------------


def save_noise_map(noise: NoiseMap, path) -> Path:
    """Little-endian layout: magic, u32 kind, f64 epsilon, f64 alpha, u32 steps,
    u32 ndim, ndim x u32 shape, float32 data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shape = tuple(noise.delta.shape)
    b = noise.budget
    with open(path, "wb") as fh:
        fh.write(_NOISE_HEADER.pack(NOISE_MAGIC, KINDS.index(noise.kind), b.epsilon, b.alpha,
                                    b.steps, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(noise.delta.detach().cpu().numpy().astype("<f4").tobytes())
    return path


def load_noise_map(path) -> NoiseMap:
    raw = Path(path).read_bytes()
    if len(raw) < _NOISE_HEADER.size:
        raise ValueError(f"noise map file too short: {path}")
    magic, kind, eps, alpha, steps, ndim = _NOISE_HEADER.unpack_from(raw)
    if magic != NOISE_MAGIC:
        raise ValueError(f"bad noise map magic in {path}")
    if kind >= len(KINDS):
        raise ValueError(f"unknown noise kind tag {kind}")
    off = _NOISE_HEADER.size
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != off + 4 * count:
        raise ValueError(f"noise map {path} is truncated or padded")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
    budget = PerturbationBudget(epsilon=eps, alpha=alpha, steps=steps)
    return NoiseMap(torch.from_numpy(data.astype(np.float32)), budget, KINDS[kind])
