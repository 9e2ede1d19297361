"""Attack effectiveness (ASR, BA) and stealth (PSNR, SSIM) metrics.

PSNR and SSIM work on the ``[0, 255]`` scale.  SSIM is the global form: one
mean/variance/covariance per channel over the whole image, averaged across
channels, with ``C1 = (0.01*255)^2``, ``C2 = (0.03*255)^2`` and ``C3 = C2/2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch

from .data import Dataset
from .imaging import as_batch
from .triggers import Trigger, apply_trigger
from .victim import TrainedModel, predict

SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2
SSIM_C3 = SSIM_C2 / 2
INF_SENTINEL = "inf"


def benign_accuracy(model: TrainedModel, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("benign accuracy needs a nonempty test set")
    pred = predict(model, test.images)
    return float((pred == test.labels).double().mean())


def attack_success_rate(model: TrainedModel, test: Dataset, trigger: Trigger, k: int) -> float:
    """Fraction of triggered non-``k`` test images classified as ``k``."""
    return asr_counts(model, test, trigger, k)[0]


def asr_counts(model, test: Dataset, trigger: Trigger, k: int) -> tuple[float, int, int]:
    """``(asr, m, m_prime)`` where ``m_prime`` counts the non-target test images."""
    mask = test.labels != k
    m_prime = int(mask.sum())
    if m_prime == 0:
        raise ValueError(f"test set has no examples outside target class {k}")
    triggered = apply_trigger(test.images[mask], trigger)
    hits = int((predict(model, triggered) == k).sum())
    return hits / m_prime, len(test), m_prime


def _as_255(x: torch.Tensor) -> torch.Tensor:
    return x.detach().to(torch.float64) * 255.0


def psnr(clean: torch.Tensor, poisoned: torch.Tensor) -> float | torch.Tensor:
    """Per-image PSNR in dB; ``inf`` for identical images.

    A batch input returns one value per image.
    """
    if clean.shape != poisoned.shape:
        raise ValueError(f"shape mismatch: {tuple(clean.shape)} vs {tuple(poisoned.shape)}")
    a, single = as_batch(_as_255(clean))
    b, _ = as_batch(_as_255(poisoned))
    mse = ((a - b) ** 2).flatten(1).mean(1)
    out = 10.0 * torch.log10(255.0 ** 2 / mse)
    return float(out[0]) if single else out


def ssim(clean: torch.Tensor, poisoned: torch.Tensor) -> float | torch.Tensor:
    """Global SSIM, luminance * contrast * structure, averaged over channels."""
    if clean.shape != poisoned.shape:
        raise ValueError(f"shape mismatch: {tuple(clean.shape)} vs {tuple(poisoned.shape)}")
    f, single = as_batch(_as_255(clean))
    g, _ = as_batch(_as_255(poisoned))
    f = f.flatten(2)
    g = g.flatten(2)
    mu_f, mu_g = f.mean(-1), g.mean(-1)
    var_f = ((f - mu_f[..., None]) ** 2).mean(-1)
    var_g = ((g - mu_g[..., None]) ** 2).mean(-1)
    cov = ((f - mu_f[..., None]) * (g - mu_g[..., None])).mean(-1)
    sd_f, sd_g = var_f.sqrt(), var_g.sqrt()
    lum = (2 * mu_f * mu_g + SSIM_C1) / (mu_f ** 2 + mu_g ** 2 + SSIM_C1)
    con = (2 * sd_f * sd_g + SSIM_C2) / (var_f + var_g + SSIM_C2)
    struc = (cov + SSIM_C3) / (sd_f * sd_g + SSIM_C3)
    out = (lum * con * struc).mean(-1)
    return float(out[0]) if single else out


def mean_psnr(clean: torch.Tensor, poisoned: torch.Tensor) -> tuple[float, int]:
    """Dataset PSNR over finite per-image values, plus the count of identical pairs."""
    vals = psnr(clean, poisoned)
    vals = vals if torch.is_tensor(vals) else torch.tensor([vals])
    finite = torch.isfinite(vals)
    n_inf = int((~finite).sum())
    if not finite.any():
        return math.inf, n_inf
    return float(vals[finite].mean()), n_inf


def mean_ssim(clean: torch.Tensor, poisoned: torch.Tensor) -> float:
    vals = ssim(clean, poisoned)
    return float(vals.mean()) if torch.is_tensor(vals) else vals


@dataclass
class MetricsReport:
    ba: float
    asr: float
    psnr_mean: float
    ssim_mean: float
    m: int
    m_prime: int
    psnr_inf_count: int = 0
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("ba", "asr", "ssim_mean"):
            v = getattr(self, name)
            if not (-1e-12 <= v <= 1 + 1e-12):
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.m_prime > self.m:
            raise ValueError("m_prime cannot exceed m")

    def to_dict(self) -> dict:
        return {
            "ba": self.ba, "asr": self.asr,
            "psnr_mean_db": INF_SENTINEL if math.isinf(self.psnr_mean) else self.psnr_mean,
            "psnr_inf_count": self.psnr_inf_count, "ssim_mean": self.ssim_mean,
            "m": self.m, "m_prime": self.m_prime, "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        p = d["psnr_mean_db"]
        return cls(d["ba"], d["asr"], math.inf if p == INF_SENTINEL else float(p),
                   d["ssim_mean"], d["m"], d["m_prime"], d.get("psnr_inf_count", 0),
                   list(d.get("seeds", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(model: TrainedModel, test: Dataset, trigger: Trigger, k: int,
             seeds=()) -> MetricsReport:
    """BA on clean test images, ASR on triggered non-``k`` images, stealth on all test images."""
    ba = benign_accuracy(model, test)
    asr, m, m_prime = asr_counts(model, test, trigger, k)
    poisoned = apply_trigger(test.images, trigger)
    p, n_inf = mean_psnr(test.images, poisoned)
    s = mean_ssim(test.images, poisoned)
    return MetricsReport(ba, asr, p, s, m, m_prime, n_inf, list(seeds))

