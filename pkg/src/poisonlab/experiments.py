"""Experiment orchestration: one config -> per-seed attack pipeline -> report.

Configs are flat mappings with dotted keys (``scenario.p``, ``trigger.method``,
``budget.epsilon`` ...), usually read from a YAML file.  Fractions such as
``8/255`` are accepted wherever a float is expected.  See :data:`DEFAULTS` for
every key.

Artifacts of a run land in ``<output_dir>/<config-hash>/<seed>/``.  Triggers,
CFE noise and trained victims are also cached under ``<output_dir>/cache`` keyed
by their inputs, so grids and reruns reuse them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import statistics
import tempfile
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

from .data import (Dataset, ScenarioSpec, assemble_poison_set, load_dataset,
                   sample_accessible_set)
from .encoder import build_prompts, load_encoder
from .errors import ConfigError
from .metrics import MetricsReport, evaluate
from .optim import (NoiseMap, PerturbationBudget, erase_clean_features, load_noise_map,
                    optimize_clip_cfa, optimize_clip_uap, optimize_proxy_uap, save_noise_map)
from .triggers import (Additive, load_trigger, make_badnets_trigger, make_blended_trigger,
                       save_trigger)
from .victim import VictimConfig, load_checkpoint, paper_profile, save_checkpoint, train_victim

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("badnets", "blended", "uap", "clip-uap", "clip-cfa")
GRID_AXES = ("poison_rate", "class_count", "domain_rate", "epsilon")

DEFAULTS: dict = {
    "dataset.kind": "desk",  # desk | files
    "dataset.seed": 0,
    "dataset.train": None,
    "dataset.test": None,
    "dataset.external": None,
    "dataset.format": "folder",
    "scenario.p": None,
    "scenario.poison_rate": 0.02,
    "scenario.class_subset": None,
    "scenario.domain_rate": 1.0,
    "scenario.target": 0,
    "trigger.method": "badnets",
    "trigger.patch_size": 2,
    "trigger.lambda": 0.15,
    "trigger.pattern": None,
    "trigger.loss": "mse",
    "trigger.batch_size": 64,
    "budget.epsilon": 8 / 255,
    "budget.alpha": 2 / 255,
    "budget.steps": 50,
    "budget.init": "zeros",
    "cfe.enabled": False,
    "cfe.epsilon": None,
    "score.mode": "linear",
    "encoder.adapter": "desk",  # desk | toy | projection | clip
    "encoder.weights": None,
    "encoder.seed": 0,
    "victim.arch": "small_cnn",
    "victim.epochs": 15,
    "victim.batch_size": 128,
    "victim.lr": 0.05,
    "victim.momentum": 0.9,
    "victim.weight_decay": 5e-4,
    "victim.lr_drop_epochs": [10, 13],
    "victim.balanced_loss": False,
    "paper.dataset": None,
    "profile": "desk",
    "seeds": [0],
    "output_dir": "runs",
}
_NOT_HASHED = ("output_dir",)
_FLOAT_KEYS = ("scenario.poison_rate", "scenario.domain_rate", "trigger.lambda",
               "budget.epsilon", "budget.alpha", "cfe.epsilon", "victim.lr", "victim.momentum",
               "victim.weight_decay")


def parse_number(value):
    """``'8/255'`` -> ``0.0313...``; numbers pass through."""
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"not a number: {value!r}") from exc
    return value


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key not in DEFAULTS:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        flat = _flatten(dict(self.params))
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        merged = {**DEFAULTS, **flat}
        for key in _FLOAT_KEYS:
            if merged[key] is not None:
                merged[key] = float(parse_number(merged[key]))
        if merged["scenario.class_subset"] is not None:
            merged["scenario.class_subset"] = sorted(int(c) for c in merged["scenario.class_subset"])
        merged["seeds"] = [int(s) for s in merged["seeds"]]
        merged["victim.lr_drop_epochs"] = [int(e) for e in merged["victim.lr_drop_epochs"]]
        object.__setattr__(self, "params", merged)
        self.validate()

    def __getitem__(self, key):
        return self.params[key]

    def with_(self, **updates) -> "ExperimentConfig":
        """Copy with dotted-key overrides (pass as ``**{"budget.epsilon": x}``)."""
        return ExperimentConfig({**self.params, **updates})

    def validate(self) -> None:
        p = self.params
        if not p["seeds"]:
            raise ConfigError("seeds must be nonempty")
        if p["trigger.method"] not in METHODS:
            raise ConfigError(f"trigger.method must be one of {METHODS}")
        if p["profile"] not in ("desk", "paper"):
            raise ConfigError("profile must be 'desk' or 'paper'")
        if p["dataset.kind"] not in ("desk", "files"):
            raise ConfigError("dataset.kind must be 'desk' or 'files'")
        if p["dataset.kind"] == "files":
            for key in ("dataset.train", "dataset.test"):
                if not p[key] or not Path(p[key]).exists():
                    raise ConfigError(f"{key} must point to an existing path")
            if p["dataset.external"] and not Path(p["dataset.external"]).exists():
                raise ConfigError("dataset.external does not exist")
            if p["encoder.adapter"] == "desk":
                raise ConfigError("the desk encoder adapter needs dataset.kind=desk")
        if p["encoder.weights"] and not Path(p["encoder.weights"]).exists():
            raise ConfigError("encoder.weights does not exist")
        if p["scenario.p"] is None and p["scenario.poison_rate"] is None:
            raise ConfigError("set scenario.p or scenario.poison_rate")
        if p["profile"] == "paper" and p["paper.dataset"] is None:
            raise ConfigError("the paper profile needs paper.dataset (cifar10/cifar100/imagenet50)")

    def hashed_items(self) -> dict:
        return {k: v for k, v in self.params.items() if k not in _NOT_HASHED}

    def config_hash(self) -> str:
        canonical = json.dumps(self.hashed_items(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def budget(self, for_cfe: bool = False) -> PerturbationBudget:
        eps = self["budget.epsilon"]
        if for_cfe and self["cfe.epsilon"] is not None:
            eps = self["cfe.epsilon"]
        return PerturbationBudget(epsilon=eps, alpha=self["budget.alpha"],
                                  steps=int(self["budget.steps"]), init=self["budget.init"])

    def victim_config(self, seed: int) -> VictimConfig:
        if self["profile"] == "paper":
            return paper_profile(self["victim.arch"], self["paper.dataset"], seed)
        return VictimConfig(arch=self["victim.arch"], epochs=int(self["victim.epochs"]),
                            batch_size=int(self["victim.batch_size"]), lr=self["victim.lr"],
                            momentum=self["victim.momentum"],
                            weight_decay=self["victim.weight_decay"],
                            lr_drop_epochs=tuple(self["victim.lr_drop_epochs"]), seed=seed,
                            balanced_loss=bool(self["victim.balanced_loss"]))

    def poison_count(self, n_train: int) -> int:
        if self["scenario.p"] is not None:
            return int(self["scenario.p"])
        return max(1, int(math.floor(self["scenario.poison_rate"] * n_train + 0.5)))

    def scenario(self, n_train: int, seed: int) -> ScenarioSpec:
        subset = self["scenario.class_subset"]
        return ScenarioSpec(self.poison_count(n_train), frozenset(subset) if subset else None,
                            self["scenario.domain_rate"], int(self["scenario.target"]), seed)

    def to_yaml(self) -> str:
        import yaml

        return yaml.safe_dump(dict(self.params), sort_keys=True)


def load_config(path) -> ExperimentConfig:
    import yaml

    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping of dotted keys")
    return ExperimentConfig(raw)


# -- resources -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class Resources:
    train: Dataset
    test: Dataset
    external: Dataset | None


@lru_cache(maxsize=4)
def _desk_resources(seed: int) -> Resources:
    from .desk import make_desk_fixture

    fx = make_desk_fixture(seed)
    return Resources(fx.train, fx.test, fx.external)


@lru_cache(maxsize=4)
def _file_resources(train, test, external, fmt) -> Resources:
    tr = load_dataset(train, fmt, "train")
    te = load_dataset(test, fmt, "test", class_names=tr.class_names)
    ex = load_dataset(external, fmt, "external_pool") if external else None
    return Resources(tr, te, ex)


def resources_for(cfg: ExperimentConfig) -> Resources:
    if cfg["dataset.kind"] == "desk":
        return _desk_resources(int(cfg["dataset.seed"]))
    return _file_resources(cfg["dataset.train"], cfg["dataset.test"], cfg["dataset.external"],
                           cfg["dataset.format"])


@lru_cache(maxsize=4)
def _encoder(adapter, weights, seed, dataset_seed):
    if adapter == "desk":
        from .desk import fit_desk_encoder

        return fit_desk_encoder(_desk_resources(dataset_seed).external, seed=seed)
    return load_encoder(weights, adapter, seed=seed)


def encoder_for(cfg: ExperimentConfig):
    return _encoder(cfg["encoder.adapter"], cfg["encoder.weights"], int(cfg["encoder.seed"]),
                    int(cfg["dataset.seed"]))


@lru_cache(maxsize=16)
def _file_digest(path: str) -> str:
    h = hashlib.sha256()
    for f in sorted(Path(path).rglob("*")) if Path(path).is_dir() else [Path(path)]:
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def _encoder_key(cfg: ExperimentConfig) -> tuple:
    """Identifies encoder weights without materialising them (the desk fit takes minutes)."""
    adapter, weights = cfg["encoder.adapter"], cfg["encoder.weights"]
    if adapter == "desk":
        from .desk import DESK_ENCODER_REVISION

        ident = (DESK_ENCODER_REVISION, cfg["dataset.seed"])
    elif weights:
        ident = (_file_digest(str(weights)),)
    else:
        ident = ()
    return (adapter, cfg["encoder.seed"]) + ident


# -- cache ----------------------------------------------------------------------------------------

_cache_lock = threading.Lock()


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:24]


def _atomic_write(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=path.suffix)
    os.close(fd)
    try:
        writer(Path(tmp))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _cached_noise(path: Path, compute) -> tuple[NoiseMap, bool]:
    with _cache_lock:
        if path.exists():
            return load_noise_map(path), True
    noise = compute()
    with _cache_lock:
        _atomic_write(path, lambda p: save_noise_map(noise, p))
    # round-trip through float32 storage so cached and fresh runs are identical
    return load_noise_map(path), False


# -- pipeline -------------------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    per_seed: list
    aggregate: dict
    artifacts: dict
    cache_hits: dict = field(default_factory=dict)
    grid: dict | None = None

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "config_hash": self.config_hash,
                "config": self.config, "per_seed": self.per_seed, "aggregate": self.aggregate,
                "artifacts": self.artifacts, "cache_hits": self.cache_hits, "grid": self.grid}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported report schema_version {d.get('schema_version')}")
        return cls(d["config"], d["config_hash"], d["per_seed"], d["aggregate"], d["artifacts"],
                   d.get("cache_hits", {}), d.get("grid"))

    def metrics(self) -> list[MetricsReport | None]:
        return [MetricsReport.from_dict(r["metrics"]) if r.get("metrics") else None
                for r in self.per_seed]

    @property
    def asr_values(self) -> list[float]:
        return [m.asr for m in self.metrics() if m is not None]

    @property
    def ba_values(self) -> list[float]:
        return [m.ba for m in self.metrics() if m is not None]


def _aggregate(per_seed: list) -> dict:
    ok = [r["metrics"] for r in per_seed if r.get("metrics")]
    out = {"n_ok": len(ok), "n_failed": len(per_seed) - len(ok)}
    for key in ("asr", "ba", "psnr_mean_db", "ssim_mean"):
        vals = [m[key] for m in ok if m[key] != "inf"]
        out[f"{key}_mean"] = statistics.fmean(vals) if vals else None
        out[f"{key}_std"] = statistics.pstdev(vals) if len(vals) > 1 else (0.0 if vals else None)
    return out


def _make_trigger(cfg: ExperimentConfig, res: Resources, accessible, seed: int, cache: Path,
                  hits: dict):
    method = cfg["trigger.method"]
    shape = res.train.image_shape
    k = int(cfg["scenario.target"])
    if method == "badnets":
        return make_badnets_trigger(shape, p=int(cfg["trigger.patch_size"]))
    if method == "blended":
        return make_blended_trigger(cfg["trigger.pattern"], cfg["trigger.lambda"], shape)

    budget = cfg.budget()
    enc_key = _encoder_key(cfg)
    if method == "clip-uap":
        key = _key(method, budget, accessible.content_hash(), k, enc_key, cfg["trigger.loss"],
                   cfg["trigger.batch_size"], cfg["score.mode"])

        def compute():
            enc = encoder_for(cfg)
            prompts = build_prompts(res.train.class_names, enc)
            return optimize_clip_uap(enc, prompts, accessible, k, budget,
                                     int(cfg["trigger.batch_size"]), cfg["trigger.loss"],
                                     cfg["score.mode"])
    elif method == "clip-cfa":
        key = _key(method, budget, accessible.content_hash(), enc_key, seed,
                   cfg["trigger.batch_size"])

        def compute():
            return optimize_clip_cfa(encoder_for(cfg), accessible, budget, pairing_seed=seed,
                                     batch_size=int(cfg["trigger.batch_size"]))
    else:  # proxy-model UAP, full training-set access
        vcfg = cfg.victim_config(seed)
        key = _key(method, budget, k, vcfg, _dataset_hash(res.train))

        def compute():
            proxy = train_victim(res.train, None, vcfg)
            return optimize_proxy_uap(proxy, res.train, k, budget)
    noise, hit = _cached_noise(cache / "triggers" / f"{key}.noise", compute)
    hits["trigger"] = hit
    return Additive(noise)


def _dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(ds.images.numpy().astype("<f4").tobytes())
    h.update(ds.labels.numpy().tobytes())
    return h.hexdigest()


def _run_seed(cfg: ExperimentConfig, res: Resources, seed: int, run_dir: Path,
              cache: Path) -> dict:
    hits: dict = {}
    k = int(cfg["scenario.target"])
    spec = cfg.scenario(len(res.train), seed)
    accessible = sample_accessible_set(res.train, res.external, spec)

    cfe_noise = None
    if cfg["cfe.enabled"]:
        cfe_budget = cfg.budget(for_cfe=True)
        key = _key("cfe", cfe_budget, accessible.content_hash(), _encoder_key(cfg),
                   cfg["score.mode"])

        def compute():
            enc = encoder_for(cfg)
            prompts = build_prompts(res.train.class_names, enc)
            return erase_clean_features(enc, prompts, accessible.images, cfe_budget,
                                        cfg["score.mode"])
        cfe_noise, hits["cfe"] = _cached_noise(cache / "cfe" / f"{key}.noise", compute)

    trigger = _make_trigger(cfg, res, accessible, seed, cache, hits)
    poison = assemble_poison_set(accessible, trigger, cfe_noise, k)

    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = poison.write_manifest(run_dir / "manifest.csv")
    trigger_path = save_trigger(trigger, run_dir / "trigger.bin")

    vcfg = cfg.victim_config(seed)
    vkey = _key("victim", vcfg, poison.manifest_hash(), _dataset_hash(res.train))
    vpath = cache / "victims" / f"{vkey}.ckpt"
    with _cache_lock:
        cached = vpath.exists()
    if cached:
        model = load_checkpoint(vpath, arch=vcfg.arch)
    else:
        model = train_victim(res.train, poison, vcfg)
        with _cache_lock:
            _atomic_write(vpath, lambda p: save_checkpoint(model, p))
        model = load_checkpoint(vpath, arch=vcfg.arch)
    hits["victim"] = cached
    ckpt = run_dir / "checkpoint.bin"
    save_checkpoint(model, ckpt)

    metrics = evaluate(model, res.test, trigger, k, seeds=[seed])
    (run_dir / "metrics.json").write_text(metrics.to_json())
    return {"seed": seed, "metrics": metrics.to_dict(), "error": None, "cache_hits": hits,
            "artifacts": {"manifest": str(manifest), "trigger": str(trigger_path),
                          "checkpoint": str(ckpt), "metrics": str(run_dir / "metrics.json")}}


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run every seed of ``cfg``; a failing seed is recorded and the rest continue."""
    out = Path(cfg["output_dir"])
    chash = cfg.config_hash()
    root = out / chash
    cache = out / "cache"
    res = resources_for(cfg)
    per_seed, hits = [], {}
    for seed in cfg["seeds"]:
        try:
            row = _run_seed(cfg, res, seed, root / str(seed), cache)
        except Exception as exc:  # noqa: BLE001 - one bad seed must not sink the grid
            log.exception("seed %s failed", seed)
            row = {"seed": seed, "metrics": None, "error": f"{type(exc).__name__}: {exc}",
                   "cache_hits": {}, "artifacts": {}}
        per_seed.append(row)
        hits[str(seed)] = row["cache_hits"]
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.yaml").write_text(cfg.to_yaml())
    report = ExperimentReport(dict(cfg.params), chash, per_seed, _aggregate(per_seed),
                              {"root": str(root), "report": str(root / "report.json")}, hits)
    write_report(report, root / "report.json")
    return report


def write_report(report: ExperimentReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return path


def read_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


def recompute_metrics(cfg: ExperimentConfig, seed: int) -> MetricsReport:
    """Rebuild a seed's metrics from its saved checkpoint and trigger; no training."""
    run_dir = Path(cfg["output_dir"]) / cfg.config_hash() / str(seed)
    res = resources_for(cfg)
    model = load_checkpoint(run_dir / "checkpoint.bin", arch=cfg.victim_config(seed).arch)
    trigger_path = run_dir / "trigger.bin"
    if not trigger_path.exists():
        trigger_path = trigger_path.with_suffix(".png")
    trigger = load_trigger(trigger_path)
    return evaluate(model, res.test, trigger, int(cfg["scenario.target"]), seeds=[seed])


def regenerate_report(cfg: ExperimentConfig) -> ExperimentReport:
    per_seed = []
    for seed in cfg["seeds"]:
        m = recompute_metrics(cfg, seed)
        per_seed.append({"seed": seed, "metrics": m.to_dict(), "error": None, "cache_hits": {},
                         "artifacts": {}})
    root = Path(cfg["output_dir"]) / cfg.config_hash()
    return ExperimentReport(dict(cfg.params), cfg.config_hash(), per_seed, _aggregate(per_seed),
                            {"root": str(root)})


# -- grids and plots ------------------------------------------------------------------------------


def grid_config(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis not in GRID_AXES:
        raise ConfigError(f"unknown grid axis {axis!r}; expected one of {GRID_AXES}")
    value = parse_number(value)
    if axis == "poison_rate":
        if not 0 < value <= 1:
            raise ConfigError(f"poison rate {value} outside (0, 1]")
        return base.with_(**{"scenario.poison_rate": float(value), "scenario.p": None})
    if axis == "class_count":
        if base["scenario.class_subset"] is None:
            raise ConfigError("class_count axis needs a class-constrained scenario "
                              "(scenario.class_subset set)")
        n = int(value)
        if n < 1:
            raise ConfigError("class_count must be >= 1")
        return base.with_(**{"scenario.class_subset": list(range(n))})
    if axis == "domain_rate":
        if not 0 <= value <= 1:
            raise ConfigError(f"domain rate {value} outside [0, 1]")
        return base.with_(**{"scenario.domain_rate": float(value)})
    if value < 0:
        raise ConfigError("epsilon must be >= 0")
    # with CFE on, the ablation loosens the per-sample erasing budget only
    key = "cfe.epsilon" if base["cfe.enabled"] else "budget.epsilon"
    return base.with_(**{key: float(value)})


def run_grid(base: ExperimentConfig, axis: str, values) -> list[ExperimentReport]:
    """One report per value, in order, all sharing the base config's seeds."""
    values = list(values)
    if not values:
        raise ConfigError("grid needs at least one value")
    cfgs = [grid_config(base, axis, v) for v in values]
    reports = []
    for v, cfg in zip(values, cfgs):
        rep = run_experiment(cfg)
        rep.grid = {"axis": axis, "value": float(parse_number(v))}
        write_report(rep, rep.artifacts["report"])
        reports.append(rep)
    return reports


def _series_label(rep: ExperimentReport) -> str:
    cfe = "w/ CFE" if rep.config.get("cfe.enabled") else "w/o CFE"
    return f"{rep.config.get('trigger.method')} {cfe}"


def plot_rows(reports: list[ExperimentReport]) -> list[dict]:
    rows = []
    for i, rep in enumerate(reports):
        asr, ba = rep.asr_values, rep.ba_values
        grid = rep.grid or {"axis": "index", "value": float(i)}
        rows.append({
            "series": _series_label(rep),
            "axis": grid["axis"],
            "value": f"{grid['value']:.6g}",
            "asr_mean": f"{statistics.fmean(asr):.6f}" if asr else "",
            "asr_std": f"{statistics.pstdev(asr):.6f}" if asr else "",
            "ba_mean": f"{statistics.fmean(ba):.6f}" if ba else "",
            "n_seeds": str(len(asr)),
        })
    rows.sort(key=lambda r: (r["series"], float(r["value"])))
    return rows


def emit_plots(reports: list[ExperimentReport], out_dir) -> list[Path]:
    """Write ``asr_<axis>.csv`` plus a line chart (bar chart for a single report)."""
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not reports:
        raise ConfigError("emit_plots needs at least one report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"cannot write plots to {out}: {exc}") from exc
    rows = plot_rows(reports)
    axis = rows[0]["axis"]
    csv_path = out / f"asr_{axis}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    if len(reports) == 1:
        r = rows[0]
        ax.bar([r["series"]], [float(r["asr_mean"] or 0)],
               yerr=[float(r["asr_std"] or 0)], capsize=4)
        png = out / "asr_bar.png"
    else:
        series: dict = {}
        for r in rows:
            if r["asr_mean"]:
                series.setdefault(r["series"], []).append(
                    (float(r["value"]), float(r["asr_mean"]), float(r["asr_std"])))
        for name, pts in sorted(series.items()):
            xs, ys, es = zip(*pts)
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=name)
        ax.set_xlabel(axis)
        ax.legend(fontsize=8)
        png = out / f"asr_{axis}.png"
    ax.set_ylabel("ASR")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return [png, csv_path]


def load_reports(in_dir) -> list[ExperimentReport]:
    paths = sorted(Path(in_dir).glob("*/report.json"))
    if not paths:
        raise ConfigError(f"no report.json files under {in_dir}")
    return [read_report(p) for p in paths]
