"""Pipeline configuration: a single JSON file with explicit seeds.

Every stochastic stage takes its seed from the config (default 42); nothing
ever seeds from the clock, so a config fully determines every artifact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .imaging import AugmentParams, NormStats
from .model import NetConfig
from .synthgen import CohortSpec, PhantomSpec
from .training import LossConfig, OptimConfig
from .vesselseg import SegParams

TOOL_VERSION = "0.1.0"

DEFAULT_SEED = 42


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    cohort_dir: str
    out_dir: str
    seed: int = DEFAULT_SEED
    input_size: int = 224
    cohort: CohortSpec = field(default_factory=CohortSpec)
    phantom: PhantomSpec | None = None
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    split_seed: int = DEFAULT_SEED
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seg: SegParams = field(default_factory=SegParams)
    augment: AugmentParams | None = field(default_factory=AugmentParams)
    norm: NormStats = field(default_factory=NormStats)
    attention_threshold: float = 0.5
    region_source: str = "ground_truth"
    explain_limit: int | None = None
    report_figures: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.input_size % 8:
            raise ConfigError("input_size must be divisible by 8")
        if self.region_source not in ("ground_truth", "estimated"):
            raise ConfigError(f"unknown region_source {self.region_source!r}")
        if not 0.0 <= self.attention_threshold <= 1.0:
            raise ConfigError("attention_threshold must be in [0, 1]")


def _build(cls, data: dict, what: str):
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc


def _tupled(data: dict, keys: tuple[str, ...]) -> dict:
    return {k: tuple(v) if k in keys and isinstance(v, list) else v for k, v in data.items()}


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"cohort_dir", "out_dir", "seed", "input_size", "cohort", "phantom",
             "split", "net", "loss", "optim", "seg", "augment", "norm",
             "attention_threshold", "region_source", "explain_limit",
             "report_figures", "threads"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("cohort_dir", "out_dir"):
        if key not in raw or not isinstance(raw[key], str):
            raise ConfigError(f"config requires string {key!r}")

    seed = int(raw.get("seed", DEFAULT_SEED))
    cohort_raw = dict(raw.get("cohort", {}))
    cohort_raw.setdefault("seed", seed)
    cohort = _build(CohortSpec, cohort_raw, "cohort")

    phantom = None
    if raw.get("phantom") is not None:
        phantom_raw = _tupled(dict(raw["phantom"]),
                              ("disc_center", "macula_center", "background_tint",
                               "disc_tint", "vessel_tint"))
        phantom_raw.setdefault("image_size", cohort.image_size)
        phantom = _build(PhantomSpec, phantom_raw, "phantom")

    split_raw = dict(raw.get("split", {}))
    fractions = tuple(split_raw.get("fractions", (0.70, 0.15, 0.15)))
    split_seed = int(split_raw.get("seed", seed))

    net = _build(NetConfig, _tupled(dict(raw.get("net", {})), ("conv_channels",)), "net")
    loss = _build(LossConfig, _tupled(dict(raw.get("loss", {})), ("task_weights",)), "loss")
    optim_raw = dict(raw.get("optim", {}))
    optim_raw.setdefault("seed", seed)
    optim = _build(OptimConfig, optim_raw, "optim")
    seg = _build(SegParams, _tupled(dict(raw.get("seg", {})), ("clahe_tiles",)), "seg")

    augment_raw = raw.get("augment", {})
    if augment_raw is None or augment_raw.get("enabled", True) is False:
        augment = None
    else:
        augment_raw = {k: v for k, v in augment_raw.items() if k != "enabled"}
        augment_raw = _tupled(augment_raw, ("crop_scale", "rotation_deg", "brightness",
                                            "contrast", "saturation", "hue", "shear_deg"))
        augment = _build(AugmentParams, augment_raw, "augment")

    norm_raw = _tupled(dict(raw.get("norm", {})), ("mean", "std"))
    norm = _build(NormStats, norm_raw, "norm")

    explain_limit = raw.get("explain_limit")
    if explain_limit is not None:
        explain_limit = int(explain_limit)

    return PipelineConfig(
        cohort_dir=raw["cohort_dir"], out_dir=raw["out_dir"], seed=seed,
        input_size=int(raw.get("input_size", 224)),
        cohort=cohort, phantom=phantom,
        split_fractions=fractions, split_seed=split_seed,
        net=net, loss=loss, optim=optim, seg=seg, augment=augment, norm=norm,
        attention_threshold=float(raw.get("attention_threshold", 0.5)),
        region_source=str(raw.get("region_source", "ground_truth")),
        explain_limit=explain_limit,
        report_figures=bool(raw.get("report_figures", True)),
        threads=int(raw.get("threads", 1)),
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Round-trippable echo of the effective configuration."""
    out = {
        "cohort_dir": cfg.cohort_dir,
        "out_dir": cfg.out_dir,
        "seed": cfg.seed,
        "input_size": cfg.input_size,
        "cohort": asdict(cfg.cohort),
        "phantom": asdict(cfg.phantom) if cfg.phantom is not None else None,
        "split": {"fractions": list(cfg.split_fractions), "seed": cfg.split_seed},
        "net": asdict(cfg.net),
        "loss": asdict(cfg.loss),
        "optim": asdict(cfg.optim),
        "seg": asdict(cfg.seg),
        "augment": ({"enabled": True, **asdict(cfg.augment)}
                    if cfg.augment is not None else {"enabled": False}),
        "norm": {"mean": list(cfg.norm.mean), "std": list(cfg.norm.std)},
        "attention_threshold": cfg.attention_threshold,
        "region_source": cfg.region_source,
        "explain_limit": cfg.explain_limit,
        "report_figures": cfg.report_figures,
        "threads": cfg.threads,
    }
    return out
