"""Declarative run configuration: one JSON document plus dotted-path overrides.

Defaults describe the desk-scale experiment (64^3 volumes, 8-voxel patch grid,
100 volumes per class) sized so the full pipeline runs in minutes on a CPU.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .phantom import PhantomSpec
from .volume import Region

REFINE_RULES = ("refine_below", "refine_at_or_above")
SELECT_METHODS = ("shap", "ttest")
SELECT_KEYS = ("magnitude", "value")

# Fixed per-stage offsets for deriving stage seeds from the global seed.
STAGE_SEED_OFFSETS = {
    "gen": 11,
    "surrogate": 23,
    "explain": 37,
    "select": 41,
    "train": 53,
    "eval": 67,
    "compare": 79,
}


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "out"


@dataclass
class PhantomConfig:
    dims: list[int] = field(default_factory=lambda: [64, 64, 64])
    n_per_class: int = 100
    lesion_regions: list[dict] = field(
        default_factory=lambda: [{"origin": [22, 26, 20], "size": [12, 12, 12]}]
    )
    lesion_delta: float = 0.35
    noise_sigma: float = 0.05
    smooth_radius: int = 1
    seed: int | None = None  # null derives from the global seed

    def to_spec(self, fallback_seed: int) -> PhantomSpec:
        return PhantomSpec(
            dims=tuple(self.dims),
            n_per_class=self.n_per_class,
            lesion_regions=tuple(Region.from_json(r) for r in self.lesion_regions),
            lesion_delta=self.lesion_delta,
            noise_sigma=self.noise_sigma,
            smooth_radius=self.smooth_radius,
            seed=self.seed if self.seed is not None else fallback_seed,
        )


@dataclass
class GridConfig:
    patch_edge: int = 8


@dataclass
class ExplainerConfig:
    # Attribution values are probability differences, so under refine_below
    # any tau >= 1 refines every node down to the leaf grid (all leaves get
    # leaf-level values). Lowering tau refines only nodes with S < tau: the
    # cheap selective mode.
    tau: float = 1.0
    rule: str = "refine_below"
    budget: int = 100_000
    max_depth: int = 3
    max_volumes: int = 12
    use_true_labels: bool = False


@dataclass
class SelectionConfig:
    method: str = "shap"
    m_patches: int = 36
    key: str = "magnitude"


@dataclass
class NetConfig:
    embed_dim: int = 64
    depth: int = 4
    class_count: int = 2


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    val_fraction: float = 0.15
    test_fraction: float = 0.25


@dataclass
class EvalConfig:
    k: int = 5
    repeats: int = 1
    stratified: bool = True


@dataclass
class CompareConfig:
    m_values: list[int] = field(default_factory=lambda: [16, 36, 64])


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    explainer: ExplainerConfig = field(default_factory=ExplainerConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    seed: int = 2024
    threads: int = 1

    def stage_seed(self, stage: str) -> int:
        return self.seed * 1000 + STAGE_SEED_OFFSETS[stage]

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "paths": PathsConfig,
    "phantom": PhantomConfig,
    "grid": GridConfig,
    "explainer": ExplainerConfig,
    "selection": SelectionConfig,
    "net": NetConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "compare": CompareConfig,
}


def _build_section(cls, values: dict, path: str):
    known = {f for f in cls.__dataclass_fields__}
    for key in values:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(name, "must be an object")
        kwargs[name] = _build_section(cls, section, name)
    for scalar in ("seed", "threads"):
        if scalar in raw:
            kwargs[scalar] = raw.pop(scalar)
    if raw:
        raise ConfigError(next(iter(raw)), "unknown field")
    cfg = RunConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus ``key=value`` overrides."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {path}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from exc
    if isinstance(raw, dict) and "stage" in raw and isinstance(raw.get("config"), dict):
        raw = raw["config"]  # a run-<stage>.json echo reproduces its run
    base = config_from_dict({})  # defaults
    merged = base.to_dict()
    _deep_merge(merged, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        key, _, value = item.partition("=")
        _assign_path(merged, key.strip(), value.strip())
    return config_from_dict(merged)


def _deep_merge(dst: dict, src: dict) -> None:
    for key, value in src.items():
        if isinstance(value, dict) and isinstance(dst.get(key), dict):
            _deep_merge(dst[key], value)
        else:
            dst[key] = value


def _assign_path(tree: dict, dotted: str, raw_value: str) -> None:
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(dotted, "unknown field path")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(dotted, "unknown field path")
    node[parts[-1]] = value


def validate_config(cfg: RunConfig) -> None:
    def check(cond: bool, path: str, message: str) -> None:
        if not cond:
            raise ConfigError(path, message)

    ph = cfg.phantom
    check(len(ph.dims) == 3 and all(isinstance(v, int) and v >= 1 for v in ph.dims),
          "phantom.dims", "must be three integers >= 1")
    check(ph.n_per_class >= 1, "phantom.n_per_class", "must be >= 1")
    check(0.0 < ph.lesion_delta <= 1.0, "phantom.lesion_delta", "must be in (0, 1]")
    check(ph.noise_sigma >= 0.0, "phantom.noise_sigma", "must be >= 0")
    check(ph.smooth_radius >= 0, "phantom.smooth_radius", "must be >= 0")
    check(len(ph.lesion_regions) >= 1, "phantom.lesion_regions", "must list at least one region")
    for i, r in enumerate(ph.lesion_regions):
        ok = (
            isinstance(r, dict)
            and len(r.get("origin", [])) == 3
            and len(r.get("size", [])) == 3
            and all(int(r["origin"][a]) >= 0 and int(r["size"][a]) >= 1 for a in range(3))
            and all(int(r["origin"][a]) + int(r["size"][a]) <= ph.dims[a] for a in range(3))
        )
        check(ok, f"phantom.lesion_regions[{i}]", "must lie inside dims with size >= 1")
    check(cfg.grid.patch_edge >= 1, "grid.patch_edge", "must be >= 1")
    check(cfg.grid.patch_edge <= min(ph.dims), "grid.patch_edge",
          "must not exceed the smallest volume dimension")
    ex = cfg.explainer
    check(ex.rule in REFINE_RULES, "explainer.rule", f"must be one of {REFINE_RULES}")
    check(ex.tau == ex.tau and abs(ex.tau) != float("inf"), "explainer.tau",
          "must be finite (library callers may pass inf directly)")
    check(ex.budget >= 1, "explainer.budget", "must be >= 1")
    check(ex.max_depth >= 1, "explainer.max_depth", "must be >= 1")
    check(ex.max_volumes >= 1, "explainer.max_volumes", "must be >= 1")
    sel = cfg.selection
    check(sel.method in SELECT_METHODS, "selection.method", f"must be one of {SELECT_METHODS}")
    check(sel.key in SELECT_KEYS, "selection.key", f"must be one of {SELECT_KEYS}")
    check(sel.m_patches >= 1 and math.isqrt(sel.m_patches) ** 2 == sel.m_patches,
          "selection.m_patches", "M must be a perfect square")
    net = cfg.net
    check(net.embed_dim >= 1, "net.embed_dim", "must be >= 1")
    check(net.depth >= 1, "net.depth", "must be >= 1")
    check(net.class_count == 2, "net.class_count", "only two classes are supported")
    tr = cfg.train
    check(tr.epochs >= 1, "train.epochs", "must be >= 1")
    check(tr.batch_size >= 1, "train.batch_size", "must be >= 1")
    check(tr.lr_start > 0 and tr.lr_end > 0, "train.lr_start", "learning rates must be positive")
    check(0.0 <= tr.val_fraction < 1.0, "train.val_fraction", "must be in [0, 1)")
    check(0.0 < tr.test_fraction < 1.0, "train.test_fraction", "must be in (0, 1)")
    check(tr.val_fraction + tr.test_fraction < 1.0, "train.test_fraction",
          "val_fraction + test_fraction must leave training data")
    ev = cfg.eval
    check(ev.k >= 2, "eval.k", "must be >= 2")
    check(ev.repeats >= 1, "eval.repeats", "must be >= 1")
    cm = cfg.compare
    check(len(cm.m_values) >= 1, "compare.m_values", "must list at least one M")
    for i, m in enumerate(cm.m_values):
        check(isinstance(m, int) and m >= 1 and math.isqrt(m) ** 2 == m,
              f"compare.m_values[{i}]", "every M must be a perfect square")
    check(isinstance(cfg.seed, int), "seed", "must be an integer")
    check(isinstance(cfg.threads, int) and cfg.threads >= 1, "threads", "must be an integer >= 1")
