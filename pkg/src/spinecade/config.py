"""Pipeline configuration: JSON documents mapped onto frozen dataclasses."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .convnet import ARCHITECTURES, TrainConfig, infer_shapes, layers_from_json
from .errors import ConfigInvalidError
from .patches import DEFAULT_POS_FRACTION, DEFAULT_RADIUS_MM, MIRROR_AXES, Strategy
from .phantom import PhantomSpec


@dataclass(frozen=True)
class PhantomSuite:
    n_train: int = 8
    n_test: int = 4
    spec: dict = field(default_factory=dict)  # PhantomSpec fields except seed and patient_id


@dataclass(frozen=True)
class Case:
    id: str
    volume: str
    mask: str
    annotations: str


@dataclass(frozen=True)
class EdgeParams:
    threshold_percentile: float = 75.0


@dataclass(frozen=True)
class SamplingParams:
    strategy: str = "oriented"
    radius_mm: float = DEFAULT_RADIUS_MM
    target_count: int = 3000
    pos_fraction: float = DEFAULT_POS_FRACTION
    mirror_axis: str = "lr"
    orient_mode: str = "tangent"
    window_radius: int = 3


@dataclass(frozen=True)
class TrainParams:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 6
    weight_decay: float = 5e-4


@dataclass(frozen=True)
class DetectParams:
    cluster_threshold: float = 0.5
    batch_size: int = 8


@dataclass(frozen=True)
class EvalParams:
    match_radius_mm: float = 10.0
    fp_targets: tuple = (5.0, 10.0)
    process_mode: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: str
    seed: int = 0
    phantom: PhantomSuite = PhantomSuite()
    cases: dict | None = None  # {"train": [Case], "test": [Case]}
    edges: EdgeParams = EdgeParams()
    sampling: SamplingParams = SamplingParams()
    net: object = "desk64"  # architecture name or inline layer list
    train: TrainParams = TrainParams()
    detect: DetectParams = DetectParams()
    eval: EvalParams = EvalParams()

    @property
    def strategy(self) -> Strategy:
        return Strategy.parse(self.sampling.strategy)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **dataclasses.asdict(self.train))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical config, output directory excluded."""
        d = self.as_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "phantom": PhantomSuite,
    "edges": EdgeParams,
    "sampling": SamplingParams,
    "train": TrainParams,
    "detect": DetectParams,
    "eval": EvalParams,
}


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b.c=value``; value is read as JSON and falls back to a plain string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigInvalidError(f"--set expects KEY=VALUE, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(raw: dict, overrides) -> dict:
    out = copy.deepcopy(raw)
    for item in overrides:
        keys, value = parse_override(item)
        node = out
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigInvalidError(f"--set {item!r}: {k} is not a section")
            node = nxt
        node[keys[-1]] = value
    return out


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigInvalidError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigInvalidError(f"{where}: unknown key {unknown[0]!r}")
    kwargs = dict(data)
    if cls is EvalParams and "fp_targets" in kwargs:
        kwargs["fp_targets"] = tuple(float(t) for t in kwargs["fp_targets"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigInvalidError(f"{where}: {exc}") from None


def _case(item, where: str, base: Path) -> Case:
    if not isinstance(item, dict):
        raise ConfigInvalidError(f"{where} must be an object")
    for key in ("id", "volume", "mask", "annotations"):
        if key not in item or item[key] in (None, ""):
            raise ConfigInvalidError(f"{where}.{key} is required")
    unknown = sorted(set(item) - {"id", "volume", "mask", "annotations"})
    if unknown:
        raise ConfigInvalidError(f"{where}: unknown key {unknown[0]!r}")
    paths = {}
    for key in ("volume", "mask", "annotations"):
        p = Path(item[key])
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise ConfigInvalidError(f"{where}.{key}: no such file {p}")
        paths[key] = str(p)
    return Case(str(item["id"]), **paths)


def _check_ranges(cfg: PipelineConfig) -> None:
    def need(ok, field_name, msg):
        if not ok:
            raise ConfigInvalidError(f"{field_name} {msg}")

    need(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed", "must be a non-negative integer")
    need(cfg.phantom.n_train >= 1 and cfg.phantom.n_test >= 1, "phantom.n_train/n_test", "must be >= 1")
    reserved = sorted({"seed", "patient_id"} & set(cfg.phantom.spec))
    need(not reserved, f"phantom.spec.{reserved[0] if reserved else ''}", "is set per case and may not be configured")
    try:
        PhantomSpec(**cfg.phantom.spec)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalidError(f"phantom.spec: {exc}") from None
    need(0 < cfg.edges.threshold_percentile < 100, "edges.threshold_percentile", "must lie in (0, 100)")
    s = cfg.sampling
    try:
        Strategy.parse(s.strategy)
    except ValueError as exc:
        raise ConfigInvalidError(f"sampling.strategy: {exc}") from None
    need(s.radius_mm > 0, "sampling.radius_mm", "must be > 0")
    need(s.target_count > 0, "sampling.target_count", "must be > 0")
    need(0 < s.pos_fraction < 1, "sampling.pos_fraction", "must lie in (0, 1)")
    need(s.mirror_axis in MIRROR_AXES, "sampling.mirror_axis", f"must be one of {MIRROR_AXES}")
    need(s.orient_mode in ("tangent", "gradient"), "sampling.orient_mode", "must be tangent or gradient")
    need(s.window_radius >= 1, "sampling.window_radius", "must be >= 1")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigInvalidError(f"train: {exc}") from None
    need(0 < cfg.detect.cluster_threshold < 1, "detect.cluster_threshold", "must lie in (0, 1)")
    need(cfg.detect.batch_size >= 1, "detect.batch_size", "must be >= 1")
    need(cfg.eval.match_radius_mm > 0, "eval.match_radius_mm", "must be > 0")
    need(len(cfg.eval.fp_targets) > 0, "eval.fp_targets", "must not be empty")
    if isinstance(cfg.net, str):
        need(cfg.net in ARCHITECTURES, "net", f"must be one of {sorted(ARCHITECTURES)} or a layer list")
    else:
        try:
            infer_shapes(layers_from_json(cfg.net), (3, 64, 64))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalidError(f"net: {exc}") from None


def config_from_dict(raw: dict, base_dir=".") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigInvalidError("config must be a JSON object")
    base = Path(base_dir)
    allowed = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigInvalidError(f"unknown top-level key {unknown[0]!r}")
    if not raw.get("output_dir"):
        raise ConfigInvalidError("output_dir is required")
    out = Path(raw["output_dir"])
    kwargs = {"output_dir": str(out if out.is_absolute() else base / out)}
    if "seed" in raw:
        kwargs["seed"] = raw["seed"]
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw[name], name)
    if "net" in raw:
        kwargs["net"] = raw["net"]
    if raw.get("cases") is not None:
        cases = raw["cases"]
        if not isinstance(cases, dict) or set(cases) != {"train", "test"}:
            raise ConfigInvalidError("cases must hold exactly the lists 'train' and 'test'")
        built = {}
        for split in ("train", "test"):
            if not isinstance(cases[split], list) or not cases[split]:
                raise ConfigInvalidError(f"cases.{split} must be a non-empty list")
            built[split] = tuple(_case(c, f"cases.{split}[{i}]", base) for i, c in enumerate(cases[split]))
        ids = [c.id for split in built.values() for c in split]
        if len(set(ids)) != len(ids):
            raise ConfigInvalidError("cases: ids must be unique")
        kwargs["cases"] = built
    cfg = PipelineConfig(**kwargs)
    _check_ranges(cfg)
    return cfg


def load_config(path, overrides=(), seed: int | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigInvalidError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalidError(f"config is not valid JSON: {exc}") from None
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    return config_from_dict(raw, path.parent)


def default_config_dict(output_dir="runs/default") -> dict:
    """The desk-scale phantom experiment as a JSON-ready dict."""
    return {
        "seed": 0,
        "output_dir": output_dir,
        "phantom": dataclasses.asdict(PhantomSuite()),
        "edges": dataclasses.asdict(EdgeParams()),
        "sampling": dataclasses.asdict(SamplingParams()),
        "net": "desk64",
        "train": dataclasses.asdict(TrainParams()),
        "detect": dataclasses.asdict(DetectParams()),
        "eval": {**dataclasses.asdict(EvalParams()), "fp_targets": [5.0, 10.0]},
    }
