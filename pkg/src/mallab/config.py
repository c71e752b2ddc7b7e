"""Experiment configuration: sectioned ``key = value`` text with JSON values.

Example::

    [gen]
    n_users = 5000
    industry_path_profile = [[1.8, 1.0], [1.1, 0.2]]

    [train]
    seeds = [1, 2, 3]

Keys may also be given dotted (``gen.n_users = 10``) in a ``[root]`` section or
through command-line overrides.  Values that do not parse as JSON are taken as
bare strings.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attribution import DEFAULT_ORDER, LABEL_MODES, Tag
from .errors import ConfigError
from .journeygen import GenConfig, IndustryProfile
from .malnet import VARIANTS, ArchConfig


def _benchmark_gen() -> GenConfig:
    return GenConfig()


@dataclass(frozen=True)
class AttributionSettings:
    mechanisms: tuple[str, ...] = tuple(str(t) for t in DEFAULT_ORDER)
    primary_tags: tuple[str, ...] = (str(Tag.LAST_CLICK), str(Tag.REMOVAL_EFFECT_MTA))
    label_mode: str = "binary"
    train_fraction: float = 0.9
    time_decay_half_life: float = 86400.0
    mta_lr: float = 0.05
    mta_steps: int = 400
    mta_l2: float = 1e-4


@dataclass(frozen=True)
class TrainSettings:
    variants: tuple[str, ...] = ("Base", "SharedBottomMTL", "MAL_noCAT", "MAL_noMultiAttr", "MAL")
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 1


@dataclass(frozen=True)
class ReportSettings:
    user_window: float = 0.25
    gain_edges: tuple[int, ...] = (0, 1, 2, 4)
    figures: bool = True


@dataclass(frozen=True)
class Paths:
    """``workdir`` is the root; the rest are subdirectories relative to it."""

    workdir: str = "mal_run"
    dataset: str = "data"
    samples: str = "samples"
    checkpoints: str = "runs"
    evals: str = "eval"
    reports: str = "reports"

    def subdirs(self) -> tuple[str, ...]:
        return (self.dataset, self.samples, self.checkpoints, self.evals, self.reports)


@dataclass(frozen=True)
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    gen: GenConfig = field(default_factory=_benchmark_gen)
    attribution: AttributionSettings = field(default_factory=AttributionSettings)
    arch: ArchConfig = field(default_factory=lambda: ArchConfig(lambda_cat=0.3))
    train: TrainSettings = field(default_factory=TrainSettings)
    report: ReportSettings = field(default_factory=ReportSettings)

    def validate(self) -> "ExperimentConfig":
        subs = [Path(p).as_posix() for p in self.paths.subdirs()]
        if len(set(subs)) != len(subs):
            raise ConfigError(f"paths must be distinct, got {subs}")
        for p in subs:
            if Path(p).is_absolute() or ".." in Path(p).parts or p in ("", "."):
                raise ConfigError(f"paths entries must be plain relative directories, got {p!r}")
        self.gen.validate()
        a = self.attribution
        tags = []
        for name in a.mechanisms:
            try:
                tags.append(Tag(name))
            except ValueError:
                raise ConfigError(f"attribution.mechanisms: unknown mechanism {name!r}") from None
        if len(set(tags)) != len(tags):
            raise ConfigError("attribution.mechanisms contains duplicates")
        if not a.primary_tags:
            raise ConfigError("attribution.primary_tags must be non-empty")
        for p in a.primary_tags:
            if p not in (str(Tag.LAST_CLICK), str(Tag.REMOVAL_EFFECT_MTA)):
                raise ConfigError(f"attribution.primary_tags: {p!r} is not LastClick or RemovalEffectMTA")
            if p not in a.mechanisms:
                raise ConfigError(f"attribution.primary_tags: {p} is not in attribution.mechanisms")
        if a.label_mode not in LABEL_MODES:
            raise ConfigError(f"attribution.label_mode must be one of {LABEL_MODES}")
        if not 0.0 < a.train_fraction < 1.0:
            raise ConfigError("attribution.train_fraction must lie in (0, 1)")
        if a.time_decay_half_life <= 0:
            raise ConfigError("attribution.time_decay_half_life must be positive")
        t = self.train
        if not t.seeds:
            raise ConfigError("train.seeds must be non-empty")
        if len(set(t.seeds)) != len(t.seeds):
            raise ConfigError("train.seeds contains duplicates")
        for v in t.variants:
            if v not in VARIANTS:
                raise ConfigError(f"train.variants: unknown variant {v!r}")
            self.arch.for_variant(v).validate()
        if t.lr <= 0 or t.batch_size < 1 or t.epochs < 1:
            raise ConfigError("train.lr, train.batch_size and train.epochs must be positive")
        r = self.report
        if not 0.0 < r.user_window <= 1.0:
            raise ConfigError("report.user_window must lie in (0, 1]")
        if list(r.gain_edges) != sorted(set(r.gain_edges)) or len(r.gain_edges) < 2:
            raise ConfigError("report.gain_edges must be strictly increasing with at least two entries")
        return self

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    def path(self, kind: str) -> Path:
        return self.workdir / getattr(self.paths, kind)

    def section(self, name: str) -> dict:
        obj = getattr(self, name)
        d = obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_dict(self) -> dict:
        return {name: self.section(name) for name in SECTIONS}

    def digest(self, *names: str) -> str:
        """Hash of the named sections; by default every section except ``paths``."""
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in (names or SECTIONS[1:])}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


SECTIONS = ("paths", "gen", "attribution", "arch", "train", "report")
_TYPES = {
    "paths": Paths,
    "gen": GenConfig,
    "attribution": AttributionSettings,
    "arch": ArchConfig,
    "train": TrainSettings,
    "report": ReportSettings,
}


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _coerce(section: str, key: str, value, current):
    if section == "gen" and key == "industry_path_profile":
        try:
            return tuple(
                IndustryProfile(**p) if isinstance(p, dict) else IndustryProfile(float(p[0]), float(p[1])) for p in value
            )
        except (TypeError, ValueError, IndexError, KeyError):
            raise ConfigError("gen.industry_path_profile must be a list of [mean_clicks, carryover_gamma]") from None
    if isinstance(current, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{section}.{key} must be a list")
        return tuple(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false")
        return value
    if isinstance(current, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        return str(value)
    return value


def apply_overrides(cfg: ExperimentConfig, pairs: dict) -> ExperimentConfig:
    """``pairs`` maps dotted keys (``section.field``) to already-parsed values."""
    updates: dict[str, dict] = {}
    for dotted, value in pairs.items():
        section, _, key = dotted.partition(".")
        if section not in _TYPES or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        names = {f.name for f in fields(_TYPES[section])}
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(getattr(cfg, section), key)
        updates.setdefault(section, {})[key] = _coerce(section, key, value, current)
    for section, kv in updates.items():
        if section == "gen" and "industry_path_profile" in kv and "n_industries" not in kv:
            kv["n_industries"] = len(kv["industry_path_profile"])
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **kv)})
    return cfg


def parse_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    pairs = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            dotted = key if section == "root" else f"{section}.{key}"
            pairs[dotted] = parse_value(raw)
    return apply_overrides(base or ExperimentConfig(), pairs)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_text(p.read_text(encoding="utf-8"), cfg)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def dump_text(cfg: ExperimentConfig) -> str:
    """Fully resolved config in the same format :func:`parse_text` reads."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in cfg.section(name).items():
            if name == "gen" and key == "industry_path_profile":
                value = [[p["mean_clicks"], p["carryover_gamma"]] for p in value]
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)
