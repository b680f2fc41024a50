"""Pipeline configuration: a flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .ingest import DEFAULT_BASE_YEAR, DEFAULT_PREFIX_THRESHOLD, DEFAULT_TOP_DOMAINS
from .matrix import DEFAULT_TENSOR_BUILDINGS, DEFAULT_TENSOR_DOMAINS
from .som import DEFAULT_EPOCHS, DEFAULT_UNITS

_SECTION = "trendmap"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    # paths
    flows: str | None = None
    dhcp: str | None = None
    sessions: str | None = None
    domain_map: str | None = None
    out: str = "out"
    usage: str | None = None  # defaults to <out>/usage.csv

    # ingest
    flow_delimiter: str | None = None
    flow_header: bool = False
    base_year: int = DEFAULT_BASE_YEAR
    prefix_threshold: int = DEFAULT_PREFIX_THRESHOLD
    top_domains: int = DEFAULT_TOP_DOMAINS

    # matrices
    top_buildings: int = 79
    tensor_domains: int = DEFAULT_TENSOR_DOMAINS
    tensor_buildings: int = DEFAULT_TENSOR_BUILDINGS
    log_transform: bool = True
    row_norm: str = "l1"

    # SOM
    units: int = DEFAULT_UNITS
    topology: str = "rectangular"
    init: str = "linear"
    epochs: int = DEFAULT_EPOCHS
    r0: float | None = None
    r_final: float | None = None
    eta0: float | None = None
    eta_final: float | None = None
    radius_decay: str | None = None
    rate_decay: str | None = None

    # analysis
    k_trends: int = 20
    k_features: int = 20
    restarts: int = 10
    linkage: str = "average"
    cell_pixels: int = 12
    interpolate: bool = False

    # GMM
    r_est: float | None = None
    gmm_covariance: str = "auto"
    gmm_min_weight: float = 1.0

    seed: int = 0

    _source: str | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        counts = ("prefix_threshold", "top_domains", "top_buildings", "tensor_domains", "tensor_buildings",
                  "units", "epochs", "k_trends", "k_features", "restarts", "cell_pixels")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.row_norm not in ("l1", "l2", "max", "none"):
            raise ConfigError("row_norm must be l1, l2, max or none")
        if self.gmm_covariance not in ("auto", "full", "diag"):
            raise ConfigError("gmm_covariance must be auto, full or diag")
        if self.linkage not in ("average", "complete"):
            raise ConfigError("linkage must be average or complete")

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.out)

    @property
    def usage_path(self) -> Path:
        return self.resolve(self.usage) if self.usage else self.out_dir / "usage.csv"

    def schedule_overrides(self) -> dict:
        keys = ("r0", "r_final", "eta0", "eta_final", "radius_decay", "rate_decay")
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}

    def resolve(self, path: str | None) -> Path | None:
        """Paths in a config file are relative to that file."""
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self._source:
            p = Path(self._source).parent / p
        return p


_FIELDS = {f.name: f for f in fields(PipelineConfig) if not f.name.startswith("_")}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    kind = str(f.type)
    text = raw.strip()
    if text.lower() in ("", "none", "null") and "None" in kind:
        return None
    try:
        if kind.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return text


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, val = pair.partition("=")
        key = key.strip()
        if not sep or key not in _FIELDS:
            raise ConfigError(f"bad override {pair!r} (expected KEY=VALUE with a known key)")
        out[key] = _coerce(key, val)
    return out


def load_config(path: str | Path | None = None, **overrides) -> PipelineConfig:
    """Read a config file (if given) and apply keyword overrides on top."""
    values: dict = {}
    source = None
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(f"[{_SECTION}]\n" + path.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for key, raw in parser.items(_SECTION):
            if key not in _FIELDS:
                raise ConfigError(f"{path}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
        source = str(path)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg._source = source
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for name in _FIELDS:
        val = getattr(cfg, name)
        if val is None:
            continue
        lines.append(f"{name} = {str(val).lower() if isinstance(val, bool) else val}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: PipelineConfig, **overrides) -> PipelineConfig:
    src = cfg._source
    new = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    new._source = src
    return new
