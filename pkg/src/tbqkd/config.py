"""Run configuration files.

A run config is TOML with a schema string and one table per model section::

    schema = "tbqkd-run/1"

    [protocol]
    mu_signal = 0.48

    [channel]
    attenuation_db = 10.0

    [receiver]
    variant = "pic"          # picks the shipped profile; other keys override it

    [detector]
    [security]
    [run]
    seed = 1

Every key is optional; omitted values come from the calibrated profiles in
:mod:`tbqkd.profiles`. Unknown keys are errors in strict mode and warnings in
lax mode. Errors carry the dotted path of the offending field.
"""
from __future__ import annotations

import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import profiles
from .finite_key import DEFAULT_MAX_BLOCK_TIME_S, SearchSpace, SecurityParams
from .link import ChannelModel, DetectorModel, DriftModel, LinkModel, ReceiverModel, Variant
from .protocol import ConfigError, ProtocolConfig, TimingGrid

log = logging.getLogger(__name__)

SCHEMA = "tbqkd-run/1"


class ConfigFileError(ConfigError):
    """Invalid run configuration; ``path`` is the dotted field path when known."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    duration_s: float | None = None
    max_block_time_s: float = DEFAULT_MAX_BLOCK_TIME_S
    out_dir: str = "out"
    attenuations: tuple[float, ...] = tuple(float(a) for a in range(0, 50, 5))
    stability_duration_s: float = 50 * 3600.0
    window_s: float = 600.0
    sample_interval_s: float = 60.0
    timestamp: bool = True

    def __post_init__(self):
        if self.duration_s is not None and not self.duration_s > 0:
            raise ConfigError("duration_s must be > 0")
        for name in ("max_block_time_s", "stability_duration_s", "window_s", "sample_interval_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    protocol: ProtocolConfig = field(default_factory=profiles.default_config)
    channel: ChannelModel = field(default_factory=ChannelModel)
    receiver: ReceiverModel = field(default_factory=profiles.pic_receiver)
    detector: DetectorModel = field(default_factory=profiles.detector)
    security: SecurityParams | None = None
    search: SearchSpace = field(default_factory=SearchSpace)
    run: RunSection = field(default_factory=RunSection)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.security is None:
            object.__setattr__(self, "security", SecurityParams.from_config(self.protocol))
        self.detector.check_timing(self.protocol)

    @property
    def link(self) -> LinkModel:
        return LinkModel(self.channel, self.receiver, self.detector)

    def link_for(self, variant: Variant | str) -> LinkModel:
        """Configured receiver if it is ``variant``, else that variant's shipped profile."""
        variant = Variant(variant)
        rec = self.receiver if self.receiver.variant is variant else profiles.receiver(variant)
        return LinkModel(self.channel, rec, self.detector)


_TYPES = {float: (int, float), int: (int,), bool: (bool,), str: (str,)}


def _coerce(value, annotation: str, path: str):
    kinds = {"float": float, "int": int, "bool": bool, "str": str}
    base = annotation.replace(" | None", "").strip()
    if "None" in annotation and value is None:
        return None
    if base.startswith("tuple"):
        if not isinstance(value, list):
            raise ConfigFileError(f"expected a list, got {type(value).__name__}", path)
        inner = kinds["float" if "float" in base else "int"]
        return tuple(_coerce(v, inner.__name__, f"{path}[{i}]") for i, v in enumerate(value))
    if base == "Variant":
        try:
            return Variant(value)
        except ValueError:
            raise ConfigFileError(f"expected one of {[v.value for v in Variant]}, got {value!r}", path) from None
    kind = kinds.get(base)
    if kind is None:
        return value
    if isinstance(value, bool) and kind is not bool:
        raise ConfigFileError(f"expected {base}, got bool", path)
    if not isinstance(value, _TYPES[kind]):
        raise ConfigFileError(f"expected {base}, got {type(value).__name__}", path)
    return float(value) if kind is float else value


def _section(cls, base, table: dict, path: str, strict: bool, warnings: list, nested=None):
    """Build ``cls`` from ``base`` overridden by ``table``; nested tables via ``nested``."""
    if not isinstance(table, dict):
        raise ConfigFileError("expected a table", path)
    nested = nested or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    changes: dict[str, Any] = {}
    for key, value in table.items():
        sub = f"{path}.{key}"
        if key in nested:
            changes[key] = nested[key](value, sub)
        elif key in fields and fields[key].init:
            changes[key] = _coerce(value, str(fields[key].type), sub)
        else:
            _unknown(sub, strict, warnings)
    try:
        return dataclasses.replace(base, **changes) if base is not None else cls(**changes)
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigFileError(str(exc), _blame(path, str(exc), changes)) from None


def _blame(path: str, message: str, changes: dict) -> str:
    for key in changes:
        if key in message:
            return f"{path}.{key}"
    return path


def _unknown(path: str, strict: bool, warnings: list):
    if strict:
        raise ConfigFileError("unknown key", path)
    msg = f"{path}: unknown key ignored"
    log.warning(msg)
    warnings.append(msg)


def parse_run_config(data: dict, *, strict: bool = True) -> RunConfig:
    warnings: list[str] = []
    schema = data.get("schema")
    if schema != SCHEMA:
        raise ConfigFileError(f"expected {SCHEMA!r}, got {schema!r}", "schema")
    known = {"schema", "protocol", "channel", "receiver", "detector", "security", "search", "run"}
    for key in data:
        if key not in known:
            _unknown(key, strict, warnings)

    def timing(table, path):
        return _section(TimingGrid, None, table, path, strict, warnings)

    protocol = _section(ProtocolConfig, profiles.default_config(), data.get("protocol", {}), "protocol",
                        strict, warnings, {"timing": timing})
    channel = _section(ChannelModel, None, data.get("channel", {}), "channel", strict, warnings)

    rec_table = dict(data.get("receiver", {}))
    variant = _coerce(rec_table.get("variant", "pic"), "Variant", "receiver.variant")

    def drift(table, path):
        return _section(DriftModel, profiles.receiver(variant).drift, table, path, strict, warnings)

    receiver = _section(ReceiverModel, profiles.receiver(variant), rec_table, "receiver", strict, warnings,
                        {"drift": drift})
    detector = _section(DetectorModel, profiles.detector(), data.get("detector", {}), "detector",
                        strict, warnings)
    sec_table = data.get("security", {})
    security = _section(SecurityParams, SecurityParams.from_config(protocol), sec_table, "security",
                        strict, warnings)
    if "eps_sec" in sec_table and "eps_partition" not in sec_table:
        security = SecurityParams(security.eps_sec, security.eps_corr)
    search = _section(SearchSpace, SearchSpace(), data.get("search", {}), "search", strict, warnings)
    run = _section(RunSection, RunSection(), data.get("run", {}), "run", strict, warnings)
    try:
        return RunConfig(protocol, channel, receiver, detector, security, search, run, tuple(warnings))
    except ConfigError as exc:
        raise ConfigFileError(str(exc), "detector.gate_width_ps") from None


def load_run_config(path: str | Path, *, strict: bool = True) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigFileError(f"{path}: not valid TOML: {exc}") from None
    return parse_run_config(data, strict=strict)
