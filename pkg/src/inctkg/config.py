"""Sectioned key/value configuration (INI) resolved into the typed config objects."""
import configparser
import dataclasses
import itertools
import math

from .continual import RunConfig
from .data import SnapshotConfig
from .enhancement import EnhancementConfig
from .exceptions import ConfigError
from .sampling import SamplerConfig
from .synth import SynthConfig

SECTIONS = {
    "snapshot": SnapshotConfig,
    "run": RunConfig,
    "enhancement": EnhancementConfig,
    "sampler": SamplerConfig,
    "synth": SynthConfig,
}
_NESTED = {"enhancement", "sampler"}  # stored inside RunConfig

FULL_GRID = {
    "enhancement.lam": [0.3, 0.5, 0.7],
    "enhancement.mu": [0.1, 0.3, 0.5],
    "enhancement.n_similar": [10, 15, 20, 25],
    "sampler.alpha": [0.0, 0.1, 0.2, 0.5, 0.8, 1.0],
}
PRESETS = {"full": FULL_GRID}


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in _NESTED}


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _coerce(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(_number(p) for p in text.replace("(", "").replace(")", "").split(",") if p.strip())
        if default is None:
            return None if text.lower() in ("", "none") else int(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def _number(text):
    text = text.strip()
    if text in ("inf", "infinity"):
        return math.inf
    try:
        return int(text)
    except ValueError:
        return float(text)


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return str(value)


@dataclasses.dataclass
class CliConfig:
    snapshot: SnapshotConfig = dataclasses.field(default_factory=SnapshotConfig)
    run: RunConfig = dataclasses.field(default_factory=RunConfig)
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)

    @property
    def enhancement(self):
        return self.run.enhancement

    @property
    def sampler(self):
        return self.run.sampler

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            obj = getattr(self, name)
            out[name] = {k: _jsonable(getattr(obj, k)) for k in _fields(type(obj))}
        return out

    def to_ini(self):
        parser = configparser.ConfigParser()
        for name in SECTIONS:
            obj = getattr(self, name)
            parser[name] = {k: _format(getattr(obj, k)) for k in _fields(type(obj))}
        return parser

    def with_overrides(self, overrides):
        values = self._raw()
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or name not in _fields(SECTIONS[section]):
                raise ConfigError(f"unknown config key {key!r}")
            values[section][name] = value
        return _build(values)

    def _raw(self):
        return {name: {k: getattr(getattr(self, name), k) for k in _fields(SECTIONS[name])}
                for name in SECTIONS}


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _build(values):
    try:
        enh = EnhancementConfig(**values["enhancement"])
        sam = SamplerConfig(**values["sampler"])
        run = RunConfig(enhancement=enh, sampler=sam, **values["run"])
        return CliConfig(SnapshotConfig(**values["snapshot"]), run, SynthConfig(**values["synth"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def parse_assignments(items):
    """``["section.key=value", ...]`` -> {"section.key": "value"}."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=None):
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    raw = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser[section].items():
                raw[f"{section}.{key}"] = value
    raw.update(overrides or {})
    values = CliConfig()._raw()
    for key, text in raw.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} (valid: {', '.join(SECTIONS)})")
        fields = _fields(SECTIONS[section])
        if name not in fields:
            raise ConfigError(f"unknown key {name!r} in section [{section}]")
        values[section][name] = _coerce(text, _default(fields[name]), key) if isinstance(text, str) else text
    return _build(values)


def load_grid(path=None, preset=None):
    """Grid as {"section.key": [values]} from a preset name or an INI file with a [grid] section."""
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown grid preset {preset!r} (valid: {', '.join(PRESETS)})")
        return dict(PRESETS[preset])
    if path is None:
        raise ConfigError("a grid file or preset is required")
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if "grid" not in parser:
        raise ConfigError(f"{path}: missing [grid] section")
    grid = {}
    for key, text in parser["grid"].items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in _fields(SECTIONS[section]):
            raise ConfigError(f"unknown grid key {key!r}")
        default = _default(_fields(SECTIONS[section])[name])
        grid[key] = [_coerce(v, default, key) for v in text.split(",") if v.strip()]
    return grid


def grid_cells(grid):
    """Cartesian product of a grid, as a list of override dicts (keys in sorted order)."""
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
