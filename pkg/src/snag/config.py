"""Plain-text run configuration: ``section.key = value`` lines, ``#`` comments."""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path

from .gmnm import NoiseConfig
from .graphdata import SyntheticSpec
from .kgc import KgcConfig
from .mmea import MmeaConfig


class ConfigError(ValueError):
    pass


def _fields(cls, skip=("noise",)) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = default
    return out


# Keys whose default is None take the task-specific default at build time.
SCHEMA: dict[str, dict] = {
    "run": {"seed": 0, "task": "kgc"},
    "data": {"source": "synthetic", "dir": ""},
    # held-out triples so completion runs have something to evaluate by default
    "synth": {**_fields(SyntheticSpec), "valid_ratio": 0.1, "test_ratio": 0.1},
    "kgc": _fields(KgcConfig, skip=("noise", "heads", "ffn_dim", "variant")),
    "ea": _fields(MmeaConfig, skip=("noise", "heads", "ffn_dim")),
    "fusion": {"heads": None, "ffn_dim": None, "variant": "transformer"},
    "gmnm": {**_fields(NoiseConfig), "modalities": None},
    "eval": {"split": "test", "filtered": True, "pool": "test"},
    "ablate": {"seeds": 5, "groups": ("gmnm", "fusion", "dropout"),
               "dropout_rates": (0.1, 0.2, 0.3, 0.4)},
}

CHOICES = {
    "run.task": ("kgc", "ea"),
    "data.source": ("synthetic", "files"),
    "eval.split": ("train", "valid", "test"),
    "eval.pool": ("test", "full"),
}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(x) for x in items)
            return tuple(items)
        if default is None:
            if raw.lower() in ("", "none", "auto"):
                return None
            if key == "gmnm.modalities":
                return tuple(x.strip() for x in raw.split(",") if x.strip())
            return int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Validated configuration; every key of :data:`SCHEMA` resolved to a value."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = {f"{s}.{k}": v for s, keys in SCHEMA.items() for k, v in keys.items()}
        for key, value in (values or {}).items():
            if key not in self.values:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = value
        for key, allowed in CHOICES.items():
            if self.values[key] not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {self.values[key]!r}")
        if self.values["data.source"] == "files" and not self.values["data.dir"]:
            raise ConfigError("missing config key data.dir (required when data.source = files)")
        # build everything once so bad values fail before any compute
        self.synthetic_spec()
        self.kgc_config()
        self.ea_config()

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["run.seed"])

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def noise_config(self, task: str) -> NoiseConfig:
        noise = self.section("gmnm")
        if noise["modalities"] is None:
            noise["modalities"] = ("v", "s") if task == "kgc" else ("g", "r", "a", "v", "s")
        return NoiseConfig(**noise)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.section("synth"))

    def _fusion(self, task: str) -> dict:
        f = self.section("fusion")
        return {"heads": f["heads"] if f["heads"] is not None else (2 if task == "kgc" else 1),
                "ffn_dim": f["ffn_dim"]}

    def kgc_config(self) -> KgcConfig:
        try:
            return KgcConfig(**self.section("kgc"), **self._fusion("kgc"),
                             variant=self.values["fusion.variant"], noise=self.noise_config("kgc"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def ea_config(self) -> MmeaConfig:
        try:
            return MmeaConfig(**self.section("ea"), **self._fusion("ea"), noise=self.noise_config("ea"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **updates) -> "RunConfig":
        """Copy with ``section__key=value`` overrides."""
        values = dict(self.values)
        for name, value in updates.items():
            key = name.replace("__", ".", 1)
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return RunConfig(values)

    def echo(self) -> str:
        """Full resolved configuration in the same text format (re-parsable)."""
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in self.values.items())


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    defaults = RunConfig().values
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw, SCHEMA[key.split(".")[0]][key.split(".", 1)[1]])
    return RunConfig(values)


def load_config(path: str | Path | None, env: dict | None = None) -> RunConfig:
    """Read a config file (defaults when ``path`` is None); ``SNAG_SEED`` overrides ``run.seed``."""
    cfg = parse_config(Path(path).read_text(encoding="utf-8"), str(path)) if path else RunConfig()
    env = os.environ if env is None else env
    if env.get("SNAG_SEED"):
        try:
            cfg = cfg.replace(run__seed=int(env["SNAG_SEED"]))
        except ValueError:
            raise ConfigError(f"SNAG_SEED must be an integer, got {env['SNAG_SEED']!r}") from None
    return cfg
