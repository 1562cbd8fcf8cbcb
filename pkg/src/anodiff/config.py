"""Declarative run configuration: an INI file with sections, plus
command-line overrides of the form ``section.key=value``.

Every command writes the fully resolved configuration into its output
directory, so any experiment can be reproduced from that file alone.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .nn.unet import ArchConfig
from .pipeline import PipelineConfig
from .training import TrainConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    t_max: int = 1000
    beta_1: float = 1e-4
    beta_t: float = 0.02


@dataclass(frozen=True)
class DataConfig:
    size: int = 64
    train_healthy: int = 512
    test_healthy: int = 8
    test_anomalous_per_class: int = 4
    intensity_modes: tuple[str, ...] = ("hypo", "hyper")
    deform_amplitude: float = 2.5
    texture_amplitude: float = 0.02
    irregularity: float = 0.35


@dataclass(frozen=True)
class EvalConfig:
    noise_levels: tuple[int, ...] = (50, 100, 150, 200, 250, 300)
    seeds: int = 5
    batch_rows: int = 8
    ssim_margin: float = 0.05      # inpaint SSIM advantage over baseline(t_mask)
    boundary_win_rate: float = 0.80
    workers: int = 1


@dataclass(frozen=True)
class DenoiserConfig:
    type: str = "unet"             # "unet" or "analytic"
    checkpoint: str = ""
    mu0: str = "const:0.5"         # const:<v> | image:<path> | dataset-mean:<dir>
    sigma0_sq: float = 0.01


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)


_SECTIONS = {
    "run": None,  # holds the master seed
    "schedule": ScheduleConfig,
    "arch": ArchConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "pipeline": PipelineConfig,
    "eval": EvalConfig,
    "denoiser": DenoiserConfig,
}


def _parse_value(raw: str, kind, name: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is str:
            return raw
        # tuples: comma-separated elements of the tuple's element type
        origin = getattr(kind, "__origin__", None)
        if origin is tuple:
            elem = kind.__args__[0]
            parts = [p for p in raw.split(",") if p.strip()]
            return tuple(_parse_value(p, elem, name) for p in parts)
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r}") from e
    raise ConfigError(f"cannot parse option {name} of type {kind}")


def _build_section(cls, options: dict[str, str], section: str):
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in options.items():
        if key not in known:
            raise ConfigError(f"unknown option [{section}] {key}")
        kwargs[key] = _parse_value(raw, _ANNOT[cls, key], f"[{section}] {key}")
    return cls(**kwargs)


# dataclass annotations arrive as strings (from __future__ annotations);
# resolve them once per dataclass
_ANNOT: dict = {}


def _resolve_annotations() -> None:
    import typing
    for cls in _SECTIONS.values():
        if cls is None:
            continue
        hints = typing.get_type_hints(cls)
        for name, hint in hints.items():
            _ANNOT[cls, name] = hint


_resolve_annotations()


def load_config(path=None, overrides: list[str] = ()) -> RunConfig:
    """Parse the INI file (optional) and apply section.key=value overrides."""
    parser = configparser.ConfigParser()
    if path is not None:
        text = Path(path).read_text()
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {ov!r}")
        target, value = ov.split("=", 1)
        section, key = target.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), key.strip(), value.strip())

    sections: dict[str, object] = {}
    seed = 0
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        opts = dict(parser.items(name))
        if name == "run":
            extra = set(opts) - {"seed"}
            if extra:
                raise ConfigError(f"unknown option(s) in [run]: {sorted(extra)}")
            if "seed" in opts:
                seed = _parse_value(opts["seed"], int, "[run] seed")
        else:
            sections[name] = _build_section(_SECTIONS[name], opts, name)
    cfg = RunConfig(seed=seed, **sections)
    try:
        cfg.arch.validate()
        cfg.train.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Resolved INI text; parsing it back yields an identical RunConfig."""
    parser = configparser.ConfigParser()
    parser.add_section("run")
    parser.set("run", "seed", str(cfg.seed))
    for name, cls in _SECTIONS.items():
        if cls is None:
            continue
        obj = getattr(cfg, name)
        parser.add_section(name)
        for f in fields(cls):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            parser.set(name, f.name, repr(v) if isinstance(v, float) else str(v))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
