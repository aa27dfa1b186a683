"""Flat ``key = value`` experiment configuration with dotted sections.

Example::

    # generator-backed cohort
    data.generator.n_subjects = 8
    data.shift.noise_sigma = 10
    split.scheme = LOSO
    adapt.lr0 = 1e-3
    experiment.seeds = 0,1,2,3,4
    experiment.grid = table4
    grid.no_kd_no_div = use_kd=false use_div=false
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .branch import DEFAULT_ARCH, Role
from .data import ShiftSpec, parse_pipeline
from .engine import AdaptationConfig


class ConfigError(ValueError):
    pass


TABLE4_GRID: list[tuple[str, dict]] = [
    ("no_mask", {"use_consensus_mask": False}),
    ("no_mask_no_ce", {"use_consensus_mask": False, "use_ce": False}),
    ("no_mi", {"use_mi": False}),
    ("no_kd", {"use_kd": False}),
    ("no_div", {"use_div": False}),
]
TABLE6_GRID: list[tuple[str, dict]] = [
    (v, {"pseudo_label_variant": v}) for v in ("fm_proto", "fm_linear", "sm_proto", "sm_linear")
]
PRESETS = {"table4": TABLE4_GRID, "table6": TABLE6_GRID}


@dataclass
class GeneratorSpec:
    n_subjects: int = 8
    trials_per_class: int = 20
    n_channels: int = 8
    n_times: int = 256
    n_classes: int = 4
    sampling_rate: float = 128.0

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


@dataclass
class ExperimentSpec:
    dataset_path: str | None = None
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    pipeline: str = ""
    scheme: str = "LOSO"
    group_size: int = 10
    config: AdaptationConfig = field(default_factory=AdaptationConfig)
    grid: list[tuple[str, dict]] = field(default_factory=list)
    grid_presets: list[str] = field(default_factory=list)
    output_dir: str = "runs/experiment"
    seeds: list[int] = field(default_factory=lambda: [0])
    max_folds: int = 0  # 0 means every fold
    jobs: int = 1
    fm_arch: dict = field(default_factory=lambda: dict(DEFAULT_ARCH[Role.FM]))
    sm_arch: dict = field(default_factory=lambda: dict(DEFAULT_ARCH[Role.SM]))

    def resolved_grid(self) -> list[tuple[str, dict]]:
        """``full`` first, then preset rows, then custom rows."""
        rows = [("full", {})]
        for name in self.grid_presets:
            rows.extend(PRESETS[name])
        rows.extend(self.grid)
        return rows

    def config_for(self, overrides: dict, seed: int) -> AdaptationConfig:
        return dataclasses.replace(self.config, seed=seed, **overrides)


# --- value parsing ------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _coerce(text: str, kind: type, optional: bool = False):
    text = text.strip()
    if optional and text.lower() in ("none", ""):
        return None
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"expected an integer, got {text!r}") from None
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"expected a number, got {text!r}") from None
    return text


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _adapt_schema() -> dict[str, tuple[type, bool]]:
    schema = {}
    for f in dataclasses.fields(AdaptationConfig):
        kind = str(f.type)
        optional = "None" in kind
        base = {"int": int, "float": float, "bool": bool, "str": str}[kind.split("|")[0].strip()]
        schema[f.name] = (base, optional)
    return schema


ADAPT_SCHEMA = _adapt_schema()
GENERATOR_SCHEMA = {"n_subjects": int, "trials_per_class": int, "n_channels": int, "n_times": int,
                    "n_classes": int, "sampling_rate": float}
SHIFT_SCHEMA = {"mixing_severity": float, "amplitude_jitter": float, "noise_sigma": float, "seed": int}
ARCH_SCHEMA = {role: {k: type(v) for k, v in DEFAULT_ARCH[role].items()} for role in Role}


def parse_overrides(text: str, where: str = "grid") -> dict:
    """``"use_kd=false use_div=false"`` -> validated AdaptationConfig overrides."""
    out = {}
    for item in text.replace(",", " ").split():
        if "=" not in item:
            raise ConfigError(f"{where}: expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        if k not in ADAPT_SCHEMA:
            raise ConfigError(f"{where}.{k}: unknown key")
        kind, optional = ADAPT_SCHEMA[k]
        try:
            out[k] = _coerce(v, kind, optional)
            AdaptationConfig(**{k: out[k]})
        except ValueError as exc:
            raise ConfigError(f"{where}.{k}: {exc}") from None
    return out


def _read_pairs(text: str, source: str) -> list[tuple[str, str, int]]:
    pairs, seen = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: {key} already set on line {seen[key]}")
        seen[key] = lineno
        pairs.append((key, value, lineno))
    return pairs


def parse_config_text(text: str, source: str = "<config>") -> ExperimentSpec:
    spec = ExperimentSpec()
    adapt, gen, shift = {}, {}, {}
    arch = {Role.FM: dict(spec.fm_arch), Role.SM: dict(spec.sm_arch)}
    for key, value, lineno in _read_pairs(text, source):
        loc = f"{source}:{lineno}: {key}"
        section, _, rest = key.partition(".")
        try:
            if section == "adapt" and rest in ADAPT_SCHEMA:
                kind, optional = ADAPT_SCHEMA[rest]
                adapt[rest] = _coerce(value, kind, optional)
                AdaptationConfig(**{rest: adapt[rest]})
            elif key.startswith("data.generator.") and key[15:] in GENERATOR_SCHEMA:
                gen[key[15:]] = _coerce(value, GENERATOR_SCHEMA[key[15:]])
                GeneratorSpec(**{key[15:]: gen[key[15:]]})
            elif key.startswith("data.shift.") and key[11:] in SHIFT_SCHEMA:
                shift[key[11:]] = _coerce(value, SHIFT_SCHEMA[key[11:]])
                ShiftSpec(**{key[11:]: shift[key[11:]]})
            elif key == "data.path":
                spec.dataset_path = value or None
            elif key == "data.pipeline":
                parse_pipeline(value)
                spec.pipeline = value
            elif key == "split.scheme":
                if value.upper() not in ("LOSO", "LOGO"):
                    raise ValueError(f"expected LOSO or LOGO, got {value!r}")
                spec.scheme = value.upper()
            elif key == "split.group_size":
                spec.group_size = _coerce(value, int)
                if spec.group_size < 1:
                    raise ValueError("must be >= 1")
            elif key == "experiment.output_dir":
                spec.output_dir = value
            elif key == "experiment.seeds":
                spec.seeds = [_coerce(s, int) for s in value.replace(",", " ").split()]
                if not spec.seeds:
                    raise ValueError("at least one seed is required")
            elif key == "experiment.jobs":
                spec.jobs = _coerce(value, int)
                if spec.jobs < 1:
                    raise ValueError("must be >= 1")
            elif key == "experiment.max_folds":
                spec.max_folds = _coerce(value, int)
                if spec.max_folds < 0:
                    raise ValueError("must be >= 0")
            elif key == "experiment.grid":
                names = [s for s in value.replace(",", " ").split() if s.lower() != "none"]
                for n in names:
                    if n not in PRESETS:
                        raise ValueError(f"unknown preset {n!r}; choose from {sorted(PRESETS)}")
                spec.grid_presets = names
            elif section == "grid" and rest:
                if rest == "full" or any(rest == n for n, _ in spec.grid):
                    raise ValueError("grid entry name already used")
                spec.grid.append((rest, parse_overrides(value, key)))
            elif section == "arch" and rest[:2] in ("fm", "sm") and rest[2:3] == ".":
                role = Role(rest[:2].upper())
                name = rest[3:]
                if name not in ARCH_SCHEMA[role]:
                    raise KeyError(name)
                arch[role][name] = _coerce(value, ARCH_SCHEMA[role][name])
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigError(f"{loc}: unknown key") from None
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{loc}: {exc}") from None
    try:
        spec.config = AdaptationConfig(**adapt)
        spec.generator = GeneratorSpec(**gen)
        spec.shift = ShiftSpec(**shift)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    spec.fm_arch, spec.sm_arch = arch[Role.FM], arch[Role.SM]
    return spec


def parse_config(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path))


def echo_config(spec: ExperimentSpec) -> str:
    """Every resolved key, one per line; ``parse_config_text(echo_config(s)) == s``."""
    lines = []
    if spec.dataset_path:
        lines.append(f"data.path = {spec.dataset_path}")
    for f in dataclasses.fields(spec.generator):
        lines.append(f"data.generator.{f.name} = {_fmt(getattr(spec.generator, f.name))}")
    for f in dataclasses.fields(spec.shift):
        lines.append(f"data.shift.{f.name} = {_fmt(getattr(spec.shift, f.name))}")
    if spec.pipeline:
        lines.append(f"data.pipeline = {spec.pipeline}")
    lines.append(f"split.scheme = {spec.scheme}")
    lines.append(f"split.group_size = {spec.group_size}")
    for f in dataclasses.fields(spec.config):
        lines.append(f"adapt.{f.name} = {_fmt(getattr(spec.config, f.name))}")
    for role, arch in ((Role.FM, spec.fm_arch), (Role.SM, spec.sm_arch)):
        for k in sorted(arch):
            lines.append(f"arch.{role.value.lower()}.{k} = {_fmt(arch[k])}")
    lines.append(f"experiment.output_dir = {spec.output_dir}")
    lines.append(f"experiment.seeds = {','.join(map(str, spec.seeds))}")
    lines.append(f"experiment.max_folds = {spec.max_folds}")
    lines.append(f"experiment.jobs = {spec.jobs}")
    lines.append(f"experiment.grid = {','.join(spec.grid_presets) or 'none'}")
    for name, overrides in spec.grid:
        lines.append(f"grid.{name} = " + " ".join(f"{k}={_fmt(v)}" for k, v in overrides.items()))
    return "\n".join(lines) + "\n"
