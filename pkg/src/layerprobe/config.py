"""TOML run configuration with strict key checking.

Relative paths resolve against the directory of the config file.
"""

from __future__ import annotations

import os
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cca import CcaConfig
from .dsp.lld import DspConfig

OUT_ENV = "LAYERPROBE_OUT"
DEFAULT_OUT = "layerprobe_out"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InventorySection:
    path: str
    expected_size: int | None = None


@dataclass(frozen=True)
class IngestSection:
    manifest: str
    alignments: str | None = None
    sampa_table: str | None = None
    labels: str | None = None


@dataclass(frozen=True)
class PoolSection:
    manifest: str
    mode: str = "phoneme"
    alignments: str | None = None
    tracks: str | None = None
    task: str = "vc"
    per_phone_cap: int = 600
    win_s: float = 2.0
    hop_s: float = 0.2
    core_s: float = 1.0
    name: str = "pooled"


@dataclass(frozen=True)
class CorpusSection:
    name: str
    manifest: str
    alignments: str


@dataclass(frozen=True)
class CcaPhonemeSection:
    corpus: tuple = ()
    per_phone_cap: int = 600
    svg: bool = True


@dataclass(frozen=True)
class CcaParalingSection:
    dataset: str
    classes: tuple = ("cry", "fuss", "babble")
    per_class: int = 1500
    standardize: bool = True
    svg: bool = True


@dataclass(frozen=True)
class ProbeTaskSection:
    name: str
    dataset: str
    classes: tuple


@dataclass(frozen=True)
class ProbeSection:
    task: tuple = ()
    dev_groups: tuple = ()
    test_groups: tuple = ()
    layers: tuple | None = None
    best_k_from: str | None = None
    best_k: int = 3
    lr: float = 1e-3
    epochs: int = 10
    batch: int = 32
    hidden: int = 256
    newbob_factor: float = 0.5
    newbob_threshold: float = 0.0025
    svg: bool = True


@dataclass(frozen=True)
class ScoreSection:
    reference: str
    hyp_a: str
    hyp_b: str | None = None
    name_a: str = "A"
    name_b: str = "B"
    mode: str = "segment"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    jobs: int = 1
    inventory: InventorySection | None = None
    cca: CcaConfig = CcaConfig()
    dsp: DspConfig = DspConfig()
    ingest: IngestSection | None = None
    pool: PoolSection | None = None
    cca_phoneme: CcaPhonemeSection | None = None
    cca_paraling: CcaParalingSection | None = None
    probe: ProbeSection | None = None
    score: ScoreSection | None = None
    source: str | None = field(default=None, compare=False)

    def echo(self, *sections: str) -> dict:
        """Settings that determine results: the seed plus the named sections."""
        out: dict[str, Any] = {"seed": self.seed}
        for name in sections:
            val = getattr(self, name)
            out[name] = None if val is None else _plain(asdict(val))
        return out

    def require(self, name: str):
        val = getattr(self, name)
        if val is None:
            raise ConfigError(f"config has no [{name}] section")
        return val


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_PATH_KEYS = {"path", "manifest", "alignments", "sampa_table", "labels", "tracks", "dataset",
              "best_k_from", "reference", "hyp_a", "hyp_b"}

_NESTED = {
    (CcaPhonemeSection, "corpus"): CorpusSection,
    (ProbeSection, "task"): ProbeTaskSection,
}


def _coerce(value, annotation: str, where: str):
    ann = annotation.replace(" ", "")
    optional = ann.endswith("|None")
    base = ann[:-5] if optional else ann
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: value required")
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if base == "tuple":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected an array")
        return tuple(value)
    return value


def _build(cls, table: Any, where: str, base_dir: Path):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls) if f.name != "source"}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    kwargs = {}
    for name, f in known.items():
        key = f"{where}.{name}"
        if name not in table:
            if f.default is MISSING and f.default_factory is MISSING:
                raise ConfigError(f"[{where}] missing required key {name!r}")
            continue
        value = table[name]
        sub = _NESTED.get((cls, name))
        if sub is not None:
            if not isinstance(value, list):
                raise ConfigError(f"{key}: expected an array of tables")
            kwargs[name] = tuple(_build(sub, v, f"{key}[{i}]", base_dir) for i, v in enumerate(value))
            continue
        value = _coerce(value, str(f.type), key)
        if name in _PATH_KEYS and isinstance(value, str) and not os.path.isabs(value):
            value = str(base_dir / value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


_SECTIONS = {
    "inventory": InventorySection,
    "cca": CcaConfig,
    "dsp": DspConfig,
    "ingest": IngestSection,
    "pool": PoolSection,
    "cca_phoneme": CcaPhonemeSection,
    "cca_paraling": CcaParalingSection,
    "probe": ProbeSection,
    "score": ScoreSection,
}
_TOP = {"seed": "int", "output_dir": "str", "jobs": "int"}


def config_from_dict(data: dict, base_dir: str | os.PathLike = ".", source: str | None = None) -> RunConfig:
    base = Path(base_dir)
    unknown = sorted(set(data) - set(_SECTIONS) - set(_TOP))
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, ann in _TOP.items():
        if key in data:
            kwargs[key] = _coerce(data[key], ann, key)
    if "output_dir" in kwargs and not os.path.isabs(kwargs["output_dir"]):
        kwargs["output_dir"] = str(base / kwargs["output_dir"])
    seed = kwargs.get("seed", 0)
    for name, cls in _SECTIONS.items():
        if name in data:
            table = dict(data[name]) if isinstance(data[name], dict) else data[name]
            if cls is CcaConfig and isinstance(table, dict):
                table.setdefault("seed", seed)
            kwargs[name] = _build(cls, table, name, base)
    if "cca" not in kwargs:
        kwargs["cca"] = CcaConfig(seed=seed)
    cfg = RunConfig(**kwargs, source=source)
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, Path(path).resolve().parent, str(path))


def with_overrides(cfg: RunConfig, seed: int | None = None, jobs: int | None = None,
                   output_dir: str | None = None) -> RunConfig:
    """Apply CLI flags, which win over the file."""
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
        changes["cca"] = CcaConfig(**{**asdict(cfg.cca), "seed": seed})
    if jobs is not None:
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        changes["jobs"] = jobs
    if output_dir is not None:
        changes["output_dir"] = output_dir
    if not changes:
        return cfg
    return RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **changes})


def resolve_output_dir(cfg: RunConfig, flag: str | None = None) -> Path:
    """``--out`` flag, then ``$LAYERPROBE_OUT``, then ``output_dir`` from the file."""
    if flag:
        return Path(flag)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir or DEFAULT_OUT)
