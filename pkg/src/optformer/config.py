"""Run configuration: one strict TOML (or JSON) document for every module.

Unknown sections or keys are rejected so a typo cannot silently fall back to
a default. ``seed`` seeds model initialization and data sampling unless the
``model``/``train`` sections set their own.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from .blocks import ModelConfig
from .errors import ConfigError
from .filterlab import DEFAULT_KAPPAS
from .harness import CorpusSpec, FinetuneConfig, TrainConfig
from .paramopt import OptimConfig, Schedule

RESOLVED_NAME = "resolved_config.json"
PRESET_PREFIX = "preset:"


@dataclass
class DiagConfig:
    cutoff: float = 1e-6
    probe_batches: int = 2
    power_iters: int = 50
    power_tol: float = 1e-3
    probes: int = 10
    curve_grid: int = 21
    alpha_max: float = 1.0
    direction_seed: int = 0
    ft_steps: int = 100


@dataclass
class FilterlabConfig:
    kappas: list = field(default_factory=lambda: list(DEFAULT_KAPPAS))
    depth: int = 200
    n_modes: int = 9
    epsilons: list = field(default_factory=lambda: [0.01, 0.1, 0.5, 1.0])
    redundancy_vectors: int = 1000
    redundancy_dim: int = 32
    factorization_instances: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    variants: list = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: Schedule = field(default_factory=lambda: Schedule(total=500, warmup=25))
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    diagnostics: DiagConfig = field(default_factory=DiagConfig)
    filterlab: FilterlabConfig = field(default_factory=FilterlabConfig)

    def to_dict(self):
        d = {"seed": self.seed, "out": self.out, "variants": list(self.variants)}
        for name in SECTIONS:
            obj = getattr(self, name)
            d[name] = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
        d["finetune"]["betas"] = list(self.finetune.betas)
        return d

    def write_resolved(self, directory):
        path = Path(directory) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path


SECTIONS = {
    "model": ModelConfig,
    "optim": OptimConfig,
    "corpus": CorpusSpec,
    "train": TrainConfig,
    "schedule": Schedule,
    "finetune": FinetuneConfig,
    "diagnostics": DiagConfig,
    "filterlab": FilterlabConfig,
}
TOP_KEYS = {"seed", "out", "variants"}


def _build(section, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def from_dict(doc, seed=None):
    """Build a :class:`RunConfig`; ``seed`` overrides the document's global seed."""
    unknown = sorted(set(doc) - TOP_KEYS - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    gseed = int(doc.get("seed", 0) if seed is None else seed)
    parts = {}
    for name, cls in SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        values = dict(values)
        if seed is not None or "seed" not in values:
            if name == "model":
                values["seed"] = gseed
        if name == "train" and (seed is not None or "data_seed" not in values):
            values["data_seed"] = gseed
        if name == "schedule":
            # default: cover the training run, 5% warmup
            values.setdefault("total", max(parts["train"].steps, 1))
            values.setdefault("warmup", round(0.05 * values["total"]))
        parts[name] = _build(name, cls, values)
    variants = doc.get("variants", [])
    if not isinstance(variants, list):
        raise ConfigError("variants must be a list of names")
    return RunConfig(seed=gseed, out=doc.get("out"), variants=variants, **parts)


def presets():
    """Names of the bundled presets (``toy``, ``full-owt``, ...)."""
    root = resources.files("optformer") / "presets"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".toml"))


def load(path, seed=None):
    """Read a ``.toml`` or ``.json`` run config, or ``preset:NAME``."""
    path = str(path)
    if path.startswith(PRESET_PREFIX):
        name = path[len(PRESET_PREFIX):]
        if name not in presets():
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(presets())}")
        p = resources.files("optformer") / "presets" / f"{name}.toml"
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    try:
        doc = json.loads(text) if p.name.endswith(".json") else tomli.loads(text)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    return from_dict(doc, seed)
