"""Run configuration: YAML sections for paths, instances, limits, training and evaluation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .bnc import SolveLimits
from .instances import FAMILIES, PRESETS, GeneratorSpec, validate_generator_params
from .learning import BRANCH_CHOICES, CUT_CHOICES, ConfigError, TrainConfig

SPLITS = ("train", "valid", "test")
# instance seed = split offset + index, so splits never share a seed
SPLIT_OFFSETS = {"train": 0, "valid": 1_000_000, "test": 2_000_000}


def _default_families() -> list[dict]:
    return [{"family": f, "params": dict(PRESETS["desk"][f])} for f in FAMILIES]


@dataclass
class RunConfig:
    seed: int = 0
    family: str = "SetCovering"
    paths: dict = field(default_factory=lambda: {
        "root": "runs", "instances": "instances", "checkpoints": "checkpoints",
        "metrics": "metrics"})
    instances: dict = field(default_factory=lambda: {
        "families": _default_families(), "splits": {"train": 200, "valid": 40, "test": 20}})
    limits: dict = field(default_factory=lambda: asdict(SolveLimits()))
    train: dict = field(default_factory=lambda: {
        k: v for k, v in asdict(TrainConfig()).items() if k != "seed"})
    evaluate: dict = field(default_factory=lambda: {
        "split": "test", "seeds": [0, 1, 2, 3, 4],
        "combos": [["learned", "learned"], ["heuristic", "heuristic"]],
        # which learned checkpoints to use: "finetune", "pretrain" or "auto"
        "stage": "auto", "max_instances": None})
    ablate: dict = field(default_factory=lambda: {"split": "test", "seeds": [0, 1, 2, 3, 4],
                                                  "max_instances": None})

    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return copy.deepcopy({f.name: getattr(self, f.name) for f in fields(self)})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    # resolved views -----------------------------------------------------

    def path(self, key: str) -> Path:
        root = Path(self.paths["root"])
        p = Path(self.paths[key])
        return p if p.is_absolute() else root / p

    def solve_limits(self) -> SolveLimits:
        try:
            return SolveLimits(**self.limits)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"limits: {exc}") from None

    def train_config(self) -> TrainConfig:
        try:
            # the run seed drives training as well
            return TrainConfig.from_dict({**self.train, "seed": self.seed})
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from None

    def generator_specs(self) -> list[GeneratorSpec]:
        specs = []
        for entry in self.instances["families"]:
            try:
                specs.append(GeneratorSpec(entry["family"], dict(entry.get("params", {})),
                                           int(entry.get("seed", 0))))
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"instances.families: {exc}") from None
        return specs

    def validate(self) -> "RunConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}")
        for key in ("root", "instances", "checkpoints", "metrics"):
            if not isinstance(self.paths.get(key), str):
                raise ConfigError(f"paths.{key} must be a string")
        unknown = set(self.paths) - {"root", "instances", "checkpoints", "metrics"}
        if unknown:
            raise ConfigError(f"unknown paths keys: {sorted(unknown)}")
        specs = self.generator_specs()
        for spec in specs:
            validate_generator_params(spec.family, spec.params)
        if self.family not in {s.family for s in specs}:
            raise ConfigError(f"family {self.family} has no generator entry")
        splits = self.instances.get("splits", {})
        if set(splits) - set(SPLITS):
            raise ConfigError(f"splits must be among {SPLITS}")
        for k, v in splits.items():
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"split size {k} must be a nonnegative integer")
        unknown = set(self.instances) - {"families", "splits"}
        if unknown:
            raise ConfigError(f"unknown instances keys: {sorted(unknown)}")
        self.solve_limits()
        self.train_config()
        for section in (self.evaluate, self.ablate):
            if section.get("split") not in SPLITS:
                raise ConfigError(f"split must be one of {SPLITS}")
            seeds = section.get("seeds")
            if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
                raise ConfigError("seeds must be a nonempty list of nonnegative integers")
            mi = section.get("max_instances")
            if mi is not None and (not isinstance(mi, int) or mi < 1):
                raise ConfigError("max_instances must be a positive integer or null")
        for combo in self.evaluate.get("combos", []):
            if len(combo) != 2 or combo[0] not in CUT_CHOICES or combo[1] not in BRANCH_CHOICES:
                raise ConfigError(f"bad policy combo {combo}; cut in {CUT_CHOICES}, "
                                  f"branch in {BRANCH_CHOICES}")
        if self.evaluate.get("stage") not in ("auto", "finetune", "pretrain"):
            raise ConfigError("evaluate.stage must be auto, finetune or pretrain")
        unknown = set(self.evaluate) - {"split", "seeds", "combos", "stage", "max_instances"}
        if unknown:
            raise ConfigError(f"unknown evaluate keys: {sorted(unknown)}")
        unknown = set(self.ablate) - {"split", "seeds", "max_instances"}
        if unknown:
            raise ConfigError(f"unknown ablate keys: {sorted(unknown)}")
        return self


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigError(f"unknown key {where}{k}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k not in ("params",):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the YAML file, then ``overrides``; validated."""
    base = RunConfig().to_dict()
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
        base = _merge(base, doc, "")
    if overrides:
        base = _merge(base, overrides, "")
    try:
        cfg = RunConfig(**base)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()
