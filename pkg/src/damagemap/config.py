"""Pipeline configuration: one JSON file drives every CLI stage.

Parsing is strict: an unknown key anywhere is a ConfigError naming it, so a
typo can never silently fall back to a default. Path fields are only checked
for existence when a stage actually consumes them (`require_paths`), because
one config usually describes a pipeline whose later inputs do not exist yet.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError, DataError
from .model import FusionMode, InputMode, OptimizerConfig, TaskMode
from .scene_select import SelectionPolicy
from .train import TrainSettings
from .util import read_json

SCHEMA_VERSION = 1


def _build(cls, obj: dict, where: str):
    """Instantiate a flat dataclass from a JSON object, rejecting unknown keys."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**obj)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


@dataclass(frozen=True)
class PathsConfig:
    """Stage artifact locations, inputs and outputs alike. All optional here;
    each command states which ones it needs."""

    catalog: Optional[str] = None        # scene catalog JSON (select input)
    gcps: Optional[str] = None           # GCP JSONL (georef input)
    transforms: Optional[str] = None     # corrected-transform JSON (georef output)
    manifest: Optional[str] = None       # scene manifest JSON (select out, build in)
    rasters: Optional[str] = None        # directory of staged scene rasters (.npz)
    polygons: Optional[str] = None       # footprint GeoJSON (build input)
    build_manifest: Optional[str] = None # patch footprint JSON (build input)
    bundles: Optional[str] = None        # bundle directory (build out, train in)
    splits: Optional[str] = None         # split CSV
    checkpoints: Optional[str] = None    # checkpoint directory (train output)
    predictions: Optional[str] = None    # prediction directory (predict output)
    reports: Optional[str] = None        # report directory (eval output)


@dataclass(frozen=True)
class ModelConfig:
    fusion: str = "late"
    task: str = "two_step"
    inputs: str = "pre_and_post"
    widths: tuple[int, int] = (16, 32)
    tau_loc: float = 0.5
    tau_dmg: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        try:
            FusionMode(self.fusion)
            TaskMode(self.task)
            InputMode(self.inputs)
        except ValueError as e:
            raise ConfigError(f"model: {e}") from e
        w = tuple(int(x) for x in self.widths)
        if len(w) != 2:
            raise ConfigError(f"model.widths needs two entries, got {self.widths}")
        object.__setattr__(self, "widths", w)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    buffer: int = 3          # label ring excluded from the loss
    augment: bool = True
    val_buffer: int = 3      # buffer of the checkpoint-selection metric


@dataclass(frozen=True)
class EvalConfig:
    buffers: tuple[int, ...] = (0, 3)
    split: str = "test"

    def __post_init__(self):
        b = tuple(int(x) for x in self.buffers)
        if not b or any(x < 0 for x in b):
            raise ConfigError(f"eval.buffers must be non-empty, >= 0; got {self.buffers}")
        object.__setattr__(self, "buffers", b)


@dataclass(frozen=True)
class SplitConfig:
    scheme: str = "event_based"


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    selection: SelectionPolicy = field(default_factory=SelectionPolicy)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    # -- construction --------------------------------------------------------

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PipelineConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config root must be a JSON object")
        obj = dict(obj)
        version = obj.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        sections = {
            "paths": PathsConfig,
            "selection": SelectionPolicy,
            "optimizer": OptimizerConfig,
            "model": ModelConfig,
            "train": TrainConfig,
            "eval": EvalConfig,
            "split": SplitConfig,
        }
        kwargs = {}
        for name, section_cls in sections.items():
            if name in obj:
                kwargs[name] = _build(section_cls, obj.pop(name), name)
        if "seeds" in obj:
            seeds = obj.pop("seeds")
            if not isinstance(seeds, list):
                raise ConfigError("seeds must be a list of integers")
            kwargs["seeds"] = tuple(seeds)
        unknown = sorted(obj)
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        obj = read_json(path)
        try:
            return cls.from_json_obj(obj)
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from e

    def to_json_obj(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "paths": {f.name: getattr(self.paths, f.name)
                      for f in fields(PathsConfig)
                      if getattr(self.paths, f.name) is not None},
            "selection": self.selection.as_dict(),
            "optimizer": {f.name: getattr(self.optimizer, f.name)
                          for f in fields(OptimizerConfig)},
            "model": {"fusion": self.model.fusion, "task": self.model.task,
                      "inputs": self.model.inputs,
                      "widths": list(self.model.widths),
                      "tau_loc": self.model.tau_loc,
                      "tau_dmg": self.model.tau_dmg,
                      "dtype": self.model.dtype},
            "train": {f.name: getattr(self.train, f.name)
                      for f in fields(TrainConfig)},
            "eval": {"buffers": list(self.eval.buffers), "split": self.eval.split},
            "split": {"scheme": self.split.scheme},
            "seeds": list(self.seeds),
        }

    # -- per-stage helpers ----------------------------------------------------

    def require_paths(self, *names: str, exist: bool = True) -> list[Path]:
        """Resolve path fields a command consumes. An unset field is a config
        error; a set field pointing at nothing is missing data."""
        out = []
        for name in names:
            value = getattr(self.paths, name, None)
            if value is None:
                raise ConfigError(f"config: paths.{name} is required by this command")
            p = Path(value)
            if exist and not p.exists():
                raise DataError(f"paths.{name} = {p} does not exist")
            out.append(p)
        return out

    def output_path(self, name: str, directory: bool = False) -> Path:
        """Resolve an output path field, creating parent (or the directory)."""
        value = getattr(self.paths, name, None)
        if value is None:
            raise ConfigError(f"config: paths.{name} is required by this command")
        p = Path(value)
        (p if directory else p.parent).mkdir(parents=True, exist_ok=True)
        return p

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            fusion=FusionMode(self.model.fusion),
            task=TaskMode(self.model.task),
            inputs=InputMode(self.model.inputs),
            widths=self.model.widths,
            batch_size=self.train.batch_size,
            train_buffer=self.train.buffer,
            eval_buffer=self.train.val_buffer,
            tau_loc=self.model.tau_loc,
            tau_dmg=self.model.tau_dmg,
            optimizer=self.optimizer,
            augment=self.train.augment,
            dtype=self.model.dtype,
        )
