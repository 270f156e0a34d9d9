"""Experiment configuration: nested dataclasses read from YAML or JSON."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..errors import ArgumentError, FormatError, NotFoundError
from ..grow import GrowthPolicy
from ..optimizer import OptimizerConfig

TASKS = ("train", "prune", "ticket", "grow", "diagnose", "export")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | idx
    n: int = 100
    d: int = 20
    s: int = 3
    noise: float = 0.1
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: int = 0  # keep the first `limit` training samples; 0 keeps all


@dataclass
class NetworkConfig:
    preset: str = "linear"  # linear | mlp | tanh_mlp | desk_cnn | custom
    hidden: int = 128
    width: int = 8
    classes: int = 10
    spec: dict = None  # full network description for preset "custom"


@dataclass
class TicketConfig:
    epoch: int = 2
    level: str = "weight"
    retrain_epochs: int = 20


@dataclass
class PruneConfig:
    checkpoint: str = ""  # manifest path; default is the run's last checkpoint
    level: str = "weight"
    layers: bool = False  # also drop residual blocks with empty support
    finetune_epochs: int = 0


@dataclass
class DiagnoseConfig:
    steps: int = 500
    alpha_fraction: float = 0.9


@dataclass
class ExportConfig:
    log: str = ""  # default: <out>/path.jsonl


@dataclass
class ExperimentConfig:
    task: str = "train"
    seed: int = 0
    epochs: int = 20
    batch_size: int = 128
    out: str = "runs/default"
    trainer: str = "dessilbi"  # dessilbi | sgd
    lam: float = 1.0
    checkpoint_epochs: list = field(default_factory=list)
    checkpoint_type: str = "float64"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    growth: GrowthPolicy = field(default_factory=GrowthPolicy)
    ticket: TicketConfig = field(default_factory=TicketConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    export: ExportConfig = field(default_factory=ExportConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ArgumentError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        if self.trainer not in ("dessilbi", "sgd"):
            raise ArgumentError(f"unknown trainer {self.trainer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("epochs must be >= 0 and batch_size >= 1")
        if self.lam < 0:
            raise ArgumentError("lam must be non-negative")


def _nested_types(cls):
    return {f.name: f.default_factory for f in dataclasses.fields(cls)
            if f.default_factory is not dataclasses.MISSING
            and dataclasses.is_dataclass(f.default_factory)}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ArgumentError(f"{where or 'config'} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ArgumentError(f"unknown config keys in {where or 'config'}: {sorted(unknown)}")
    nested = _nested_types(cls)
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            kwargs[key] = _build(nested[key], value or {}, f"{where}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ArgumentError(f"bad value in {where or 'config'}: {exc}") from None


def config_from_dict(data):
    return _build(ExperimentConfig, data or {}, "")


def to_dict(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def config_hash(cfg):
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no config file at {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise FormatError(f"cannot parse {path}: {exc}",
                          offset=f"line {mark.line + 1}" if mark else None) from None
    return data or {}


def set_path(data, dotted, value):
    """Set ``a.b.c`` in a nested dict, creating levels as needed."""
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ArgumentError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def _scalar(raw):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads exponent forms without a dot (1e3) as strings
        try:
            return float(value)
        except ValueError:
            pass
    return value


def apply_overrides(data, assignments):
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars."""
    for item in assignments:
        if "=" not in item:
            raise ArgumentError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        set_path(data, key.strip(), _scalar(raw))
    return data


def load_config(path=None, overrides=()):
    data = read_config_file(path) if path else {}
    return config_from_dict(apply_overrides(data, overrides))
