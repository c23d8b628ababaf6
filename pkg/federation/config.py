"""Experiment configuration: defaults, JSON files and command-line overrides.

Layers merge in order settings defaults, JSON file, overrides. Each section
is then validated by its form in ``federation.forms``; every error names the
dotted path of the offending field.
"""
import copy
import json
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional

from django.conf import settings

from clientdata.models import SyntheticSpec
from federation import forms
from federation.models import StrategyConfig
from lorafed.exceptions import ConfigurationError

STRATEGY_KEYS = (
    "name",
    "lam",
    "epsilon",
    "mu",
    "apfl_alpha",
    "apfl_adaptive",
    "share_head",
    "weighting",
)


@dataclass
class DatasetConfig:
    source: str
    csv_path: Optional[str]
    subsample_fraction: float
    synthetic: SyntheticSpec


@dataclass
class PartitionConfig:
    kind: str
    clients: int
    alpha: float
    min_per_client: int
    max_retries: int


@dataclass
class ModelConfig:
    hidden_widths: List[int]
    rank: int
    psi: Optional[List[int]]
    pretrain_epochs: int
    pretrain_learning_rate: float
    base_checkpoint: Optional[str]

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths)

    @property
    def psi_mask(self) -> List[int]:
        return list(self.psi) if self.psi is not None else [1] * self.n_layers


@dataclass
class TrainingConfig:
    rounds: int
    local_epochs: int
    learning_rate: float
    batch_size: int
    workers: int


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    partition: PartitionConfig
    model: ModelConfig
    training: TrainingConfig
    strategy: StrategyConfig
    seed: int
    out_dir: str

    def to_dict(self) -> Dict:
        doc = {
            "dataset": asdict(self.dataset),
            "partition": asdict(self.partition),
            "model": asdict(self.model),
            "training": asdict(self.training),
            "strategy": self.strategy.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }
        return doc


# -- MERGING --
def merge_document(base: Dict, overlay: Dict, path: str = "") -> Dict:
    """``overlay`` on top of ``base``; keys absent from ``base`` are rejected."""
    for key, value in overlay.items():
        dotted = f"{path}.{key}" if path else key
        if dotted == "strategy":
            base[key] = _merge_strategy(base[key], value)
            continue
        if key not in base:
            raise ConfigurationError(f"{dotted}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{dotted}: expected an object")
            merge_document(base[key], value, dotted)
        else:
            base[key] = value
    return base


def _merge_strategy(base: Dict, overlay: Any) -> Dict:
    """Strategy parameters; naming a different strategy starts a fresh section."""
    if not isinstance(overlay, dict):
        raise ConfigurationError("strategy: expected an object")
    for key in overlay:
        if key not in STRATEGY_KEYS:
            raise ConfigurationError(f"strategy.{key}: unknown key")
    if "name" in overlay and overlay["name"] != base.get("name"):
        return dict(overlay)
    return {**base, **overlay}


def expand_dotted(overrides: Dict[str, Any]) -> Dict:
    """``{"training.rounds": 5}`` -> ``{"training": {"rounds": 5}}``."""
    nested = {}  # type: Dict[str, Any]
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if not all(parts):
            raise ConfigurationError(f"{dotted}: malformed key")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"{dotted}: conflicts with another override")
        node[parts[-1]] = value
    return nested


def load_document(path: str) -> Dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigurationError(f"{path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    return doc


# -- VALIDATION --
def _clean(form_class, data: Dict, section: str) -> Dict:
    form = form_class(data=data)
    if not form.is_valid():
        messages = []
        for field, errors in form.errors.items():
            if field == "__all__":
                where = section or "config"
            else:
                where = f"{section}.{field}" if section else field
            messages.extend(f"{where}: {e}" for e in errors)
        raise ConfigurationError("; ".join(messages))
    return form.cleaned_data


def build_config(doc: Dict) -> ExperimentConfig:
    """Validate a fully merged document."""
    top = _clean(forms.ExperimentForm, {"seed": doc["seed"], "out_dir": doc["out_dir"]}, "")
    dataset = _clean(forms.DatasetForm, doc["dataset"], "dataset")
    synthetic = _clean(forms.SyntheticForm, doc["dataset"]["synthetic"], "dataset.synthetic")
    partition = _clean(forms.PartitionForm, doc["partition"], "partition")
    model = _clean(forms.ArchitectureForm, doc["model"], "model")
    training = _clean(forms.TrainingForm, doc["training"], "training")
    strategy = _clean(forms.StrategyForm, doc["strategy"], "strategy")

    if dataset["source"] == "synthetic" and model["rank"] > synthetic["dim"]:
        raise ConfigurationError(
            f"model.rank: {model['rank']} exceeds the input dimension {synthetic['dim']}"
        )
    name = strategy.pop("name")
    strategy_config = StrategyConfig.build(name, psi=model["psi"], **strategy)
    if name == "epfl" and partition["clients"] < 2:
        raise ConfigurationError(
            f"partition.clients: epfl needs at least 2 clients, got {partition['clients']}"
        )

    return ExperimentConfig(
        dataset=DatasetConfig(
            dataset["source"],
            dataset["csv_path"],
            dataset["subsample_fraction"],
            SyntheticSpec(**synthetic),
        ),
        partition=PartitionConfig(**partition),
        model=ModelConfig(**model),
        training=TrainingConfig(**training),
        strategy=strategy_config,
        seed=top["seed"],
        out_dir=top["out_dir"],
    )


def merged_document(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    document: Optional[Dict] = None,
) -> Dict:
    doc = copy.deepcopy(settings.LORAFED_DEFAULTS)
    if path is not None:
        merge_document(doc, load_document(path))
    if document is not None:
        merge_document(doc, copy.deepcopy(document))
    if overrides:
        merge_document(doc, expand_dotted(overrides))
    return doc


def parse_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    document: Optional[Dict] = None,
) -> ExperimentConfig:
    """A validated config from defaults, an optional JSON file and overrides.

    ``overrides`` maps dotted keys (``training.rounds``) to values and wins
    over the file; ``document`` is an in-memory alternative to the file.
    """
    return build_config(merged_document(path, overrides, document))
