from typing import Dict, List, Optional, Sequence

import numpy as np

from adapters.models import LoraLinear, LoraMlp, init_model
from federation.config import ExperimentConfig, parse_config
from federation.engine import build_server, load_dataset, make_partition
from federation.models import ServerState

# A federation small enough to run many rounds inside a unit test
SMALL = {
    "dataset.synthetic.clusters": 2,
    "dataset.synthetic.classes": 3,
    "dataset.synthetic.dim": 6,
    "dataset.synthetic.samples_per_class": 30,
    "dataset.synthetic.separation": 3.0,
    "dataset.synthetic.groups_per_cluster": 2,
    "partition.clients": 4,
    "partition.alpha": 1.0,
    "model.hidden_widths": [8, 8],
    "model.rank": 2,
    "model.pretrain_epochs": 1,
    "training.rounds": 3,
    "training.batch_size": 16,
}

# Two clusters with conflicting labels, one natural group per client
CLUSTERED = {
    "dataset.synthetic.clusters": 2,
    "dataset.synthetic.classes": 5,
    "dataset.synthetic.dim": 16,
    "dataset.synthetic.samples_per_class": 200,
    "dataset.synthetic.separation": 3.0,
    "dataset.synthetic.groups_per_cluster": 10,
    "partition.kind": "natural",
    "partition.clients": 20,
    "model.hidden_widths": [32, 32],
    "model.rank": 8,
    "training.rounds": 30,
}


def small_config(base: Optional[Dict] = None, **overrides) -> ExperimentConfig:
    """``base`` (SMALL by default) plus dotted overrides written with ``__``."""
    merged = dict(SMALL if base is None else base)
    merged.update({k.replace("__", "."): v for k, v in overrides.items()})
    return parse_config(overrides=merged)


def small_server(config: ExperimentConfig) -> ServerState:
    dataset = load_dataset(config)
    return build_server(config, dataset, make_partition(config, dataset))


def two_layer_model(a: Sequence, b: Sequence, psi: Sequence[int] = (1, 1)) -> LoraMlp:
    """2 -> 2 -> 2 model with identity base, the given A's and B's, identity head."""
    layers = [
        LoraLinear(np.eye(2), np.zeros(2), a_l, b_l, p) for a_l, b_l, p in zip(a, b, psi)
    ]
    return LoraMlp(layers, np.eye(2), np.zeros(2))


def random_models(n: int, seed: int, widths: Sequence[int] = (4, 5, 3)) -> List[LoraMlp]:
    """``n`` models sharing a base, with random A's, B's and heads."""
    rng = np.random.default_rng(seed)
    models = []
    for __ in range(n):
        model = init_model(widths, 2, 0, 3)
        for tensor in model.trainable().values():
            tensor[...] = rng.normal(size=tensor.shape)
        models.append(model)
    return models


def snapshot(models: Sequence[LoraMlp], names: Optional[Sequence[str]] = None) -> List[Dict]:
    return [
        {k: v.copy() for k, v in m.trainable().items() if names is None or k in names}
        for m in models
    ]


def same_tensors(left: Sequence[Dict], right: Sequence[Dict]) -> bool:
    return all(
        l.keys() == r.keys() and all(np.array_equal(l[k], r[k]) for k in l)
        for l, r in zip(left, right)
    )
