import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings

from adapters.models import mix_models
from lorafed.exceptions import ConfigurationError, ExtensionPointError

if TYPE_CHECKING:
    from adapters.models import Gradients, LoraMlp
    from adapters.utils import RngStream
    from clientdata.models import Dataset, Splits

# Parameters each strategy reads; anything else given for it is an error
STRATEGY_PARAMS = {
    "epfl": ("lam", "epsilon", "share_head"),
    "simple-avg-a": ("share_head",),
    "fedavg": ("weighting",),
    "fedprox": ("mu", "weighting"),
    "scaffold": ("weighting",),
    "apfl": ("apfl_alpha", "apfl_adaptive", "weighting"),
    "local-only": (),
}
EXTENSION_POINTS = ("apple", "fedala")
WEIGHTINGS = ("size", "uniform")


@dataclass
class StrategyConfig:
    name: str
    lam: Optional[float] = None
    epsilon: Optional[float] = None
    mu: Optional[float] = None
    apfl_alpha: Optional[float] = None
    apfl_adaptive: Optional[bool] = None
    share_head: Optional[bool] = None
    weighting: Optional[str] = None
    psi: Optional[Tuple[int, ...]] = None

    @classmethod
    def build(
        cls, name: str, psi: Optional[Sequence[int]] = None, **params
    ) -> "StrategyConfig":
        """Fill the strategy's relevant defaults and reject the rest."""
        if name in EXTENSION_POINTS:
            raise ExtensionPointError(name)
        if name not in STRATEGY_PARAMS:
            raise ConfigurationError(
                f"strategy.name: unknown strategy '{name}'"
                f" (choose from {', '.join(strategy_names())})"
            )
        relevant = STRATEGY_PARAMS[name]
        for key, value in params.items():
            if value is not None and key not in relevant:
                raise ConfigurationError(f"strategy.{key}: not used by '{name}'")
        defaults = settings.LORAFED_STRATEGY_DEFAULTS
        values = {
            key: params[key] if params.get(key) is not None else defaults[key]
            for key in relevant
        }
        config = cls(name, psi=tuple(psi) if psi is not None else None, **values)
        config.validate()
        return config

    def validate(self):
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"strategy.lam: must lie in [0, 1], got {self.lam}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigurationError(f"strategy.epsilon: must be > 0, got {self.epsilon}")
        if self.mu is not None and not self.mu >= 0:
            raise ConfigurationError(f"strategy.mu: must be >= 0, got {self.mu}")
        if self.apfl_alpha is not None and not 0.0 <= self.apfl_alpha <= 1.0:
            raise ConfigurationError(
                f"strategy.apfl_alpha: must lie in [0, 1], got {self.apfl_alpha}"
            )
        if self.weighting is not None and self.weighting not in WEIGHTINGS:
            raise ConfigurationError(
                f"strategy.weighting: must be one of {WEIGHTINGS}, got {self.weighting}"
            )
        if self.name == "epfl" and self.psi is not None:
            if any(p not in (0, 1) for p in self.psi) or not any(self.psi):
                raise ConfigurationError(
                    f"model.psi: needs 0/1 flags with at least one 1, got {list(self.psi)}"
                )

    def to_dict(self) -> Dict:
        doc = {"name": self.name}
        for key in STRATEGY_PARAMS.get(self.name, ()):
            doc[key] = getattr(self, key)
        if self.psi is not None:
            doc["psi"] = list(self.psi)
        return doc


def strategy_names() -> List[str]:
    return list(STRATEGY_PARAMS) + list(EXTENSION_POINTS)


@dataclass
class SimilarityMatrix:
    """Row-stochastic aggregation weights with ``lam`` on the diagonal."""

    s: np.ndarray
    lam: float

    @property
    def n_clients(self) -> int:
        return self.s.shape[0]

    def validate(self, tol: float = 1e-12):
        n = self.n_clients
        if self.s.shape != (n, n):
            raise ConfigurationError(f"similarity matrix must be square, got {self.s.shape}")
        if np.any(self.s < 0):
            raise ConfigurationError("similarity weights must be non-negative")
        if np.any(np.diag(self.s) != self.lam):
            raise ConfigurationError("similarity diagonal must equal lambda")
        for i in range(n):
            if abs(math.fsum(self.s[i]) - 1.0) > tol:
                raise ConfigurationError(f"similarity row {i} does not sum to 1")


@dataclass
class ClientState:
    id: int
    model: "LoraMlp"
    splits: "Splits"
    dataset: "Dataset"
    rng: "RngStream"
    scaffold_c_i: Optional["Gradients"] = None
    apfl_local: Optional["LoraMlp"] = None
    apfl_alpha: Optional[float] = None
    train_losses: List[float] = field(default_factory=list)
    local_steps: int = 0

    def data(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        """(features, labels) of the ``train``, ``test`` or ``val`` split."""
        idx = getattr(self.splits, split)
        return self.dataset.features[idx], self.dataset.labels[idx]

    @property
    def n_train(self) -> int:
        return int(self.splits.train.size)

    @property
    def mean_train_loss(self) -> float:
        return float(np.mean(self.train_losses)) if self.train_losses else float("nan")

    def evaluation_model(self) -> "LoraMlp":
        """The model this client predicts with."""
        if self.apfl_local is not None:
            return mix_models(self.apfl_local, self.model, self.apfl_alpha)
        return self.model


@dataclass
class ServerState:
    clients: List[ClientState]
    total_rounds: int
    round: int = 0
    global_model: Optional["LoraMlp"] = None
    scaffold_c: Optional["Gradients"] = None
    similarity: Optional[SimilarityMatrix] = None
    weights: Optional[np.ndarray] = None
    ready: bool = False

    def __post_init__(self):
        if not self.clients:
            raise ConfigurationError("a federation needs at least one client")
        shapes = [
            {k: v.shape for k, v in c.model.trainable().items()} for c in self.clients
        ]
        masks = [c.model.psi for c in self.clients]
        if any(s != shapes[0] for s in shapes) or any(m != masks[0] for m in masks):
            raise ConfigurationError("all clients must share one architecture and psi mask")
        if not 0 <= self.round <= self.total_rounds:
            raise ConfigurationError(
                f"round {self.round} outside [0, {self.total_rounds}]"
            )

    @property
    def n_clients(self) -> int:
        return len(self.clients)
