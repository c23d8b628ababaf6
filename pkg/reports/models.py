"""Per-round metrics, parameter accounting and the final experiment record."""
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from django.conf import settings

from lorafed.exceptions import StructuralError


def _mean(values: List[float]) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


@dataclass
class RoundMetrics:
    round: int
    val_accuracy: List[float]
    train_loss: List[float]

    def __post_init__(self):
        if len(self.val_accuracy) != len(self.train_loss):
            raise StructuralError(
                f"round {self.round}: {len(self.val_accuracy)} accuracies"
                f" but {len(self.train_loss)} losses"
            )

    @property
    def n_clients(self) -> int:
        return len(self.val_accuracy)

    @property
    def mean_accuracy(self) -> float:
        return _mean(self.val_accuracy)

    def to_dict(self) -> Dict:
        return {
            "round": self.round,
            "val_accuracy": list(self.val_accuracy),
            "train_loss": list(self.train_loss),
            "mean_accuracy": self.mean_accuracy,
        }


@dataclass
class ParamReport:
    """Element counts per client; communication is per round."""

    trainable_per_client: int
    communicated_up: int
    communicated_down: int
    total_per_round: int
    full_matrix_equivalent: int

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class Report:
    config: Dict
    trace: List[RoundMetrics]
    final_test_accuracy: List[float]
    params: ParamReport
    seed: int
    wall_clock_seconds: float = 0.0
    client_clusters: Optional[List[int]] = None
    final_similarity: Optional[np.ndarray] = None
    affinity: Optional[Dict] = None
    full_model_params: Optional[ParamReport] = None
    schema_version: int = field(default_factory=lambda: settings.LORAFED_SCHEMA_VERSION)

    def __post_init__(self):
        n = self.n_clients
        for metrics in self.trace:
            if metrics.n_clients != n:
                raise StructuralError(
                    f"round {metrics.round} has {metrics.n_clients} clients, report has {n}"
                )
        if self.client_clusters is not None and len(self.client_clusters) != n:
            raise StructuralError("client_clusters does not cover every client")

    @property
    def n_clients(self) -> int:
        return len(self.final_test_accuracy)

    @property
    def strategy(self) -> str:
        return self.config.get("strategy", {}).get("name", "")

    @property
    def mean_final_accuracy(self) -> float:
        return _mean(self.final_test_accuracy)

    @property
    def final_accuracy_std(self) -> float:
        return float(np.std(self.final_test_accuracy)) if self.final_test_accuracy else float("nan")

    @property
    def final_accuracy_min(self) -> float:
        return float(min(self.final_test_accuracy)) if self.final_test_accuracy else float("nan")

    def to_dict(self) -> Dict:
        """The ``report.json`` document. Wall-clock time is kept out of it."""
        doc = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "config": self.config,
            "n_clients": self.n_clients,
            "rounds": len(self.trace),
            "trace": [m.to_dict() for m in self.trace],
            "final_test_accuracy": list(self.final_test_accuracy),
            "mean_final_accuracy": self.mean_final_accuracy,
            "final_accuracy_std": self.final_accuracy_std,
            "final_accuracy_min": self.final_accuracy_min,
            "params": self.params.to_dict(),
            "full_model_params": (
                self.full_model_params.to_dict() if self.full_model_params else None
            ),
            "client_clusters": self.client_clusters,
            "affinity": self.affinity,
            "final_similarity": (
                self.final_similarity.tolist() if self.final_similarity is not None else None
            ),
        }
        return doc
