from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from lorafed.exceptions import InputError, PartitionError

PARTITION_KINDS = ("dirichlet", "natural")


@dataclass
class SyntheticSpec:
    """Gaussian class blobs, optionally in clusters with conflicting labels."""

    classes: int
    dim: int
    samples_per_class: int
    separation: float
    clusters: int = 1
    permute_labels: bool = True
    groups_per_cluster: int = 1


@dataclass
class Dataset:
    features: np.ndarray  # n x k
    labels: np.ndarray  # n
    n_classes: int
    group_ids: Optional[np.ndarray] = None
    cluster_ids: Optional[np.ndarray] = None
    class_names: Optional[List[str]] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"features {self.features.shape} do not match {self.labels.shape[0]} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.n_classes
        ):
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        for name in ("group_ids", "cluster_ids"):
            ids = getattr(self, name)
            if ids is not None and len(ids) != len(self):
                raise InputError(f"{name} has {len(ids)} entries for {len(self)} samples")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[indices],
            self.labels[indices],
            self.n_classes,
            None if self.group_ids is None else self.group_ids[indices],
            None if self.cluster_ids is None else self.cluster_ids[indices],
            self.class_names,
        )


@dataclass
class PartitionSpec:
    client_indices: List[np.ndarray]
    kind: str
    alpha: Optional[float] = None

    def __post_init__(self):
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]
        if self.kind not in PARTITION_KINDS:
            raise PartitionError(f"unknown partition kind '{self.kind}'")

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def validate(self, n_samples: Optional[int] = None):
        """Disjoint, non-empty and, given ``n_samples``, complete."""
        if any(ix.size == 0 for ix in self.client_indices):
            raise PartitionError("every client needs at least one sample")
        joined = np.concatenate(self.client_indices)
        if np.unique(joined).size != joined.size:
            raise PartitionError("client index lists overlap")
        if n_samples is not None and (
            joined.size != n_samples or joined.min() < 0 or joined.max() >= n_samples
        ):
            raise PartitionError(f"partition does not cover all {n_samples} samples")

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "clients": [ix.tolist() for ix in self.client_indices],
        }

    @classmethod
    def from_dict(cls, doc: Dict) -> "PartitionSpec":
        return cls(doc["clients"], doc["kind"], doc.get("alpha"))


@dataclass
class Splits:
    train: np.ndarray
    test: np.ndarray
    val: np.ndarray

    def sizes(self) -> Dict[str, int]:
        return {"train": self.train.size, "test": self.test.size, "val": self.val.size}
