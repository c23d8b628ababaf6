"""Dataset generation, CSV ingestion, non-IID partitioning and splits."""
import csv
import logging
from typing import TYPE_CHECKING, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from adapters.utils import RngStream
from clientdata.models import Dataset, PartitionSpec, Splits, SyntheticSpec
from lorafed.exceptions import ConfigurationError, InputError, PartitionError

if TYPE_CHECKING:
    from adapters.utils import ArrayLike

logger = logging.getLogger(__name__)

LABEL_COLUMN = "label"
GROUP_COLUMN = "group"
SPLIT_RATIO = (0.4, 0.3, 0.3)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# -- GENERATION --
def _derangement(rng: RngStream, n: int) -> np.ndarray:
    """A permutation of range(n) without fixed points."""
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Gaussian class blobs with unit noise.

    Class means are ``separation`` times random unit directions, shared by
    every cluster. Cluster 0 keeps the true labels; with ``permute_labels``
    every further cluster relabels classes by a derangement, so clients from
    different clusters follow conflicting decision rules. Each cluster is cut
    into ``groups_per_cluster`` groups that all contain every class.
    """
    if spec.classes < 2 or spec.dim < 1:
        raise ConfigurationError("synthetic data needs classes >= 2 and dim >= 1")
    if spec.samples_per_class < 1 or spec.clusters < 1 or spec.groups_per_cluster < 1:
        raise ConfigurationError(
            "samples_per_class, clusters and groups_per_cluster must be positive"
        )
    if spec.separation < 0:
        raise ConfigurationError("separation must be non-negative")
    if spec.groups_per_cluster > spec.samples_per_class * spec.classes:
        raise ConfigurationError("more groups per cluster than samples per cluster")

    rng = RngStream(seed, "synthetic")
    directions = rng.normal(size=(spec.classes, spec.dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    means = spec.separation * directions / np.where(norms > 0, norms, 1.0)

    features, labels, clusters, groups = [], [], [], []
    for g in range(spec.clusters):
        if g > 0 and spec.permute_labels:
            relabel = _derangement(rng, spec.classes)
        else:
            relabel = np.arange(spec.classes)
        for c in range(spec.classes):
            n = spec.samples_per_class
            features.append(means[c] + rng.normal(size=(n, spec.dim)))
            labels.append(np.full(n, relabel[c]))
            clusters.append(np.full(n, g))
            groups.append(g * spec.groups_per_cluster + np.arange(n) % spec.groups_per_cluster)

    dataset = Dataset(
        np.vstack(features),
        np.concatenate(labels),
        spec.classes,
        group_ids=np.concatenate(groups),
        cluster_ids=np.concatenate(clusters),
    )
    logger.debug("Generated %d synthetic samples in %d clusters", len(dataset), spec.clusters)
    return dataset


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """A seeded, order-preserving portion of ``dataset``."""
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"subsample fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return dataset
    keep = max(1, _round_half_up(fraction * len(dataset)))
    chosen = RngStream(seed, "subsample").choice(len(dataset), keep)
    return dataset.subset(np.sort(chosen))


# -- CSV --
def _densify_labels(raw: pd.Series):
    """Labels become 0..C-1 in order of first appearance."""
    codes, uniques = pd.factorize(raw, sort=False)
    return codes.astype(np.int64), [str(u) for u in uniques]


def _parse_numeric(df: pd.DataFrame, column: str) -> np.ndarray:
    values = df[column].to_numpy(dtype=object)
    out = np.empty(values.size, dtype=np.float64)
    for row, value in enumerate(values):
        try:
            out[row] = float(value)
        except (TypeError, ValueError):
            out[row] = np.nan
        if not np.isfinite(out[row]):
            # +2: one header line, one-based numbering
            raise InputError(
                f"row {row + 2}: non-numeric value {value!r} in column '{column}'"
            )
    return out


def load_csv(path: str) -> Dataset:
    """Read a header-ed CSV with feature columns, ``label`` and optional ``group``."""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise InputError(f"{path}: ragged rows ({e})") from e
    except (OSError, UnicodeDecodeError, pd.errors.EmptyDataError) as e:
        raise InputError(f"{path}: {e}") from e
    df.columns = [c.strip() for c in df.columns]

    if LABEL_COLUMN not in df.columns:
        raise InputError(f"{path}: no '{LABEL_COLUMN}' column in header {list(df.columns)}")
    short = df.isna().any(axis=1).to_numpy()
    if short.any():
        raise InputError(f"{path}: row {int(np.argmax(short)) + 2} has missing fields")
    if df.empty:
        raise InputError(f"{path}: no data rows")

    feature_cols = [c for c in df.columns if c not in (LABEL_COLUMN, GROUP_COLUMN)]
    if not feature_cols:
        raise InputError(f"{path}: no feature columns")
    try:
        features = np.column_stack([_parse_numeric(df, c) for c in feature_cols])
    except InputError as e:
        raise InputError(f"{path}: {e}") from e

    labels, names = _densify_labels(df[LABEL_COLUMN].str.strip())
    groups = None
    if GROUP_COLUMN in df.columns:
        groups = df[GROUP_COLUMN].str.strip().to_numpy(dtype=object)
    return Dataset(
        features, labels, max(len(names), 2), group_ids=groups, class_names=names
    )


def write_csv(dataset: Dataset, path: str):
    header = [f"x{j}" for j in range(dataset.dim)] + [LABEL_COLUMN]
    if dataset.group_ids is not None:
        header.append(GROUP_COLUMN)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(dataset)):
            label = int(dataset.labels[i])
            row = [repr(float(v)) for v in dataset.features[i]]
            row.append(dataset.class_names[label] if dataset.class_names else label)
            if dataset.group_ids is not None:
                row.append(dataset.group_ids[i])
            writer.writerow(row)


# -- PARTITIONS --
def dirichlet_partition(
    labels: "ArrayLike",
    n_clients: int,
    alpha: float,
    seed: int,
    min_per_client: int = 5,
    max_retries: int = 10,
) -> PartitionSpec:
    """Per-class Dirichlet(alpha) dealing of samples to clients.

    For each class a proportion vector over clients is drawn and the class's
    shuffled samples are cut at the cumulative proportions. The whole draw is
    repeated, at most ``max_retries`` more times, until every client holds
    ``min_per_client`` samples.
    """
    labels = np.asarray(labels)
    if n_clients < 1:
        raise ConfigurationError(f"client count must be positive, got {n_clients}")
    if alpha <= 0:
        raise ConfigurationError(f"alpha must be positive, got {alpha}")
    floor = max(int(min_per_client), 1)
    if n_clients * floor > labels.size:
        raise PartitionError(
            f"{labels.size} samples cannot give {n_clients} clients {floor} each"
        )

    rng = RngStream(seed, "partition")
    classes = np.unique(labels)
    for attempt in range(max_retries + 1):
        buckets = [[] for __ in range(n_clients)]  # type: List[List[np.ndarray]]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            proportions = rng.dirichlet([alpha] * n_clients)
            cuts = (np.cumsum(proportions)[:-1] * idx.size).astype(np.int64)
            for client, part in enumerate(np.split(idx, np.minimum(cuts, idx.size))):
                buckets[client].append(part)
        client_indices = [np.sort(np.concatenate(parts)) for parts in buckets]
        smallest = min(ix.size for ix in client_indices)
        if smallest >= floor:
            spec = PartitionSpec(client_indices, "dirichlet", alpha)
            spec.validate(labels.size)
            logger.debug("Dirichlet partition accepted on attempt %d", attempt + 1)
            return spec
        logger.debug("Attempt %d left a client with %d samples", attempt + 1, smallest)
    raise PartitionError(
        f"no Dirichlet(alpha={alpha}) draw gave every one of {n_clients} clients "
        f"{floor} samples in {max_retries + 1} attempts"
    )


def natural_partition(
    dataset_or_groups: Union[Dataset, "ArrayLike"], n_clients: int
) -> PartitionSpec:
    """Whole groups dealt round-robin to clients, largest group first.

    Ties in size keep the order in which groups first appear.
    """
    if isinstance(dataset_or_groups, Dataset):
        group_ids = dataset_or_groups.group_ids
    else:
        group_ids = dataset_or_groups
    if group_ids is None:
        raise InputError("natural partitioning needs group ids")
    if n_clients < 1:
        raise ConfigurationError(f"client count must be positive, got {n_clients}")
    group_ids = np.asarray(group_ids)
    groups, first, inverse, counts = np.unique(
        group_ids, return_index=True, return_inverse=True, return_counts=True
    )
    if groups.size < n_clients:
        raise InputError(f"{groups.size} groups cannot cover {n_clients} clients")

    order = np.lexsort((first, -counts))
    owner = np.empty(groups.size, dtype=np.int64)
    owner[order] = np.arange(groups.size) % n_clients
    sample_owner = owner[inverse.ravel()]
    client_indices = [np.flatnonzero(sample_owner == c) for c in range(n_clients)]
    spec = PartitionSpec(client_indices, "natural")
    spec.validate(group_ids.size)
    return spec


def split_4_3_3(indices: "ArrayLike", seed: int, client: int = 0) -> Splits:
    """Shuffle and cut into train/test/val at 4:3:3.

    Train and test sizes are ``round(0.4 n)`` and ``round(0.3 n)`` rounding
    halves up; validation takes the remainder.
    """
    indices = np.asarray(indices, dtype=np.int64)
    n = indices.size
    if n < 3:
        raise InputError(f"need at least 3 samples to split, got {n}")
    shuffled = RngStream(seed, "split", client).permutation(indices)
    n_train = _round_half_up(SPLIT_RATIO[0] * n)
    n_test = _round_half_up(SPLIT_RATIO[1] * n)
    return Splits(
        np.sort(shuffled[:n_train]),
        np.sort(shuffled[n_train : n_train + n_test]),
        np.sort(shuffled[n_train + n_test :]),
    )


# -- STATISTICS --
def class_histograms(
    labels: "ArrayLike", spec: PartitionSpec, n_classes: Optional[int] = None
) -> np.ndarray:
    """N x C sample counts per client and class."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = n_classes or int(labels.max()) + 1
    return np.vstack(
        [np.bincount(labels[ix], minlength=n_classes) for ix in spec.client_indices]
    )


def label_entropy(counts: Sequence[int]) -> float:
    """Shannon entropy (nats) of a class-count vector."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def mean_client_entropy(
    labels: "ArrayLike", spec: PartitionSpec, n_classes: Optional[int] = None
) -> float:
    hist = class_histograms(labels, spec, n_classes)
    return float(np.mean([label_entropy(row) for row in hist]))
