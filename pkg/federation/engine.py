"""Round orchestration and whole experiments."""
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import TYPE_CHECKING, Iterator, List, Optional, Tuple, Union

import numpy as np

from adapters.checkpoints import load_base_weights, save_checkpoint
from adapters.models import init_model
from adapters.utils import RngStream
from clientdata.utils import (
    dirichlet_partition,
    generate_synthetic,
    load_csv,
    natural_partition,
    split_4_3_3,
    subsample,
)
from federation.models import ClientState, ServerState, StrategyConfig
from federation.strategies import Strategy, TrainingParams, get_strategy, pretrain_base
from federation.utils import affinity
from lorafed.exceptions import ConfigurationError, LoraFedError
from reports.models import Report, RoundMetrics
from reports.utils import evaluate_accuracy, param_counts

if TYPE_CHECKING:
    from clientdata.models import Dataset, PartitionSpec
    from federation.config import ExperimentConfig

logger = logging.getLogger(__name__)


@contextmanager
def config_context(path: str) -> Iterator[None]:
    """Prefix errors raised inside the block with a config section path."""
    try:
        yield
    except LoraFedError as e:
        message = str(e.args[0]) if e.args else ""
        if not message.startswith(path):
            e.args = (f"{path}: {message}",) + tuple(e.args[1:])
        raise


def _as_strategy(strategy: Union[Strategy, StrategyConfig]) -> Strategy:
    return strategy if isinstance(strategy, Strategy) else get_strategy(strategy)


def train_phase(server: ServerState, strategy: Strategy, params: TrainingParams):
    """Local training on every client, on ``params.workers`` threads.

    Clients only touch their own state and read the server's, so the result
    is the same for any worker count.
    """
    if params.workers > 1 and server.n_clients > 1:
        with ThreadPoolExecutor(max_workers=params.workers) as pool:
            futures = [
                pool.submit(strategy.train_client, server, client, params)
                for client in server.clients
            ]
            for future in futures:
                future.result()
    else:
        for client in server.clients:
            strategy.train_client(server, client, params)


def evaluate_clients(server: ServerState, split: str) -> List[float]:
    return [
        evaluate_accuracy(client.evaluation_model(), *client.data(split))
        for client in server.clients
    ]


def run_round(
    server: ServerState,
    strategy: Union[Strategy, StrategyConfig],
    params: TrainingParams,
) -> Tuple[ServerState, RoundMetrics]:
    """Local training, aggregation, then validation accuracy of every client."""
    if server.round >= server.total_rounds:
        raise ConfigurationError(
            f"all {server.total_rounds} rounds have already been run"
        )
    strategy = _as_strategy(strategy)
    if not server.ready:
        strategy.setup(server)

    train_phase(server, strategy, params)
    strategy.aggregate(server)
    server.round += 1

    metrics = RoundMetrics(
        server.round,
        evaluate_clients(server, "val"),
        [client.mean_train_loss for client in server.clients],
    )
    logger.info(
        "Round %d/%d: mean val accuracy %.4f",
        server.round,
        server.total_rounds,
        metrics.mean_accuracy,
    )
    return server, metrics


def scaffold_round(
    server: ServerState, params: TrainingParams, config: Optional[StrategyConfig] = None
) -> Tuple[ServerState, RoundMetrics]:
    """One SCAFFOLD round: corrected local steps, variate update, averaging."""
    return run_round(server, config or StrategyConfig.build("scaffold"), params)


def apfl_round(
    server: ServerState, params: TrainingParams, alpha_mix: float
) -> Tuple[ServerState, RoundMetrics]:
    """One APFL round with mixture weight ``alpha_mix``."""
    return run_round(server, StrategyConfig.build("apfl", apfl_alpha=alpha_mix), params)


# -- EXPERIMENTS --
def load_dataset(config: "ExperimentConfig") -> "Dataset":
    source = config.dataset
    if source.source == "csv":
        dataset = load_csv(source.csv_path)
    else:
        dataset = generate_synthetic(source.synthetic, config.seed)
    return subsample(dataset, source.subsample_fraction, config.seed)


def make_partition(config: "ExperimentConfig", dataset: "Dataset") -> "PartitionSpec":
    part = config.partition
    if part.kind == "natural":
        return natural_partition(dataset, part.clients)
    return dirichlet_partition(
        dataset.labels,
        part.clients,
        part.alpha,
        config.seed,
        min_per_client=part.min_per_client,
        max_retries=part.max_retries,
    )


def build_server(
    config: "ExperimentConfig", dataset: "Dataset", partition: "PartitionSpec"
) -> ServerState:
    """Clients with their splits and one shared frozen base.

    The base is pretrained on the pooled train splits only, so no test or
    validation sample is seen before evaluation.
    """
    seed, model_cfg = config.seed, config.model
    splits = [
        split_4_3_3(indices, seed, client=i)
        for i, indices in enumerate(partition.client_indices)
    ]
    for i, split in enumerate(splits):
        logger.debug("Client %d splits %s", i, split.sizes())
    widths = [dataset.dim] + list(model_cfg.hidden_widths)

    if model_cfg.base_checkpoint:
        base = load_base_weights(model_cfg.base_checkpoint)
    else:
        pooled = dataset.subset(np.sort(np.concatenate([s.train for s in splits])))
        base = pretrain_base(
            widths,
            dataset.n_classes,
            pooled,
            model_cfg.pretrain_epochs,
            seed,
            lr=model_cfg.pretrain_learning_rate,
            batch_size=config.training.batch_size,
        )

    clients = [
        ClientState(
            i,
            init_model(
                widths, model_cfg.rank, seed, dataset.n_classes, model_cfg.psi_mask, base
            ),
            split,
            dataset,
            RngStream(seed, "client", i),
        )
        for i, split in enumerate(splits)
    ]
    return ServerState(clients, config.training.rounds)


def client_clusters(dataset: "Dataset", partition: "PartitionSpec") -> Optional[List[int]]:
    """Majority cluster of each client's samples, when clusters are known."""
    if dataset.cluster_ids is None:
        return None
    ids = np.asarray(dataset.cluster_ids, dtype=np.int64)
    return [int(np.argmax(np.bincount(ids[ix]))) for ix in partition.client_indices]


def run_experiment(
    config: "ExperimentConfig", checkpoint_dir: Optional[str] = None
) -> Report:
    """Data, partition, clients, ``T`` rounds and a final test evaluation.

    With ``checkpoint_dir`` every client's final model is saved there.
    """
    started = time.perf_counter()
    with config_context("dataset"):
        dataset = load_dataset(config)
    with config_context("partition"):
        partition = make_partition(config, dataset)
    with config_context("model"):
        server = build_server(config, dataset, partition)
    with config_context("strategy"):
        strategy = get_strategy(config.strategy)
        strategy.setup(server)
    logger.info(
        "Running %s: %d clients, %d rounds, %d samples",
        config.strategy.name,
        server.n_clients,
        server.total_rounds,
        len(dataset),
    )

    t = config.training
    params = TrainingParams(t.rounds, t.local_epochs, t.learning_rate, t.batch_size, t.workers)
    trace = []
    with config_context("training"):
        for __ in range(t.rounds):
            server, metrics = run_round(server, strategy, params)
            trace.append(metrics)

    final = evaluate_clients(server, "test")
    if checkpoint_dir:
        for client in server.clients:
            save_checkpoint(
                client.model, os.path.join(checkpoint_dir, f"client-{client.id:03d}.json")
            )
    clusters = client_clusters(dataset, partition)
    similarity = server.similarity if config.strategy.name == "epfl" else None
    aff = affinity(similarity, clusters) if similarity is not None and clusters else None
    model = server.clients[0].model
    report = Report(
        config=config.to_dict(),
        trace=trace,
        final_test_accuracy=final,
        params=param_counts(model, config.strategy),
        seed=config.seed,
        wall_clock_seconds=time.perf_counter() - started,
        client_clusters=clusters,
        final_similarity=similarity.s if similarity is not None else None,
        affinity=aff,
        full_model_params=param_counts(model, config.strategy, full=True),
    )
    logger.info("Mean final test accuracy %.4f", report.mean_final_accuracy)
    return report
