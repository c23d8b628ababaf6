"""Local training and the per-strategy round logic.

A strategy splits a round into a per-client training step, which touches
only that client's state and may run on a worker thread, and a server-side
aggregation step that runs once over a snapshot of every client.
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Tuple, Type

import numpy as np

from adapters.models import Gradients, LoraLinear, LoraMlp, backward, init_model, mix_models, sgd_step
from adapters.utils import RngStream
from federation.models import ClientState, StrategyConfig
from federation.utils import (
    HEAD_NAMES,
    adapter_names,
    aggregate_epfl,
    aggregate_fedavg,
    fedavg_weights,
    pairwise_b_distance,
    similarity_weights,
)
from lorafed.exceptions import ConfigurationError, ExtensionPointError, InputError

if TYPE_CHECKING:
    from clientdata.models import Dataset
    from federation.models import ServerState

logger = logging.getLogger(__name__)


@dataclass
class TrainingParams:
    rounds: int
    local_epochs: int
    learning_rate: float
    batch_size: int
    workers: int = 1


@dataclass
class TrainingHooks:
    """Per-step corrections: FedProx's proximal term, SCAFFOLD's control variates."""

    prox: Optional[Tuple[float, Gradients]] = None
    control: Optional[Tuple[Gradients, Gradients]] = None


def _batches(
    n: int, epochs: int, batch_size: int, rng: RngStream
) -> Iterator[np.ndarray]:
    for __ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def _check_params(lr: float, local_epochs: int, batch_size: int):
    if lr < 0 or local_epochs < 1 or batch_size < 1:
        raise ConfigurationError(
            f"need lr >= 0, local_epochs >= 1, batch_size >= 1;"
            f" got {lr}, {local_epochs}, {batch_size}"
        )


def local_train(
    client: ClientState,
    lr: float,
    local_epochs: int,
    batch_size: int,
    hooks: Optional[TrainingHooks] = None,
    round_: int = 0,
) -> ClientState:
    """Mini-batch SGD over the client's train split.

    Batches are drawn from the client's stream for this round, so the result
    does not depend on which other clients trained before it.
    """
    _check_params(lr, local_epochs, batch_size)
    features, labels = client.data("train")
    if labels.size == 0:
        raise InputError(f"client {client.id} has an empty train split")
    hooks = hooks or TrainingHooks()
    rng = client.rng.child("local-train", client.id, round_)

    client.train_losses = []
    client.local_steps = 0
    for batch in _batches(labels.size, local_epochs, batch_size, rng):
        loss, grads = backward(client.model, features[batch], labels[batch], prox=hooks.prox)
        sgd_step(client.model, grads, lr, cv=hooks.control)
        client.train_losses.append(loss)
        client.local_steps += 1
    return client


def pretrain_model(
    widths: Sequence[int],
    n_classes: int,
    pooled: "Dataset",
    epochs: int,
    seed: int,
    lr: float = 0.05,
    batch_size: int = 32,
) -> LoraMlp:
    """Full-parameter SGD of a plain MLP, head included, on pooled data.

    With ``epochs = 0`` this is the random initialisation.
    """
    if len(pooled) == 0:
        raise InputError("pretraining needs a non-empty pooled dataset")
    model = init_model(widths, 1, seed, n_classes)
    if epochs <= 0:
        return model

    rng = RngStream(seed, "pretrain")
    losses = []
    for batch in _batches(len(pooled), epochs, batch_size, rng):
        loss, grads = backward(
            model, pooled.features[batch], pooled.labels[batch], include_base=True
        )
        model.head_weight -= lr * grads["head.weight"]
        model.head_bias -= lr * grads["head.bias"]
        model.layers = [
            LoraLinear(
                layer.w0 - lr * grads[f"layers.{i}.W0"],
                layer.bias - lr * grads[f"layers.{i}.bias"],
                layer.a,
                layer.b,
                layer.psi,
            )
            for i, layer in enumerate(model.layers)
        ]
        losses.append(loss)
    logger.info(
        "Pretrained base for %d epochs on %d samples, last-epoch loss %.4f",
        epochs,
        len(pooled),
        float(np.mean(losses[-max(1, len(losses) // epochs) :])),
    )
    return model


def pretrain_base(
    widths: Sequence[int],
    n_classes: int,
    pooled: "Dataset",
    epochs: int,
    seed: int,
    lr: float = 0.05,
    batch_size: int = 32,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Every layer's (W0, bias) after ``pretrain_model``; the head is dropped."""
    model = pretrain_model(widths, n_classes, pooled, epochs, seed, lr, batch_size)
    return [(layer.w0, layer.bias) for layer in model.layers]


# -- STRATEGIES --
class Strategy:
    name = ""
    description = ""

    def __init__(self, config: StrategyConfig):
        self.config = config

    def setup(self, server: "ServerState"):
        """Prepare global state before the first round."""
        server.weights = fedavg_weights(
            [c.n_train for c in server.clients], self.config.weighting or "size"
        )
        server.ready = True

    def train_client(
        self, server: "ServerState", client: ClientState, params: TrainingParams
    ):
        local_train(
            client,
            params.learning_rate,
            params.local_epochs,
            params.batch_size,
            round_=server.round,
        )

    def aggregate(self, server: "ServerState"):
        pass


class LocalOnly(Strategy):
    name = "local-only"
    description = "Every client trains alone; nothing is communicated."


class Epfl(Strategy):
    name = "epfl"
    description = (
        "Similarity-weighted aggregation of LoRA A matrices; B matrices and"
        " heads stay personal."
    )

    def aggregate(self, server: "ServerState"):
        cfg = self.config
        distances = pairwise_b_distance(server.clients, cfg.psi)
        server.similarity = similarity_weights(distances, cfg.lam, cfg.epsilon)
        aggregate_epfl(server.similarity, server.clients)
        if cfg.share_head:
            _broadcast(server, aggregate_fedavg(server.clients, server.weights, HEAD_NAMES), HEAD_NAMES)
        logger.debug("Round %d similarity:\n%s", server.round, server.similarity.s)


class SimpleAvgA(Strategy):
    name = "simple-avg-a"
    description = "Ablation: uniform average of the A matrices, B and heads personal."

    def aggregate(self, server: "ServerState"):
        names = adapter_names(server.clients[0].model, "A")
        uniform = fedavg_weights([1] * server.n_clients, "uniform")
        _broadcast(server, aggregate_fedavg(server.clients, uniform, names), names)
        if self.config.share_head:
            _broadcast(server, aggregate_fedavg(server.clients, server.weights, HEAD_NAMES), HEAD_NAMES)


class FedAvg(Strategy):
    name = "fedavg"
    description = "One global model; clients' trainable tensors averaged by p_i."

    def setup(self, server: "ServerState"):
        super().setup(server)
        server.global_model = server.clients[0].model.copy()
        for client in server.clients:
            client.model.load_trainable(server.global_model.trainable())

    def aggregate(self, server: "ServerState"):
        server.global_model = aggregate_fedavg(server.clients, server.weights)
        _broadcast(server, server.global_model)


class FedProx(FedAvg):
    name = "fedprox"
    description = "FedAvg with a proximal pull towards the round's global model."

    def train_client(self, server, client, params):
        reference = Gradients.of(client.model)
        local_train(
            client,
            params.learning_rate,
            params.local_epochs,
            params.batch_size,
            TrainingHooks(prox=(self.config.mu, reference)),
            round_=server.round,
        )


class Scaffold(FedAvg):
    name = "scaffold"
    description = "FedAvg with server and client control variates against drift."

    def setup(self, server):
        super().setup(server)
        server.scaffold_c = Gradients.zeros_like(server.global_model)
        for client in server.clients:
            client.scaffold_c_i = Gradients.zeros_like(client.model)

    def train_client(self, server, client, params):
        x = Gradients.of(server.global_model)
        local_train(
            client,
            params.learning_rate,
            params.local_epochs,
            params.batch_size,
            TrainingHooks(control=(server.scaffold_c, client.scaffold_c_i)),
            round_=server.round,
        )
        step = client.local_steps * params.learning_rate
        if step == 0:
            raise ConfigurationError("SCAFFOLD needs local steps x learning rate > 0")
        # c_i <- c_i - c + (x - y_i) / (K * lr)
        drift = x.minus(Gradients.of(client.model)).scaled(1.0 / step)
        client.scaffold_c_i = client.scaffold_c_i.minus(server.scaffold_c).plus(drift)

    def aggregate(self, server):
        super().aggregate(server)
        # Full participation: c is the plain mean of the client variates
        uniform = fedavg_weights([1] * server.n_clients, "uniform")
        controls = []
        for client in server.clients:
            holder = client.model.copy()
            holder.load_trainable(client.scaffold_c_i.tensors)
            controls.append(holder)
        server.scaffold_c = Gradients.of(aggregate_fedavg(controls, uniform))


class Apfl(FedAvg):
    name = "apfl"
    description = "Each client mixes a personal model v with the shared model w."

    def setup(self, server):
        super().setup(server)
        for client in server.clients:
            client.apfl_local = client.model.copy()
            client.apfl_alpha = self.config.apfl_alpha

    def train_client(self, server, client, params):
        _check_params(params.learning_rate, params.local_epochs, params.batch_size)
        features, labels = client.data("train")
        if labels.size == 0:
            raise InputError(f"client {client.id} has an empty train split")
        lr = params.learning_rate
        rng = client.rng.child("local-train", client.id, server.round)
        shared, local = client.model, client.apfl_local

        client.train_losses = []
        client.local_steps = 0
        for batch in _batches(labels.size, params.local_epochs, params.batch_size, rng):
            x, y = features[batch], labels[batch]
            mixed = mix_models(local, shared, client.apfl_alpha)
            loss, mixed_grads = backward(mixed, x, y)
            gap = Gradients.of(local).minus(Gradients.of(shared))
            __, shared_grads = backward(shared, x, y)
            sgd_step(shared, shared_grads, lr)
            sgd_step(local, mixed_grads.scaled(client.apfl_alpha), lr)
            if self.config.apfl_adaptive:
                alpha = client.apfl_alpha - lr * gap.dot(mixed_grads)
                client.apfl_alpha = float(np.clip(alpha, 0.0, 1.0))
            client.train_losses.append(loss)
            client.local_steps += 1


class NotImplementedStrategy(Strategy):
    """Registered so the strategy table stays complete; fails on use."""

    def __init__(self, config: StrategyConfig):  # pylint: disable=super-init-not-called
        raise ExtensionPointError(config.name)


class Apple(NotImplementedStrategy):
    name = "apple"
    description = "Directed-relationship personalization (extension point)."


class FedAla(NotImplementedStrategy):
    name = "fedala"
    description = "Adaptive local aggregation (extension point)."


REGISTRY = {
    cls.name: cls
    for cls in (Epfl, SimpleAvgA, FedAvg, FedProx, Scaffold, Apfl, LocalOnly, Apple, FedAla)
}  # type: Dict[str, Type[Strategy]]


def get_strategy(config: StrategyConfig) -> Strategy:
    try:
        cls = REGISTRY[config.name]
    except KeyError:
        raise ConfigurationError(f"strategy.name: unknown strategy '{config.name}'") from None
    return cls(config)


def _broadcast(server: "ServerState", source: LoraMlp, names=None):
    tensors = source.trainable()
    for client in server.clients:
        client.model.load_trainable(tensors, names)

