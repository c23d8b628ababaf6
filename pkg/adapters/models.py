"""LoRA-adapted multilayer perceptron with hand-written gradients.

Each hidden layer computes ``h = W0 x + bias + B (A x)`` with ``W0`` and
``bias`` frozen. ReLU sits between LoRA layers; a dense head maps the last
hidden width to class logits. The head is trainable and, by default, never
leaves the client.
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from adapters.utils import RngStream, check_finite, softmax_cross_entropy_batch
from lorafed.exceptions import ConfigurationError, InputError, StructuralError

if TYPE_CHECKING:
    from adapters.utils import ArrayLike

logger = logging.getLogger(__name__)

A_INIT_STD = 0.02


def _frozen(arr: np.ndarray) -> np.ndarray:
    if isinstance(arr, np.ndarray) and arr.dtype == np.float64 and not arr.flags.writeable:
        return arr
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass
class LoraLinear:
    w0: np.ndarray  # d x k, frozen
    bias: np.ndarray  # d, frozen
    a: np.ndarray  # r x k
    b: np.ndarray  # d x r
    psi: int = 1

    def __post_init__(self):
        self.w0 = _frozen(self.w0)
        self.bias = _frozen(self.bias)
        self.a = np.array(self.a, dtype=np.float64)
        self.b = np.array(self.b, dtype=np.float64)
        d, k = self.w0.shape
        r = self.a.shape[0]
        if self.bias.shape != (d,):
            raise StructuralError(f"bias shape {self.bias.shape} != ({d},)")
        if self.a.shape != (r, k) or self.b.shape != (d, r):
            raise StructuralError(
                f"adapter shapes A{self.a.shape}, B{self.b.shape} do not fit W0{(d, k)}"
            )
        if not 1 <= r <= min(d, k):
            raise ConfigurationError(f"rank {r} outside [1, min(d={d}, k={k})]")
        if self.psi not in (0, 1):
            raise ConfigurationError(f"psi must be 0 or 1, got {self.psi}")

    @property
    def d(self) -> int:
        return self.w0.shape[0]

    @property
    def k(self) -> int:
        return self.w0.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def copy(self) -> "LoraLinear":
        # Frozen arrays are read-only, so sharing them is safe
        return LoraLinear(self.w0, self.bias, self.a.copy(), self.b.copy(), self.psi)


@dataclass
class LoraMlp:
    layers: List[LoraLinear]
    head_weight: np.ndarray  # C x h
    head_bias: np.ndarray  # C

    def __post_init__(self):
        if not self.layers:
            raise StructuralError("a model needs at least one LoRA layer")
        for i, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if prev.d != nxt.k:
                raise StructuralError(
                    f"layer {i} outputs {prev.d} features, layer {i + 1} expects {nxt.k}"
                )
        self.head_weight = np.array(self.head_weight, dtype=np.float64)
        self.head_bias = np.array(self.head_bias, dtype=np.float64)
        n_classes, width = self.head_weight.shape
        if width != self.layers[-1].d or self.head_bias.shape != (n_classes,):
            raise StructuralError(
                f"head {self.head_weight.shape} does not fit last width {self.layers[-1].d}"
            )

    @property
    def input_dim(self) -> int:
        return self.layers[0].k

    @property
    def n_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def psi(self) -> List[int]:
        return [layer.psi for layer in self.layers]

    @property
    def widths(self) -> List[int]:
        return [self.input_dim] + [layer.d for layer in self.layers]

    def copy(self) -> "LoraMlp":
        return LoraMlp(
            [layer.copy() for layer in self.layers],
            self.head_weight.copy(),
            self.head_bias.copy(),
        )

    def trainable(self) -> Dict[str, np.ndarray]:
        """Name -> array for every trainable tensor (live views, not copies)."""
        tensors = {}  # type: Dict[str, np.ndarray]
        for i, layer in enumerate(self.layers):
            tensors[f"layers.{i}.A"] = layer.a
            tensors[f"layers.{i}.B"] = layer.b
        tensors["head.weight"] = self.head_weight
        tensors["head.bias"] = self.head_bias
        return tensors

    def frozen(self) -> Dict[str, np.ndarray]:
        tensors = {}  # type: Dict[str, np.ndarray]
        for i, layer in enumerate(self.layers):
            tensors[f"layers.{i}.W0"] = layer.w0
            tensors[f"layers.{i}.bias"] = layer.bias
        return tensors

    def load_trainable(self, tensors: Dict[str, np.ndarray], names=None):
        """Overwrite trainable tensors in place (all of them, or ``names``)."""
        own = self.trainable()
        for name in names if names is not None else own:
            if tensors[name].shape != own[name].shape:
                raise StructuralError(
                    f"{name}: shape {tensors[name].shape} != {own[name].shape}"
                )
            own[name][...] = tensors[name]


@dataclass
class Gradients:
    """Name -> array, shaped exactly like a model's trainable tensors.

    Also used for control variates and parameter deltas.
    """

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @classmethod
    def zeros_like(cls, model: "LoraMlp") -> "Gradients":
        return cls({k: np.zeros_like(v) for k, v in model.trainable().items()})

    @classmethod
    def of(cls, model: "LoraMlp") -> "Gradients":
        """A snapshot copy of the model's trainable tensors."""
        return cls({k: v.copy() for k, v in model.trainable().items()})

    def scaled(self, factor: float) -> "Gradients":
        return Gradients({k: v * factor for k, v in self.items()})

    def plus(self, other: "Gradients") -> "Gradients":
        return Gradients({k: v + other[k] for k, v in self.items()})

    def minus(self, other: "Gradients") -> "Gradients":
        return Gradients({k: v - other[k] for k, v in self.items()})

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self.items()}

    def dot(self, other: "Gradients") -> float:
        return float(sum(np.vdot(v, other[k]) for k, v in self.items()))


# -- OPERATIONS --
def lora_forward(layer: LoraLinear, x: "ArrayLike") -> np.ndarray:
    """``W0 x + bias + B (A x)`` for a vector, or row-wise for an n x k batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.k:
        raise StructuralError(f"input has {x.shape[-1]} features, layer expects {layer.k}")
    return x @ layer.w0.T + layer.bias + (x @ layer.a.T) @ layer.b.T


def _forward_cache(
    model: LoraMlp, features: np.ndarray
) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    """Logits plus, per layer, (input, A x, pre-activation)."""
    z = features
    cache = []
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        u = z @ layer.a.T
        pre = z @ layer.w0.T + layer.bias + u @ layer.b.T
        cache.append((z, u, pre))
        z = np.maximum(pre, 0.0) if i < last else pre
    return z @ model.head_weight.T + model.head_bias, cache


def _as_features(model: LoraMlp, x: "ArrayLike") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != model.input_dim:
        raise StructuralError(
            f"input shape {x.shape} does not match {model.input_dim} features"
        )
    return x


def model_forward(model: LoraMlp, x: "ArrayLike") -> np.ndarray:
    """Logits for one feature vector (length C) or a batch (n x C)."""
    x = _as_features(model, x)
    logits, __ = _forward_cache(model, np.atleast_2d(x))
    return logits[0] if x.ndim == 1 else logits


def backward(
    model: LoraMlp,
    features: "ArrayLike",
    labels: "ArrayLike",
    prox: Optional[Tuple[float, Gradients]] = None,
    include_base: bool = False,
) -> Tuple[float, Gradients]:
    """Mean cross-entropy over a batch and its gradients.

    ``prox`` is ``(mu, reference)``; when given, ``mu * (theta - reference)``
    is added to every trainable gradient and ``mu/2 * ||theta - reference||^2``
    to the loss. ``include_base`` also differentiates the frozen W0 and bias,
    which only base pretraining uses.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size == 0 or np.size(features) == 0:
        raise InputError("empty batch")
    features = np.atleast_2d(_as_features(model, features))

    logits, cache = _forward_cache(model, features)
    loss, dlogits = softmax_cross_entropy_batch(logits, labels)
    last_z = cache[-1][2]
    grads = {}  # type: Dict[str, np.ndarray]

    # Head
    grads["head.weight"] = dlogits.T @ last_z
    grads["head.bias"] = dlogits.sum(axis=0)
    dz = dlogits @ model.head_weight

    # LoRA layers, last to first
    last = len(model.layers) - 1
    for i in range(last, -1, -1):
        layer = model.layers[i]
        z_in, u, pre = cache[i]
        dpre = dz if i == last else dz * (pre > 0.0)
        grads[f"layers.{i}.B"] = dpre.T @ u
        du = dpre @ layer.b
        grads[f"layers.{i}.A"] = du.T @ z_in
        if include_base:
            grads[f"layers.{i}.W0"] = dpre.T @ z_in
            grads[f"layers.{i}.bias"] = dpre.sum(axis=0)
        dz = dpre @ layer.w0 + du @ layer.a

    if prox is not None:
        mu, reference = prox
        penalty = 0.0
        for name, param in model.trainable().items():
            delta = param - reference[name]
            grads[name] = grads[name] + mu * delta
            penalty += float(np.vdot(delta, delta))
        loss += 0.5 * mu * penalty

    ordered = list(model.trainable())
    if include_base:
        ordered += list(model.frozen())
    return loss, Gradients({name: grads[name] for name in ordered})


def sgd_step(
    model: LoraMlp,
    grads: Gradients,
    lr: float,
    cv: Optional[Tuple[Gradients, Gradients]] = None,
) -> LoraMlp:
    """In-place ``p <- p - lr * (g + (c - c_i))`` on every trainable tensor.

    ``cv`` is the (server, client) control-variate pair; frozen tensors are
    never touched.
    """
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    for name, param in model.trainable().items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise StructuralError(f"{name}: gradient {grad.shape} != param {param.shape}")
        if cv is not None:
            server_c, client_c = cv
            grad = grad + (server_c[name] - client_c[name])
        param -= lr * grad
    return model


def init_model(
    widths: Sequence[int],
    rank: int,
    seed: int,
    n_classes: int,
    psi: Optional[Sequence[int]] = None,
    base: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None,
) -> LoraMlp:
    """A fresh model: A Gaussian(0, 0.02^2), B zero, Gaussian head.

    ``widths`` is the input dimension followed by each layer's output width.
    W0 and bias are He-initialised from the seed unless ``base`` supplies them.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ConfigurationError(f"invalid layer widths {widths}")
    if n_classes < 2:
        raise ConfigurationError("at least two classes are required")
    n_layers = len(widths) - 1
    psi = [1] * n_layers if psi is None else [int(p) for p in psi]
    if len(psi) != n_layers:
        raise ConfigurationError(f"psi has {len(psi)} flags for {n_layers} layers")
    max_rank = min(min(k, d) for k, d in zip(widths, widths[1:]))
    if not 1 <= rank <= max_rank:
        raise ConfigurationError(f"rank {rank} outside [1, {max_rank}] for widths {widths}")
    if base is not None and len(base) != n_layers:
        raise ConfigurationError(f"base weights cover {len(base)} of {n_layers} layers")

    # Separate streams keep W0 independent of the rank and vice versa
    base_rng = RngStream(seed, "init-base")
    adapter_rng = RngStream(seed, "init-adapter")
    head_rng = RngStream(seed, "init-head")
    layers = []
    for i, (k, d) in enumerate(zip(widths, widths[1:])):
        w0 = base_rng.normal(0.0, np.sqrt(2.0 / k), (d, k))
        bias = np.zeros(d)
        a = adapter_rng.normal(0.0, A_INIT_STD, (rank, k))
        if base is not None:
            w0, bias = base[i]
            if np.shape(w0) != (d, k):
                raise StructuralError(f"base layer {i} has shape {np.shape(w0)}, need {(d, k)}")
        layers.append(LoraLinear(w0, bias, a, np.zeros((d, rank)), psi[i]))
    head_weight = head_rng.normal(0.0, np.sqrt(1.0 / widths[-1]), (n_classes, widths[-1]))
    model = LoraMlp(layers, head_weight, np.zeros(n_classes))
    for name, tensor in {**model.trainable(), **model.frozen()}.items():
        check_finite(name, tensor)
    logger.debug("Initialised model widths=%s rank=%d classes=%d", widths, rank, n_classes)
    return model


def mix_models(local: LoraMlp, shared: LoraMlp, alpha: float) -> LoraMlp:
    """``alpha * local + (1 - alpha) * shared`` on the trainable tensors."""
    mixed = local.copy()
    shared_tensors = shared.trainable()
    for name, param in mixed.trainable().items():
        param[...] = alpha * param + (1.0 - alpha) * shared_tensors[name]
    return mixed
