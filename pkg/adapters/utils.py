"""Dense linear algebra, seeded randomness and the classification loss.

Matrices are plain ``numpy`` float64 arrays; every public function here is
pure and safe to call from any thread.
"""
import copy
import zlib
from typing import Sequence, Tuple, Union

import numpy as np

from lorafed.exceptions import InputError, StructuralError

ArrayLike = Union[np.ndarray, Sequence]


def as_matrix(values: ArrayLike, name: str = "matrix") -> np.ndarray:
    """A 2-D float64 copy of ``values``, checked for finiteness."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2:
        raise StructuralError(f"{name} must be 2-D, got shape {arr.shape}")
    return check_finite(name, arr)


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise StructuralError(f"{name} contains NaN or Inf entries")
    return arr


def frob_distance(m1: ArrayLike, m2: ArrayLike) -> float:
    """Frobenius norm of ``m1 - m2``.

    Equals the vector 2-norm of the flattened difference, which is how the
    layer-wise distance between two B matrices is measured.
    """
    a = np.asarray(m1, dtype=np.float64)
    b = np.asarray(m2, dtype=np.float64)
    if a.shape != b.shape:
        raise StructuralError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = (a - b).ravel()
    return float(np.sqrt(np.dot(diff, diff)))


def softmax_cross_entropy_batch(
    logits: np.ndarray, labels: ArrayLike
) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits.

    ``logits`` is n x C. The returned gradient is n x C and already divided
    by n, so it is the gradient of the *mean* loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise StructuralError(f"logits must be n x C, got shape {logits.shape}")
    n, n_classes = logits.shape
    if n == 0:
        raise InputError("empty batch")
    if n_classes < 2:
        raise StructuralError("at least two classes are required")
    if labels.shape != (n,):
        raise StructuralError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InputError(f"label out of range [0, {n_classes})")

    # Max-shift keeps exp() in range
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = log_norm - shifted[rows, labels]
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, labels] -= 1.0
    return float(losses.mean()), probs / n


def softmax_cross_entropy(logits: ArrayLike, label: int) -> Tuple[float, np.ndarray]:
    """Cross-entropy of a single logit vector and its gradient."""
    vec = np.asarray(logits, dtype=np.float64)
    if vec.ndim != 1:
        raise StructuralError(f"logits must be a vector, got shape {vec.shape}")
    if not 0 <= int(label) < vec.shape[0]:
        raise InputError(f"label {label} out of range [0, {vec.shape[0]})")
    loss, grad = softmax_cross_entropy_batch(vec[None, :], [int(label)])
    return loss, grad[0]


def stable_sum(terms: np.ndarray) -> np.ndarray:
    """Sum along the first axis independently of the order of the terms.

    Terms are sorted per entry before summation, so any permutation of the
    first axis gives a bit-identical result.
    """
    return np.sort(terms, axis=0).sum(axis=0)


class RngStream:
    """A named, counter-based random stream.

    The stream id is ``(purpose, client, round)``; together with the seed it
    fully determines the draws, so per-client and per-round streams do not
    depend on the order in which they are consumed.
    """

    def __init__(self, seed: int, purpose: str, client: int = 0, round_: int = 0):
        if seed < 0:
            raise InputError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream_id = (purpose, int(client), int(round_))
        seq = np.random.SeedSequence(
            entropy=self.seed,
            spawn_key=(zlib.crc32(purpose.encode("utf-8")), int(client), int(round_)),
        )
        self.generator = np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def clone(self) -> "RngStream":
        """An independent copy positioned where this stream is now."""
        return copy.deepcopy(self)

    def child(self, purpose: str, client: int = 0, round_: int = 0) -> "RngStream":
        return RngStream(self.seed, purpose, client, round_)

    # Draws
    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def permutation(self, n_or_array) -> np.ndarray:
        return self.generator.permutation(n_or_array)

    def dirichlet(self, alpha: Sequence[float]) -> np.ndarray:
        return self.generator.dirichlet(alpha)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)
