"""Evaluation, parameter accounting and report files."""
import csv
import io
import json
import logging
import os
import tempfile
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from django.conf import settings

from adapters.models import model_forward
from lorafed.exceptions import InputError, LoraFedError
from reports.models import ParamReport, RoundMetrics

if TYPE_CHECKING:
    from adapters.models import LoraMlp
    from adapters.utils import ArrayLike
    from federation.models import StrategyConfig
    from reports.models import Report

logger = logging.getLogger(__name__)

TRACE_FIELDS = ["round", "client", "val_accuracy", "train_loss"]
TRACE_FILE = "trace.csv"
REPORT_FILE = "report.json"
WEIGHTS_FILE = "weights_final.csv"
TIMING_FILE = "timing.json"


def evaluate_accuracy(model: "LoraMlp", features: "ArrayLike", labels: "ArrayLike") -> float:
    """Fraction of samples whose argmax logit is the label.

    Ties go to the lowest class index.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.size == 0:
        raise InputError("cannot evaluate on an empty set")
    logits = model_forward(model, np.atleast_2d(np.asarray(features, dtype=np.float64)))
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# -- PARAMETER ACCOUNTING --
def _count(
    layer_shapes: Sequence[Tuple[int, int]],
    rank: int,
    n_classes: int,
    strategy: "StrategyConfig",
    full: bool = False,
) -> ParamReport:
    """Element counts from layer shapes ``(d, k)`` alone."""
    a_size = sum(rank * k for __, k in layer_shapes)
    b_size = sum(d * rank for d, __ in layer_shapes)
    head = n_classes * layer_shapes[-1][0] + n_classes
    dense = sum(d * k for d, k in layer_shapes)

    if full:
        trainable = dense + sum(d for d, __ in layer_shapes) + head
        up = down = trainable
    else:
        trainable = a_size + b_size + head
        shared_head = head if strategy.share_head else 0
        name = strategy.name
        if name == "epfl":
            up, down = a_size + b_size + shared_head, a_size + shared_head
        elif name == "simple-avg-a":
            up = down = a_size + shared_head
        elif name in ("fedavg", "fedprox"):
            up = down = trainable
        elif name == "scaffold":
            # model plus control variate
            up = down = 2 * trainable
        elif name == "apfl":
            # personal v and shared w live on the client, only w travels
            up = down = trainable
            trainable *= 2
        else:
            up = down = 0
    return ParamReport(trainable, up, down, trainable + up + down, dense)


def param_counts(
    model: "LoraMlp", strategy: "StrategyConfig", full: bool = False
) -> ParamReport:
    """Trainable and communicated element counts per client and round.

    With ``full`` the counts are for full fine-tuning FedAvg on the same
    architecture, where every dense weight, bias and the head are trained and
    exchanged.
    """
    shapes = [(layer.d, layer.k) for layer in model.layers]
    return _count(shapes, model.layers[0].rank, model.n_classes, strategy, full)


def reference_param_counts(
    strategy: "StrategyConfig",
    rank: int = 8,
    widths: Optional[Sequence[int]] = None,
    n_classes: Optional[int] = None,
    full: bool = False,
) -> ParamReport:
    """Counts on the reference architecture without building a model."""
    widths = list(widths or settings.LORAFED_REFERENCE_WIDTHS)
    n_classes = n_classes or settings.LORAFED_REFERENCE_CLASSES
    shapes = [(d, k) for k, d in zip(widths, widths[1:])]
    return _count(shapes, rank, n_classes, strategy, full)


# -- FILES --
def atomic_write(path: str, text: str):
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise LoraFedError(f"{path}: {e}") from e


def _trace_csv(trace: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for metrics in trace:
        for client, (acc, loss) in enumerate(zip(metrics.val_accuracy, metrics.train_loss)):
            writer.writerow(
                {
                    "round": metrics.round,
                    "client": client,
                    "val_accuracy": repr(float(acc)),
                    "train_loss": repr(float(loss)),
                }
            )
    return buf.getvalue()


def _matrix_csv(matrix: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in matrix:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def write_report(report: "Report", out_dir: str) -> List[str]:
    """Write the report files into ``out_dir`` and return their paths.

    Files are replaced atomically; a ``weights_final.csv`` left over from an
    earlier epfl run is removed when the report has no similarity matrix.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise LoraFedError(f"{out_dir}: {e}") from e

    files = {
        TRACE_FILE: _trace_csv(report.trace),
        REPORT_FILE: json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
        TIMING_FILE: json.dumps({"wall_clock_seconds": report.wall_clock_seconds}) + "\n",
    }
    weights_path = os.path.join(out_dir, WEIGHTS_FILE)
    if report.strategy == "epfl" and report.final_similarity is not None:
        files[WEIGHTS_FILE] = _matrix_csv(report.final_similarity)
    elif os.path.exists(weights_path):
        os.unlink(weights_path)

    paths = []
    for name, text in files.items():
        path = os.path.join(out_dir, name)
        atomic_write(path, text)
        paths.append(path)
    logger.info("Wrote %s", ", ".join(sorted(files)))
    return paths


def read_trace(path: str) -> List[RoundMetrics]:
    """Parse a ``trace.csv`` back into per-round metrics."""
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"{path}: {e}") from e
    if list(df.columns) != TRACE_FIELDS:
        raise InputError(f"{path}: expected columns {TRACE_FIELDS}, got {list(df.columns)}")

    trace = []
    for round_, rows in df.groupby("round", sort=True):
        rows = rows.sort_values("client")
        trace.append(
            RoundMetrics(
                int(round_),
                [float(v) for v in rows["val_accuracy"]],
                [float(v) for v in rows["train_loss"]],
            )
        )
    return trace


def read_weights(path: str) -> np.ndarray:
    try:
        return pd.read_csv(path, header=None, float_precision="round_trip").to_numpy(
            dtype=np.float64
        )
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"{path}: {e}") from e


def rounds_to_fraction(trace: Sequence[RoundMetrics], fraction: float = 0.9) -> Optional[int]:
    """First round whose mean accuracy reaches ``fraction`` of the final one."""
    if not trace:
        return None
    target = fraction * trace[-1].mean_accuracy
    for metrics in trace:
        if metrics.mean_accuracy >= target:
            return metrics.round
    return trace[-1].round


def summarize(report: "Report") -> Dict:
    """One flat row per report, for sweep summaries."""
    return {
        "strategy": report.strategy,
        "seed": report.seed,
        "mean_final_accuracy": report.mean_final_accuracy,
        "final_accuracy_min": report.final_accuracy_min,
        "rounds_to_90": rounds_to_fraction(report.trace, 0.9),
        "communicated_up": report.params.communicated_up,
        "communicated_down": report.params.communicated_down,
    }
