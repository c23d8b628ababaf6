from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from clientdata.utils import label_entropy


def histogram_frame(
    histograms: np.ndarray, class_names: Optional[List[str]] = None
) -> pd.DataFrame:
    """Per-client class counts with total and label-entropy columns."""
    columns = class_names or [str(c) for c in range(histograms.shape[1])]
    df = pd.DataFrame(histograms, columns=columns)
    df.index.name = "client"
    df["total"] = df[columns].sum(axis=1)
    df["entropy"] = [label_entropy(row) for row in histograms]
    return df


def summary_frame(rows: List[Dict]) -> pd.DataFrame:
    """Sweep rows, one per (cell, seed), sorted by cell then seed."""
    df = pd.DataFrame(rows)
    if df.empty:
        return df
    return df.sort_values(["cell", "seed"], kind="mergesort").reset_index(drop=True)


def cell_means(summary: pd.DataFrame) -> pd.DataFrame:
    """Mean final accuracy per cell over seeds, with its spread."""
    grouped = summary.groupby("cell", sort=True)["mean_final_accuracy"]
    return pd.DataFrame({"mean": grouped.mean(), "std": grouped.std(ddof=0), "seeds": grouped.size()})
