"""Dataset container and the delimited text format it travels in.

A dataset is a table of samples: input features, the frozen task model's
prediction, the ground truth, and (optionally) the generating cluster id.
Correctness labels are derived lazily from the labeling rule and cached;
they are a function of (task_pred, ground_truth, mode) only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .metrics import correctness_labels

MODES = ("regression", "classification")


@dataclass
class Sample:
    """One data point, materialized from a Dataset row."""

    input: np.ndarray
    task_pred: float
    ground_truth: float
    correctness: int | None = None


@dataclass
class Dataset:
    inputs: np.ndarray        # (n, d) float64
    task_pred: np.ndarray     # (n,)
    ground_truth: np.ndarray  # (n,)
    mode: str = "regression"
    cluster_ids: np.ndarray | None = None
    _correctness: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.task_pred = np.asarray(self.task_pred, dtype=np.float64).ravel()
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64).ravel()
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        n = self.inputs.shape[0]
        if self.task_pred.size != n or self.ground_truth.size != n:
            raise ConfigError("inputs, task_pred and ground_truth lengths differ")
        if self.cluster_ids is not None:
            self.cluster_ids = np.asarray(self.cluster_ids, dtype=np.int64).ravel()
            if self.cluster_ids.size != n:
                raise ConfigError("cluster_ids length differs from inputs")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def correctness(self) -> np.ndarray:
        """Binary correctness labels, computed once and cached."""
        if self._correctness is None:
            self._correctness = correctness_labels(
                self.task_pred, self.ground_truth, self.mode
            )
        return self._correctness

    def sample(self, i: int) -> Sample:
        return Sample(
            input=self.inputs[i],
            task_pred=float(self.task_pred[i]),
            ground_truth=float(self.ground_truth[i]),
            correctness=int(self.correctness()[i]),
        )


def describe(dataset: Dataset) -> dict:
    """Exact counts: size, correct rate, and per-cluster breakdown."""
    if len(dataset) == 0:
        raise ConfigError("cannot describe an empty dataset")
    c = dataset.correctness()
    out = {
        "n_samples": int(len(dataset)),
        "input_dim": int(dataset.input_dim),
        "mode": dataset.mode,
        "n_correct": int(c.sum()),
        "positive_rate": float(c.mean()),
    }
    if dataset.cluster_ids is not None:
        ids, counts = np.unique(dataset.cluster_ids, return_counts=True)
        out["cluster_counts"] = {int(i): int(k) for i, k in zip(ids, counts)}
    return out


def save_dataset(path, dataset: Dataset) -> None:
    """Write the delimited text format: header row, then one sample per line."""
    d = dataset.input_dim
    header = [f"feature_{j}" for j in range(d)] + ["task_pred", "ground_truth", "cluster_id"]
    cluster = (
        dataset.cluster_ids
        if dataset.cluster_ids is not None
        else np.full(len(dataset), -1, dtype=np.int64)
    )
    lines = [",".join(header)]
    for i in range(len(dataset)):
        cells = [repr(float(v)) for v in dataset.inputs[i]]
        cells.append(repr(float(dataset.task_pred[i])))
        cells.append(repr(float(dataset.ground_truth[i])))
        cells.append(str(int(cluster[i])))
        lines.append(",".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path, mode: str = "regression") -> Dataset:
    """Read the delimited format back, validating column count and finiteness."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    if not lines:
        raise ConfigError(f"{path}: empty dataset file")
    header = lines[0].split(",")
    if len(header) < 4 or header[-3:] != ["task_pred", "ground_truth", "cluster_id"]:
        raise ConfigError(f"{path}: unexpected header {header!r}")
    d = len(header) - 3
    if header[:d] != [f"feature_{j}" for j in range(d)]:
        raise ConfigError(f"{path}: unexpected feature columns in header")
    rows = np.empty((len(lines) - 1, len(header)))
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != len(header):
            raise ConfigError(
                f"{path}: line {i + 2} has {len(cells)} columns, expected {len(header)}"
            )
        rows[i] = [float(c) for c in cells]
    if not np.all(np.isfinite(rows)):
        raise ConfigError(f"{path}: dataset contains non-finite values")
    return Dataset(
        inputs=rows[:, :d],
        task_pred=rows[:, d],
        ground_truth=rows[:, d + 1],
        mode=mode,
        cluster_ids=rows[:, d + 2].astype(np.int64),
    )
