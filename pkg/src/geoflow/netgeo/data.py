"""Labeled datasets for the network diagnostics.

A dataset is a feature matrix, a label vector and per-point weights.
Weights default to the uniform 1/n and are what the reweighting loop
adjusts; every weighted quantity in this subpackage (loss, gradient,
Hessian, metric) is a plain weighted sum over points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["LabeledDataset", "read_dataset", "read_points", "write_dataset"]


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (n, p)
    labels: np.ndarray  # (n,)
    weights: np.ndarray = field(default=None)  # (n,), >= 0, not all zero

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.labels, dtype=float).ravel()
        if x.shape[0] != y.shape[0]:
            raise ValueError("feature and label counts differ")
        if x.shape[0] < 2:
            raise ValueError("a dataset needs at least 2 points")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("features and labels must be finite")
        w = self.weights
        if w is None:
            w = np.full(x.shape[0], 1.0 / x.shape[0])
        else:
            w = np.asarray(w, dtype=float).ravel()
            if w.shape[0] != x.shape[0]:
                raise ValueError("weight count differs from point count")
            if not np.all(np.isfinite(w)) or np.any(w < 0.0):
                raise ValueError("weights must be finite and non-negative")
            if not np.any(w > 0.0):
                raise ValueError("weights must not all be zero")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def in_dim(self) -> int:
        return self.features.shape[1]

    def point(self, i: int) -> tuple[np.ndarray, float]:
        return self.features[i], float(self.labels[i])

    def drop(self, i: int) -> "LabeledDataset":
        """The dataset with point i removed; the remaining points keep
        their weights (total mass shrinks). Matches the weight-zeroing
        semantics the influence predictions linearize, which uniform
        renormalization would not (it rescales data against any ridge)."""
        keep = np.arange(self.n) != i
        return LabeledDataset(self.features[keep], self.labels[keep], self.weights[keep])

    def with_weights(self, weights: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features, self.labels, weights)


def _read_rows(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = [c.strip() for c in header.split(",")]
        if not cols or cols[-1] != "label":
            raise ValueError("dataset CSV must end with a `label` column")
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if body.shape[1] != len(cols):
        raise ValueError("row width does not match the header")
    return body


def read_dataset(path) -> LabeledDataset:
    """Read a CSV with a header of feature columns followed by `label`."""
    body = _read_rows(path)
    return LabeledDataset(body[:, :-1], body[:, -1])


def read_points(path) -> list:
    """Read the same CSV layout as a list of (x, y) pairs; unlike a
    dataset, a single point is fine (e.g. influence test queries)."""
    body = _read_rows(path)
    return [(body[i, :-1].copy(), float(body[i, -1])) for i in range(body.shape[0])]


def write_dataset(path, dataset: LabeledDataset) -> None:
    cols = [f"f{i}" for i in range(dataset.in_dim)] + ["label"]
    body = np.column_stack([dataset.features, dataset.labels])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in body:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
