"""Task datasets: CSV ingestion, synthetic generators, splits, normalization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

CLASSIFICATION = "classification"
REGRESSION = "regression"

# Split presets: "tabular" is 60/20/20; "image" mimics keeping a fixed test
# partition (20%) and carving 10% of the remaining training rows for
# validation, i.e. 72/8/20.
SPLIT_PRESETS = {
    "tabular": (0.6, 0.2, 0.2),
    "image": (0.72, 0.08, 0.2),
}


@dataclass
class TaskDataset:
    """Featurized dataset with disjoint train/val/test index splits.

    Features (and regression labels) are standardized using statistics from
    the train split only.
    """

    kind: str
    X: np.ndarray
    y: np.ndarray
    splits: dict
    n_classes: int = 0
    feature_stats: tuple = ()
    label_stats: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise UsageError(f"unknown task kind {self.kind!r}")
        n = self.X.shape[0]
        seen = np.concatenate([self.splits[k] for k in ("train", "val", "test")])
        if len(np.unique(seen)) != len(seen) or len(seen) != n:
            raise UsageError("splits must be disjoint and cover the dataset")

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.kind == CLASSIFICATION else 1

    def split_arrays(self, name: str):
        idx = self.splits[name]
        return self.X[idx], self.y[idx]

    def batch_stream(self, split: str, batch_size: int,
                     rng: np.random.Generator):
        """Uniform batches without replacement within each epoch."""
        X, y = self.split_arrays(split)
        n = X.shape[0]
        size = min(batch_size, n)
        while True:
            order = rng.permutation(n)
            for start in range(0, n - size + 1, size):
                take = order[start:start + size]
                yield X[take], y[take]


def _standardize(train_values: np.ndarray, all_values: np.ndarray):
    mean = train_values.mean(axis=0)
    sd = train_values.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    return (all_values - mean) / sd, (mean, sd)


def _make_splits(n: int, fractions, rng: np.random.Generator) -> dict:
    f_train, f_val, _ = fractions
    order = rng.permutation(n)
    n_train = int(round(f_train * n))
    n_val = int(round(f_val * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }


def build_task(X, y, kind: str, seed: int = 0, fractions=None,
               meta: dict | None = None) -> TaskDataset:
    """Assemble a TaskDataset from raw arrays: split, then normalize."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise UsageError(f"X must be 2-D, got shape {X.shape}")
    fractions = fractions or SPLIT_PRESETS["tabular"]
    rng = np.random.default_rng(seed)
    splits = _make_splits(X.shape[0], fractions, rng)
    train_idx = splits["train"]

    Xn, feature_stats = _standardize(X[train_idx], X)
    meta = dict(meta or {})
    if kind == CLASSIFICATION:
        y = np.asarray(y)
        if y.dtype.kind == "f":
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise UsageError("classification targets must be integral")
            y = y.astype(np.int64)
        y = y.astype(np.int64)
        labels = np.unique(y)
        mapping = {int(lab): i for i, lab in enumerate(labels)}
        y = np.array([mapping[int(v)] for v in y], dtype=np.int64)
        meta["label_mapping"] = mapping
        return TaskDataset(kind=kind, X=Xn, y=y, splits=splits,
                           n_classes=len(labels),
                           feature_stats=feature_stats, meta=meta)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yn, label_stats = _standardize(y[train_idx], y)
    return TaskDataset(kind=kind, X=Xn, y=yn, splits=splits,
                       feature_stats=feature_stats, label_stats=label_stats,
                       meta=meta)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def load_csv(path, target_column, kind: str, seed: int = 0,
             has_header: bool = True, split_preset: str = "tabular") -> TaskDataset:
    """Parse a rectangular numeric CSV into a split, normalized task.

    ``target_column`` is a header name (when has_header) or column index.
    Parse failures report the 1-based row number.
    """
    if split_preset not in SPLIT_PRESETS:
        raise UsageError(f"unknown split preset {split_preset!r}")
    rows = []
    header = None
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if has_header and header is None:
                header = [c.strip() for c in row]
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise UsageError(
                    f"row {row_no}: non-numeric cell ({exc})") from exc
            if len(rows) > 1 and len(rows[-1]) != len(rows[0]):
                raise UsageError(
                    f"row {row_no}: expected {len(rows[0])} cells, "
                    f"got {len(rows[-1])}")
    if not rows:
        raise UsageError("empty CSV file")
    data = np.asarray(rows, dtype=np.float64)

    if isinstance(target_column, str):
        if header is None:
            raise UsageError("target column given by name but file has no header")
        if target_column not in header:
            raise UsageError(f"target column {target_column!r} not in header")
        t_idx = header.index(target_column)
    else:
        t_idx = int(target_column)
        if not (0 <= t_idx < data.shape[1]):
            raise UsageError(f"target column index {t_idx} out of range")

    y = data[:, t_idx]
    X = np.delete(data, t_idx, axis=1)
    meta = {"source": str(path), "target_column": target_column}
    return build_task(X, y, kind, seed=seed,
                      fractions=SPLIT_PRESETS[split_preset], meta=meta)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

def synth_task(kind: str, n: int, seed: int = 0, *, classes: int = 2,
               dim: int = 2, separation: float = 4.0,
               noise: float = 0.1) -> TaskDataset:
    """Reproducible synthetic datasets.

    ``blobs``: unit-variance Gaussian clusters whose adjacent centers sit
    ``separation`` apart. ``linear-regression``: y = Xw + b + noise.
    """
    if n < 10:
        raise UsageError("synth_task: n must be >= 10")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        if dim < 2:
            raise UsageError("blobs: dim must be >= 2")
        if classes == 2:
            radius = separation / 2.0
        else:
            radius = separation / (2.0 * np.sin(np.pi / classes))
        angles = 2.0 * np.pi * np.arange(classes) / classes
        centers = np.zeros((classes, dim))
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
        y = rng.integers(0, classes, size=n)
        X = centers[y] + rng.normal(0.0, 1.0, size=(n, dim))
        return build_task(X, y, CLASSIFICATION, seed=seed,
                          meta={"generator": "blobs", "separation": separation})
    if kind == "linear-regression":
        w = rng.normal(0.0, 1.0, size=dim)
        b = float(rng.normal())
        X = rng.normal(0.0, 1.0, size=(n, dim))
        y = X @ w + b + noise * rng.normal(0.0, 1.0, size=n)
        return build_task(X, y, REGRESSION, seed=seed,
                          meta={"generator": "linear-regression",
                                "noise": noise})
    raise UsageError(f"unknown synthetic kind {kind!r}")
