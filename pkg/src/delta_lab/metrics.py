"""Evaluation quantities: accuracy, disentanglement error, edit distance.

Models are evaluated either as ordinary networks at ``theta`` or, for vectors
produced by linear fine-tuning, as the linearized model around ``theta0``
(pass ``linearized=True`` together with ``theta0``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from delta_lab import network as nw
from delta_lab.errors import ConfigError, DataError, DimensionError

HEATMAP_GRID = tuple(0.25 * k for k in range(7))


def _xy(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "test"):
        X, y = dataset.test()
    else:
        X, y = dataset
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    if X.shape[0] == 0:
        raise DataError("empty dataset")
    return X, y


def _values(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=np.float64)


def features(spec: nw.NetworkSpec, theta, X: np.ndarray, theta0=None, linearized: bool = False) -> np.ndarray:
    theta = nw.check_params(spec, theta)
    X, _ = nw._check_inputs(spec, X)
    if not linearized:
        return nw._forward(spec, theta, X)
    if theta0 is None:
        raise ConfigError("linearized evaluation needs theta0")
    theta0 = nw.check_params(spec, theta0)
    f0, tangent = nw._jvp(spec, theta0, X, theta - theta0)
    return f0 + tangent


def predict(spec, theta, head, X, theta0=None, linearized=False) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(nw.apply_head(head, features(spec, theta, X, theta0, linearized)), axis=1)


def accuracy(spec: nw.NetworkSpec, theta, head: nw.Head, dataset, theta0=None, linearized: bool = False) -> float:
    """Fraction of correct argmax predictions. ``dataset`` is a TaskDataset (test split) or ``(X, y)``."""
    X, y = _xy(dataset)
    y = nw.check_labels(y, head.n_classes, X.shape[0])
    return float(np.mean(predict(spec, theta, head, X, theta0, linearized) == y))


def disentanglement_error(
    spec: nw.NetworkSpec,
    theta0,
    head: nw.Head,
    tau1,
    tau2,
    alpha1: float,
    alpha2: float,
    task1,
    task2,
    linearized: bool = False,
) -> float:
    """Prediction-mismatch rate between each single-task edit and the two-task edit, summed over both tasks."""
    theta0 = nw.check_params(spec, theta0)
    t1, t2 = _values(tau1), _values(tau2)
    if t1.shape != theta0.shape or t2.shape != theta0.shape:
        raise DimensionError(f"task vectors must have shape {theta0.shape}")
    merged = theta0 + alpha1 * t1 + alpha2 * t2
    total = 0.0
    for alpha, tau, task in ((alpha1, t1, task1), (alpha2, t2, task2)):
        X, _ = _xy(task)
        single = predict(spec, theta0 + alpha * tau, head, X, theta0, linearized)
        both = predict(spec, merged, head, X, theta0, linearized)
        total += float(np.mean(single != both))
    return total


@dataclass
class Heatmap:
    grid1: list[float]
    grid2: list[float]
    values: np.ndarray  # (len(grid1), len(grid2)), row-major over grid1

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("alpha1\\alpha2," + ",".join(f"{a:.6g}" for a in self.grid2) + "\n")
            for a, row in zip(self.grid1, self.values):
                fh.write(f"{a:.6g}," + ",".join(f"{v:.6g}" for v in row) + "\n")


def disentanglement_heatmap(
    spec: nw.NetworkSpec,
    theta0,
    head: nw.Head,
    tau1,
    tau2,
    task1,
    task2,
    grid1: Sequence[float] = HEATMAP_GRID,
    grid2: Sequence[float] = HEATMAP_GRID,
    linearized: bool = False,
) -> Heatmap:
    grid1, grid2 = [float(a) for a in grid1], [float(a) for a in grid2]
    if not grid1 or not grid2:
        raise ConfigError("heatmap grid is empty")
    theta0 = nw.check_params(spec, theta0)
    t1, t2 = _values(tau1), _values(tau2)
    X1, _ = _xy(task1)
    X2, _ = _xy(task2)

    def preds(theta, X):
        return predict(spec, theta, head, X, theta0, linearized)

    # single-task predictions depend on one coefficient only
    single1 = {a: preds(theta0 + a * t1, X1) for a in grid1}
    single2 = {a: preds(theta0 + a * t2, X2) for a in grid2}
    values = np.zeros((len(grid1), len(grid2)))
    for i, a1 in enumerate(grid1):
        for j, a2 in enumerate(grid2):
            merged = theta0 + a1 * t1 + a2 * t2
            values[i, j] = float(np.mean(single1[a1] != preds(merged, X1))) + float(
                np.mean(single2[a2] != preds(merged, X2))
            )
    return Heatmap(grid1, grid2, values)


def edit_distance(spec: nw.NetworkSpec, theta0, theta_t, x, linearized: bool = False):
    """Mean squared feature change ``(1/d) ||f(x; theta_t) - f(x; theta0)||^2`` per sample."""
    theta0 = nw.check_params(spec, theta0)
    X, single = nw._check_inputs(spec, x)
    diff = features(spec, theta_t, X, theta0, linearized) - nw._forward(spec, theta0, X)
    out = (diff * diff).mean(axis=1)
    return float(out[0]) if single else out


def _summary(values: np.ndarray | None) -> dict | None:
    if values is None:
        return None
    q25, q50, q75 = np.quantile(values, [0.25, 0.5, 0.75])
    return {"n": int(values.size), "median": float(q50), "q25": float(q25), "q75": float(q75), "iqr": float(q75 - q25)}


@dataclass
class LocalizationCell:
    task_id: str
    in_domain: np.ndarray
    out_of_domain: np.ndarray | None  # None when there are no other tasks

    def summary(self) -> dict:
        return {"task_id": self.task_id, "in_domain": _summary(self.in_domain), "out_of_domain": _summary(self.out_of_domain)}


def localization_profile(spec: nw.NetworkSpec, theta0, thetas: Sequence, tasks: Sequence, linearized: bool = False) -> list[LocalizationCell]:
    """In-domain vs out-of-domain edit distances for each fine-tuned model on its own task."""
    if len(thetas) != len(tasks):
        raise ConfigError("need exactly one parameter vector per task")
    inputs = [_xy(t)[0] for t in tasks]
    cells = []
    for i, (theta, task) in enumerate(zip(thetas, tasks)):
        others = [X for j, X in enumerate(inputs) if j != i]
        ood = edit_distance(spec, theta0, theta, np.concatenate(others), linearized=linearized) if others else None
        cells.append(LocalizationCell(getattr(task, "task_id", f"task_{i}"), edit_distance(spec, theta0, theta, inputs[i], linearized=linearized), ood))
    return cells


@dataclass
class EvalReport:
    method: str
    alpha: float
    task_ids: list[str]
    absolute: list[float]
    individual: list[float] | None = None
    normalized: list[float | None] = field(default_factory=list)

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.absolute):
            raise DataError("absolute accuracy outside [0, 1]")
        if self.individual is not None and not self.normalized:
            self.normalized = [100.0 * a / i if i > 0 else None for a, i in zip(self.absolute, self.individual)]

    @property
    def mean_absolute(self) -> float:
        return float(np.mean(self.absolute))

    @property
    def mean_normalized(self) -> float | None:
        vals = [v for v in self.normalized if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "task_ids": self.task_ids,
            "absolute": self.absolute,
            "individual": self.individual,
            "normalized": self.normalized,
            "mean_absolute": self.mean_absolute,
            "mean_normalized": self.mean_normalized,
        }

    def to_text(self) -> str:
        lines = [f"method={self.method} alpha={self.alpha:.6g}", f"{'task':<12}{'abs':>10}{'norm%':>10}"]
        norm = self.normalized or [None] * len(self.absolute)
        for tid, a, n in zip(self.task_ids, self.absolute, norm):
            lines.append(f"{tid:<12}{a:>10.6g}{(f'{n:.6g}' if n is not None else '-'):>10}")
        mn = self.mean_normalized
        lines.append(f"{'mean':<12}{self.mean_absolute:>10.6g}{(f'{mn:.6g}' if mn is not None else '-'):>10}")
        return "\n".join(lines)
