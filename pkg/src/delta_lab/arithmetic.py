"""Task-vector algebra: addition, negation and scaling sweeps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from delta_lab import container
from delta_lab.errors import ConfigError, DataError, DimensionError, HashMismatchError
from delta_lab.network import ParameterVector

ADDITION_GRID = tuple(round(0.1 * k, 10) for k in range(1, 11))
NEGATION_GRID = tuple(round(0.1 * k, 10) for k in range(1, 21))
TEACHER_SUFFIX = ".teacher"


@dataclass(frozen=True, eq=False)
class TaskVector:
    values: np.ndarray
    task_id: str
    method: str
    base_hash: str
    spec_hash: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError(f"task vector must be flat, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError(f"task vector {self.task_id!r} has non-finite entries")
        object.__setattr__(self, "values", values)

    @classmethod
    def between(cls, theta0: ParameterVector, theta: np.ndarray, task_id: str, method: str) -> TaskVector:
        return cls(np.asarray(theta) - theta0.values, task_id, method, theta0.lineage, theta0.spec_hash)

    def scaled(self, alpha: float) -> TaskVector:
        return TaskVector(alpha * self.values, self.task_id, self.method, self.base_hash, self.spec_hash)


def evaluates_linearized(tau: TaskVector) -> bool:
    """Vectors produced under the linearized model are evaluated through it."""
    return tau.method == "linear_ft" or tau.method.endswith(TEACHER_SUFFIX)


def _check_compatible(theta0: ParameterVector, tau: TaskVector) -> None:
    if tau.spec_hash != theta0.spec_hash:
        raise HashMismatchError(f"task vector {tau.task_id!r} was built for a different network spec")
    if tau.base_hash != theta0.lineage:
        raise HashMismatchError(f"task vector {tau.task_id!r} was fine-tuned from a different base model")
    if tau.values.shape != theta0.values.shape:
        raise DimensionError(
            f"task vector {tau.task_id!r}: expected shape {theta0.values.shape}, got {tau.values.shape}"
        )


def compose(theta0: ParameterVector, terms: Sequence[tuple[float, TaskVector]]) -> ParameterVector:
    """``theta0 + sum_t alpha_t tau_t`` accumulated in list order with Neumaier summation."""
    for _, tau in terms:
        _check_compatible(theta0, tau)
    total = theta0.values.copy()
    comp = np.zeros_like(total)
    for alpha, tau in terms:
        y = float(alpha) * tau.values
        s = total + y
        comp += np.where(np.abs(total) >= np.abs(y), (total - s) + y, (y - s) + total)
        total = s
    return ParameterVector(total + comp, theta0.spec_hash, theta0.lineage)


def negate(theta0: ParameterVector, tau: TaskVector, alpha: float) -> ParameterVector:
    return compose(theta0, [(-alpha, tau)])


def merge_vectors(taus: Sequence[TaskVector], task_id: str = "merged") -> TaskVector:
    """Plain sum of compatible task vectors as a single vector."""
    if not taus:
        raise ConfigError("nothing to merge")
    first = taus[0]
    for t in taus[1:]:
        if (t.base_hash, t.spec_hash) != (first.base_hash, first.spec_hash):
            raise HashMismatchError(f"task vector {t.task_id!r} does not share a base with {first.task_id!r}")
    values = np.sum([t.values for t in taus], axis=0)
    methods = sorted({t.method for t in taus})
    return TaskVector(values, task_id, "+".join(methods), first.base_hash, first.spec_hash)


@dataclass
class SweepResult:
    alphas: list[float]
    values: list[float]

    @property
    def argmax(self) -> float:
        # first maximum, i.e. the smallest alpha among ties
        return self.alphas[int(np.argmax(self.values))]

    @property
    def argmin(self) -> float:
        return self.alphas[int(np.argmin(self.values))]

    def to_rows(self) -> list[tuple[float, float]]:
        return list(zip(self.alphas, self.values))


def alpha_sweep(
    theta0: ParameterVector,
    tau: TaskVector,
    grid: Sequence[float],
    evaluator: Callable[[ParameterVector], float],
    workers: int = 1,
) -> SweepResult:
    """Evaluate ``evaluator(theta0 + alpha * tau)`` on every grid point, in grid order."""
    grid = [float(a) for a in grid]
    if not grid:
        raise ConfigError("alpha grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("alpha grid must be strictly increasing")
    _check_compatible(theta0, tau)

    def point(alpha: float) -> float:
        return float(evaluator(compose(theta0, [(alpha, tau)])))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            values = list(pool.map(point, grid))
    else:
        values = [point(a) for a in grid]
    return SweepResult(grid, values)


def save_task_vector(tau: TaskVector, path: str | Path) -> str:
    meta = {
        "task_id": tau.task_id,
        "method": tau.method,
        "base_hash": tau.base_hash,
        "spec_hash": tau.spec_hash,
        "size": int(tau.values.size),
    }
    return container.write(path, "task_vector", meta, {"values": tau.values.astype("<f4")})


def load_task_vector(path: str | Path) -> TaskVector:
    header, arrays = container.read(path, "task_vector")
    m = header["meta"]
    return TaskVector(arrays["values"].astype(np.float64), m["task_id"], m["method"], m["base_hash"], m["spec_hash"])


def round_f32(values: np.ndarray) -> np.ndarray:
    """Round to the values a 32-bit file can hold."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)
