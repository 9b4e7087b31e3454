"""First-order Taylor model around the pre-trained weights and its error diagnostic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from delta_lab import network as nw
from delta_lab.errors import ConfigError, DataError, DimensionError

HIST_BINS = 50


@dataclass(frozen=True, eq=False)
class LinearizedModel:
    spec: nw.NetworkSpec
    theta0: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        theta0 = nw.check_params(self.spec, self.theta0)
        tau = np.asarray(getattr(self.tau, "values", self.tau), dtype=np.float64)
        if tau.shape != theta0.shape:
            raise DimensionError(f"task vector: expected shape {theta0.shape}, got {tau.shape}")
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "tau", tau)


def linear_forward(m: LinearizedModel, x, scale: float = 1.0) -> np.ndarray:
    """``f(x; theta0) + scale * J(x) tau``."""
    if not np.isfinite(scale):
        raise ConfigError(f"scale must be finite, got {scale}")
    X, single = nw._check_inputs(m.spec, x)
    base, tangent = nw._jvp(m.spec, m.theta0, X, m.tau)
    out = base + scale * tangent
    return out[0] if single else out


def _stack(spec: nw.NetworkSpec, thetas: Sequence) -> np.ndarray:
    if len(thetas) < 2:
        raise ConfigError(f"need at least 2 parameter vectors, got {len(thetas)}")
    return np.stack([nw.check_params(spec, t) for t in thetas])


def linearization_error(spec: nw.NetworkSpec, thetas: Sequence, x) -> np.ndarray | float:
    """L1 gap between the mean of activations and the activation at the mean weights.

    Returns a float for a single input and one value per row for a batch.
    """
    stacked = _stack(spec, thetas)
    X, single = nw._check_inputs(spec, x)
    mean_act = np.mean([nw._forward(spec, t, X) for t in stacked], axis=0)
    at_mean = nw._forward(spec, stacked.mean(axis=0), X)
    err = np.abs(mean_act - at_mean).sum(axis=1)
    return float(err[0]) if single else err


@dataclass
class LinearizationProfile:
    values: np.ndarray
    mean: float
    quantiles: dict[str, float]
    bin_edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "n": int(self.values.size),
            "mean": self.mean,
            "quantiles": self.quantiles,
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
        }


def summarize(values: np.ndarray, bins: int = HIST_BINS) -> LinearizationProfile:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("empty dataset")
    q = np.quantile(values, [0.05, 0.25, 0.5, 0.75, 0.95])
    top = float(values.max())
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return LinearizationProfile(
        values=values,
        mean=float(values.mean()),
        quantiles=dict(zip(["q05", "q25", "q50", "q75", "q95"], map(float, q))),
        bin_edges=edges,
        counts=counts,
    )


def linearization_error_profile(spec: nw.NetworkSpec, thetas: Sequence, dataset) -> LinearizationProfile:
    """Per-sample linearization error over ``dataset`` (inputs array, or anything with ``.inputs``)."""
    X = np.asarray(getattr(dataset, "inputs", dataset), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("empty dataset")
    return summarize(linearization_error(spec, thetas, X))
