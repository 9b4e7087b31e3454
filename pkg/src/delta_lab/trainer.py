"""Joint teacher/student fine-tuning and the baseline regimes.

The teacher is the linearized network ``f(x; theta0) + J(x) tau_T`` trained on
cross-entropy plus a curvature penalty. The student is the ordinary network at
``theta0 + tau_S`` trained on cross-entropy, the same penalty, and a feature
matching term against the teacher evaluated at a random point along the
segment ``theta0 -> theta0 + tau_T``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from delta_lab import network as nw
from delta_lab.arithmetic import TEACHER_SUFFIX, TaskVector
from delta_lab.curvature import EkfacState, drift_loss_and_grad
from delta_lab.errors import ConfigError, DataError, NumericError
from delta_lab.optim import AdamW

METHODS = ("delta", "delta_no_teacher", "delta_no_reg", "nonlinear_ft", "linear_ft")
APKD_MODES = ("sampled", "fixed_1")
TRACE_FIELDS = ("step", "task_loss_T", "drift_T", "task_loss_S", "drift_S", "kd", "alpha")

_TEACHER_METHODS = {"delta", "delta_no_reg", "linear_ft"}
_STUDENT_METHODS = {"delta", "delta_no_teacher", "delta_no_reg", "nonlinear_ft"}


@dataclass(frozen=True)
class TrainConfig:
    method: str = "delta"
    steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta_T: float = 10.0
    beta_S: float = 10.0
    gamma: float = 1.0
    apkd_mode: str = "sampled"
    alpha_range: tuple[float, float] = (0.5, 1.0)
    seed: int = 0
    student_ce_at_alpha: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.apkd_mode not in APKD_MODES:
            raise ConfigError(f"apkd_mode must be one of {APKD_MODES}, got {self.apkd_mode!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if min(self.weight_decay, self.beta_T, self.beta_S, self.gamma) < 0:
            raise ConfigError("weight_decay, beta_T, beta_S and gamma must be >= 0")
        lo, hi = self.alpha_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"alpha_range must satisfy 0 < lo <= hi <= 1, got {self.alpha_range}")
        object.__setattr__(self, "alpha_range", (float(lo), float(hi)))
        # method-implied overrides
        if self.method == "delta_no_teacher":
            object.__setattr__(self, "gamma", 0.0)
        elif self.method == "delta_no_reg":
            object.__setattr__(self, "beta_T", 0.0)
            object.__setattr__(self, "beta_S", 0.0)
        elif self.method in ("nonlinear_ft", "linear_ft"):
            for name in ("beta_T", "beta_S", "gamma"):
                object.__setattr__(self, name, 0.0)

    @property
    def trains_teacher(self) -> bool:
        return self.method in _TEACHER_METHODS

    @property
    def trains_student(self) -> bool:
        return self.method in _STUDENT_METHODS

    @property
    def needs_curvature(self) -> bool:
        return (self.trains_teacher and self.beta_T > 0) or (self.trains_student and self.beta_S > 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_range"] = list(self.alpha_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "alpha_range" in d:
            d["alpha_range"] = tuple(d["alpha_range"])
        return cls(**d)


@dataclass
class TrainOutcome:
    tau_student: TaskVector
    tau_teacher: TaskVector | None
    trace: np.ndarray  # (steps, len(TRACE_FIELDS)), NaN where a component is absent
    wall_clock_ms: float = field(default=0.0, compare=False)

    def write_trace(self, path: str | Path) -> None:
        write_trace(self.trace, path)


def write_trace(trace: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([int(row[0])] + ["" if np.isnan(v) else f"{v:.6g}" for v in row[1:]])


def _batch(spec: nw.NetworkSpec, batch) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(batch, tuple):
        X, y = batch
    else:
        X, y = batch, None
    X, _ = nw._check_inputs(spec, np.atleast_2d(X))
    if X.shape[0] == 0:
        raise DataError("empty batch")
    return X, y


def _tau(theta0: np.ndarray, tau) -> np.ndarray:
    tau = np.asarray(getattr(tau, "values", tau), dtype=np.float64)
    if tau.shape != theta0.shape:
        raise DataError(f"task vector: expected shape {theta0.shape}, got {tau.shape}")
    return tau


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")


# ----------------------------------------------------------------------------
# loss terms (unchecked kernels return components for the trace)


def _ce_linearized(spec, theta0, tau_T, X, labels, head):
    """Cross-entropy of the linearized model and its gradient w.r.t. tau_T."""
    f0, tangent = nw._jvp(spec, theta0, X, tau_T)
    loss, dlogits = nw.softmax_xent(nw.apply_head(head, f0 + tangent), labels)
    # d/dtau of J tau is J^T: one reverse pass at theta0
    return loss, nw._vjp(spec, theta0, X, dlogits @ head.weights.T), f0, tangent


def _ce_nonlinear(spec, theta, X, labels, head):
    trace = nw._trace(spec, theta, X)
    loss, dlogits = nw.softmax_xent(nw.apply_head(head, trace[2]), labels)
    return loss, nw._vjp(spec, theta, X, dlogits @ head.weights.T, trace)


def _apkd(spec, theta0, tau_S, X, alpha, target):
    """Feature-matching loss at ``theta0 + alpha tau_S`` against a constant target."""
    theta = theta0 + alpha * tau_S
    trace = nw._trace(spec, theta, X)
    r = trace[2] - target
    B = X.shape[0]
    loss = float((r * r).sum(axis=1).mean())
    g = nw._vjp(spec, theta, X, 2.0 * r / B, trace)
    return loss, alpha * g


def apkd_loss(spec: nw.NetworkSpec, theta0, tau_S, tau_T, batch, alpha: float) -> tuple[float, np.ndarray]:
    """Along-path distillation loss and its gradient w.r.t. ``tau_S``.

    The teacher features ``f(x; theta0) + alpha J(x) tau_T`` are a constant:
    no gradient reaches ``tau_T``.
    """
    _check_alpha(alpha)
    theta0 = nw.check_params(spec, theta0)
    tau_S, tau_T = _tau(theta0, tau_S), _tau(theta0, tau_T)
    X, _ = _batch(spec, batch)
    f0, tangent = nw._jvp(spec, theta0, X, tau_T)
    return _apkd(spec, theta0, tau_S, X, alpha, f0 + alpha * tangent)


def teacher_loss(spec: nw.NetworkSpec, theta0, tau_T, batch, head: nw.Head, ekfac: EkfacState | None, beta_T: float):
    """Cross-entropy of the linearized model plus ``beta_T`` times the drift penalty."""
    theta0 = nw.check_params(spec, theta0)
    tau_T = _tau(theta0, tau_T)
    X, y = _batch(spec, batch)
    labels = nw.check_labels(y, head.n_classes, X.shape[0])
    loss, g, _, _ = _ce_linearized(spec, theta0, tau_T, X, labels, head)
    if beta_T > 0:
        if ekfac is None:
            raise ConfigError("beta_T > 0 needs a curvature state")
        drift, dg = drift_loss_and_grad(ekfac, tau_T)
        loss += beta_T * drift
        g = g + beta_T * dg
    return loss, g


def student_loss(
    spec: nw.NetworkSpec,
    theta0,
    tau_S,
    tau_T,
    batch,
    head: nw.Head,
    ekfac: EkfacState | None,
    beta_S: float,
    gamma: float,
    alpha: float,
    ce_at_alpha: bool = False,
):
    """Cross-entropy at ``theta0 + tau_S`` + ``beta_S`` drift + ``gamma`` along-path distillation."""
    _check_alpha(alpha)
    theta0 = nw.check_params(spec, theta0)
    tau_S, tau_T = _tau(theta0, tau_S), _tau(theta0, tau_T)
    X, y = _batch(spec, batch)
    labels = nw.check_labels(y, head.n_classes, X.shape[0])
    scale = alpha if ce_at_alpha else 1.0
    loss, g = _ce_nonlinear(spec, theta0 + scale * tau_S, X, labels, head)
    g = scale * g
    if beta_S > 0:
        if ekfac is None:
            raise ConfigError("beta_S > 0 needs a curvature state")
        drift, dg = drift_loss_and_grad(ekfac, tau_S)
        loss += beta_S * drift
        g = g + beta_S * dg
    if gamma > 0:
        f0, tangent = nw._jvp(spec, theta0, X, tau_T)
        kd, dk = _apkd(spec, theta0, tau_S, X, alpha, f0 + alpha * tangent)
        loss += gamma * kd
        g = g + gamma * dk
    return loss, g


# ----------------------------------------------------------------------------


def train(
    spec: nw.NetworkSpec,
    config: TrainConfig,
    task,
    theta0: nw.ParameterVector,
    head: nw.Head,
    ekfac: EkfacState | None = None,
) -> TrainOutcome:
    """Run the joint optimisation loop on ``task``'s training split.

    Each step draws one batch shared by teacher and student and one scale
    ``alpha`` (1 under ``fixed_1``). Both updates use the parameters from
    before the step. Batches and scales come from independent seeded streams,
    so switching the distillation off leaves the batch sequence unchanged.
    """
    start = time.perf_counter()
    base = nw.check_params(spec, theta0)
    if not isinstance(theta0, nw.ParameterVector):
        theta0 = nw.ParameterVector.of(spec, base)
    if config.needs_curvature:
        if ekfac is None:
            raise ConfigError(f"method {config.method} with beta > 0 needs a curvature state")
        if ekfac.spec_hash != spec.hash:
            raise DataError("curvature state was computed for a different network spec")
    X_all, y_all = task.train() if hasattr(task, "train") else task
    X_all = np.asarray(X_all, dtype=np.float64)
    y_all = nw.check_labels(y_all, head.n_classes, X_all.shape[0])
    n = X_all.shape[0]
    if n == 0:
        raise DataError("task has no training samples")
    bsz = min(config.batch_size, n)

    batch_rng, alpha_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    P = spec.param_count
    tau_T = np.zeros(P)
    tau_S = np.zeros(P)
    opt_T = AdamW(P, config.learning_rate, weight_decay=config.weight_decay)
    opt_S = AdamW(P, config.learning_rate, weight_decay=config.weight_decay)
    lo, hi = config.alpha_range
    trace = np.full((config.steps, len(TRACE_FIELDS)), np.nan)

    for step in range(config.steps):
        idx = batch_rng.choice(n, size=bsz, replace=False)
        X, y = X_all[idx], y_all[idx]
        alpha = alpha_rng.uniform(lo, hi)
        if config.apkd_mode == "fixed_1":
            alpha = 1.0
        row = trace[step]
        row[0] = step
        row[6] = alpha

        grad_T = grad_S = None
        teacher_feats = None
        if config.trains_teacher:
            ce_T, grad_T, f0, tangent = _ce_linearized(spec, base, tau_T, X, y, head)
            row[1] = ce_T
            teacher_feats = f0 + alpha * tangent
            if config.beta_T > 0:
                drift_T, dg = drift_loss_and_grad(ekfac, tau_T)
                row[2] = drift_T
                grad_T = grad_T + config.beta_T * dg

        if config.trains_student:
            scale = alpha if config.student_ce_at_alpha else 1.0
            ce_S, grad_S = _ce_nonlinear(spec, base + scale * tau_S, X, y, head)
            if scale != 1.0:
                grad_S = scale * grad_S
            row[3] = ce_S
            if config.beta_S > 0:
                drift_S, dg = drift_loss_and_grad(ekfac, tau_S)
                row[4] = drift_S
                grad_S = grad_S + config.beta_S * dg
            if config.gamma > 0:
                kd, dk = _apkd(spec, base, tau_S, X, alpha, teacher_feats)
                row[5] = kd
                grad_S = grad_S + config.gamma * dk

        if not np.all(np.isfinite(row[~np.isnan(row)])) or any(
            g is not None and not np.all(np.isfinite(g)) for g in (grad_T, grad_S)
        ):
            parts = {k: v for k, v in zip(TRACE_FIELDS[1:], row[1:]) if not np.isnan(v)}
            raise NumericError(f"non-finite loss or gradient at step {step}: {parts}")
        if grad_T is not None:
            opt_T.step(tau_T, grad_T)
        if grad_S is not None:
            opt_S.step(tau_S, grad_S)

    def vector(values, method):
        return TaskVector(values.copy(), getattr(task, "task_id", "task"), method, theta0.lineage, spec.hash)

    if config.method == "linear_ft":
        student = teacher = vector(tau_T, "linear_ft")
    else:
        teacher = vector(tau_T, config.method + TEACHER_SUFFIX) if config.trains_teacher else None
        student = vector(tau_S, config.method)
    return TrainOutcome(student, teacher, trace, (time.perf_counter() - start) * 1e3)


def pretrain(spec: nw.NetworkSpec, reference, head: nw.Head, steps: int = 500, learning_rate: float = 1e-2,
             batch_size: int = 128, seed: int = 0) -> np.ndarray:
    """Surrogate pre-training: fit a seeded uniform init to the reference set's labels."""
    init = nw.ParameterVector.of(spec, nw.init_params(spec, seed))
    config = TrainConfig(method="nonlinear_ft", steps=steps, learning_rate=learning_rate,
                         batch_size=batch_size, seed=seed)
    out = train(spec, config, reference, init, head)
    return init.values + out.tau_student.values
