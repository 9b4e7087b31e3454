"""Small feedforward networks evaluated over flat parameter vectors.

Parameters live in a single float64 vector. Layers are stored in order; within
a layer the ``(d_out, d_in)`` weight matrix comes first in row-major order,
followed by the bias. Pre-activations are ``s = a @ W.T + b``; hidden layers
apply the activation, the last layer is left linear and produces the feature
vector that the frozen head consumes.

Every routine accepts a single input of shape ``(D,)`` or a batch ``(B, D)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from delta_lab.container import canonical_json, hash_array, sha256_hex
from delta_lab.errors import BudgetError, ConfigError, DataError, DimensionError

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("cross_entropy", "mse_to_target")
JACOBIAN_BUDGET = 10**6


@dataclass(frozen=True)
class NetworkSpec:
    layer_dims: tuple[int, ...]
    activation: str = "tanh"
    bias: bool = True

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigError(f"layer_dims needs at least 2 entries, got {list(dims)}")
        if any(d < 1 for d in dims):
            raise ConfigError(f"layer dims must be positive, got {list(dims)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def param_count(self) -> int:
        return _layout(self)[-1]

    @property
    def hash(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()))

    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(d_out, d_in)`` per layer."""
        return [(o, i) for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:])]

    def to_dict(self) -> dict:
        return {"layer_dims": list(self.layer_dims), "activation": self.activation, "bias": self.bias}

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(tuple(d["layer_dims"]), d["activation"], bool(d["bias"]))


@functools.lru_cache(maxsize=None)
def _layout(spec: NetworkSpec) -> tuple:
    # ((w_off, b_off, d_out, d_in), ...), total
    entries = []
    off = 0
    for d_out, d_in in spec.layer_shapes():
        w_off = off
        off += d_out * d_in
        b_off = off
        if spec.bias:
            off += d_out
        entries.append((w_off, b_off, d_out, d_in))
    return tuple(entries), off


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat parameters tagged with the spec they belong to.

    ``base_hash`` records lineage: a pre-trained vector is its own base, and
    vectors produced by task arithmetic inherit the base they were edited from.
    """

    values: np.ndarray
    spec_hash: str
    base_hash: str | None = None

    @classmethod
    def of(cls, spec: NetworkSpec, values, base_hash: str | None = None) -> ParameterVector:
        return cls(check_params(spec, values), spec.hash, base_hash)

    @property
    def content_hash(self) -> str:
        return hash_array(self.values)

    @property
    def lineage(self) -> str:
        return self.base_hash or self.content_hash

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class Head:
    """Frozen linear classifier on top of the feature vector: ``z @ weights + bias``."""

    weights: np.ndarray  # (d, C)
    bias: np.ndarray  # (C,)
    frozen: bool = True

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def random(cls, d: int, n_classes: int, seed: int, scale: float = 1.0) -> Head:
        """Gaussian weights with std ``scale / sqrt(d)``; ``scale`` acts as a logit temperature."""
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((d, n_classes)) / np.sqrt(d), np.zeros(n_classes))


def check_params(spec: NetworkSpec, theta) -> np.ndarray:
    if isinstance(theta, ParameterVector):
        if theta.spec_hash != spec.hash:
            raise DataError("parameter vector belongs to a different network spec")
        theta = theta.values
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.shape[0] != spec.param_count:
        raise DimensionError(
            f"parameter vector: expected shape ({spec.param_count},), got {theta.shape}"
        )
    if not np.all(np.isfinite(theta)):
        raise DataError("parameter vector has non-finite entries")
    return theta


def _check_inputs(spec: NetworkSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError(f"input: expected last dim {spec.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("input has non-finite entries")
    return X, single


def unflatten(spec: NetworkSpec, theta) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Per-layer ``(W, b)`` views into ``theta`` (``b`` is None without bias)."""
    theta = np.asarray(theta if not isinstance(theta, ParameterVector) else theta.values)
    entries, _ = _layout(spec)
    out = []
    for w_off, b_off, d_out, d_in in entries:
        W = theta[w_off : w_off + d_out * d_in].reshape(d_out, d_in)
        b = theta[b_off : b_off + d_out] if spec.bias else None
        out.append((W, b))
    return out


def flatten(spec: NetworkSpec, layers: Sequence[tuple[np.ndarray, np.ndarray | None]]) -> np.ndarray:
    parts = []
    for (W, b), (d_out, d_in) in zip(layers, spec.layer_shapes()):
        if W.shape != (d_out, d_in):
            raise DimensionError(f"layer weight: expected {(d_out, d_in)}, got {W.shape}")
        parts.append(np.asarray(W, dtype=np.float64).reshape(-1))
        if spec.bias:
            parts.append(np.asarray(b, dtype=np.float64).reshape(-1))
    return np.concatenate(parts)


def init_params(spec: NetworkSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for d_out, d_in in spec.layer_shapes():
        bound = 1.0 / np.sqrt(d_in)
        W = rng.uniform(-bound, bound, size=(d_out, d_in))
        b = rng.uniform(-bound, bound, size=d_out) if spec.bias else None
        layers.append((W, b))
    return flatten(spec, layers)


def _act(name: str, s: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(s)
    if name == "relu":
        return np.maximum(s, 0.0)
    return s


def _act_deriv(name: str, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        # subgradient 0 at the kink, shared by forward and reverse mode
        return (s > 0.0).astype(np.float64)
    return np.ones_like(s)


# ----------------------------------------------------------------------------
# unchecked batched kernels, used directly by the training loop


def _trace(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray):
    """Forward pass keeping layer inputs and pre-activations."""
    inputs, pres = [], []
    a = X
    layers = unflatten(spec, theta)
    last = len(layers) - 1
    for l, (W, b) in enumerate(layers):
        inputs.append(a)
        s = a @ W.T
        if b is not None:
            s = s + b
        pres.append(s)
        a = s if l == last else _act(spec.activation, s)
    return inputs, pres, a


def _forward(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _trace(spec, theta, X)[2]


def _jvp(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, v: np.ndarray):
    """Forward-mode pass. Returns ``(f(X), J(X) v)``."""
    a = X
    da = np.zeros_like(X)
    layers = unflatten(spec, theta)
    dlayers = unflatten(spec, v)
    last = len(layers) - 1
    for l, ((W, b), (dW, db)) in enumerate(zip(layers, dlayers)):
        s = a @ W.T
        ds = a @ dW.T + da @ W.T
        if b is not None:
            s = s + b
            ds = ds + db
        if l == last:
            a, da = s, ds
        else:
            a = _act(spec.activation, s)
            da = _act_deriv(spec.activation, s, a) * ds
    return a, da


def _vjp(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, cot: np.ndarray, trace=None) -> np.ndarray:
    """Reverse-mode pass. Returns ``sum_i J(x_i)^T cot_i`` as a flat vector."""
    inputs, pres, _ = trace if trace is not None else _trace(spec, theta, X)
    layers = unflatten(spec, theta)
    grads: list = [None] * len(layers)
    g = cot
    for l in range(len(layers) - 1, -1, -1):
        W, b = layers[l]
        gW = g.T @ inputs[l]
        gb = g.sum(axis=0) if b is not None else None
        grads[l] = (gW, gb)
        if l > 0:
            s = pres[l - 1]
            g = (g @ W) * _act_deriv(spec.activation, s, inputs[l])
    return flatten(spec, grads)


def _backward_signals(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, trace=None) -> list[np.ndarray]:
    """``g[l][k, i] = d f_k(x_i) / d s_l(x_i)``, one exact reverse pass per feature k.

    Returns one ``(d, B, d_out_l)`` array per layer.
    """
    inputs, pres, _ = trace if trace is not None else _trace(spec, theta, X)
    layers = unflatten(spec, theta)
    d = spec.feature_dim
    B = X.shape[0]
    g = np.broadcast_to(np.eye(d)[:, None, :], (d, B, d)).copy()
    out: list = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        out[l] = g
        if l > 0:
            W = layers[l][0]
            g = (g @ W) * _act_deriv(spec.activation, pres[l - 1], inputs[l])
    return out


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    loss = -logp[np.arange(B), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    return float(loss), dlogits / B


def check_labels(labels, n_classes: int, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels: expected shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError("labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label out of range [0, {n_classes})")
    return labels.astype(np.int64)


# ----------------------------------------------------------------------------
# public, validated surface


def forward(spec: NetworkSpec, theta, x) -> np.ndarray:
    """Feature vector(s) ``f(x; theta)``."""
    theta = check_params(spec, theta)
    X, single = _check_inputs(spec, x)
    out = _forward(spec, theta, X)
    return out[0] if single else out


def apply_head(head: Head, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    d = head.weights.shape[0]
    if z.shape[-1] != d:
        raise DimensionError(f"features: expected last dim {d}, got shape {z.shape}")
    return z @ head.weights + head.bias


def jvp(spec: NetworkSpec, theta0, x, v) -> np.ndarray:
    """Exact ``J_theta f(x; theta0) v`` by forward-mode propagation."""
    theta0 = check_params(spec, theta0)
    v = np.asarray(v.values if isinstance(v, ParameterVector) else v, dtype=np.float64)
    if v.shape != theta0.shape:
        raise DimensionError(f"direction: expected shape {theta0.shape}, got {v.shape}")
    X, single = _check_inputs(spec, x)
    out = _jvp(spec, theta0, X, v)[1]
    return out[0] if single else out


def vjp(spec: NetworkSpec, theta, x, cotangent) -> np.ndarray:
    """``sum_i J(x_i)^T c_i`` for features cotangents ``c``."""
    theta = check_params(spec, theta)
    X, single = _check_inputs(spec, x)
    c = np.asarray(cotangent, dtype=np.float64).reshape(X.shape[0], spec.feature_dim)
    return _vjp(spec, theta, X, c)


def loss_and_grad(spec: NetworkSpec, theta, batch, loss_kind: str = "cross_entropy", head: Head | None = None):
    """Mean-over-batch loss and its gradient w.r.t. theta.

    ``batch`` is ``(X, y)``: integer labels for ``cross_entropy`` (requires a
    head), target feature vectors for ``mse_to_target`` where the per-sample
    loss is ``||f(x) - y||^2``.
    """
    if loss_kind not in LOSSES:
        raise ConfigError(f"loss_kind must be one of {LOSSES}, got {loss_kind!r}")
    theta = check_params(spec, theta)
    X, y = batch
    X, _ = _check_inputs(spec, np.atleast_2d(X))
    B = X.shape[0]
    if B == 0:
        raise DataError("empty batch")
    trace = _trace(spec, theta, X)
    z = trace[2]
    if loss_kind == "cross_entropy":
        if head is None:
            raise ConfigError("cross_entropy loss needs a head")
        labels = check_labels(np.atleast_1d(y), head.n_classes, B)
        loss, dlogits = softmax_xent(apply_head(head, z), labels)
        cot = dlogits @ head.weights.T
    else:
        target = np.asarray(y, dtype=np.float64).reshape(B, spec.feature_dim)
        r = z - target
        loss = float((r * r).sum(axis=1).mean())
        cot = 2.0 * r / B
    return loss, _vjp(spec, theta, X, cot, trace)


def grad(spec: NetworkSpec, theta, batch, loss_kind: str = "cross_entropy", head: Head | None = None) -> np.ndarray:
    return loss_and_grad(spec, theta, batch, loss_kind, head)[1]


def per_output_jacobian(spec: NetworkSpec, theta0, x, budget: int = JACOBIAN_BUDGET) -> np.ndarray:
    """Dense ``d x P`` Jacobian of the features at a single input (or ``B x d x P``)."""
    theta0 = check_params(spec, theta0)
    X, single = _check_inputs(spec, x)
    d, P = spec.feature_dim, spec.param_count
    need = X.shape[0] * d * P
    if need > budget:
        raise BudgetError(f"jacobian needs {need} entries, budget allows {budget}")
    J = _jacobian(spec, theta0, X)
    return J[0] if single else J


def _jacobian(spec: NetworkSpec, theta0: np.ndarray, X: np.ndarray) -> np.ndarray:
    trace = _trace(spec, theta0, X)
    inputs = trace[0]
    signals = _backward_signals(spec, theta0, X, trace)
    B, d = X.shape[0], spec.feature_dim
    J = np.zeros((B, d, spec.param_count))
    for (w_off, b_off, d_out, d_in), a, g in zip(_layout(spec)[0], inputs, signals):
        # g: (d, B, d_out), a: (B, d_in)
        block = np.einsum("kbo,bi->bkoi", g, a).reshape(B, d, d_out * d_in)
        J[:, :, w_off : w_off + d_out * d_in] = block
        if spec.bias:
            J[:, :, b_off : b_off + d_out] = g.transpose(1, 0, 2)
    return J
