"""Gauss-Newton curvature of the feature map: dense oracle, KFAC and EK-FAC.

For layer ``l`` write the parameters as ``T = [W | b]`` of shape
``(d_out, d_in_aug)`` where the bias is folded in through a constant-1 input
coordinate. The per-sample Jacobian of feature ``k`` w.r.t. ``T`` is
``g_k a^T`` with ``a`` the (augmented) layer input and ``g_k`` the backward
signal at the pre-activation. In row-major ``vec`` order that is ``g_k (x) a``,
so the exact layer block is ``E[sum_k (g_k g_k^T) (x) (a a^T)]`` and KFAC
replaces it by ``G (x) A``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from delta_lab import container
from delta_lab import network as nw
from delta_lab.errors import BudgetError, ConfigError, DataError, DimensionError, NumericError

DEFAULT_DAMPING = 1e-4
_CHUNK = 256


@dataclass(frozen=True, eq=False)
class DenseGgn:
    matrix: np.ndarray
    dataset_hash: str
    theta0_hash: str


@dataclass(frozen=True, eq=False)
class KfacFactors:
    A: list[np.ndarray]
    G: list[np.ndarray]
    spec: nw.NetworkSpec
    dataset_hash: str


@dataclass(frozen=True, eq=False)
class EkfacState:
    U_A: list[np.ndarray]
    U_G: list[np.ndarray]
    S: list[np.ndarray]  # (d_out, d_in_aug) per layer, damping included
    damping: float
    spec: nw.NetworkSpec
    dataset_hash: str

    @property
    def spec_hash(self) -> str:
        return self.spec.hash

    @property
    def n_layers(self) -> int:
        return len(self.S)


def _inputs(dataset) -> np.ndarray:
    X = np.asarray(getattr(dataset, "inputs", dataset), dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise DataError("empty dataset")
    return X


def _augment(spec: nw.NetworkSpec, a: np.ndarray) -> np.ndarray:
    if not spec.bias:
        return a
    return np.concatenate([a, np.ones((a.shape[0], 1))], axis=1)


def layer_index_map(spec: nw.NetworkSpec) -> list[np.ndarray]:
    """Flat-vector index of each entry of the row-major ``[W | b]`` layer matrix."""
    return [idx.copy() for idx in _index_map(spec)]


@functools.lru_cache(maxsize=None)
def _index_map(spec: nw.NetworkSpec) -> tuple[np.ndarray, ...]:
    out = []
    for w_off, b_off, d_out, d_in in nw._layout(spec)[0]:
        w_idx = w_off + np.arange(d_out * d_in).reshape(d_out, d_in)
        if spec.bias:
            w_idx = np.concatenate([w_idx, (b_off + np.arange(d_out))[:, None]], axis=1)
        out.append(w_idx.reshape(-1))
    return tuple(out)


def layer_matrices(spec: nw.NetworkSpec, tau: np.ndarray) -> list[np.ndarray]:
    """Split a flat vector into per-layer ``[W | b]`` matrices."""
    return [
        tau[idx].reshape(d_out, -1)
        for idx, (d_out, _) in zip(layer_index_map(spec), spec.layer_shapes())
    ]


def _chunks(X: np.ndarray):
    for start in range(0, X.shape[0], _CHUNK):
        yield X[start : start + _CHUNK]


def exact_ggn(spec: nw.NetworkSpec, theta0, dataset, budget: int = nw.JACOBIAN_BUDGET) -> DenseGgn:
    """``(1/N) sum_x J(x)^T J(x)`` built from dense per-sample Jacobians."""
    theta0 = nw.check_params(spec, theta0)
    X = _inputs(dataset)
    P, d = spec.param_count, spec.feature_dim
    if max(P * P, d * P) > budget:
        raise BudgetError(f"dense GGN needs {P * P} entries, budget allows {budget}")
    nw._check_inputs(spec, X)
    M = np.zeros((P, P))
    for chunk in _chunks(X):
        J = nw._jacobian(spec, theta0, chunk).reshape(-1, P)
        M += J.T @ J
    M /= X.shape[0]
    return DenseGgn(0.5 * (M + M.T), container.hash_array(X), container.hash_array(theta0))


def _layer_stats(spec: nw.NetworkSpec, theta0: np.ndarray, X: np.ndarray):
    """Yield per chunk the augmented layer inputs and backward signals."""
    for chunk in _chunks(X):
        trace = nw._trace(spec, theta0, chunk)
        signals = nw._backward_signals(spec, theta0, chunk, trace)
        yield [_augment(spec, a) for a in trace[0]], signals


def kfac_factors(spec: nw.NetworkSpec, theta0, dataset) -> KfacFactors:
    theta0 = nw.check_params(spec, theta0)
    X = _inputs(dataset)
    nw._check_inputs(spec, X)
    A = [np.zeros((d_in + spec.bias,) * 2) for _, d_in in spec.layer_shapes()]
    G = [np.zeros((d_out, d_out)) for d_out, _ in spec.layer_shapes()]
    for inputs, signals in _layer_stats(spec, theta0, X):
        for l, (a, g) in enumerate(zip(inputs, signals)):
            A[l] += a.T @ a
            G[l] += np.einsum("kbi,kbj->ij", g, g)
    n = X.shape[0]
    A = [0.5 * (m + m.T) / n for m in A]
    G = [0.5 * (m + m.T) / n for m in G]
    return KfacFactors(A, G, spec, container.hash_array(X))


def _eigh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(m)):
        raise NumericError("curvature factor has non-finite entries")
    try:
        w, U = np.linalg.eigh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from None
    return np.clip(w, 0.0, None), U


def ekfac(spec: nw.NetworkSpec, theta0, dataset, damping: float = DEFAULT_DAMPING) -> EkfacState:
    """Kronecker eigenbases with per-direction second moments refit on the data."""
    if not damping >= 0:
        raise ConfigError(f"damping must be >= 0, got {damping}")
    theta0 = nw.check_params(spec, theta0)
    X = _inputs(dataset)
    factors = kfac_factors(spec, theta0, X)
    U_A = [_eigh(a)[1] for a in factors.A]
    U_G = [_eigh(g)[1] for g in factors.G]
    S = [np.zeros((ug.shape[0], ua.shape[0])) for ua, ug in zip(U_A, U_G)]
    for inputs, signals in _layer_stats(spec, theta0, X):
        for l, (a, g) in enumerate(zip(inputs, signals)):
            ar2 = (a @ U_A[l]) ** 2  # (B, d_in_aug)
            gr2 = ((g @ U_G[l]) ** 2).sum(axis=0)  # (B, d_out), summed over features
            S[l] += gr2.T @ ar2
    S = [s / X.shape[0] + damping for s in S]
    return EkfacState(U_A, U_G, S, float(damping), spec, factors.dataset_hash)


def _check_tau(state: EkfacState, tau) -> np.ndarray:
    spec = state.spec
    if isinstance(tau, nw.ParameterVector) or hasattr(tau, "spec_hash"):
        if tau.spec_hash != spec.hash:
            raise DataError("task vector belongs to a different network spec than the curvature state")
    tau = np.asarray(getattr(tau, "values", tau), dtype=np.float64)
    if tau.shape != (spec.param_count,):
        raise DimensionError(f"task vector: expected shape ({spec.param_count},), got {tau.shape}")
    return tau


def drift_loss(state: EkfacState, tau) -> float:
    """``sum_l sum_ij S_ij (U_G^T T U_A)_ij^2`` without forming Kronecker products."""
    tau = _check_tau(state, tau)
    total = 0.0
    for T, ua, ug, s in zip(layer_matrices(state.spec, tau), state.U_A, state.U_G, state.S):
        R = ug.T @ T @ ua
        total += float((s * R * R).sum())
    return total


def drift_loss_grad(state: EkfacState, tau) -> np.ndarray:
    tau = _check_tau(state, tau)
    spec = state.spec
    out = np.zeros_like(tau)
    for idx, T, ua, ug, s in zip(layer_index_map(spec), layer_matrices(spec, tau), state.U_A, state.U_G, state.S):
        R = ug.T @ T @ ua
        out[idx] = (2.0 * ug @ (s * R) @ ua.T).reshape(-1)
    return out


def drift_loss_and_grad(state: EkfacState, tau: np.ndarray) -> tuple[float, np.ndarray]:
    """Both at once, no validation; for the training loop."""
    total = 0.0
    out = np.zeros_like(tau)
    for idx, ua, ug, s in zip(_index_map(state.spec), state.U_A, state.U_G, state.S):
        T = tau[idx].reshape(ug.shape[0], ua.shape[0])
        R = ug.T @ T @ ua
        SR = s * R
        total += float((SR * R).sum())
        out[idx] = (2.0 * ug @ SR @ ua.T).reshape(-1)
    return total, out


def _dense_from_blocks(spec: nw.NetworkSpec, blocks: list[np.ndarray]) -> np.ndarray:
    P = spec.param_count
    M = np.zeros((P, P))
    for idx, blk in zip(layer_index_map(spec), blocks):
        M[np.ix_(idx, idx)] = blk
    return M


def kfac_dense(factors: KfacFactors) -> np.ndarray:
    """Block-diagonal ``G (x) A`` in flat parameter layout (oracle use only)."""
    return _dense_from_blocks(factors.spec, [np.kron(g, a) for a, g in zip(factors.A, factors.G)])


def ekfac_dense(state: EkfacState) -> np.ndarray:
    """Block-diagonal ``(U_G (x) U_A) diag(S) (U_G (x) U_A)^T`` in flat layout (oracle use only)."""
    blocks = []
    for ua, ug, s in zip(state.U_A, state.U_G, state.S):
        U = np.kron(ug, ua)
        blocks.append((U * s.reshape(-1)) @ U.T)
    return _dense_from_blocks(state.spec, blocks)


def representation_drift(spec: nw.NetworkSpec, theta0, tau_t, tau_other, alpha: float, x, mode: str = "linearized"):
    """Squared change of the features on ``x`` when ``alpha * tau_other`` is added on top of ``alpha * tau_t``."""
    theta0 = nw.check_params(spec, theta0)
    tau_t = np.asarray(getattr(tau_t, "values", tau_t), dtype=np.float64)
    tau_o = np.asarray(getattr(tau_other, "values", tau_other), dtype=np.float64)
    if tau_t.shape != theta0.shape or tau_o.shape != theta0.shape:
        raise DimensionError(f"task vectors must have shape {theta0.shape}")
    X, single = nw._check_inputs(spec, x)
    if mode == "linearized":
        # affine in tau: the difference is exactly alpha * J tau_other
        diff = alpha * nw._jvp(spec, theta0, X, tau_o)[1]
    elif mode == "nonlinear":
        diff = nw._forward(spec, theta0 + alpha * tau_t + alpha * tau_o, X) - nw._forward(
            spec, theta0 + alpha * tau_t, X
        )
    else:
        raise ConfigError(f"mode must be 'linearized' or 'nonlinear', got {mode!r}")
    out = (diff * diff).sum(axis=1)
    return float(out[0]) if single else out


def save_ekfac(state: EkfacState, path: str | Path, extra: dict | None = None) -> str:
    sections = {}
    for l, (ua, ug, s) in enumerate(zip(state.U_A, state.U_G, state.S)):
        sections[f"U_A.{l}"] = ua
        sections[f"U_G.{l}"] = ug
        sections[f"S.{l}"] = s
    meta = {
        "spec": state.spec.to_dict(),
        "spec_hash": state.spec_hash,
        "dataset_hash": state.dataset_hash,
        "damping": state.damping,
        "dims": [list(s.shape) for s in state.S],
        **(extra or {}),
    }
    return container.write(path, "ekfac", meta, {k: v.astype("<f8") for k, v in sections.items()})


def load_ekfac(path: str | Path) -> EkfacState:
    header, arrays = container.read(path, "ekfac")
    meta = header["meta"]
    spec = nw.NetworkSpec.from_dict(meta["spec"])
    if spec.hash != meta["spec_hash"]:
        raise DataError("curvature file: spec hash does not match the stored spec")
    n = len(meta["dims"])
    return EkfacState(
        U_A=[arrays[f"U_A.{l}"] for l in range(n)],
        U_G=[arrays[f"U_G.{l}"] for l in range(n)],
        S=[arrays[f"S.{l}"] for l in range(n)],
        damping=float(meta["damping"]),
        spec=spec,
        dataset_hash=meta["dataset_hash"],
    )
