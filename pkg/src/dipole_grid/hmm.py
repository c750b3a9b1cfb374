"""Voxel-state hidden Markov model and the scaled forward-backward smoother.

Initial and transition weights are the Gaussian density at each voxel
center times the cell volume, i.e. the midpoint-rule value of
P(J in V_k).  They are not renormalized over the ROI unless
``normalize=True`` is passed; see ``README.md`` for why the closed-form
M-step needs the unnormalized form.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from . import _kernels
from ._kernels import UnderflowError
from .geometry import VoxelGrid
from .statespace import ModelParams, fmt

LOG_2PI = np.log(2.0 * np.pi)


class CoverageError(FloatingPointError):
    """The ROI grid carries no prior or transition mass."""


def precision_factor(cov, name="covariance"):
    """(W, log_norm) with W^T W = cov^{-1} and log_norm the Gaussian log-normalizer."""
    cov = np.asarray(cov, dtype=float)
    try:
        U = cholesky(cov, lower=False)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(f"{name} is not positive definite") from None
    W = solve_triangular(U, np.eye(cov.shape[0]), lower=False).T
    log_norm = -0.5 * cov.shape[0] * LOG_2PI - np.log(np.diag(U)).sum()
    return W, log_norm


def gaussian_loglik_rows(Y, F, V):
    """out[t, k] = log N(Y[t]; F[k], V)."""
    Y = np.atleast_2d(Y)
    F = np.atleast_2d(F)
    try:
        U = cholesky(np.asarray(V, dtype=float), lower=False)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("measurement covariance V is singular") from None
    # U^T U = V, whiten with U^{-T}
    Yw = solve_triangular(U, Y.T, trans="T", lower=False).T
    Fw = solve_triangular(U, F.T, trans="T", lower=False).T
    log_norm = -0.5 * Y.shape[1] * LOG_2PI - np.log(np.diag(U)).sum()
    quad = (Yw * Yw).sum(1)[:, None] + (Fw * Fw).sum(1)[None, :] - 2.0 * Yw @ Fw.T
    return log_norm - 0.5 * np.maximum(quad, 0.0)


def _log_cell(grid):
    return np.log(grid.cell_volume) if grid is not None else 0.0


def initial_log_weights(mu, cov, centers, log_cell=0.0):
    W, log_norm = precision_factor(cov, "initial location covariance")
    return _kernels.gauss_logpdf_pairs(np.asarray(mu, float)[None, :], centers, W, log_norm)[0] + log_cell


def transition_log_weights(A, b, cov, centers, log_cell=0.0):
    W, log_norm = precision_factor(cov, "transition location covariance")
    means = centers @ np.asarray(A, float).T + np.asarray(b, float)
    return _kernels.gauss_logpdf_pairs(means, centers, W, log_norm) + log_cell


def build_initial(params: ModelParams, grid: VoxelGrid, source: int = 0, normalize: bool = False) -> np.ndarray:
    mu, S0, _, _, _ = params.location_blocks(source)
    logw = initial_log_weights(mu, S0, grid.centers, _log_cell(grid))
    if normalize:
        logw = logw - logsumexp(logw)
    w = np.exp(logw)
    if not np.any(w > 0):
        raise CoverageError("ROI does not cover prior mass")
    return w


def build_transition(params: ModelParams, grid: VoxelGrid, source: int = 0, normalize: bool = False) -> np.ndarray:
    _, _, A, b, S = params.location_blocks(source)
    logw = transition_log_weights(A, b, S, grid.centers, _log_cell(grid))
    if normalize:
        logw = logw - logsumexp(logw, axis=1, keepdims=True)
    P = np.exp(logw)
    dead = np.flatnonzero(~np.any(P > 0, axis=1))
    if dead.size:
        l = int(dead[0])
        raise CoverageError(f"transition row for voxel {l} (center {grid.centers[l].tolist()}) underflows")
    return P


def build_emission(measurements, grid: VoxelGrid, params: ModelParams, q_fixed, fwd) -> np.ndarray:
    """(T, K) log N(Y_t; B(c_k, q), V)."""
    F = fwd.field_matrix(grid.centers, np.asarray(q_fixed, float).reshape(3))
    return gaussian_loglik_rows(measurements, F, params.V)


@dataclass(frozen=True)
class DiscreteModel:
    initial: np.ndarray
    transition: np.ndarray
    log_emission: np.ndarray
    grid: Optional[VoxelGrid] = None

    def __post_init__(self):
        K = self.initial.shape[0]
        if self.transition.shape != (K, K) or self.log_emission.ndim != 2 or self.log_emission.shape[1] != K:
            raise ValueError("inconsistent model shapes")
        if np.any(self.initial < 0) or np.any(self.transition < 0):
            raise ValueError("weights must be nonnegative")
        if not np.all(np.isfinite(self.log_emission)):
            raise ValueError("log emission must be finite")

    @property
    def T(self) -> int:
        return self.log_emission.shape[0]

    @property
    def K(self) -> int:
        return self.initial.shape[0]

    @classmethod
    def from_params(cls, params, grid, measurements, fwd, source=0, normalize=False):
        return cls(build_initial(params, grid, source, normalize),
                   build_transition(params, grid, source, normalize),
                   build_emission(measurements, grid, params, params.q_fixed[source], fwd),
                   grid)


@dataclass(frozen=True)
class SmoothingResult:
    alpha: np.ndarray
    beta: np.ndarray
    log_scale: np.ndarray
    xi: np.ndarray
    log_likelihood: float

    @property
    def scale(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_scale)


def forward(model: DiscreteModel):
    """Filtered posteriors alpha (T, K) and log scaling factors log c_t."""
    return _kernels.forward(model.initial, model.transition, model.log_emission)


def backward(model: DiscreteModel, log_scale) -> np.ndarray:
    return _kernels.backward(model.transition, model.log_emission, np.asarray(log_scale, float))


def smooth(model: DiscreteModel) -> SmoothingResult:
    alpha, log_scale = forward(model)
    beta = backward(model, log_scale)
    xi = alpha * beta
    return SmoothingResult(alpha, beta, log_scale, xi, float(log_scale.sum()))


def _pair_weights(model, result):
    # g[t-1, k] = e_t[k] beta_t[k] / c_t for t = 2..T, computed with a per-row shift
    le = model.log_emission[1:]
    return np.exp(le - result.log_scale[1:, None]) * result.beta[1:]


def pairwise(model: DiscreteModel, result: SmoothingResult) -> np.ndarray:
    """Joint posteriors eta[t-1][l, k] = P(v_{t-1,l} = 1, v_{t,k} = 1 | Y), shape (T-1, K, K)."""
    g = _pair_weights(model, result)
    return result.alpha[:-1, :, None] * model.transition[None, :, :] * g[:, None, :]


def pairwise_sum(model: DiscreteModel, result: SmoothingResult) -> np.ndarray:
    """sum_t eta_t without materializing the (T-1, K, K) stack."""
    if model.T < 2:
        return np.zeros((model.K, model.K))
    g = _pair_weights(model, result)
    return model.transition * (result.alpha[:-1].T @ g)


def write_posterior_csv(path, xi, centers, source: Optional[int] = None, mode="w"):
    """Long format: [source,] t, k, x, y, z, xi with 1-based t and 0-based k."""
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow((["source"] if source is not None else []) + ["t", "k", "x", "y", "z", "xi"])
        T, K = xi.shape
        for t in range(T):
            for k in range(K):
                row = [str(t + 1), str(k)] + [fmt(c) for c in centers[k]] + [fmt(xi[t, k])]
                if source is not None:
                    row = [str(source)] + row
                w.writerow(row)


def read_posterior_csv(path):
    """Return {source: (xi (T, K), centers (K, 3))}; single-source files use key 1."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: empty posterior file")
    header = rows[0]
    has_src = header[0] == "source"
    off = 1 if has_src else 0
    if header[off:] != ["t", "k", "x", "y", "z", "xi"]:
        raise ValueError(f"{path}: unexpected header {header}")
    groups = {}
    for r in rows[1:]:
        s = int(r[0]) if has_src else 1
        groups.setdefault(s, []).append(r[off:])
    out = {}
    for s, rs in groups.items():
        a = np.array([[float(v) for v in r] for r in rs])
        T = int(a[:, 0].max())
        K = int(a[:, 1].max()) + 1
        if a.shape[0] != T * K:
            raise ValueError(f"{path}: posterior rows are not a full T x K table")
        order = np.lexsort((a[:, 1], a[:, 0]))
        a = a[order]
        out[s] = (a[:, 5].reshape(T, K), a[:K, 2:5])
    return out


def result_to_json(result: SmoothingResult) -> str:
    return json.dumps({
        "T": int(result.xi.shape[0]),
        "K": int(result.xi.shape[1]),
        "log_scale": result.log_scale.tolist(),
        "log_likelihood": result.log_likelihood,
        "alpha": result.alpha.tolist(),
        "beta": result.beta.tolist(),
        "xi": result.xi.tolist(),
    })
