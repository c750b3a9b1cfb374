"""EM estimation of the source-model parameters on a voxel grid.

The E-step is the scaled forward-backward pass of :mod:`dipole_grid.hmm`.
The M-step uses the closed-form weighted-regression updates with voxel
atoms d_k = (c_k, q).  With unnormalized cell weights (the default) these
updates are the exact maximizer of the expected complete-data
log-likelihood, so the observed log-likelihood never decreases.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from . import hmm
from .geometry import VoxelGrid
from .statespace import PARAM_NAMES, ModelParams, fmt, loc_slice

log = logging.getLogger(__name__)

#: relative slack allowed for likelihood / Q decreases caused by rounding
MONOTONE_RTOL = 1e-9


class SingularUpdateError(np.linalg.LinAlgError):
    pass


class MonotonicityError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmConfig:
    update: frozenset = frozenset({"A", "b"})
    max_iters: int = 100
    tol: float = 1e-6
    diagonal_Sigma: bool = True
    scalar_V: bool = True
    location_block_only_A: bool = True
    ridge: float = 0.0
    normalize: bool = False
    stop_on: str = "Q"
    check_monotone: bool = True
    variance_floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "update", frozenset(self.update))
        unknown = self.update - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown parameters in update mask: {sorted(unknown)}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.stop_on not in ("Q", "loglik"):
            raise ValueError("stop_on must be 'Q' or 'loglik'")
        if self.variance_floor < 0:
            raise ValueError("variance_floor must be >= 0")


@dataclass
class EmTrace:
    Q: list = field(default_factory=list)
    gain: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    changes: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    extra: list = field(default_factory=list)
    converged: bool = False
    final_loglik: Optional[float] = None
    posterior: Optional[hmm.SmoothingResult] = None
    grid: Optional[VoxelGrid] = None

    @property
    def n_iter(self) -> int:
        return len(self.Q)

    def record(self, Q, gain, loglik, old, new, **extra):
        self.Q.append(float(Q))
        self.gain.append(float(gain))
        self.loglik.append(float(loglik))
        self.changes.append(new.max_abs_change(old))
        self.snapshots.append(new)
        self.extra.append(extra)

    def write_csv(self, path):
        extra_keys = []
        for e in self.extra:
            for k in e:
                if k not in extra_keys:
                    extra_keys.append(k)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "Q", "loglik", "gain"] + [f"d_{n}" for n in PARAM_NAMES] + extra_keys)
            for i in range(self.n_iter):
                row = [str(i + 1), fmt(self.Q[i]), fmt(self.loglik[i]), fmt(self.gain[i])]
                row += [fmt(self.changes[i][n]) for n in PARAM_NAMES]
                row += [_cell(self.extra[i].get(k, "")) for k in extra_keys]
                w.writerow(row)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return str(v)


class EStep(NamedTuple):
    result: hmm.SmoothingResult
    eta_sum: np.ndarray
    model: hmm.DiscreteModel


def e_step(params: ModelParams, grid: VoxelGrid, measurements, fwd, normalize: bool = False) -> EStep:
    model = hmm.DiscreteModel.from_params(params, grid, measurements, fwd, 0, normalize)
    result = hmm.smooth(model)
    return EStep(result, hmm.pairwise_sum(model, result), model)


def _as_eta_sum(eta):
    eta = np.asarray(eta, dtype=float)
    return eta.sum(axis=0) if eta.ndim == 3 else eta


def atoms(centers, q) -> np.ndarray:
    """d_k = (c_k, q) stacked as a (K, 6) array."""
    centers = np.asarray(centers, float)
    return np.hstack([centers, np.broadcast_to(np.asarray(q, float), (centers.shape[0], 3))])


def _solve_right(Y, X, ridge, n_pairs):
    # A X = Y  ->  A = Y X^{-1}; X is minus (T-1) times the centered regressor scatter
    if ridge:
        X = X - ridge * n_pairs * np.eye(X.shape[0])
    cond = np.linalg.cond(X)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularUpdateError(
            f"A-update system is singular (condition number {cond:.3e}); "
            "the regressor locations do not span all axes")
    return np.linalg.solve(X.T, Y.T).T


def _floored_diag(S, floor):
    # the constrained maximizer: a diagonal variance below the floor sits on it
    return np.diag(np.maximum(np.diag(S), floor))


def update_source_block(blocks, xi, eta_sum, centers, q, mask, cfg: EmConfig):
    """Closed-form updates for one source's 6-D parameter blocks.

    ``blocks`` is (mu0, Sigma0, A, b, Sigma) for the source; entries not in
    ``mask`` pass through unchanged.
    """
    mu0, Sigma0, A, b, Sigma = (np.array(x, dtype=float) for x in blocks)
    T = xi.shape[0]
    D = atoms(centers, q)
    H = _as_eta_sum(eta_sum)

    if "mu0" in mask:
        mu0 = xi[0] @ D
    if "Sigma0" in mask:
        Dc = D - mu0
        Sigma0 = (Dc * xi[0][:, None]).T @ Dc
        if cfg.diagonal_Sigma:
            Sigma0 = _floored_diag(Sigma0, cfg.variance_floor)

    if mask & {"A", "b", "Sigma"} and T < 2:
        raise ValueError("A, b and Sigma updates need at least two time steps")

    if mask & {"A", "b", "Sigma"}:
        n = T - 1
        w_next = xi[1:].sum(axis=0)   # weights of d_k at t = 2..T
        w_prev = xi[:-1].sum(axis=0)  # weights of d_l at t-1
        s_next = w_next @ D
        s_prev = w_prev @ D
        M_kl = D.T @ H.T @ D          # sum eta d_k d_l^T
        M_ll = (D * w_prev[:, None]).T @ D

        if "A" in mask:
            if cfg.location_block_only_A:
                s = slice(0, 3)
                Y = np.outer(s_next[s], s_prev[s]) - n * M_kl[s, s]
                X = np.outer(s_prev[s], s_prev[s]) - n * M_ll[s, s]
                A = np.zeros((6, 6))
                A[s, s] = _solve_right(Y, X, cfg.ridge, n)
            else:
                Y = np.outer(s_next, s_prev) - n * M_kl
                X = np.outer(s_prev, s_prev) - n * M_ll
                A = _solve_right(Y, X, cfg.ridge, n)
        if "b" in mask:
            b = (s_next - A @ s_prev) / n
        if "Sigma" in mask:
            M_kk = (D * w_next[:, None]).T @ D
            AM = A @ M_kl.T           # A sum eta d_l d_k^T
            S = (M_kk - AM - AM.T + A @ M_ll @ A.T
                 - np.outer(s_next, b) - np.outer(b, s_next)
                 + np.outer(A @ s_prev, b) + np.outer(b, A @ s_prev)
                 + n * np.outer(b, b)) / n
            S = 0.5 * (S + S.T)
            Sigma = _floored_diag(S, cfg.variance_floor) if cfg.diagonal_Sigma else S
    return mu0, Sigma0, A, b, Sigma


def update_V(measurements, xi, F, scalar: bool):
    """V = sum_t sum_k xi_tk (Y_t - F_k)(Y_t - F_k)^T / T, optionally projected to sigma^2 I."""
    Y = np.asarray(measurements, float)
    T, L = Y.shape
    w = xi.sum(axis=0)
    if scalar:
        sq = (Y * Y).sum(1)[:, None] + (F * F).sum(1)[None, :] - 2.0 * Y @ F.T
        s2 = float((xi * np.maximum(sq, 0.0)).sum()) / (T * L)
        return s2 * np.eye(L)
    YF = Y.T @ xi @ F
    V = (Y.T @ Y - YF - YF.T + (F * w[:, None]).T @ F) / T
    return 0.5 * (V + V.T)


def source_blocks(params: ModelParams, n: int):
    s = slice(6 * n, 6 * n + 6)
    return params.mu0[s], params.Sigma0[s, s], params.A[s, s], params.b[s], params.Sigma[s, s]


def assemble(params: ModelParams, per_source: dict, V=None) -> ModelParams:
    """Write updated per-source 6-D blocks (and V) back into a copy of ``params``."""
    mu0, Sigma0, A, b, Sigma = (np.array(x) for x in (params.mu0, params.Sigma0, params.A, params.b, params.Sigma))
    for n, (m, S0, An, bn, Sn) in per_source.items():
        s = slice(6 * n, 6 * n + 6)
        mu0[s], Sigma0[s, s], A[s, s], b[s], Sigma[s, s] = m, S0, An, bn, Sn
    return params.replace(mu0=mu0, Sigma0=Sigma0, A=A, b=b, Sigma=Sigma,
                          V=params.V if V is None else V)


def m_step(xi, eta, grid: VoxelGrid, measurements, params: ModelParams, fwd,
           config: EmConfig = EmConfig()) -> ModelParams:
    """Closed-form M-step for a single source; parameters outside ``config.update`` are unchanged."""
    mask = config.update
    if not mask:
        return params
    q = params.q_fixed[0]
    blocks = update_source_block(source_blocks(params, 0), xi, eta, grid.centers, q, mask, config)
    V = None
    if "V" in mask:
        V = update_V(measurements, xi, fwd.field_matrix(grid.centers, q), config.scalar_V)
    return assemble(params, {0: blocks}, V)


def chain_q(params: ModelParams, source: int, xi, eta_sum, centers, log_cell, log_emission, normalize=False):
    """Expected complete log-likelihood of one chain at fixed posteriors."""
    mu, S0, A, b, S = params.location_blocks(source)
    li = hmm.initial_log_weights(mu, S0, centers, log_cell)
    lt = hmm.transition_log_weights(A, b, S, centers, log_cell)
    if normalize:
        li = li - logsumexp(li)
        lt = lt - logsumexp(lt, axis=1, keepdims=True)
    H = _as_eta_sum(eta_sum)
    return float((xi * log_emission).sum() + (H * lt).sum() + xi[0] @ li)


def expected_complete_loglik(params: ModelParams, xi, eta, grid: VoxelGrid, measurements, fwd,
                             normalize: bool = False) -> float:
    log_emission = hmm.build_emission(measurements, grid, params, params.q_fixed[0], fwd)
    return chain_q(params, 0, xi, eta, grid.centers, np.log(grid.cell_volume), log_emission, normalize)


def default_init(grid: VoxelGrid, L: int, q_fixed, noise_var: float) -> ModelParams:
    """Starting values used when no initialization is supplied.

    Prior centred on the ROI centroid with a quarter-width spread, A = 0.8 I
    and b = 0.2 * centroid on the location block, one voxel width of
    transition noise per axis.
    """
    c = grid.roi.centroid
    q = np.asarray(q_fixed, float).reshape(3)
    w = np.where(grid.widths > 0, grid.widths, 1.0)
    roi_w = np.where(grid.roi.widths > 0, grid.roi.widths, 1.0)
    Sigma0 = np.zeros((6, 6))
    Sigma0[:3, :3] = np.diag((roi_w / 4.0) ** 2)
    A = np.zeros((6, 6))
    A[:3, :3] = 0.8 * np.eye(3)
    Sigma = np.zeros((6, 6))
    Sigma[:3, :3] = np.diag(w**2)
    return ModelParams(mu0=np.concatenate([c, q]), Sigma0=Sigma0, A=A,
                       b=np.concatenate([0.2 * c, q]), Sigma=Sigma,
                       V=noise_var * np.eye(L), q_fixed=q[None, :])


def _check_gain(gain, q_old, it):
    if gain < -MONOTONE_RTOL * max(1.0, abs(q_old)):
        raise MonotonicityError(f"M-step decreased Q by {-gain:.3e}")


def _check_loglik(prev, cur, it):
    if prev is not None and cur < prev - MONOTONE_RTOL * max(1.0, abs(prev)):
        raise MonotonicityError(f"log-likelihood fell from {prev!r} to {cur!r} at iteration {it}")


def converged(trace: EmTrace, config: EmConfig) -> bool:
    if config.stop_on == "Q":
        q = trace.Q[-1]
        return abs(trace.gain[-1]) <= config.tol * max(abs(q), 1e-300)
    if len(trace.loglik) < 2:
        return abs(trace.gain[-1]) <= config.tol * max(abs(trace.Q[-1]), 1e-300)
    a, b = trace.loglik[-2], trace.loglik[-1]
    return abs(b - a) <= config.tol * max(abs(b), 1e-300)


class Iteration(NamedTuple):
    params: ModelParams
    estep: EStep
    Q: float
    gain: float


def em_iteration(params: ModelParams, grid: VoxelGrid, measurements, fwd, config: EmConfig) -> Iteration:
    """One E-step at ``params`` followed by the closed-form M-step on the same grid."""
    es = e_step(params, grid, measurements, fwd, config.normalize)
    xi = es.result.xi
    log_cell = np.log(grid.cell_volume)
    q_old = chain_q(params, 0, xi, es.eta_sum, grid.centers, log_cell, es.model.log_emission, config.normalize)
    new = m_step(xi, es.eta_sum, grid, measurements, params, fwd, config)
    if "V" in config.update:
        le = hmm.build_emission(measurements, grid, new, new.q_fixed[0], fwd)
    else:
        le = es.model.log_emission
    q_new = chain_q(new, 0, xi, es.eta_sum, grid.centers, log_cell, le, config.normalize)
    gain = q_new - q_old
    if config.check_monotone:
        _check_gain(gain, q_old, None)
    return Iteration(new, es, q_new, gain)


def fit(measurements, grid: VoxelGrid, init: ModelParams, config: EmConfig, fwd):
    """Run EM to convergence; returns (params, trace).

    Each iteration records Q(new | old), the M-step gain
    Q(new | old) - Q(old | old) and the observed log-likelihood of the
    parameters the E-step was run at.  Stops when the gain is below
    ``tol * |Q|`` or after ``max_iters`` (``trace.converged`` is False then).
    """
    init.validate()
    Y = np.asarray(measurements, float)
    params = init
    trace = EmTrace(grid=grid)
    prev_ll = None
    for it in range(1, config.max_iters + 1):
        step = em_iteration(params, grid, Y, fwd, config)
        ll = step.estep.result.log_likelihood
        if config.check_monotone:
            _check_loglik(prev_ll, ll, it)
        prev_ll = ll
        trace.record(step.Q, step.gain, ll, params, step.params)
        params = step.params
        if converged(trace, config):
            trace.converged = True
            break
    finish(trace, params, grid, Y, fwd, config, prev_ll)
    return params, trace


def finish(trace, params, grid, Y, fwd, config, prev_ll=None):
    final = e_step(params, grid, Y, fwd, config.normalize)
    if config.check_monotone:
        _check_loglik(prev_ll, final.result.log_likelihood, trace.n_iter + 1)
    trace.final_loglik = final.result.log_likelihood
    trace.posterior = final.result
    trace.grid = grid
    if not trace.converged:
        log.warning("EM stopped after %d iterations without meeting tol=%g", trace.n_iter, config.tol)
