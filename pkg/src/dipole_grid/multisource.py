"""Several sources: the exact joint chain over K^N states and the switch procedure.

The joint chain is only feasible for small K^N.  The switch procedure runs
one K-state chain per source, with every other source pinned at its
posterior-mean location, and sweeps the sources in ascending order inside
each EM iteration (Gauss-Seidel style: sources already visited in this
sweep use their fresh posteriors).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import em, hmm
from .geometry import VoxelGrid
from .statespace import ModelParams

log = logging.getLogger(__name__)

#: largest joint state space joint_fit will build
JOINT_CAP = 4096


class JointTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class JointGrid:
    grids: tuple

    def __post_init__(self):
        object.__setattr__(self, "grids", tuple(self.grids))
        if not self.grids:
            raise ValueError("need at least one grid")

    @property
    def N(self) -> int:
        return len(self.grids)

    @property
    def shape(self) -> tuple:
        return tuple(g.K for g in self.grids)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def flat_index(self, ks: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(ks), self.shape))

    def unflatten(self, k: int) -> tuple:
        return tuple(int(i) for i in np.unravel_index(k, self.shape))

    def source_indices(self) -> np.ndarray:
        """(size, N) per-source voxel index of every joint state."""
        return np.stack(np.unravel_index(np.arange(self.size), self.shape), axis=1)


def marginalize(joint_xi, shape, n: int) -> np.ndarray:
    """Sum a (T, prod(shape)) joint posterior over every source except n."""
    joint_xi = np.asarray(joint_xi, float)
    T = joint_xi.shape[0]
    if len(shape) == 1:
        return joint_xi
    axes = tuple(a + 1 for a in range(len(shape)) if a != n)
    return joint_xi.reshape((T,) + tuple(shape)).sum(axis=axes)


def marginalize_pairs(joint_eta_sum, shape, n: int) -> np.ndarray:
    """Per-source pairwise sums from the joint (size, size) pairwise sum."""
    if len(shape) == 1:
        return joint_eta_sum
    N = len(shape)
    H = joint_eta_sum.reshape(tuple(shape) + tuple(shape))
    axes = tuple(a for a in range(N) if a != n) + tuple(N + a for a in range(N) if a != n)
    return H.sum(axis=axes)


def _kron_all(mats):
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


def joint_fields(joint: JointGrid, params: ModelParams, fwd) -> np.ndarray:
    """(size, L) summed field of every joint configuration."""
    per = [fwd.field_matrix(g.centers, params.q_fixed[n]) for n, g in enumerate(joint.grids)]
    if joint.N == 1:
        return per[0]
    idx = joint.source_indices()
    F = per[0][idx[:, 0]].copy()
    for n in range(1, joint.N):
        F += per[n][idx[:, n]]
    return F


def joint_model(params: ModelParams, joint: JointGrid, measurements, fwd, normalize=False) -> hmm.DiscreteModel:
    if joint.N == 1:
        return hmm.DiscreteModel.from_params(params, joint.grids[0], measurements, fwd, 0, normalize)
    inits = [hmm.build_initial(params, g, n, normalize) for n, g in enumerate(joint.grids)]
    trans = [hmm.build_transition(params, g, n, normalize) for n, g in enumerate(joint.grids)]
    le = hmm.gaussian_loglik_rows(measurements, joint_fields(joint, params, fwd), params.V)
    return hmm.DiscreteModel(_kron_all(inits), _kron_all(trans), le)


def _joint_q(params, joint, xi, H, le, normalize):
    q = (xi * le).sum()
    for n, g in enumerate(joint.grids):
        xi_n = marginalize(xi, joint.shape, n)
        H_n = marginalize_pairs(H, joint.shape, n)
        mu, S0, A, b, S = params.location_blocks(n)
        li = hmm.initial_log_weights(mu, S0, g.centers, np.log(g.cell_volume))
        lt = hmm.transition_log_weights(A, b, S, g.centers, np.log(g.cell_volume))
        if normalize:
            li = li - logsumexp(li)
            lt = lt - logsumexp(lt, axis=1, keepdims=True)
        q = q + (H_n * lt).sum() + xi_n[0] @ li
    return float(q)


def _joint_m_step(params, joint, xi, H, Y, F, config):
    mask = config.update
    if not mask:
        return params
    blocks = {}
    for n, g in enumerate(joint.grids):
        blocks[n] = em.update_source_block(em.source_blocks(params, n), marginalize(xi, joint.shape, n),
                                           marginalize_pairs(H, joint.shape, n), g.centers,
                                           params.q_fixed[n], mask, config)
    V = em.update_V(Y, xi, F, config.scalar_V) if "V" in mask else None
    return em.assemble(params, blocks, V)


def joint_fit(measurements, joint: JointGrid, init: ModelParams, config: em.EmConfig, fwd,
              cap: int = JOINT_CAP):
    """EM on the flattened K^N chain.  Returns (params, joint posterior (T, K^N), trace)."""
    if joint.size > cap:
        raise JointTooLargeError(
            f"joint state space has {joint.size} states (cap {cap}); use switch_fit instead")
    if joint.N != init.N:
        raise ValueError("number of grids does not match number of sources")
    init.validate()
    Y = np.asarray(measurements, float)
    params = init
    trace = em.EmTrace()
    prev_ll = None
    F = joint_fields(joint, params, fwd)
    for it in range(1, config.max_iters + 1):
        model = joint_model(params, joint, Y, fwd, config.normalize)
        res = hmm.smooth(model)
        H = hmm.pairwise_sum(model, res)
        ll = res.log_likelihood
        if config.check_monotone:
            em._check_loglik(prev_ll, ll, it)
        prev_ll = ll
        q_old = _joint_q(params, joint, res.xi, H, model.log_emission, config.normalize)
        new = _joint_m_step(params, joint, res.xi, H, Y, F, config)
        le = hmm.gaussian_loglik_rows(Y, F, new.V) if "V" in config.update else model.log_emission
        q_new = _joint_q(new, joint, res.xi, H, le, config.normalize)
        gain = q_new - q_old
        if config.check_monotone:
            em._check_gain(gain, q_old, it)
        trace.record(q_new, gain, ll, params, new)
        params = new
        if em.converged(trace, config):
            trace.converged = True
            break
    model = joint_model(params, joint, Y, fwd, config.normalize)
    res = hmm.smooth(model)
    if config.check_monotone:
        em._check_loglik(prev_ll, res.log_likelihood, trace.n_iter + 1)
    trace.final_loglik = res.log_likelihood
    trace.posterior = res
    return params, res.xi, trace


@dataclass
class SwitchState:
    """Per-source marginals and the (T, 3) mean locations the other chains condition on."""
    zeta: List[np.ndarray]
    means: List[np.ndarray]
    log_likelihood: List[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.log_likelihood:
            self.log_likelihood = [0.0] * len(self.zeta)

    @classmethod
    def from_zeta(cls, zeta, grids):
        zeta = [np.asarray(z, float).copy() for z in zeta]
        return cls(zeta, [z @ g.centers for z, g in zip(zeta, grids)])

    @classmethod
    def prior(cls, params, grids, T, normalize=False):
        zeta = []
        for n, g in enumerate(grids):
            w = hmm.build_initial(params, g, n, normalize)
            zeta.append(np.tile(w / w.sum(), (T, 1)))
        return cls.from_zeta(zeta, grids)


@dataclass
class ChainStats:
    xi: np.ndarray
    eta_sum: np.ndarray
    log_emission: np.ndarray
    offset: np.ndarray
    fields: np.ndarray


def sweep(params, grids, Y, fwd, state: SwitchState, normalize=False) -> List[ChainStats]:
    """Run each source's chain in ascending order, updating ``state`` as it goes."""
    out = []
    for n, g in enumerate(grids):
        offset = np.zeros_like(Y)
        for m in range(len(grids)):
            if m != n:
                offset = offset + fwd.field_matrix(state.means[m], params.q_fixed[m])
        F = fwd.field_matrix(g.centers, params.q_fixed[n])
        le = hmm.gaussian_loglik_rows(Y - offset, F, params.V)
        model = hmm.DiscreteModel(hmm.build_initial(params, g, n, normalize),
                                  hmm.build_transition(params, g, n, normalize), le, g)
        res = hmm.smooth(model)
        state.zeta[n] = res.xi
        state.means[n] = res.xi @ g.centers
        state.log_likelihood[n] = res.log_likelihood
        out.append(ChainStats(res.xi, hmm.pairwise_sum(model, res), le, offset, F))
    return out


def _switch_q(params, grids, chains, normalize):
    q = 0.0
    for n, (g, c) in enumerate(zip(grids, chains)):
        q += em.chain_q(params, n, c.xi, c.eta_sum, g.centers, np.log(g.cell_volume), c.log_emission, normalize)
    return q


def switch_m_step(params, grids, chains, Y, config):
    mask = config.update
    if not mask:
        return params
    blocks = {}
    for n, c in enumerate(chains):
        blocks[n] = em.update_source_block(em.source_blocks(params, n), c.xi, c.eta_sum, grids[n].centers,
                                           params.q_fixed[n], mask, config)
    V = None
    if "V" in mask:
        # average of the per-chain residual covariances
        V = sum(em.update_V(Y - c.offset, c.xi, c.fields, config.scalar_V) for c in chains) / len(chains)
    return em.assemble(params, blocks, V)


def switch_iteration(params, grids, Y, fwd, state: SwitchState, config: em.EmConfig):
    """One sweep plus M-step.  Q is summed over the per-source chains."""
    chains = sweep(params, grids, Y, fwd, state, config.normalize)
    q_old = _switch_q(params, grids, chains, config.normalize)
    new = switch_m_step(params, grids, chains, Y, config)
    if "V" in config.update:
        for c in chains:
            c.log_emission = hmm.gaussian_loglik_rows(Y - c.offset, c.fields, new.V)
    q_new = _switch_q(new, grids, chains, config.normalize)
    gain = q_new - q_old
    if config.check_monotone:
        em._check_gain(gain, q_old, 0)
    return new, chains, q_new, gain


def switch_fit(measurements, grids: Sequence[VoxelGrid], init: ModelParams, config: em.EmConfig, fwd,
               state: Optional[SwitchState] = None):
    """EM with per-source conditional chains.  Returns (params, SwitchState, trace).

    ``state`` defaults to every source's discretized prior at all times.
    """
    grids = list(grids)
    if len(grids) != init.N:
        raise ValueError("number of grids does not match number of sources")
    init.validate()
    Y = np.asarray(measurements, float)
    params = init
    if state is None:
        state = SwitchState.prior(params, grids, Y.shape[0], config.normalize)
    trace = em.EmTrace()
    for it in range(1, config.max_iters + 1):
        new, _, q, gain = switch_iteration(params, grids, Y, fwd, state, config)
        trace.record(q, gain, float(sum(state.log_likelihood)), params, new)
        params = new
        if em.converged(trace, config):
            trace.converged = True
            break
    sweep(params, grids, Y, fwd, state, config.normalize)
    trace.final_loglik = float(sum(state.log_likelihood))
    return params, state, trace
