"""ROI shrinking and mesh refinement across EM iterations."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import em
from .geometry import HeadModel, RoiBox, VoxelGrid, discretize

log = logging.getLogger(__name__)

SHRINK_MODES = ("every", "after_convergence", "never")


@dataclass(frozen=True)
class DynamicConfig:
    initial_roi: RoiBox
    initial_mesh: tuple = (10, 10, 10)
    mesh_increment: int = 1
    sigma_multiplier: float = 3.0
    max_outer_iters: int = 15
    mesh_cap: int = 25
    shrink: str = "every"

    def __post_init__(self):
        if not self.sigma_multiplier > 0:
            raise ValueError("sigma_multiplier must be positive")
        if self.mesh_increment < 0:
            raise ValueError("mesh_increment must be >= 0")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.shrink not in SHRINK_MODES:
            raise ValueError(f"shrink must be one of {SHRINK_MODES}")
        object.__setattr__(self, "initial_mesh", tuple(int(m) for m in self.initial_mesh))


def posterior_moments(xi, centers):
    """Per-time posterior mean and standard deviation of each axis, both (T, 3)."""
    mu = xi @ centers
    var = xi @ centers**2 - mu**2
    # direct form where cancellation matters
    if np.any(var < 0):
        var = np.einsum("tk,tkd->td", xi, (centers[None, :, :] - mu[:, None, :]) ** 2)
    return mu, np.sqrt(np.maximum(var, 0.0))


def shrink_roi(xi, grid: VoxelGrid, multiplier: float = 3.0, head: Optional[HeadModel] = None) -> RoiBox:
    """[min_t(mu - m sigma), max_t(mu + m sigma)] per axis, clipped to the head's bounding box.

    A zero-width axis is widened to one voxel width around its center.
    """
    mu, sd = posterior_moments(np.asarray(xi, float), grid.centers)
    lo = (mu - multiplier * sd).min(axis=0)
    hi = (mu + multiplier * sd).max(axis=0)
    w = grid.widths
    for d in range(3):
        if hi[d] - lo[d] <= 0:
            warnings.warn(f"shrunken ROI has zero width on axis {d}; widening to one voxel", RuntimeWarning)
            mid = 0.5 * (lo[d] + hi[d])
            lo[d], hi[d] = mid - 0.5 * w[d], mid + 0.5 * w[d]
    box = RoiBox(tuple(zip(lo, hi)))
    if head is not None:
        box = box.clip_to(head.bounding_box())
    return box


def coverage_violations(roi: RoiBox, locations) -> int:
    """Number of time steps whose true location lies outside ``roi``."""
    p = np.asarray(locations, float).reshape(-1, 3)
    inside = np.all((p >= roi.lower) & (p <= roi.upper), axis=1)
    return int((~inside).sum())


def _next_mesh(mesh, dcfg):
    return tuple(min(m + dcfg.mesh_increment, max(dcfg.mesh_cap, m)) for m in mesh)


def dynamic_fit(measurements, init, dconfig: DynamicConfig, econfig: em.EmConfig, fwd,
                head: Optional[HeadModel] = None, true_locations=None):
    """EM with the ROI shrunk from each E-step's posterior and the mesh refined.

    Returns (params, final grid, trace).  Each trace row carries the ROI
    and mesh the iteration ran on.  The convergence test is the M-step gain
    relative to Q, both evaluated on the iteration's own grid.
    """
    init.validate()
    Y = np.asarray(measurements, float)
    roi, mesh = dconfig.initial_roi, dconfig.initial_mesh
    grid = discretize(roi, mesh)
    params = init
    trace = em.EmTrace()
    prev_ll, prev_grid = None, None
    for it in range(1, dconfig.max_outer_iters + 1):
        step = em.em_iteration(params, grid, Y, fwd, econfig)
        ll = step.estep.result.log_likelihood
        if econfig.check_monotone and prev_grid is grid:
            em._check_loglik(prev_ll, ll, it)
        prev_ll, prev_grid = ll, grid

        extra = {
            "roi_x_lo": grid.roi.lower[0], "roi_x_hi": grid.roi.upper[0],
            "roi_y_lo": grid.roi.lower[1], "roi_y_hi": grid.roi.upper[1],
            "roi_z_lo": grid.roi.lower[2], "roi_z_hi": grid.roi.upper[2],
            "K1": grid.mesh[0], "K2": grid.mesh[1], "K3": grid.mesh[2],
        }
        if true_locations is not None:
            extra["coverage_violations"] = coverage_violations(grid.roi, true_locations)
        trace.record(step.Q, step.gain, ll, params, step.params, **extra)
        params = step.params

        done = em.converged(trace, econfig)
        shrink = dconfig.shrink == "every" or (dconfig.shrink == "after_convergence" and done)
        new_roi = shrink_roi(step.estep.result.xi, grid, dconfig.sigma_multiplier, head) if shrink else grid.roi
        new_mesh = _next_mesh(grid.mesh, dconfig)
        changed = new_mesh != grid.mesh or new_roi != grid.roi
        if done and (dconfig.shrink == "every" or not changed):
            trace.converged = True
            break
        if it == dconfig.max_outer_iters:
            break
        if changed:
            grid = discretize(new_roi, new_mesh)
    em.finish(trace, params, grid, Y, fwd, econfig, prev_ll if prev_grid is grid else None)
    return params, grid, trace


def dynamic_switch_fit(measurements, init, dconfig: DynamicConfig, econfig: em.EmConfig, fwd,
                       head: Optional[HeadModel] = None, true_locations=None):
    """Switch procedure with a separate shrinking ROI and mesh per source.

    The chains condition on each other's posterior-mean locations, which
    carry over unchanged when a grid is rebuilt.  ``true_locations`` is
    (T, N, 3) when given.  Returns (params, grids, SwitchState, trace).
    """
    from . import multisource

    init.validate()
    Y = np.asarray(measurements, float)
    N = init.N
    grids = [discretize(dconfig.initial_roi, dconfig.initial_mesh) for _ in range(N)]
    params = init
    state = multisource.SwitchState.prior(params, grids, Y.shape[0], econfig.normalize)
    trace = em.EmTrace()
    for it in range(1, dconfig.max_outer_iters + 1):
        new, chains, q, gain = multisource.switch_iteration(params, grids, Y, fwd, state, econfig)
        extra = {}
        for n, gr in enumerate(grids):
            for d, ax in enumerate("xyz"):
                extra[f"s{n + 1}_roi_{ax}_lo"] = gr.roi.lower[d]
                extra[f"s{n + 1}_roi_{ax}_hi"] = gr.roi.upper[d]
            extra[f"s{n + 1}_K"] = gr.K
            if true_locations is not None:
                extra[f"s{n + 1}_coverage_violations"] = coverage_violations(
                    gr.roi, np.asarray(true_locations)[:, n])
        trace.record(q, gain, float(sum(state.log_likelihood)), params, new, **extra)
        params = new

        done = em.converged(trace, econfig)
        shrink = dconfig.shrink == "every" or (dconfig.shrink == "after_convergence" and done)
        new_grids, changed = [], False
        for gr, c in zip(grids, chains):
            roi = shrink_roi(c.xi, gr, dconfig.sigma_multiplier, head) if shrink else gr.roi
            mesh = _next_mesh(gr.mesh, dconfig)
            if roi != gr.roi or mesh != gr.mesh:
                changed = True
                gr = discretize(roi, mesh)
            new_grids.append(gr)
        if done and (dconfig.shrink == "every" or not changed):
            trace.converged = True
            break
        if it == dconfig.max_outer_iters:
            break
        grids = new_grids
    multisource.sweep(params, grids, Y, fwd, state, econfig.normalize)
    trace.final_loglik = float(sum(state.log_likelihood))
    return params, grids, state, trace
