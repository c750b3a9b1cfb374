import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dipole_grid import dynamic as dy
from dipole_grid import em
from dipole_grid import statespace as ss
from dipole_grid.forward import ForwardModel
from dipole_grid.geometry import HeadModel, RoiBox, discretize, place_sensors

HEAD = HeadModel()


def test_posterior_moments_hand():
    centers = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    mu, sd = dy.posterior_moments(np.array([[0.5, 0.5], [1.0, 0.0]]), centers)
    assert np.allclose(mu, [[1, 0, 0], [0, 0, 0]])
    assert np.allclose(sd, [[1, 0, 0], [0, 0, 0]])


def test_one_hot_collapses_then_widens():
    g = discretize(RoiBox(((0, 4), (0, 4), (0, 4))), (4, 4, 4))
    xi = np.zeros((3, g.K))
    xi[:, 21] = 1
    with pytest.warns(RuntimeWarning, match="zero width"):
        box = dy.shrink_roi(xi, g)
    c = g.centers[21]
    assert np.allclose(box.lower, c - 0.5) and np.allclose(box.upper, c + 0.5)


def test_uniform_posterior_symmetric():
    g = discretize(RoiBox(((-3, 3), (-2, 2), (1, 5))), (6, 4, 4))
    box = dy.shrink_roi(np.full((5, g.K), 1 / g.K), g, 1.0)
    assert np.allclose(box.centroid, g.roi.centroid)
    sd = np.sqrt(((np.arange(6) - 2.5) ** 2).mean())
    assert box.widths[0] == pytest.approx(2 * sd)


def test_multiplier_scales_interval():
    rng = np.random.default_rng(0)
    g = discretize(RoiBox(((-3, 3), (-2, 2), (1, 5))), (4, 4, 4))
    xi = rng.dirichlet(np.ones(g.K), size=3)
    a, b = dy.shrink_roi(xi, g, 1.0), dy.shrink_roi(xi, g, 2.0)
    assert b.contains_box(a)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 6.0))
def test_shrunk_roi_inside_head_box(seed, m):
    rng = np.random.default_rng(seed)
    g = discretize(RoiBox(((-12, 12), (-12, 12), (-2, 12))), (5, 5, 4))
    xi = rng.dirichlet(np.full(g.K, 0.3), size=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        box = dy.shrink_roi(xi, g, m, HEAD)
    assert HEAD.bounding_box().contains_box(box)


def test_one_hot_stationary_is_non_expanding():
    p = np.array([0.3, -1.2, 4.1])
    roi = RoiBox(((-10, 10), (-10, 10), (0, 10)))
    mesh = (5, 5, 5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(6):
            g = discretize(roi, mesh)
            k = int(np.argmin(np.linalg.norm(g.centers - p, axis=1)))
            xi = np.zeros((4, g.K))
            xi[:, k] = 1
            new = dy.shrink_roi(xi, g, 3.0, HEAD)
            assert roi.contains_box(new)
            roi, mesh = new, tuple(m + 1 for m in mesh)


def test_coverage_violations():
    box = RoiBox(((0, 1), (0, 1), (0, 1)))
    locs = np.array([[0.5, 0.5, 0.5], [2, 0, 0], [1, 1, 1]])
    assert dy.coverage_violations(box, locs) == 1


def test_config_validation():
    roi = RoiBox(((0, 1),) * 3)
    with pytest.raises(ValueError):
        dy.DynamicConfig(roi, sigma_multiplier=0)
    with pytest.raises(ValueError):
        dy.DynamicConfig(roi, mesh_increment=-1)
    with pytest.raises(ValueError):
        dy.DynamicConfig(roi, shrink="sometimes")


def _case1_small(T=20, L=20, seed=0):
    sens = place_sensors(HEAD, L, seed=1)
    fwd = ForwardModel(sens)
    p = ss.case1_params(L)
    traj = ss.simulate(ss.SimConfig(p, HEAD, sens, T, seed))
    roi = RoiBox(((-6, 6), (-6, 6), (0, 8)))
    init = p.replace(A=np.diag([0.8, 0.8, 0.8, 0, 0, 0]), b=np.array([0, 0, 1.0, 3, 3, 3]))
    return traj, fwd, p, roi, init


def test_trivial_config_reproduces_em_fit():
    traj, fwd, p, roi, init = _case1_small()
    cfg = em.EmConfig(max_iters=6)
    dcfg = dy.DynamicConfig(roi, (5, 5, 4), mesh_increment=0, shrink="never", max_outer_iters=6)
    a, tr_a = em.fit(traj.measurements, discretize(roi, (5, 5, 4)), init, cfg, fwd)
    b, grid, tr_b = dy.dynamic_fit(traj.measurements, init, dcfg, cfg, fwd)
    for name in ss.PARAM_NAMES:
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert tr_a.Q == tr_b.Q and tr_a.loglik == tr_b.loglik
    assert np.array_equal(tr_a.posterior.xi, tr_b.posterior.xi)
    assert tr_a.converged == tr_b.converged


def test_dynamic_fit_mesh_grows_and_reports():
    traj, fwd, p, roi, init = _case1_small(T=30)
    dcfg = dy.DynamicConfig(roi, (4, 4, 4), max_outer_iters=5, mesh_cap=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        est, grid, tr = dy.dynamic_fit(traj.measurements, init, dcfg, em.EmConfig(), fwd, HEAD,
                                       traj.locations[:, 0])
    K1 = [e["K1"] for e in tr.extra]
    assert K1 == sorted(K1) and max(K1) <= 6
    assert all("coverage_violations" in e for e in tr.extra)
    assert np.allclose(tr.posterior.xi.sum(1), 1)
    assert tr.posterior.xi.shape == (30, grid.K)
    assert np.all(est.A[3:] == 0)


def test_shrink_after_convergence_mode():
    traj, fwd, p, roi, init = _case1_small(T=20)
    dcfg = dy.DynamicConfig(roi, (4, 4, 4), max_outer_iters=8, mesh_increment=0, shrink="after_convergence")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        _, grid, tr = dy.dynamic_fit(traj.measurements, init, dcfg, em.EmConfig(tol=1e-4), fwd, HEAD)
    rois = [(e["roi_x_lo"], e["roi_x_hi"]) for e in tr.extra]
    # the ROI changes only after an inner convergence
    changes = [i for i in range(1, len(rois)) if rois[i] != rois[i - 1]]
    for i in changes:
        assert abs(tr.gain[i - 1]) <= 1e-4 * abs(tr.Q[i - 1])


def test_dynamic_switch_small():
    sens = place_sensors(HEAD, 20, seed=1)
    fwd = ForwardModel(sens)
    p = ss.case2_params(20)
    traj = ss.simulate(ss.SimConfig(p, HEAD, sens, 15, 0))
    dcfg = dy.DynamicConfig(RoiBox(((-6, 6), (-6, 6), (0, 8))), (3, 3, 3), max_outer_iters=3, mesh_cap=4)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        est, grids, state, tr = dy.dynamic_switch_fit(traj.measurements, p, dcfg, em.EmConfig(update={"b"}), fwd, HEAD,
                                                      traj.locations)
    assert len(grids) == 2 and tr.n_iter <= 3
    for z, g in zip(state.zeta, grids):
        assert z.shape == (15, g.K) and np.allclose(z.sum(1), 1)
    assert "s2_coverage_violations" in tr.extra[0]
