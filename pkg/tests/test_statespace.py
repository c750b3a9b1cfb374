import numpy as np
import pytest

from dipole_grid import statespace as ss
from dipole_grid.forward import ForwardModel
from dipole_grid.geometry import HeadModel, SensorArray, place_sensors


def test_ar_mean_examples():
    p = ss.case1_params(4)
    x = np.array([-2.0, 1, 5, 3, 3, 3])
    assert np.allclose(ss.ar_mean(p, x), [-0.75, 0.3, 4.75, 3, 3, 3])
    assert np.array_equal(ss.ar_mean(p.replace(A=np.eye(6), b=np.zeros(6)), x), x)
    assert np.array_equal(ss.ar_mean(p.replace(A=np.zeros((6, 6))), x), p.b)


def test_stationary_location_case1():
    assert np.allclose(ss.stationary_location(ss.case1_params(3)), [3.0, -2.5, 2.5])


def test_case_shapes():
    p1, p2 = ss.case1_params(102), ss.case2_params(102)
    assert (p1.N, p1.L, p2.N) == (1, 102, 2)
    assert p2.A.shape == (12, 12)
    assert np.allclose(p2.q_fixed, 3.0)
    p1.validate()
    p2.validate()


def test_simulate_case1_shape(head):
    sens = place_sensors(head, 102, seed=7)
    tr = ss.simulate(ss.SimConfig(ss.case1_params(102), head, sens, 100, 0))
    assert tr.measurements.shape == (100, 102)
    assert tr.states.shape == (100, 1, 6)
    assert np.all(head.contains(tr.locations[:, 0]))


def test_simulate_reproducible(head):
    sens = place_sensors(head, 20, seed=1)
    cfg = ss.SimConfig(ss.case2_params(20), head, sens, 30, 5)
    a, b = ss.simulate(cfg), ss.simulate(cfg)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.measurements, b.measurements)
    c = ss.simulate(ss.SimConfig(ss.case2_params(20), head, sens, 30, 6))
    assert not np.array_equal(a.measurements, c.measurements)


def test_degenerate_noise_is_constant(head):
    sens = place_sensors(head, 8, seed=2)
    p = ss.case1_params(8)
    z = np.zeros((6, 6))
    p = p.replace(Sigma0=z, Sigma=z, V=np.zeros((8, 8)), A=np.eye(6), b=np.zeros(6))
    tr = ss.simulate(ss.SimConfig(p, head, sens, 5, 0))
    assert np.all(tr.states == p.mu0.reshape(1, 1, 6))
    assert np.all(tr.measurements == tr.measurements[0])
    expected = ForwardModel(sens).field_matrix(p.mu0[None, :3], p.mu0[3:])[0]
    assert np.allclose(tr.measurements[0], expected, rtol=1e-14)


def test_location_tracks_fixed_point(head):
    sens = place_sensors(head, 5, seed=2)
    tr = ss.simulate(ss.SimConfig(ss.case1_params(5), head, sens, 3000, 3))
    mean = tr.locations[100:, 0].mean(axis=0)
    assert np.allclose(mean, [3.0, -2.5, 2.5], atol=0.3)


def test_moment_stays_in_envelope(head):
    sens = place_sensors(head, 5, seed=2)
    tr = ss.simulate(ss.SimConfig(ss.case1_params(5), head, sens, 500, 4))
    q = tr.states[:, 0, 3:]
    steps = np.abs(np.diff(q, axis=0))
    assert steps.max() < 5 * 1e-2


def test_noise_covariance_converges(head):
    sens = place_sensors(head, 6, seed=2)
    p = ss.case1_params(6)
    V = np.diag([1.0, 2, 3, 1, 2, 3]) * 1e-4
    V[0, 1] = V[1, 0] = 0.5e-4
    p = p.replace(V=V)
    tr = ss.simulate(ss.SimConfig(p, head, sens, 10000, 9))
    resid = tr.measurements - ss.clean_field(ForwardModel(sens), tr.states)
    emp = np.cov(resid.T, bias=True)
    assert np.linalg.norm(emp - V) / np.linalg.norm(V) < 0.1


def test_validate_rejects_bad_covariances():
    p = ss.case1_params(3)
    bad = p.Sigma.copy()
    bad[0, 0] = -1
    with pytest.raises(ss.ParameterError):
        p.replace(Sigma=bad).validate()
    p2 = ss.case2_params(3)
    A = p2.A.copy()
    A[0, 7] = 0.1
    with pytest.raises(ss.ParameterError):
        p2.replace(A=A).validate()
    with pytest.raises(ss.ParameterError):
        ss.ModelParams(np.zeros(5), np.eye(6), np.eye(6), np.zeros(6), np.eye(6), np.eye(2), np.ones(3))


def test_sensor_count_mismatch(head):
    with pytest.raises(ss.ParameterError):
        ss.simulate(ss.SimConfig(ss.case1_params(4), head, place_sensors(head, 5, seed=0), 3, 0))


def test_rejection_gives_up(head):
    p = ss.case1_params(3)
    p = p.replace(mu0=np.array([30.0, 0, 0, 3, 3, 3]))
    cfg = ss.SimConfig(p, head, place_sensors(head, 3, seed=0), 2, 0, max_attempts=20)
    with pytest.raises(ss.SimulationError):
        ss.simulate(cfg)


def test_single_step(head):
    tr = ss.simulate(ss.SimConfig(ss.case1_params(4), head, place_sensors(head, 4, seed=0), 1, 0))
    assert tr.T == 1


def test_params_dict_roundtrip():
    p = ss.case2_params(7)
    back = ss.ModelParams.from_dict(p.to_dict())
    for name in ss.PARAM_NAMES + ("q_fixed",):
        assert np.array_equal(getattr(back, name), getattr(p, name))
    d = p.to_dict()
    del d["A"]
    with pytest.raises(ss.ParameterError):
        ss.ModelParams.from_dict(d)


def test_trajectory_csv_roundtrip(tmp_path, head):
    sens = place_sensors(head, 4, seed=0)
    tr = ss.simulate(ss.SimConfig(ss.case2_params(4), head, sens, 3, 1))
    path = tmp_path / "traj.csv"
    ss.write_trajectory_csv(path, tr)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ss.trajectory_header(2, 4) and len(header) == 1 + 12 + 4
    back = ss.read_trajectory_csv(path)
    assert np.array_equal(back.states, tr.states) and np.array_equal(back.measurements, tr.measurements)


def test_measurement_only_csv(tmp_path):
    # shaped like a 102-channel recording
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(7, 102)) * 1e-3
    path = tmp_path / "meas.csv"
    ss.write_trajectory_csv(path, ss.Trajectory(None, Y))
    assert path.read_text().splitlines()[0].split(",")[:3] == ["t", "y1", "y2"]
    back = ss.read_trajectory_csv(path)
    assert back.states is None and np.array_equal(back.measurements, Y)


@pytest.mark.parametrize("text", ["", "t,y1\n", "x,y1\n1,2\n", "t,s1_px\n1,2\n", "t,y1,y2\n1,2\n"])
def test_bad_csv(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ValueError):
        ss.read_trajectory_csv(path)
