import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dipole_grid import hmm
from dipole_grid import statespace as ss
from dipole_grid.cli import main

SMALL_ROI = [[-4, 2], [-2, 4], [3, 7]]


def write(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


def run(cmd, cfg, out, *extra):
    return main([cmd, "--config", str(cfg), "--out", str(out), *extra])


def snapshot(directory: Path):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture
def sim(tmp_path):
    cfg = write(tmp_path / "sim.json", {"model": {"case": "case1"}, "sensors": {"count": 12, "seed": 3},
                                         "T": 8, "seed": 1})
    assert run("simulate", cfg, tmp_path / "sim") == 0
    return tmp_path


def test_simulate_case1_layout(tmp_path):
    cfg = write(tmp_path / "c.json", {"model": {"case": "case1"}, "sensors": {"count": 102, "seed": 7}, "T": 100})
    assert run("simulate", cfg, tmp_path / "out") == 0
    rows = list(csv.reader(open(tmp_path / "out" / "trajectory.csv")))
    assert len(rows) == 101 and all(len(r) == 1 + 6 + 102 for r in rows)
    meta = json.loads((tmp_path / "out" / "metadata.json").read_text())
    assert meta["seed"] == 0 and meta["params"]["N"] == 1
    assert json.loads((tmp_path / "out" / "sensors.json").read_text())["count"] == 102


def test_simulate_single_step(tmp_path):
    cfg = write(tmp_path / "c.json", {"model": {"case": "case2"}, "sensors": {"count": 5}, "T": 1})
    assert run("simulate", cfg, tmp_path / "out") == 0
    assert len((tmp_path / "out" / "trajectory.csv").read_text().splitlines()) == 2


def test_simulate_explicit_sources(tmp_path):
    src = {"mu0": [0, 0, 5, 1, 0, 0], "Sigma0": [0.01] * 6, "A": [0.9] * 6, "b": [0, 0, 0.5, 0, 0, 0],
           "Sigma": [0.01] * 6}
    cfg = write(tmp_path / "c.json", {"model": {"sources": [src], "noise_var": 1e-4},
                                       "sensors": {"count": 4}, "T": 3})
    assert run("simulate", cfg, tmp_path / "out") == 0


@pytest.mark.parametrize("bad", [
    "{not json",
    json.dumps({"model": {"case": "case1"}, "sensors": {"count": 5}}),
    json.dumps({"model": {"case": "case1"}, "sensors": {"count": 5}, "T": 3, "colour": "red"}),
    json.dumps({"model": {"case": "case9"}, "sensors": {"count": 5}, "T": 3}),
    json.dumps({"model": {"case": "case1"}, "sensors": {"count": 0}, "T": 3}),
])
def test_bad_config_exit_2(tmp_path, bad, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(bad)
    assert run("simulate", cfg, tmp_path / "out") == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_and_bad_args(tmp_path):
    assert run("simulate", tmp_path / "nope.json", tmp_path / "out") == 2
    assert main(["explode", "--config", "x", "--out", "y"]) == 2


def test_seed_override(sim):
    cfg = sim / "sim.json"
    assert run("simulate", cfg, sim / "s5", "--seed", "5") == 0
    assert json.loads((sim / "s5" / "metadata.json").read_text())["seed"] == 5
    assert (sim / "s5" / "trajectory.csv").read_bytes() != (sim / "sim" / "trajectory.csv").read_bytes()


def fit_cfg(sim, **kw):
    cfg = {"data": "sim/trajectory.csv", "sensors": {"file": "sim/sensors.json"},
           "init": {"params_file": "sim/metadata.json"}, "roi": SMALL_ROI, "mesh": [3, 3, 3]}
    cfg.update(kw)
    return write(sim / "fit.json", cfg)


def test_fit_empty_mask_echoes_params(sim):
    assert run("fit", fit_cfg(sim, em={"update": [], "max_iters": 1}), sim / "fit") == 0
    out = json.loads((sim / "fit" / "params.json").read_text())
    meta = json.loads((sim / "sim" / "metadata.json").read_text())
    assert out["params"] == meta["params"]
    posts = hmm.read_posterior_csv(sim / "fit" / "posterior.csv")
    assert np.allclose(posts[1][0].sum(1), 1.0)


def test_fit_dynamic_zero_moment_blocks(sim):
    cfg = fit_cfg(sim, procedure={"dynamic": True}, default_dynamics=True, dynamic={"max_outer_iters": 3})
    assert run("fit", cfg, sim / "fit") == 0
    A = np.array(json.loads((sim / "fit" / "params.json").read_text())["params"]["A"])
    assert np.all(A[3:, :] == 0) and np.all(A[:, 3:] == 0)
    header = (sim / "fit" / "trace.csv").read_text().splitlines()[0]
    assert "roi_x_lo" in header and "coverage_violations" in header


def test_fit_numeric_failure_exit_1(sim, capsys):
    # one z-layer: the A update has nothing to regress on
    cfg = fit_cfg(sim, roi=[[-4, 2], [-2, 4], [5, 5]], mesh=[2, 2, 1])
    assert run("fit", cfg, sim / "fit") == 1
    assert "singular" in capsys.readouterr().err


def test_fit_missing_data_exit_2(sim):
    assert run("fit", fit_cfg(sim, data="sim/nothing.csv"), sim / "fit") == 2


def test_measurement_only_ingestion(tmp_path):
    # a 102-channel recording with a separate sensors file
    from dipole_grid.geometry import HeadModel, place_sensors
    sens = place_sensors(HeadModel(), 102, seed=7)
    (tmp_path / "sensors.json").write_text(sens.to_json())
    rng = np.random.default_rng(0)
    ss.write_trajectory_csv(tmp_path / "rec.csv", ss.Trajectory(None, rng.normal(size=(6, 102)) * 1e-2))
    write(tmp_path / "p.json", ss.case1_params(102).to_dict())
    cfg = write(tmp_path / "fit.json", {"data": "rec.csv", "sensors": {"file": "sensors.json"},
                                         "init": {"params_file": "p.json"}, "roi": SMALL_ROI, "mesh": [2, 2, 2],
                                         "em": {"update": ["V"], "max_iters": 2}})
    assert run("fit", cfg, tmp_path / "out") == 0
    with_wrong = write(tmp_path / "fit2.json", {"data": "rec.csv", "sensors": {"count": 50},
                                                 "init": {"case": "case1"}, "roi": SMALL_ROI})
    assert run("fit", with_wrong, tmp_path / "out2") == 2


def test_two_source_fit_writes_source_column(tmp_path):
    cfg = write(tmp_path / "sim.json", {"model": {"case": "case2"}, "sensors": {"count": 20, "seed": 1},
                                         "T": 6})
    assert run("simulate", cfg, tmp_path / "sim") == 0
    base = {"data": "sim/trajectory.csv", "sensors": {"file": "sim/sensors.json"},
            "init": {"params_file": "sim/metadata.json"}, "roi": [[-3, 3], [-1, 3], [3, 6]],
            "mesh": [2, 2, 1], "em": {"update": ["b"], "max_iters": 2}}
    write(tmp_path / "fit.json", base)
    assert run("fit", tmp_path / "fit.json", tmp_path / "switch") == 0
    assert (tmp_path / "switch" / "posterior.csv").read_text().startswith("source,t,k,x,y,z,xi\n")
    write(tmp_path / "joint.json", dict(base, procedure={"switch": False}))
    assert run("fit", tmp_path / "joint.json", tmp_path / "joint") == 0
    posts = hmm.read_posterior_csv(tmp_path / "joint" / "posterior.csv")
    assert sorted(posts) == [1, 2] and np.allclose(posts[2][0].sum(1), 1)
    write(tmp_path / "dj.json", dict(base, procedure={"switch": False, "dynamic": True}))
    assert run("fit", tmp_path / "dj.json", tmp_path / "dj") == 2


def compare_cfg(path, **kw):
    cfg = {"model": {"case": "case1"}, "sensors": {"count": 12, "seed": 3}, "T": 8, "replications": 2,
           "roi": SMALL_ROI, "mesh": [3, 3, 3], "dynamic": {"max_outer_iters": 2}, "em": {"max_iters": 3}}
    cfg.update(kw)
    return write(path, cfg)


def test_compare_layout(tmp_path):
    assert run("compare", compare_cfg(tmp_path / "c.json"), tmp_path / "out") == 0
    rows = list(csv.reader(open(tmp_path / "out" / "metrics.csv")))
    assert rows[0] == ["procedure", "replication", "seed", "A_err", "b_err"]
    assert len(rows) == 1 + 2 * (2 + 2)
    assert [r[1] for r in rows[1:5]] == ["1", "2", "mean", "std"]
    # both procedures consumed the same seeds
    assert [r[2] for r in rows[1:3]] == [r[2] for r in rows[5:7]] == ["0", "1"]


def test_compare_single_replication_empty_std(tmp_path):
    assert run("compare", compare_cfg(tmp_path / "c.json", replications=1), tmp_path / "out") == 0
    rows = list(csv.reader(open(tmp_path / "out" / "metrics.csv")))
    std = [r for r in rows if r[1] == "std"]
    assert len(std) == 2 and all(r[3] == "" and r[4] == "" for r in std)


def test_compare_rejects_switch_for_one_source(tmp_path):
    cfg = compare_cfg(tmp_path / "c.json", procedures=["dynamic_switch"])
    assert run("compare", cfg, tmp_path / "out") == 2


def test_plot_outputs(sim):
    assert run("fit", fit_cfg(sim, em={"max_iters": 2}), sim / "fit") == 0
    cfg = write(sim / "plot.json", {"posterior": "fit/posterior.csv", "trajectory": "sim/trajectory.csv",
                                     "bar_times": [1, 8]})
    assert run("plot", cfg, sim / "plot") == 0
    names = sorted(p.name for p in (sim / "plot").iterdir())
    assert names == ["marginal_t1.svg", "marginal_t8.svg", "posterior_mean_x.svg", "posterior_mean_y.svg",
                     "posterior_mean_z.svg"]
    text = (sim / "plot" / "posterior_mean_x.svg").read_text()
    assert text.startswith("<svg") and text.count("<polyline") == 2


def test_plot_empty_posterior_exit_2(tmp_path):
    (tmp_path / "post.csv").write_text("")
    cfg = write(tmp_path / "plot.json", {"posterior": "post.csv"})
    assert run("plot", cfg, tmp_path / "out") == 2
    cfg = write(tmp_path / "plot2.json", {"posterior": "missing.csv"})
    assert run("plot", cfg, tmp_path / "out") == 2


def test_every_command_byte_identical(sim):
    fit = fit_cfg(sim, procedure={"dynamic": True}, dynamic={"max_outer_iters": 2})
    plot = write(sim / "plot.json", {"posterior": "fit1/posterior.csv", "trajectory": "sim/trajectory.csv",
                                      "bar_times": [3]})
    cmp = compare_cfg(sim / "cmp.json", replications=1)
    for i in (1, 2):
        assert run("simulate", sim / "sim.json", sim / f"sim{i}") == 0
        assert run("fit", fit, sim / f"fit{i}") == 0
        assert run("plot", plot, sim / f"plot{i}") == 0
        assert run("compare", cmp, sim / f"cmp{i}") == 0
    for name in ("sim", "fit", "plot", "cmp"):
        assert snapshot(sim / f"{name}1") == snapshot(sim / f"{name}2")
