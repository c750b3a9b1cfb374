"""Command-line front end: ``dipole-grid simulate|fit|compare|plot``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 invalid config
or input file.  Relative paths inside a config are resolved against the
config file's directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, dynamic, em, hmm, multisource, svg
from . import statespace as ss
from .forward import FieldConstants, ForwardModel
from .geometry import HeadModel, Modality, RoiBox, SensorArray, discretize, place_sensors
from .schemas import SCHEMAS

log = logging.getLogger("dipole_grid")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def load_config(path, command):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: schema error at {where}: {exc.message}") from None
    return cfg


def _resolve(base: Path, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def build_head(cfg):
    h = cfg.get("head", {})
    return HeadModel(np.asarray(h.get("center", [0.0, 0.0, 0.0])), h.get("radius", 10.0))


def build_sensors(cfg, base, head):
    s = cfg["sensors"]
    if "file" in s:
        path = _resolve(base, s["file"])
        try:
            return SensorArray.from_json(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"sensors file not found: {path}") from None
    sensors = place_sensors(head, s["count"], s.get("seed", 0), s.get("offset", 0.5),
                            Modality(s.get("modality", "MEG")), s.get("conductivity"))
    sensors.check_outside(head)
    return sensors


def build_params(spec, base, L):
    if "case" in spec:
        return {"case1": ss.case1_params, "case2": ss.case2_params}[spec["case"]](L)
    if "params_file" in spec:
        path = _resolve(base, spec["params_file"])
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"params file not found: {path}") from None
        p = ss.ModelParams.from_dict(d.get("params", d))
    else:
        p = ss.stack_sources(spec["sources"], L, spec["noise_var"])
    if p.L != L:
        raise ConfigError(f"parameters are for {p.L} sensors but {L} are configured")
    return p


def em_config(cfg):
    d = dict(cfg.get("em", {}))
    if "update" in d:
        d["update"] = frozenset(d["update"])
    return em.EmConfig(**d)


def dynamic_config(cfg):
    d = dict(cfg.get("dynamic", {}))
    return dynamic.DynamicConfig(initial_roi=RoiBox(tuple(map(tuple, cfg["roi"]))),
                                 initial_mesh=tuple(cfg.get("mesh", [10, 10, 10])), **d)


def with_default_dynamics(params, grid):
    """Replace each source's location A, b with the default starting values."""
    d = em.default_init(grid, params.L, params.q_fixed[0], 1.0)
    A, b = params.A.copy(), params.b.copy()
    for n in range(params.N):
        s = ss.loc_slice(n)
        A[s, s] = d.A[:3, :3]
        b[s] = d.b[:3]
    return params.replace(A=A, b=b)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_marginals(path, xis, grids):
    for n, (xi, g) in enumerate(zip(xis, grids)):
        hmm.write_posterior_csv(path, xi, g.centers, source=n + 1, mode="w" if n == 0 else "a")


def location_errors(est: ss.ModelParams, true: ss.ModelParams):
    """Max-abs errors of the location blocks of A and b over all sources."""
    ea = eb = 0.0
    for n in range(true.N):
        s = ss.loc_slice(n)
        ea = max(ea, float(np.abs(est.A[s, s] - true.A[s, s]).max()))
        eb = max(eb, float(np.abs(est.b[s] - true.b[s]).max()))
    return ea, eb


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

class FitResult:
    def __init__(self, params, grids, xis, trace):
        self.params, self.grids, self.xis, self.trace = params, grids, xis, trace


def run_pipeline(Y, init, cfg, fwd, head, use_dynamic, use_switch, true_locations=None) -> FitResult:
    ecfg = em_config(cfg)
    roi = RoiBox(tuple(map(tuple, cfg["roi"])))
    mesh = tuple(cfg.get("mesh", [10, 10, 10]))
    N = init.N
    if use_dynamic:
        dcfg = dynamic_config(cfg)
        if N == 1:
            tl = None if true_locations is None else true_locations[:, 0]
            p, grid, tr = dynamic.dynamic_fit(Y, init, dcfg, ecfg, fwd, head, tl)
            return FitResult(p, [grid], [tr.posterior.xi], tr)
        if not use_switch:
            raise ConfigError("the dynamic procedure with several sources needs the switch procedure")
        p, grids, st, tr = dynamic.dynamic_switch_fit(Y, init, dcfg, ecfg, fwd, head, true_locations)
        return FitResult(p, grids, st.zeta, tr)
    grid = discretize(roi, mesh)
    if N == 1:
        p, tr = em.fit(Y, grid, init, ecfg, fwd)
        return FitResult(p, [grid], [tr.posterior.xi], tr)
    if use_switch:
        p, st, tr = multisource.switch_fit(Y, [grid] * N, init, ecfg, fwd)
        return FitResult(p, [grid] * N, st.zeta, tr)
    joint = multisource.JointGrid([grid] * N)
    p, xi, tr = multisource.joint_fit(Y, joint, init, ecfg, fwd)
    return FitResult(p, [grid] * N, [multisource.marginalize(xi, joint.shape, n) for n in range(N)], tr)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg, base, out: Path, seed):
    head = build_head(cfg)
    sensors = build_sensors(cfg, base, head)
    params = build_params(cfg["model"], base, sensors.count)
    seed = cfg.get("seed", 0) if seed is None else seed
    consts = FieldConstants(kappa=cfg.get("kappa", 1.0))
    traj = ss.simulate(ss.SimConfig(params, head, sensors, cfg["T"], seed, consts))
    ss.write_trajectory_csv(out / "trajectory.csv", traj)
    (out / "sensors.json").write_text(sensors.to_json() + "\n")
    _dump_json(out / "metadata.json", {
        "version": __version__, "seed": seed, "T": cfg["T"], "kappa": consts.kappa,
        "head": head.to_dict(), "params": params.to_dict(), "config": cfg,
    })


def cmd_fit(cfg, base, out: Path, seed):
    head = build_head(cfg)
    data_path = _resolve(base, cfg["data"])
    if not data_path.exists():
        raise ConfigError(f"measurement file not found: {data_path}")
    traj = ss.read_trajectory_csv(data_path)
    sensors = build_sensors(cfg, base, head)
    if traj.measurements.shape[1] != sensors.count:
        raise ConfigError(f"data has {traj.measurements.shape[1]} channels but {sensors.count} sensors")
    fwd = ForwardModel(sensors, FieldConstants(kappa=cfg.get("kappa", 1.0)))
    init = build_params(cfg["init"], base, sensors.count)
    roi = RoiBox(tuple(map(tuple, cfg["roi"])))
    if cfg.get("default_dynamics", False):
        init = with_default_dynamics(init, discretize(roi, tuple(cfg.get("mesh", [10, 10, 10]))))
    proc = cfg.get("procedure", {})
    truth = traj.locations if traj.states is not None and traj.states.shape[1] == init.N else None
    res = run_pipeline(traj.measurements, init, cfg, fwd, head, proc.get("dynamic", False),
                       proc.get("switch", init.N > 1), truth)
    _dump_json(out / "params.json", {
        "params": res.params.to_dict(),
        "converged": res.trace.converged,
        "iterations": res.trace.n_iter,
        "final_loglik": res.trace.final_loglik,
        "grids": [{"roi": g.roi.to_list(), "mesh": list(g.mesh)} for g in res.grids],
    })
    if init.N == 1:
        hmm.write_posterior_csv(out / "posterior.csv", res.xis[0], res.grids[0].centers)
    else:
        write_marginals(out / "posterior.csv", res.xis, res.grids)
    res.trace.write_csv(out / "trace.csv")


PROCEDURES = ("dynamic", "nondynamic", "dynamic_switch", "nondynamic_switch", "nondynamic_joint")


def _procedure_flags(name):
    return name.startswith("dynamic"), name.endswith("switch")


def cmd_compare(cfg, base, out: Path, seed):
    head = build_head(cfg)
    sensors = build_sensors(cfg, base, head)
    truth = build_params(cfg["model"], base, sensors.count)
    consts = FieldConstants(kappa=cfg.get("kappa", 1.0))
    fwd = ForwardModel(sensors, consts)
    base_seed = cfg.get("seed", 0) if seed is None else seed
    seeds = [base_seed + r for r in range(cfg.get("replications", 4))]
    default = ["dynamic", "nondynamic"] if truth.N == 1 else ["dynamic_switch", "nondynamic_switch"]
    procs = cfg.get("procedures", default)
    for name in procs:
        if truth.N == 1 and (name.endswith("switch") or name.endswith("joint")):
            raise ConfigError(f"procedure {name} needs several sources")
        if truth.N > 1 and name in ("dynamic", "nondynamic"):
            raise ConfigError(f"procedure {name} is single-source; use a _switch or _joint variant")
    roi = RoiBox(tuple(map(tuple, cfg["roi"])))
    grid0 = discretize(roi, tuple(cfg.get("mesh", [10, 10, 10])))
    init = with_default_dynamics(truth, grid0) if cfg.get("default_dynamics", True) else truth

    errors = {name: [] for name in procs}
    for s in seeds:
        # both procedures consume the same simulated record
        traj = ss.simulate(ss.SimConfig(truth, head, sensors, cfg["T"], s, consts))
        for name in procs:
            dyn, sw = _procedure_flags(name)
            res = run_pipeline(traj.measurements, init, cfg, fwd, head, dyn, sw, traj.locations)
            errors[name].append(location_errors(res.params, truth))
            log.info("seed %d %s: A err %.4f, b err %.4f", s, name, *errors[name][-1])

    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["procedure", "replication", "seed", "A_err", "b_err"])
        for name in procs:
            e = np.array(errors[name])
            for r, s in enumerate(seeds):
                w.writerow([name, str(r + 1), str(s), ss.fmt(e[r, 0]), ss.fmt(e[r, 1])])
            w.writerow([name, "mean", "", ss.fmt(e[:, 0].mean()), ss.fmt(e[:, 1].mean())])
            if len(seeds) > 1:
                sd = e.std(axis=0, ddof=1)
                w.writerow([name, "std", "", ss.fmt(sd[0]), ss.fmt(sd[1])])
            else:
                w.writerow([name, "std", "", "", ""])


def cmd_plot(cfg, base, out: Path, seed):
    path = _resolve(base, cfg["posterior"])
    if not path.exists():
        raise ConfigError(f"posterior file not found: {path}")
    posts = hmm.read_posterior_csv(path)
    truth = None
    if "trajectory" in cfg:
        tpath = _resolve(base, cfg["trajectory"])
        if not tpath.exists():
            raise ConfigError(f"trajectory file not found: {tpath}")
        traj = ss.read_trajectory_csv(tpath)
        truth = traj.locations if traj.states is not None else None
    many = len(posts) > 1
    for s in sorted(posts):
        xi, centers = posts[s]
        T = xi.shape[0]
        mean = xi @ centers
        t = np.arange(1, T + 1)
        prefix = f"s{s}_" if many else ""
        for d, ax in enumerate("xyz"):
            series = [("posterior mean", mean[:, d], False)]
            if truth is not None and truth.shape[1] >= s:
                series.append(("true", truth[:, s - 1, d], True))
            title = f"{'source %d, ' % s if many else ''}{ax} location"
            (out / f"{prefix}posterior_mean_{ax}.svg").write_text(
                svg.line_plot(t, series, title, "time point", f"{ax} (cm)"))
        for tt in cfg.get("bar_times", []):
            if not 1 <= tt <= T:
                raise ConfigError(f"bar_times entry {tt} outside 1..{T}")
            (out / f"{prefix}marginal_t{tt}.svg").write_text(
                svg.bar_chart(xi[tt - 1], f"posterior over voxels at t = {tt}", "voxel index", "probability"))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "compare": cmd_compare, "plot": cmd_plot}


def build_parser():
    p = argparse.ArgumentParser(prog="dipole-grid", description="Voxel-grid dipole tracking.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, Path(args.config).resolve().parent, out, args.seed)
    except (em.MonotonicityError, ss.SimulationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
