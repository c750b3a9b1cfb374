"""Linear-Gaussian source dynamics, the measurement model and the simulator.

A state for N sources is the stacked 6N-vector (p_1, q_1, ..., p_N, q_N):
location p (cm) followed by moment q for every source.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .forward import FieldConstants, ForwardModel
from .geometry import HeadModel, SensorArray
from .rng import make_rng

PARAM_NAMES = ("mu0", "Sigma0", "A", "b", "Sigma", "V")


class ParameterError(ValueError):
    pass


def loc_slice(n: int) -> slice:
    return slice(6 * n, 6 * n + 3)


def mom_slice(n: int) -> slice:
    return slice(6 * n + 3, 6 * n + 6)


def _check_psd(name, M, tol=1e-10):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ParameterError(f"{name} must be square")
    if not np.allclose(M, M.T, atol=tol * max(1.0, np.abs(M).max())):
        raise ParameterError(f"{name} is not symmetric")
    if M.size and np.linalg.eigvalsh(M).min() < -tol * max(1.0, np.abs(M).max()):
        raise ParameterError(f"{name} is not positive semidefinite")


def gaussian_factor(cov) -> np.ndarray:
    """S with S @ S.T == cov; works for singular PSD matrices."""
    cov = np.asarray(cov, dtype=float)
    _check_psd("covariance", cov)
    w, U = np.linalg.eigh(cov)
    return U * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class ModelParams:
    """The parameter list (mu0, Sigma0, A, b, Sigma, V) plus the fixed moments."""

    mu0: np.ndarray
    Sigma0: np.ndarray
    A: np.ndarray
    b: np.ndarray
    Sigma: np.ndarray
    V: np.ndarray
    q_fixed: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES + ("q_fixed",):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        object.__setattr__(self, "q_fixed", self.q_fixed.reshape(-1, 3))
        D = 6 * self.N
        if self.mu0.shape != (D,) or self.b.shape != (D,):
            raise ParameterError(f"mu0 and b must have length {D}")
        for name in ("Sigma0", "A", "Sigma"):
            if getattr(self, name).shape != (D, D):
                raise ParameterError(f"{name} must be {D}x{D}")
        if self.V.ndim != 2 or self.V.shape[0] != self.V.shape[1]:
            raise ParameterError("V must be a square L x L matrix")

    @property
    def N(self) -> int:
        return self.q_fixed.shape[0]

    @property
    def L(self) -> int:
        return self.V.shape[0]

    def validate(self):
        for name in ("Sigma0", "Sigma", "V"):
            _check_psd(name, getattr(self, name))
        D = 6 * self.N
        mask = np.zeros((D, D), dtype=bool)
        for n in range(self.N):
            mask[6 * n:6 * n + 6, 6 * n:6 * n + 6] = True
        for name in ("Sigma0", "A", "Sigma"):
            if np.any(getattr(self, name)[~mask] != 0):
                raise ParameterError(f"{name} must be block-diagonal by source")
        return self

    def replace(self, **kw) -> "ModelParams":
        return dataclasses.replace(self, **kw)

    def location_blocks(self, n: int):
        """(mu0, Sigma0, A, b, Sigma) restricted to source n's location coordinates."""
        s = loc_slice(n)
        return self.mu0[s], self.Sigma0[s, s], self.A[s, s], self.b[s], self.Sigma[s, s]

    def to_dict(self):
        d = {name: getattr(self, name).tolist() for name in PARAM_NAMES}
        d["q_fixed"] = self.q_fixed.tolist()
        d["N"] = self.N
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            p = cls(*(d[name] for name in PARAM_NAMES), q_fixed=d["q_fixed"])
        except KeyError as exc:
            raise ParameterError(f"missing parameter {exc}") from None
        if "N" in d and int(d["N"]) != p.N:
            raise ParameterError("N does not match q_fixed")
        return p

    def max_abs_change(self, other: "ModelParams") -> dict:
        return {name: float(np.max(np.abs(getattr(self, name) - getattr(other, name)), initial=0.0))
                for name in PARAM_NAMES}


def block_diag(blocks):
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        out[i:i + k, i:i + k] = b
        i += k
    return out


def stack_sources(sources, L, noise_var):
    """Build ModelParams from per-source dicts with 6-D mu0, Sigma0, A, b, Sigma (diagonals allowed)."""
    def mat(v):
        v = np.asarray(v, dtype=float)
        return np.diag(v) if v.ndim == 1 else v

    mu0 = np.concatenate([np.asarray(s["mu0"], float) for s in sources])
    return ModelParams(
        mu0=mu0,
        Sigma0=block_diag([mat(s["Sigma0"]) for s in sources]),
        A=block_diag([mat(s["A"]) for s in sources]),
        b=np.concatenate([np.asarray(s["b"], float) for s in sources]),
        Sigma=block_diag([mat(s["Sigma"]) for s in sources]),
        V=noise_var * np.eye(L),
        q_fixed=np.array([np.asarray(s["mu0"], float)[3:6] for s in sources]),
    )


CASE1_SOURCES = [dict(
    mu0=[-2, 1, 5, 3, 3, 3],
    Sigma0=[0.0225, 0.0225, 0.0225, 1e-4, 1e-4, 1e-4],
    A=[0.75, 0.8, 0.9, 1, 1, 1],
    b=[0.75, -0.5, 0.25, 0, 0, 0],
    Sigma=[0.25, 0.25, 0.25, 1e-4, 1e-4, 1e-4],
)]

CASE2_SOURCES = [
    dict(mu0=[1, 1, 5, 3, 3, 3],
         Sigma0=[0.01, 0.01, 0.01, 1e-4, 1e-4, 1e-4],
         A=[0.5, 0.8, 0.9, 1, 1, 1],
         b=[2, -1, 0.25, 0, 0, 0],
         Sigma=[0.25, 0.25, 0.09, 1e-4, 1e-4, 1e-4]),
    dict(mu0=[-1, 2, 4, 3, 3, 3],
         Sigma0=[0.01, 0.01, 0.01, 1e-4, 1e-4, 1e-4],
         A=[0.45, 0.75, 0.85, 1, 1, 1],
         b=[1.8, -0.8, 0.5, 0, 0, 0],
         Sigma=[0.25, 0.25, 0.09, 1e-4, 1e-4, 1e-4]),
]

#: measurement noise variance shared by both simulated cases
CASE_NOISE_VAR = 6.25e-5


def case1_params(L: int = 102) -> ModelParams:
    return stack_sources(CASE1_SOURCES, L, CASE_NOISE_VAR)


def case2_params(L: int = 102) -> ModelParams:
    return stack_sources(CASE2_SOURCES, L, CASE_NOISE_VAR)


def ar_mean(params: ModelParams, state) -> np.ndarray:
    return params.A @ np.asarray(state, dtype=float) + params.b


def stationary_location(params: ModelParams, n: int = 0) -> np.ndarray:
    """Fixed point of source n's location dynamics, solve (I - A*) p = b*."""
    _, _, A, b, _ = params.location_blocks(n)
    return np.linalg.solve(np.eye(3) - A, b)


@dataclass
class Trajectory:
    states: Optional[np.ndarray]  # (T, N, 6) or None for measurement-only data
    measurements: np.ndarray      # (T, L)

    def __post_init__(self):
        self.measurements = np.atleast_2d(np.asarray(self.measurements, dtype=float))
        if self.states is not None:
            self.states = np.asarray(self.states, dtype=float)
            if self.states.shape[0] != self.measurements.shape[0] or self.states.shape[2] != 6:
                raise ValueError("states must be (T, N, 6) and match measurements in T")

    @property
    def T(self) -> int:
        return self.measurements.shape[0]

    @property
    def locations(self) -> np.ndarray:
        return self.states[:, :, :3]


@dataclass
class SimConfig:
    params: ModelParams
    head: HeadModel
    sensors: SensorArray
    T: int
    seed: int
    consts: FieldConstants = field(default_factory=FieldConstants)
    max_attempts: int = 1000

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")


class SimulationError(RuntimeError):
    pass


def _inside(head, state, N):
    locs = state.reshape(N, 6)[:, :3]
    return bool(head.contains(locs).all())


def simulate(config: SimConfig) -> Trajectory:
    """Draw a trajectory; location exits from the head are rejection-resampled."""
    p = config.params.validate()
    N, T = p.N, config.T
    if p.L != config.sensors.count:
        raise ParameterError("V does not match the number of sensors")
    rng = make_rng(config.seed)
    S0 = gaussian_factor(p.Sigma0)
    S = gaussian_factor(p.Sigma)
    SV = gaussian_factor(p.V)
    fwd = ForwardModel(config.sensors, config.consts)

    def draw(mean, factor):
        for _ in range(config.max_attempts):
            x = mean + factor @ rng.standard_normal(mean.shape[0])
            if _inside(config.head, x, N):
                return x
        raise SimulationError(f"no in-head state after {config.max_attempts} attempts")

    states = np.empty((T, 6 * N))
    states[0] = draw(p.mu0, S0)
    for t in range(1, T):
        states[t] = draw(ar_mean(p, states[t - 1]), S)
    states = states.reshape(T, N, 6)

    noise = rng.standard_normal((T, p.L)) @ SV.T
    return Trajectory(states, clean_field(fwd, states) + noise)


def _per_time_field(fwd, src):
    # one dipole per time step, each with its own moment
    return fwd.field_matrix(src[:, :3], src[:, 3:6])


def clean_field(fwd: ForwardModel, states: np.ndarray) -> np.ndarray:
    """Noise-free measurements for a (T, N, 6) state array."""
    out = np.zeros((states.shape[0], fwd.L))
    for n in range(states.shape[1]):
        out += _per_time_field(fwd, states[:, n])
    return out


# ---------------------------------------------------------------------------
# CSV exchange
# ---------------------------------------------------------------------------

def fmt(x: float) -> str:
    return repr(float(x))


def trajectory_header(N: int, L: int, with_states: bool = True):
    cols = ["t"]
    if with_states:
        for n in range(1, N + 1):
            cols += [f"s{n}_{c}" for c in ("px", "py", "pz", "qx", "qy", "qz")]
    cols += [f"y{l}" for l in range(1, L + 1)]
    return cols


def write_trajectory_csv(path, traj: Trajectory):
    T, L = traj.measurements.shape
    with_states = traj.states is not None
    N = traj.states.shape[1] if with_states else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_header(N, L, with_states))
        for t in range(T):
            row = [str(t + 1)]
            if with_states:
                row += [fmt(v) for v in traj.states[t].ravel()]
            row += [fmt(v) for v in traj.measurements[t]]
            w.writerow(row)


def read_trajectory_csv(path) -> Trajectory:
    """Read a trajectory CSV or a measurement-only CSV (columns t, y1..yL)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if not body:
        raise ValueError(f"{path}: no data rows")
    if header[0] != "t":
        raise ValueError(f"{path}: first column must be 't'")
    y_cols = [i for i, h in enumerate(header) if h.startswith("y")]
    s_cols = [i for i, h in enumerate(header) if h.startswith("s")]
    if not y_cols:
        raise ValueError(f"{path}: no measurement columns")
    if len(s_cols) % 6:
        raise ValueError(f"{path}: state columns must come in groups of six")
    if any(len(r) != len(header) for r in body):
        raise ValueError(f"{path}: ragged rows")
    data = np.array([[float(v) for v in r] for r in body])
    states = data[:, s_cols].reshape(len(body), -1, 6) if s_cols else None
    return Trajectory(states, data[:, y_cols])
