"""Current-dipole forward models.

Lengths are in cm.  With the default ``kappa = 1`` fields come out in
normalized units; set ``kappa = 1e-7`` (mu_0 / 4 pi in SI) for tesla with
metre inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .geometry import Modality, SensorArray

#: sensors closer than this to a dipole are rejected as singular
SINGULAR_DISTANCE = 1e-6


class SingularityError(ValueError):
    pass


@dataclass(frozen=True)
class DipoleState:
    location: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "location", np.asarray(self.location, dtype=float).reshape(3))
        object.__setattr__(self, "moment", np.asarray(self.moment, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.location, self.moment])


@dataclass(frozen=True)
class FieldConstants:
    kappa: float = 1.0
    e_z: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]), repr=False)

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")


def _check_distance(points, sensor_pos):
    if _kernels.min_distance(points, sensor_pos) < SINGULAR_DISTANCE:
        raise SingularityError("a sensor coincides with a dipole location")


def meg_field(state: DipoleState, sensors: SensorArray, consts: FieldConstants = FieldConstants()) -> np.ndarray:
    """Tangential (z-projected) field of one dipole at every sensor."""
    p = state.location[None, :]
    _check_distance(p, sensors.positions)
    return _kernels.meg_field_matrix(p, state.moment[None, :], sensors.positions, consts.kappa)[0]


def eeg_potential(state: DipoleState, sensors: SensorArray, consts: FieldConstants = FieldConstants()) -> np.ndarray:
    sigma = sensors.conductivity
    if sigma is None or not sigma > 0:
        raise ValueError("EEG potential needs a positive conductivity")
    p = state.location[None, :]
    _check_distance(p, sensors.positions)
    scale = 1.0 / (4.0 * np.pi * sigma)
    return _kernels.eeg_potential_matrix(p, state.moment[None, :], sensors.positions, scale)[0]


def sensor_response(state: DipoleState, sensors: SensorArray, consts: FieldConstants = FieldConstants()) -> np.ndarray:
    """``meg_field`` or ``eeg_potential`` depending on the sensor modality."""
    if sensors.modality is Modality.EEG:
        return eeg_potential(state, sensors, consts)
    return meg_field(state, sensors, consts)


def multi_source_field(states: Sequence[DipoleState], sensors: SensorArray,
                       consts: FieldConstants = FieldConstants()) -> np.ndarray:
    if len(states) < 1:
        raise ValueError("need at least one source")
    total = np.zeros(sensors.count)
    for s in states:
        total += sensor_response(s, sensors, consts)
    return total


@dataclass(frozen=True)
class ForwardModel:
    """Sensors plus field constants; evaluates fields for many locations at once."""

    sensors: SensorArray
    consts: FieldConstants = FieldConstants()

    @property
    def L(self) -> int:
        return self.sensors.count

    def field_matrix(self, locations, moment) -> np.ndarray:
        """(K, L) responses for dipoles at ``locations`` (K, 3).

        ``moment`` is a shared 3-vector or a (K, 3) array.
        """
        loc = np.atleast_2d(np.asarray(locations, dtype=float))
        mom = np.broadcast_to(np.asarray(moment, dtype=float), loc.shape)
        _check_distance(loc, self.sensors.positions)
        if self.sensors.modality is Modality.EEG:
            scale = 1.0 / (4.0 * np.pi * self.sensors.conductivity)
            return _kernels.eeg_potential_matrix(loc, mom, self.sensors.positions, scale)
        return _kernels.meg_field_matrix(loc, mom, self.sensors.positions, self.consts.kappa)
