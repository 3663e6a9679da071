"""Uniformly time-sampled reference trajectories: construction, interpolation and persistence"""
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.interpolate import BPoly
from scipy.spatial.transform import Rotation

import tdms_io
from exceptions import ConfigurationError, TrajectoryIOError
from geometric_path import order_name
from quad_model import FlatOutput, as_rotation, flat_to_states, from_rotation, make_sign_continuous
from reparam import SpeedProfile, flat_output_along_path, time_map

log = logging.getLogger(__name__)

COLUMNS = ('t', 'x', 'y', 'z', 'vx', 'vy', 'vz', 'ax', 'ay', 'az',
           'qw', 'qx', 'qy', 'qz', 'wx', 'wy', 'wz', 'u1', 'u2', 'u3', 'u4')
UNITS = dict([('t', 's')] + [(c, 'm') for c in 'xyz'] + [(c, 'm/s') for c in ('vx', 'vy', 'vz')]
             + [(c, 'm/s^2') for c in ('ax', 'ay', 'az')] + [(c, '') for c in ('qw', 'qx', 'qy', 'qz')]
             + [(c, 'rad/s') for c in ('wx', 'wy', 'wz')] + [(c, 'N') for c in ('u1', 'u2', 'u3', 'u4')]
             + [('s', '')])
FORMATS = ('csv', 'json', 'tdms')
TDMS_GROUP = 'trajectory'


@dataclass
class TimedTrajectory:
    t: np.ndarray
    s: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    quaternion: np.ndarray
    body_rate: np.ndarray
    thrusts: np.ndarray
    jerk: Optional[np.ndarray] = None
    snap: Optional[np.ndarray] = None
    yaw: Optional[np.ndarray] = None
    yaw_rate: Optional[np.ndarray] = None
    yaw_accel: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        n = len(self.t)
        self.s = np.asarray(self.s, dtype=float).reshape(-1)
        for name, width in (('position', 3), ('velocity', 3), ('acceleration', 3), ('quaternion', 4),
                            ('body_rate', 3), ('thrusts', 4)):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(n, width))
        steps = np.diff(self.t)
        bad = np.flatnonzero(steps <= 0.0)
        if bad.size:
            raise TrajectoryIOError(f'sample times are not strictly increasing at sample {bad[0] + 1}')

    def __len__(self):
        return len(self.t)

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0]) if len(self.t) else 0.0

    @property
    def source(self):
        return self.metadata.get('source', '')

    @classmethod
    def empty(cls, metadata=None):
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 4)), metadata=dict(metadata or {}))

    def table(self):
        return np.column_stack([self.t, self.position, self.velocity, self.acceleration,
                                self.quaternion, self.body_rate, self.thrusts]).reshape(len(self), len(COLUMNS))

    @classmethod
    def from_table(cls, table, s=None, metadata=None):
        table = np.asarray(table, dtype=float).reshape(-1, len(COLUMNS))
        t = table[:, 0]
        return cls(t=t, s=t.copy() if s is None else s, position=table[:, 1:4], velocity=table[:, 4:7],
                   acceleration=table[:, 7:10], quaternion=table[:, 10:14], body_rate=table[:, 14:17],
                   thrusts=table[:, 17:21], metadata=dict(metadata or {}))

    @classmethod
    def from_flat(cls, t, s, flat, params, metadata=None):
        """Complete attitude, body rate and motor thrusts from flat outputs."""
        states = flat_to_states(flat, params)
        return cls(t=t, s=s, position=flat.position, velocity=flat.velocity, acceleration=flat.acceleration,
                   quaternion=states.quaternion, body_rate=states.body_rate, thrusts=states.thrusts,
                   jerk=flat.jerk, snap=flat.snap, yaw=flat.yaw, yaw_rate=flat.yaw_rate, yaw_accel=flat.yaw_accel,
                   metadata=dict(metadata or {}))

    def flat_output(self):
        if self.jerk is None or self.snap is None:
            raise ConfigurationError(f'trajectory "{self.source}" carries no jerk and snap')
        return FlatOutput(position=self.position, velocity=self.velocity, acceleration=self.acceleration,
                          jerk=self.jerk, snap=self.snap, yaw=self.yaw, yaw_rate=self.yaw_rate,
                          yaw_accel=self.yaw_accel)

    def dilated(self, alpha, params):
        """Same path traversed with time t / alpha; derivatives of order k scale by alpha^k."""
        flat = self.flat_output()
        scaled = FlatOutput(position=flat.position, velocity=alpha * flat.velocity,
                            acceleration=alpha ** 2 * flat.acceleration, jerk=alpha ** 3 * flat.jerk,
                            snap=alpha ** 4 * flat.snap, yaw=flat.yaw,
                            yaw_rate=None if flat.yaw_rate is None else alpha * flat.yaw_rate,
                            yaw_accel=None if flat.yaw_accel is None else alpha ** 2 * flat.yaw_accel)
        metadata = dict(self.metadata, alpha=float(alpha) * float(self.metadata.get('alpha', 1.0)))
        t0 = self.t[0] if len(self.t) else 0.0
        return TimedTrajectory.from_flat(t0 + (self.t - t0) / alpha, self.s, scaled, params, metadata)

    def thrust_range(self):
        if not len(self):
            return float('nan'), float('nan')
        return float(np.min(self.thrusts)), float(np.max(self.thrusts))

    def path_length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.position, axis=0), axis=1)))


def sample_times(duration, dt):
    """k * dt for k = 0, 1, ... with the end time appended when it is off the grid."""
    if not dt > 0.0:
        raise ConfigurationError(f'sample interval "{dt}" must be positive')
    count = int(np.floor(duration / dt + 1e-9))
    t = np.arange(count + 1) * dt
    if duration - t[-1] > 1e-9 * dt:
        t = np.append(t, duration)
    else:
        t[-1] = duration
    return t


def seed_trajectory(seed, params, dt=0.01):
    """Sample a timed polynomial seed and complete it by the flatness map."""
    t = sample_times(seed.duration, dt) + seed.breakpoints[0]
    yaw = yaw_rate = yaw_accel = None
    if seed.yaw_ppoly is not None:
        yaw, yaw_rate, yaw_accel = (seed.yaw_ppoly(t, nu=r) for r in range(3))
    flat = FlatOutput(position=seed.evaluate(t), velocity=seed.evaluate(t, 1), acceleration=seed.evaluate(t, 2),
                      jerk=seed.evaluate(t, 3), snap=seed.evaluate(t, 4), yaw=yaw, yaw_rate=yaw_rate,
                      yaw_accel=yaw_accel)
    return TimedTrajectory.from_flat(t, t - seed.breakpoints[0], flat, params,
                                     {'source': f'min-{order_name(seed.order)}', 'params_hash': params.params_hash()})


def profile_trajectory(grid, params, h, hp, hpp=None, hppp=None, source='profile'):
    """Trajectory at the grid nodes of a square speed profile, reached at the times of time_map."""
    t = time_map(SpeedProfile(h, hp), grid)
    flat = flat_output_along_path(grid, h, hp, hpp, hppp)
    return TimedTrajectory.from_flat(t, grid.s, flat, params,
                                     {'source': source, 'params_hash': params.params_hash()})


def quaternion_spline(t_nodes, q_nodes, rates, t):
    """Cumulative cubic spline on SO(3) through node attitudes with matching body rates.

    Within [t_i, t_i+1] of length T, R(u) = R_i exp(w1 b1) exp(w2 b2) exp(w3 b3)
    with b1 = 1 - (1-u)^3, b2 = 3u^2 - 2u^3, b3 = u^3, w1 = rate_i T/3 and
    w3 = rate_i+1 T/3; w2 closes the interval on R_i+1.
    Returns quaternions and body rates at t.
    """
    q_nodes = np.asarray(q_nodes, dtype=float)
    q_nodes = make_sign_continuous(q_nodes / np.linalg.norm(q_nodes, axis=1, keepdims=True))
    rates = np.asarray(rates, dtype=float)
    rotations = as_rotation(q_nodes)
    index = np.clip(np.searchsorted(t_nodes, t, side='right') - 1, 0, len(t_nodes) - 2)
    quaternion = np.empty((len(t), 4))
    body_rate = np.empty((len(t), 3))
    for i in np.unique(index):
        mask = index == i
        span = t_nodes[i + 1] - t_nodes[i]
        u = (t[mask] - t_nodes[i]) / span
        w1 = rates[i] * span / 3.0
        w3 = rates[i + 1] * span / 3.0
        closing = (Rotation.from_rotvec(w1).inv() * rotations[i].inv() * rotations[i + 1]
                   * Rotation.from_rotvec(w3).inv())
        w2 = closing.as_rotvec()
        e1 = Rotation.from_rotvec(np.outer(1.0 - (1.0 - u) ** 3, w1))
        e2 = Rotation.from_rotvec(np.outer(3.0 * u ** 2 - 2.0 * u ** 3, w2))
        e3 = Rotation.from_rotvec(np.outer(u ** 3, w3))
        quaternion[mask] = from_rotation(rotations[i] * e1 * e2 * e3)
        inner = e2.inv().apply(np.outer(3.0 * (1.0 - u) ** 2, w1)) + np.outer(6.0 * u * (1.0 - u), w2)
        body_rate[mask] = (e3.inv().apply(inner) + np.outer(3.0 * u ** 2, w3)) / span
    flip = np.sum(quaternion * q_nodes[index], axis=1) < 0.0
    quaternion[flip] = -quaternion[flip]
    return quaternion, body_rate


def sample_solution(sol, dt):
    """Sample a time-optimal solution every dt seconds.

    Positions follow quintics matching (p, v, a) at both ends of every node
    interval, attitudes follow quaternion_spline and thrusts are linear.
    """
    grid = sol.grid
    t_nodes = time_map(sol.speed, grid)
    h = np.maximum(np.asarray(sol.speed.h, dtype=float), 0.0)
    hp = np.asarray(sol.speed.hp, dtype=float)
    root = np.sqrt(h)
    velocity = root[:, None] * grid.d1
    acceleration = 0.5 * hp[:, None] * grid.d1 + h[:, None] * grid.d2

    t = sample_times(t_nodes[-1], dt)
    if dt > np.min(np.diff(t_nodes)):
        log.warning('sample interval %.4g s is coarser than the shortest node interval %.4g s',
                    dt, np.min(np.diff(t_nodes)))

    curves = [BPoly.from_derivatives(t_nodes, np.column_stack([grid.gamma[:, k], velocity[:, k], acceleration[:, k]]))
              for k in range(3)]
    derivatives = [np.column_stack([curve.derivative(r)(t) if r else curve(t) for curve in curves]) for r in range(4)]
    quaternion, body_rate = quaternion_spline(t_nodes, sol.rotation.q, root[:, None] * sol.rotation.w, t)
    thrusts = np.column_stack([np.interp(t, t_nodes, sol.thrusts[:, k]) for k in range(4)])

    metadata = {'source': 'toppquad', 'params_hash': sol.metadata.get('params_hash', ''),
                'total_time': float(sol.total_time), 'dt': float(dt)}
    return TimedTrajectory(t=t, s=np.interp(t, t_nodes, grid.s), position=derivatives[0], velocity=derivatives[1],
                           acceleration=derivatives[2], quaternion=quaternion, body_rate=body_rate, thrusts=thrusts,
                           jerk=derivatives[3], yaw=np.interp(t, t_nodes, grid.yaw), metadata=metadata)


def _format(file_path, fmt):
    fmt = fmt or str(file_path).rsplit('.', 1)[-1].lower()
    if fmt not in FORMATS:
        raise TrajectoryIOError(f'unknown trajectory format "{fmt}"', path=str(file_path))
    return fmt


def export(traj, file_path, fmt=None):
    """Write a trajectory as csv, json or tdms (format from the suffix unless given)."""
    fmt = _format(file_path, fmt)
    file_path = tdms_io.resolve_path(file_path)
    table = traj.table()
    if fmt == 'tdms':
        columns = dict(zip(COLUMNS, table.T))
        columns['s'] = traj.s
        tdms_io.write_table(file_path, TDMS_GROUP, columns, properties=traj.metadata, units=UNITS)
        return file_path
    try:
        if fmt == 'csv':
            np.savetxt(file_path, table, delimiter=',', header=','.join(COLUMNS), comments='', fmt='%.17g')
        else:
            document = {'metadata': traj.metadata, 'columns': list(COLUMNS),
                        'data': {name: table[:, k].tolist() for k, name in enumerate(COLUMNS)},
                        's': traj.s.tolist()}
            with open(file_path, 'w', encoding='utf-8') as file:
                json.dump(document, file, indent=1)
    except OSError as error:
        raise TrajectoryIOError(f'file "{file_path}" not writable', path=str(file_path)) from error
    log.info('exported %d samples to "%s"', len(traj), file_path)
    return file_path


def _check_columns(found, file_path):
    if tuple(found[:len(COLUMNS)]) != COLUMNS:
        raise TrajectoryIOError(f'file "{file_path}" has columns {found}, expected {",".join(COLUMNS)}',
                                path=str(file_path))


def load_trajectory(file_path, fmt=None):
    fmt = _format(file_path, fmt)
    file_path = tdms_io.resolve_path(file_path)
    if fmt == 'tdms':
        columns, properties = tdms_io.read_table(file_path, TDMS_GROUP)
        _check_columns(tuple(name for name in columns if name != 's'), file_path)
        table = np.column_stack([columns[name] for name in COLUMNS])
        return TimedTrajectory.from_table(table, s=columns.get('s'), metadata=properties)
    if not file_path.is_file():
        raise TrajectoryIOError(f'file "{file_path}" not accessible', path=str(file_path))
    try:
        if fmt == 'csv':
            with open(file_path, encoding='utf-8') as file:
                header = file.readline().strip().split(',')
            _check_columns(tuple(header), file_path)
            with warnings.catch_warnings():
                warnings.simplefilter('ignore', UserWarning)
                table = np.loadtxt(file_path, delimiter=',', skiprows=1, ndmin=2)
            if table.size == 0:
                return TimedTrajectory.empty({'source': 'csv'})
            return TimedTrajectory.from_table(table, metadata={'source': 'csv'})
        with open(file_path, encoding='utf-8') as file:
            document = json.load(file)
    except (OSError, ValueError) as error:
        raise TrajectoryIOError(f'file "{file_path}" not readable: {error}', path=str(file_path)) from error
    _check_columns(tuple(document.get('columns', ())), file_path)
    data = document['data']
    table = np.column_stack([np.asarray(data[name], dtype=float) for name in COLUMNS])
    return TimedTrajectory.from_table(table, s=document.get('s'), metadata=document.get('metadata', {}))


def with_metadata(traj, **values):
    return replace(traj, metadata=dict(traj.metadata, **values))
