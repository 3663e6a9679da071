"""Closed-loop rollouts: SE(3) geometric tracking controller on the rigid-body model"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np

import tdms_io
from exceptions import ConfigurationError, TrajectoryIOError
from quad_model import (E3, RigidState, invert_allocation, quat_to_rotation, quat_yaw, rk4_step, rotation_to_quat,
                        vee)
from timed_traj import TimedTrajectory, sample_times

log = logging.getLogger(__name__)

SETTLE_POSITION = 0.02
SETTLE_VELOCITY = 0.02
SETTLE_WINDOW = 0.5
MAX_SETTLE_TIME = 5.0
DIVERGENCE_FACTOR = 10.0

LOG_COLUMNS = ('t', 'x', 'y', 'z', 'vx', 'vy', 'vz', 'qw', 'qx', 'qy', 'qz', 'wx', 'wy', 'wz',
               'x_ref', 'y_ref', 'z_ref', 'vx_ref', 'vy_ref', 'vz_ref',
               'u1', 'u2', 'u3', 'u4', 'position_error', 'velocity_error', 'clamped')
LOG_GROUP = 'rollout'


def _positive(name, values):
    values = np.broadcast_to(np.asarray(values, dtype=float), (3,)).copy()
    if np.any(values <= 0.0):
        raise ConfigurationError(f'controller gain "{name}" must be positive, got {values}')
    return values


@dataclass
class ControllerGains:
    kp: np.ndarray
    kd: np.ndarray
    kr: np.ndarray
    kw: np.ndarray

    def __post_init__(self):
        for name in ('kp', 'kd', 'kr', 'kw'):
            setattr(self, name, _positive(name, getattr(self, name)))

    @classmethod
    def defaults(cls):
        """Per-axis gains (x, y, z) tuned for a CrazyFlie-class vehicle."""
        return cls(kp=[8.0, 8.0, 19.0], kd=[5.5, 5.5, 8.7], kr=[2812.0, 2812.0, 163.0], kw=[128.0, 128.0, 73.0])


@dataclass
class ReferenceSample:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    yaw: float = 0.0
    body_rate: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def hover(cls, position=(0.0, 0.0, 0.0), yaw=0.0):
        return cls(np.asarray(position, dtype=float), np.zeros(3), np.zeros(3), yaw)


@dataclass
class ControlCommand:
    thrusts: np.ndarray
    unclamped: np.ndarray
    desired_rotation: np.ndarray
    collective: float

    @property
    def clamped(self):
        return bool(np.any(self.thrusts != self.unclamped))


def desired_rotation(force, yaw, hold):
    """Body z along the force, body x towards the yaw heading; `hold` when the force gives no direction."""
    norm = np.linalg.norm(force)
    if norm < 1e-9:
        return hold
    b3 = force / norm
    heading = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    b2 = np.cross(b3, heading)
    if np.linalg.norm(b2) < 1e-9:
        return hold
    b2 /= np.linalg.norm(b2)
    return np.column_stack([np.cross(b2, b3), b2, b3])


def se3_command(state, ref, gains, params, hold=None):
    rotation = quat_to_rotation(state.attitude)
    hold = rotation if hold is None else hold
    position_error = state.position - ref.position
    velocity_error = state.velocity - ref.velocity
    force = params.mass * (-gains.kp * position_error - gains.kd * velocity_error + ref.acceleration - params.gravity)
    collective = float(force @ (rotation @ E3))

    target = desired_rotation(force, ref.yaw, hold)
    attitude_error = 0.5 * vee(target.T @ rotation - rotation.T @ target)
    rate_error = state.body_rate - rotation.T @ target @ np.asarray(ref.body_rate, dtype=float)
    j_w = params.inertia @ state.body_rate
    torque = params.inertia @ (-gains.kr * attitude_error - gains.kw * rate_error) + np.cross(state.body_rate, j_w)

    unclamped = invert_allocation(collective, torque, params)
    return ControlCommand(thrusts=np.clip(unclamped, params.u_min, params.u_max), unclamped=unclamped,
                          desired_rotation=target, collective=collective)


def se3_control(state, ref, gains, params, hold=None):
    """Motor thrusts of the geometric tracking controller, clamped to the motor bounds."""
    return se3_command(state, ref, gains, params, hold).thrusts


class Se3Controller:
    """Stateful wrapper that remembers the last attitude command and counts clamped commands."""

    def __init__(self, params, gains):
        self.params = params
        self.gains = gains
        self.hold = None
        self.commands = 0
        self.clamps = 0

    def __call__(self, state, ref):
        command = se3_command(state, ref, self.gains, self.params, self.hold)
        self.hold = command.desired_rotation
        self.commands += 1
        self.clamps += int(command.clamped)
        return command


class ReferenceTrack:
    """Linear interpolation of a TimedTrajectory; the last sample is held after the end."""

    def __init__(self, traj):
        if len(traj) == 0:
            raise ConfigurationError('cannot track an empty trajectory')
        self.traj = traj
        self.yaw = np.unwrap(traj.yaw if traj.yaw is not None else quat_yaw(traj.quaternion))

    @property
    def end(self):
        return float(self.traj.t[-1])

    def _at(self, values, t):
        values = np.asarray(values, dtype=float)
        if len(self.traj) == 1:
            return values[0]
        return np.array([np.interp(t, self.traj.t, values[:, k]) for k in range(values.shape[1])])

    def __call__(self, t):
        traj = self.traj
        return ReferenceSample(position=self._at(traj.position, t), velocity=self._at(traj.velocity, t),
                               acceleration=self._at(traj.acceleration, t),
                               yaw=float(np.interp(t, traj.t, self.yaw)), body_rate=self._at(traj.body_rate, t))

    def initial_state(self):
        traj = self.traj
        return RigidState(traj.position[0], traj.velocity[0], traj.quaternion[0], traj.body_rate[0])


@dataclass
class RolloutLog:
    t: np.ndarray
    states: np.ndarray
    reference: np.ndarray
    thrusts: np.ndarray
    position_error: np.ndarray
    velocity_error: np.ndarray
    clamped: np.ndarray
    planned_duration: float
    path_length: float
    diverged: bool = False
    settled: bool = False
    completion_time: float = float('nan')
    metadata: dict = field(default_factory=dict)

    @property
    def steps(self):
        return len(self.t)

    @property
    def clamp_count(self):
        return int(np.sum(self.clamped))

    @property
    def clamp_fraction(self):
        return self.clamp_count / self.steps if self.steps else 0.0

    def summary(self):
        tracking = self.t <= self.planned_duration
        errors = self.position_error[tracking] if np.any(tracking) else self.position_error
        return {'planned_duration': self.planned_duration,
                'completion_time': self.completion_time,
                'duration': float(self.t[-1]) if self.steps else 0.0,
                'max_position_error': float(np.max(errors)) if errors.size else 0.0,
                'mean_position_error': float(np.mean(errors)) if errors.size else 0.0,
                'final_position_error': float(self.position_error[-1]) if self.steps else 0.0,
                'clamp_count': self.clamp_count,
                'clamp_fraction': self.clamp_fraction,
                'steps': self.steps,
                'diverged': self.diverged,
                'settled': self.settled,
                'source': self.metadata.get('source', '')}

    def table(self):
        return np.column_stack([self.t, self.states, self.reference, self.thrusts, self.position_error,
                                self.velocity_error, self.clamped.astype(float)]).reshape(self.steps, len(LOG_COLUMNS))

    def export(self, file_path, fmt=None):
        file_path = tdms_io.resolve_path(file_path)
        fmt = fmt or file_path.suffix.lstrip('.').lower()
        if fmt == 'tdms':
            summary = {key: value for key, value in self.summary().items() if not isinstance(value, float) or np.isfinite(value)}
            tdms_io.write_table(file_path, LOG_GROUP, dict(zip(LOG_COLUMNS, self.table().T)), properties=summary)
            return file_path
        if fmt != 'csv':
            raise TrajectoryIOError(f'unknown rollout log format "{fmt}"', path=str(file_path))
        try:
            np.savetxt(file_path, self.table(), delimiter=',', header=','.join(LOG_COLUMNS), comments='', fmt='%.17g')
        except OSError as error:
            raise TrajectoryIOError(f'file "{file_path}" not writable', path=str(file_path)) from error
        return file_path

    def write_summary(self, file_path):
        try:
            with open(file_path, 'w', encoding='utf-8') as file:
                json.dump(self.summary(), file, indent=1)
        except OSError as error:
            raise TrajectoryIOError(f'file "{file_path}" not writable', path=str(file_path)) from error


def _advance(x, u, dt, params):
    x = rk4_step(x, u, dt, params)
    x[6:10] /= np.linalg.norm(x[6:10])
    return x


def integrate(state, thrusts, params, duration, dt=1e-3):
    """Open-loop integration under thrusts(t) (callable or constant); returns times and 13-vectors."""
    thrust_of = thrusts if callable(thrusts) else (lambda t, value=np.asarray(thrusts, dtype=float): value)
    steps = int(round(duration / dt))
    x = state.as_vector() if isinstance(state, RigidState) else np.asarray(state, dtype=float).copy()
    t = np.arange(steps + 1) * dt
    out = np.empty((steps + 1, 13))
    out[0] = x
    for k in range(steps):
        x = _advance(x, thrust_of(t[k]), dt, params)
        out[k + 1] = x
    return t, out


def simulate(traj, params, gains, sim_dt=1e-3, control_dt=None, settle_window=SETTLE_WINDOW,
             max_settle_time=MAX_SETTLE_TIME, divergence_factor=DIVERGENCE_FACTOR, initial_state=None):
    """Track a TimedTrajectory from its first sample until settled after the reference end.

    The controller runs every control_dt (default: the trajectory sample
    interval) with zero-order hold; the plant is integrated with RK4 at
    sim_dt. The rollout stops early when the position error exceeds
    divergence_factor times the path scale.
    """
    track = ReferenceTrack(traj)
    reference_dt = float(np.median(np.diff(traj.t))) if len(traj) > 1 else 0.01
    control_dt = reference_dt if control_dt is None else control_dt
    if sim_dt > min(reference_dt, control_dt) + 1e-12:
        raise ConfigurationError(f'simulation step {sim_dt} s exceeds reference interval {reference_dt} s')
    substeps = max(1, int(round(control_dt / sim_dt)))
    scale = max(traj.path_length(), 1.0)
    limit = track.end + max_settle_time

    controller = Se3Controller(params, gains)
    x = (initial_state or track.initial_state()).as_vector()
    rows = []
    start = float(traj.t[0])
    t = start
    step = 0
    settled_since = None
    diverged = settled = False
    while True:
        state = RigidState.from_vector(x)
        ref = track(t)
        command = controller(state, ref)
        position_error = float(np.linalg.norm(state.position - ref.position))
        velocity_error = float(np.linalg.norm(state.velocity - ref.velocity))
        rows.append((t, x.copy(), np.concatenate([ref.position, ref.velocity]), command.thrusts,
                     position_error, velocity_error, command.clamped))

        if not np.all(np.isfinite(x)) or position_error > divergence_factor * scale:
            diverged = True
            log.warning('rollout diverged at t=%.3f s (position error %.3g m)', t, position_error)
            break
        if t >= track.end:
            if position_error < SETTLE_POSITION and velocity_error < SETTLE_VELOCITY:
                settled_since = t if settled_since is None else settled_since
                if t - settled_since >= settle_window:
                    settled = True
                    break
            else:
                settled_since = None
        if t >= limit:
            break

        for _ in range(substeps):
            x = _advance(x, command.thrusts, sim_dt, params)
        step += 1
        t = start + step * substeps * sim_dt

    times, states, reference, thrusts, position_errors, velocity_errors, clamped = (np.array(v) for v in zip(*rows))
    completion = settled_since - start if settled else float('nan')
    log.info('rollout of "%s": %d steps, settled=%s, diverged=%s, clamp fraction %.3f',
             traj.source, len(times), settled, diverged, controller.clamps / max(controller.commands, 1))
    return RolloutLog(t=times, states=states, reference=reference, thrusts=thrusts, position_error=position_errors,
                      velocity_error=velocity_errors, clamped=clamped.astype(bool), planned_duration=traj.duration,
                      path_length=traj.path_length(), diverged=diverged, settled=settled, completion_time=completion,
                      metadata=dict(traj.metadata))


def hover_trajectory(position, duration, params, dt=0.01):
    """Stationary reference at a position with hover thrusts."""
    t = sample_times(duration, dt)
    n = len(t)
    return TimedTrajectory(t=t, s=t.copy(), position=np.tile(np.asarray(position, dtype=float), (n, 1)),
                           velocity=np.zeros((n, 3)), acceleration=np.zeros((n, 3)),
                           quaternion=np.tile(rotation_to_quat(np.eye(3)), (n, 1)), body_rate=np.zeros((n, 3)),
                           thrusts=np.tile(params.hover_thrusts, (n, 1)), yaw=np.zeros(n),
                           metadata={'source': 'hover', 'params_hash': params.params_hash()})
