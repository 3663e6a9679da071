"""Rigid-body quadrotor model: dynamics, control allocation and the differential-flatness map.

Quaternions are scalar-first (w, x, y, z), Hamilton product, body-to-world.
Body rates are expressed in the body frame.
"""
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from exceptions import ConfigurationError, FlatnessSingularityError

log = logging.getLogger(__name__)

STANDARD_GRAVITY = 9.81
E3 = np.array([0.0, 0.0, 1.0])


def skew(w):
    """Return [w x] so that skew(w) @ x == cross(w, x)."""
    wx, wy, wz = np.asarray(w, dtype=float)
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def omega_matrix(w):
    """4x4 matrix with q_dot = 0.5 * omega_matrix(w) @ q for body rate w."""
    wx, wy, wz = np.asarray(w, dtype=float)
    return np.array([[0.0, -wx, -wy, -wz],
                     [wx, 0.0, wz, -wy],
                     [wy, -wz, 0.0, wx],
                     [wz, wy, -wx, 0.0]])


def quat_multiply(p, q):
    pw, px, py, pz = np.moveaxis(np.asarray(p, dtype=float), -1, 0)
    qw, qx, qy, qz = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([pw * qw - px * qx - py * qy - pz * qz,
                     pw * qx + px * qw + py * qz - pz * qy,
                     pw * qy - px * qz + py * qw + pz * qx,
                     pw * qz + px * qy - py * qx + pz * qw], axis=-1)


def as_rotation(q):
    """scipy Rotation for scalar-first quaternion(s)."""
    return Rotation.from_quat(_wxyz_to_xyzw(q))


def from_rotation(rotation):
    return _xyzw_to_wxyz(rotation.as_quat())


def quat_to_rotation(q):
    return as_rotation(q).as_matrix()


def rotation_to_quat(r):
    return _xyzw_to_wxyz(Rotation.from_matrix(r).as_quat())


def quat_body_z(q):
    """Third column of R(q), written homogeneously so it stays polynomial for non-unit q."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([2.0 * (x * z + w * y),
                     2.0 * (y * z - w * x),
                     w * w - x * x - y * y + z * z], axis=-1)


def quat_yaw(q):
    r = quat_to_rotation(q)
    return np.arctan2(r[..., 1, 0], r[..., 0, 0])


def make_sign_continuous(q):
    """Flip quaternion signs so that consecutive quaternions have a non-negative inner product."""
    q = np.array(q, dtype=float, copy=True)
    for i in range(1, len(q)):
        if np.dot(q[i - 1], q[i]) < 0.0:
            q[i] = -q[i]
    return q


def _wxyz_to_xyzw(q):
    return np.roll(np.asarray(q, dtype=float), -1, axis=-1)


def _xyzw_to_wxyz(q):
    return np.roll(np.asarray(q, dtype=float), 1, axis=-1)


def x_configuration_allocation(arm_length, drag_coefficient):
    """Allocation matrix F of an X-configuration quadrotor.

    Rows are total thrust, roll torque, pitch torque and yaw (drag) torque.
    ``arm_length`` is the per-axis moment arm of a motor, ``drag_coefficient``
    the ratio of rotor drag torque to thrust, in m.
    """
    l = arm_length
    k = drag_coefficient
    return np.array([[1.0, 1.0, 1.0, 1.0],
                     [-l, -l, l, l],
                     [-l, l, l, -l],
                     [-k, k, -k, k]])


@dataclass(frozen=True, eq=False)
class QuadParams:
    mass: float
    inertia: np.ndarray
    allocation: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -STANDARD_GRAVITY]))

    def __post_init__(self):
        inertia = np.array(self.inertia, dtype=float).reshape(3, 3)
        allocation = np.array(self.allocation, dtype=float).reshape(4, 4)
        u_min = np.broadcast_to(np.asarray(self.u_min, dtype=float), (4,)).copy()
        u_max = np.broadcast_to(np.asarray(self.u_max, dtype=float), (4,)).copy()
        gravity = np.array(self.gravity, dtype=float).reshape(3)

        if not self.mass > 0.0:
            raise ConfigurationError(f'mass "{self.mass}" must be positive')
        if not np.allclose(inertia, inertia.T, rtol=0.0, atol=1e-12 * np.abs(inertia).max()):
            raise ConfigurationError('inertia matrix is not symmetric')
        if np.any(np.linalg.eigvalsh(inertia) <= 0.0):
            raise ConfigurationError('inertia matrix is not positive definite')
        condition = np.linalg.cond(allocation)
        if not np.isfinite(condition) or condition > 1e12:
            raise ConfigurationError(f'allocation matrix is singular (condition number {condition:g})')
        if np.any(u_min >= u_max):
            raise ConfigurationError(f'thrust bounds {u_min} / {u_max} are empty')

        object.__setattr__(self, 'inertia', inertia)
        object.__setattr__(self, 'allocation', allocation)
        object.__setattr__(self, 'u_min', u_min)
        object.__setattr__(self, 'u_max', u_max)
        object.__setattr__(self, 'gravity', gravity)
        object.__setattr__(self, 'inertia_inv', np.linalg.inv(inertia))
        object.__setattr__(self, 'allocation_inv', np.linalg.inv(allocation))

    @property
    def weight(self):
        return self.mass * np.linalg.norm(self.gravity)

    @property
    def hover_thrusts(self):
        return invert_allocation(self.weight, np.zeros(3), self)

    @property
    def max_torque(self):
        """Characteristic torque magnitude used to normalize rotational residuals."""
        span = np.maximum(np.abs(self.u_min), np.abs(self.u_max))
        return float(np.max(np.abs(self.allocation[1:]) @ span))

    def bidirectional(self):
        """Same vehicle with motors able to produce thrust along -z body as well."""
        return replace(self, u_min=-np.abs(self.u_max))

    def params_hash(self):
        digest = hashlib.sha1()
        for value in (self.mass, self.inertia, self.allocation, self.u_min, self.u_max, self.gravity):
            digest.update(np.asarray(value, dtype=np.float64).tobytes())
        return digest.hexdigest()[:12]


@dataclass
class RigidState:
    position: np.ndarray
    velocity: np.ndarray
    attitude: np.ndarray
    body_rate: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.attitude = np.asarray(self.attitude, dtype=float).reshape(4)
        self.body_rate = np.asarray(self.body_rate, dtype=float).reshape(3)

    def as_vector(self):
        return np.concatenate([self.position, self.velocity, self.attitude, self.body_rate])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[0:3], x[3:6], x[6:10], x[10:13])

    @classmethod
    def hover(cls, position=(0.0, 0.0, 0.0)):
        return cls(position, np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))


def allocate_wrench(u, params):
    wrench = params.allocation @ np.asarray(u, dtype=float)
    return wrench[0], wrench[1:]


def invert_allocation(c, torque, params):
    return params.allocation_inv @ np.concatenate([[c], np.asarray(torque, dtype=float)])


def thrust_violation(u, params):
    """Largest amount by which any motor thrust leaves [u_min, u_max], 0 when feasible."""
    u = np.asarray(u, dtype=float)
    if u.size == 0:
        return 0.0
    return float(max(0.0, np.max(params.u_min - u), np.max(u - params.u_max)))


def dynamics_rhs(state, u, params):
    """Time derivative (p_dot, v_dot, q_dot, w_dot) of the rigid-body state as a 13-vector."""
    x = state.as_vector() if isinstance(state, RigidState) else np.asarray(state, dtype=float)
    v = x[3:6]
    q = x[6:10]
    w = x[10:13]
    c, torque = allocate_wrench(u, params)

    v_dot = quat_body_z(q) * c / params.mass + params.gravity
    q_dot = 0.5 * omega_matrix(w) @ q
    w_dot = params.inertia_inv @ (torque - np.cross(w, params.inertia @ w))
    return np.concatenate([v, v_dot, q_dot, w_dot])


def rk4_step(x, u, dt, params):
    k1 = dynamics_rhs(x, u, params)
    k2 = dynamics_rhs(x + 0.5 * dt * k1, u, params)
    k3 = dynamics_rhs(x + 0.5 * dt * k2, u, params)
    k4 = dynamics_rhs(x + dt * k3, u, params)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class FlatOutput:
    """Position derivatives up to snap and yaw derivatives up to second order.

    Arrays may carry a leading sample axis.
    """
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    snap: np.ndarray
    yaw: Optional[np.ndarray] = None
    yaw_rate: Optional[np.ndarray] = None
    yaw_accel: Optional[np.ndarray] = None


@dataclass
class FlatStates:
    quaternion: np.ndarray
    rotation: np.ndarray
    body_rate: np.ndarray
    body_accel: np.ndarray
    collective_thrust: np.ndarray
    torque: np.ndarray
    thrusts: np.ndarray


def _dot(a, b):
    return np.sum(a * b, axis=-1, keepdims=True)


def _unit_with_derivatives(v, dv, ddv):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    n = v / norm
    n_dv = _dot(n, dv)
    dn = (dv - n * n_dv) / norm
    d_n_dv = _dot(dn, dv) + _dot(n, ddv)
    ddn = (ddv - dn * n_dv - n * d_n_dv) / norm - dn * n_dv / norm
    return n, dn, ddn


def flat_to_states(flat, params, singular_tol=1e-9):
    """Vectorized differential-flatness map from flat outputs to attitude, body rates and motor thrusts.

    Body z is aligned with m(a - g); body x is the projection of the yaw
    heading onto the plane normal to body z.
    """
    acc = np.atleast_2d(np.asarray(flat.acceleration, dtype=float))
    jerk = np.atleast_2d(np.asarray(flat.jerk, dtype=float))
    snap = np.atleast_2d(np.asarray(flat.snap, dtype=float))
    n = acc.shape[0]
    yaw = np.zeros(n) if flat.yaw is None else np.broadcast_to(np.asarray(flat.yaw, dtype=float), (n,))
    yaw_rate = np.zeros(n) if flat.yaw_rate is None else np.broadcast_to(np.asarray(flat.yaw_rate, dtype=float), (n,))
    yaw_accel = np.zeros(n) if flat.yaw_accel is None else np.broadcast_to(np.asarray(flat.yaw_accel, dtype=float), (n,))

    thrust_vector = acc - params.gravity
    thrust_norm = np.linalg.norm(thrust_vector, axis=-1)
    singular = np.flatnonzero(thrust_norm <= singular_tol * np.linalg.norm(params.gravity))
    if singular.size:
        raise FlatnessSingularityError(f'free-fall singularity at sample {singular[0]}', node=int(singular[0]))

    z, dz, ddz = _unit_with_derivatives(thrust_vector, jerk, snap)

    cos_yaw = np.cos(yaw)[:, None]
    sin_yaw = np.sin(yaw)[:, None]
    zeros = np.zeros((n, 1))
    heading = np.hstack([cos_yaw, sin_yaw, zeros])
    heading_perp = np.hstack([-sin_yaw, cos_yaw, zeros])
    d_heading = yaw_rate[:, None] * heading_perp
    dd_heading = yaw_accel[:, None] * heading_perp - (yaw_rate ** 2)[:, None] * heading

    w = np.cross(z, heading)
    dw = np.cross(dz, heading) + np.cross(z, d_heading)
    ddw = np.cross(ddz, heading) + 2.0 * np.cross(dz, d_heading) + np.cross(z, dd_heading)
    singular = np.flatnonzero(np.linalg.norm(w, axis=-1) <= singular_tol)
    if singular.size:
        raise FlatnessSingularityError(f'heading parallel to thrust at sample {singular[0]}', node=int(singular[0]))
    y, dy, ddy = _unit_with_derivatives(w, dw, ddw)

    x = np.cross(y, z)
    dx = np.cross(dy, z) + np.cross(y, dz)
    ddx = np.cross(ddy, z) + 2.0 * np.cross(dy, dz) + np.cross(y, ddz)

    rotation = np.stack([x, y, z], axis=-1)
    body_rate = np.hstack([_dot(z, dy), _dot(x, dz), _dot(y, dx)])
    body_accel = np.hstack([_dot(dz, dy) + _dot(z, ddy),
                            _dot(dx, dz) + _dot(x, ddz),
                            _dot(dy, dx) + _dot(y, ddx)])

    collective = params.mass * thrust_norm
    j_w = body_rate @ params.inertia.T
    torque = body_accel @ params.inertia.T + np.cross(body_rate, j_w)
    wrench = np.hstack([collective[:, None], torque])
    thrusts = wrench @ params.allocation_inv.T

    quaternion = make_sign_continuous(rotation_to_quat(rotation))
    return FlatStates(quaternion=quaternion, rotation=rotation, body_rate=body_rate, body_accel=body_accel,
                      collective_thrust=collective, torque=torque, thrusts=thrusts)


def flat_to_state(flat, params):
    """Single-sample flatness map returning (RigidState, motor thrusts)."""
    states = flat_to_states(flat, params)
    state = RigidState(np.asarray(flat.position, dtype=float).reshape(3),
                       np.asarray(flat.velocity, dtype=float).reshape(3),
                       states.quaternion[0], states.body_rate[0])
    return state, states.thrusts[0]
