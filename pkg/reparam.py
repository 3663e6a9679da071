"""Square speed profile h(s) = (ds/dt)^2: quadrature, time maps and initial guesses.

Along a geometric path gamma(s) the time derivatives of position follow from
(h, h', h'', h''') and the path derivatives; everything here works on a
uniform PathGrid.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from exceptions import AssemblyError, DegenerateIntervalError, FlatnessSingularityError
from quad_model import FlatOutput, flat_to_states, make_sign_continuous

log = logging.getLogger(__name__)

EPS_H = 1e-6

NODE_FIELDS = (('h', 1), ('hp', 1), ('q', 4), ('w', 3), ('alpha', 3), ('u', 4))
NODE_SIZE = sum(width for _, width in NODE_FIELDS)


@dataclass
class SpeedProfile:
    h: np.ndarray
    hp: np.ndarray

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.hp = np.asarray(self.hp, dtype=float)

    def scaled(self, k):
        """Time dilation: h <- k^2 h traverses the path k times faster."""
        return SpeedProfile(k * k * self.h, k * k * self.hp)


@dataclass
class RotationProfile:
    q: np.ndarray
    w: np.ndarray
    alpha: np.ndarray


@dataclass
class ToppDecisionState:
    """Grid-sampled decision variables (h, h', q, w, alpha, u) for nodes 0..N."""
    h: np.ndarray
    hp: np.ndarray
    q: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    u: np.ndarray

    @property
    def N(self):
        return len(self.h) - 1

    @property
    def speed(self):
        return SpeedProfile(self.h, self.hp)

    @property
    def rotation(self):
        return RotationProfile(self.q, self.w, self.alpha)

    def check_dimensions(self, n_nodes):
        expected = {'h': (n_nodes,), 'hp': (n_nodes,), 'q': (n_nodes, 4), 'w': (n_nodes, 3),
                    'alpha': (n_nodes, 3), 'u': (n_nodes, 4)}
        for name, shape in expected.items():
            actual = np.shape(getattr(self, name))
            if actual != shape:
                raise AssemblyError(f'guess field "{name}" has shape {actual}, grid needs {shape}')

    def to_vector(self):
        columns = [np.asarray(self.h)[:, None], np.asarray(self.hp)[:, None],
                   self.q, self.w, self.alpha, self.u]
        return np.hstack(columns).reshape(-1)

    @classmethod
    def from_vector(cls, z, N):
        nodes = np.asarray(z, dtype=float).reshape(N + 1, NODE_SIZE)
        return cls(h=nodes[:, 0].copy(), hp=nodes[:, 1].copy(), q=nodes[:, 2:6].copy(),
                   w=nodes[:, 6:9].copy(), alpha=nodes[:, 9:12].copy(), u=nodes[:, 12:16].copy())


@dataclass
class ToppSolution:
    grid: object
    speed: SpeedProfile
    rotation: RotationProfile
    thrusts: np.ndarray
    total_time: float
    report: object
    success: bool = False
    guess_time: float = float('nan')
    failure_reason: str = ''
    boundary_attitudes: Optional[np.ndarray] = None
    options: object = None
    metadata: dict = field(default_factory=dict)

    @property
    def state(self):
        return ToppDecisionState(self.speed.h, self.speed.hp, self.rotation.q, self.rotation.w,
                                 self.rotation.alpha, self.thrusts)


def _checked_roots(h):
    h = np.asarray(h, dtype=float)
    roots = np.sqrt(np.maximum(h, 0.0))
    sums = roots[:-1] + roots[1:]
    degenerate = np.flatnonzero(sums <= 0.0)
    if degenerate.size:
        raise DegenerateIntervalError(f'interval {degenerate[0]} has zero speed at both ends',
                                      interval=int(degenerate[0]))
    return sums


def _spacing(grid):
    return grid.ds if hasattr(grid, 'ds') else float(grid)


def traversal_time(speed, grid):
    """T = sum 2 ds / (sqrt(h_i) + sqrt(h_{i+1}))."""
    sums = _checked_roots(speed.h)
    return float(np.sum(2.0 * _spacing(grid) / sums))


def time_map(speed, grid):
    """Time t_i at which each grid node is reached; t_0 = 0, t_N = traversal time."""
    sums = _checked_roots(speed.h)
    return np.concatenate([[0.0], np.cumsum(2.0 * _spacing(grid) / sums)])


def floor_root(h, eps=EPS_H):
    """sqrt(h) for h >= eps, continued below eps by its tangent line; returns value and slope."""
    h = np.asarray(h, dtype=float)
    root_eps = np.sqrt(eps)
    safe = np.maximum(h, eps)
    above = h >= eps
    value = np.where(above, np.sqrt(safe), root_eps + (h - eps) / (2.0 * root_eps))
    slope = np.where(above, 0.5 / np.sqrt(safe), 0.5 / root_eps)
    return value, slope


def flat_output_along_path(grid, h, hp, hpp=None, hppp=None):
    """Time derivatives of position and yaw at the grid nodes for a given square speed profile.

    With D = sqrt(h) d/ds:
      v = sqrt(h) g',  a = h'/2 g' + h g'',
      j = sqrt(h) (h''/2 g' + 3/2 h' g'' + h g'''),
      snap = h'/2 (h''/2 g' + 3/2 h' g'' + h g''') + h (h'''/2 g' + 2 h'' g'' + 5/2 h' g''' + h g'''').
    """
    h = np.maximum(np.asarray(h, dtype=float), 0.0)
    hp = np.asarray(hp, dtype=float)
    hpp = np.zeros_like(h) if hpp is None else np.asarray(hpp, dtype=float)
    hppp = np.zeros_like(h) if hppp is None else np.asarray(hppp, dtype=float)
    root = np.sqrt(h)[:, None]
    h_, hp_, hpp_, hppp_ = (x[:, None] for x in (h, hp, hpp, hppp))
    g1, g2, g3, g4 = grid.d1, grid.d2, grid.d3, grid.d4

    inner = 0.5 * hpp_ * g1 + 1.5 * hp_ * g2 + h_ * g3
    velocity = root * g1
    acceleration = 0.5 * hp_ * g1 + h_ * g2
    jerk = root * inner
    snap = 0.5 * hp_ * inner + h_ * (0.5 * hppp_ * g1 + 2.0 * hpp_ * g2 + 2.5 * hp_ * g3 + h_ * g4)

    yaw_rate = np.sqrt(h) * grid.yaw_d1
    yaw_accel = 0.5 * hp * grid.yaw_d1 + h * grid.yaw_d2
    return FlatOutput(position=grid.gamma, velocity=velocity, acceleration=acceleration, jerk=jerk, snap=snap,
                      yaw=grid.yaw, yaw_rate=yaw_rate, yaw_accel=yaw_accel)


def initial_guess_from_profile(grid, params, h, hp, hpp=None, hppp=None):
    """Decision state along a known speed profile, completed by the flatness map.

    Body rates are converted to s-units (w_s = w_t / sqrt(h)); alpha is the
    central finite difference of w_s (one-sided at the ends).
    """
    h = np.asarray(h, dtype=float)
    hp = np.asarray(hp, dtype=float)
    flat = flat_output_along_path(grid, h, hp, hpp, hppp)
    states = flat_to_states(flat, params)
    root = np.sqrt(np.maximum(h, EPS_H))[:, None]
    w = states.body_rate / root
    alpha = np.gradient(w, grid.s, axis=0)
    return ToppDecisionState(h=h.copy(), hp=hp.copy(), q=make_sign_continuous(states.quaternion),
                             w=w, alpha=alpha, u=states.thrusts)


def initial_guess_from_seed(seed, grid, params):
    """Initial guess from the seed trajectory the grid was built on (s is the seed's time, h = 1)."""
    if abs(seed.duration - grid.s_end) > 1e-9 * max(1.0, grid.s_end):
        raise AssemblyError(f'seed duration {seed.duration} does not match grid end {grid.s_end}')
    n_nodes = grid.N + 1
    return initial_guess_from_profile(grid, params, np.ones(n_nodes), np.zeros(n_nodes))


@dataclass
class StateSamples:
    """Time-stamped samples of a flown or planned trajectory; everything but position is optional."""
    t: np.ndarray
    position: np.ndarray
    velocity: Optional[np.ndarray] = None
    acceleration: Optional[np.ndarray] = None
    quaternion: Optional[np.ndarray] = None
    body_rate: Optional[np.ndarray] = None
    thrusts: Optional[np.ndarray] = None


def _resample(t_samples, values, t_nodes):
    values = np.asarray(values, dtype=float)
    return np.column_stack([np.interp(t_nodes, t_samples, values[:, k]) for k in range(values.shape[1])])


def initial_guess_from_states(samples, grid, params):
    """Initial guess when only part of the state is known; unknown rotational variables take hover values.

    The grid is expected to be built on GeometricPath.from_samples(samples.t, ...),
    so s is the sample time and h = 1.
    """
    n_nodes = grid.N + 1
    t_nodes = samples.t[0] + grid.s

    if samples.quaternion is not None:
        q = _resample(samples.t, samples.quaternion, t_nodes)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
    else:
        acceleration = grid.d2 if samples.acceleration is None else _resample(samples.t, samples.acceleration, t_nodes)
        try:
            flat = FlatOutput(position=grid.gamma, velocity=grid.d1, acceleration=acceleration,
                              jerk=np.zeros((n_nodes, 3)), snap=np.zeros((n_nodes, 3)), yaw=grid.yaw)
            q = flat_to_states(flat, params).quaternion
        except FlatnessSingularityError:
            q = np.tile([1.0, 0.0, 0.0, 0.0], (n_nodes, 1))
    q = make_sign_continuous(q)

    if samples.body_rate is not None:
        w = _resample(samples.t, samples.body_rate, t_nodes)
        alpha = np.gradient(w, grid.s, axis=0)
    else:
        w = np.zeros((n_nodes, 3))
        alpha = np.zeros((n_nodes, 3))

    if samples.thrusts is not None:
        u = _resample(samples.t, samples.thrusts, t_nodes)
    else:
        u = np.tile(params.hover_thrusts, (n_nodes, 1))

    return ToppDecisionState(h=np.ones(n_nodes), hp=np.zeros(n_nodes), q=q, w=w, alpha=alpha, u=u)
