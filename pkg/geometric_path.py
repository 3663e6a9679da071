"""Minimum-derivative seed trajectories through waypoints and the geometric paths built from them"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import PPoly, make_interp_spline
from scipy.linalg import cholesky, lstsq, null_space

from exceptions import ConfigurationError, FitError, TrajectoryIOError

log = logging.getLogger(__name__)

ORDERS = {'acc': 2, 'jerk': 3, 'snap': 4}
MAX_DERIVATIVE = 4


def derivative_order(order):
    if isinstance(order, str):
        if order not in ORDERS:
            raise ConfigurationError(f'unknown minimization order "{order}"')
        return ORDERS[order]
    if int(order) not in ORDERS.values():
        raise ConfigurationError(f'unknown minimization order "{order}"')
    return int(order)


def order_name(order):
    """'acc', 'jerk' or 'snap' for a derivative order."""
    k = derivative_order(order)
    return next(name for name, value in ORDERS.items() if value == k)


@dataclass(frozen=True, eq=False)
class WaypointSet:
    positions: np.ndarray
    yaw: Optional[np.ndarray] = None

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ConfigurationError(f'waypoints must be an (n, 3) array, got shape {positions.shape}')
        if len(positions) < 2:
            raise ConfigurationError('at least two waypoints are required')
        steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
        repeated = np.flatnonzero(steps == 0.0)
        if repeated.size:
            raise ConfigurationError(f'waypoints {repeated[0]} and {repeated[0] + 1} coincide')
        object.__setattr__(self, 'positions', positions)
        if self.yaw is not None:
            yaw = np.array(self.yaw, dtype=float).reshape(-1)
            if len(yaw) != len(positions):
                raise ConfigurationError(f'{len(yaw)} yaw values for {len(positions)} waypoints')
            object.__setattr__(self, 'yaw', yaw)

    def __len__(self):
        return len(self.positions)

    @property
    def polyline_length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    @classmethod
    def from_csv(cls, file_path):
        """Read waypoints from a CSV file with header x,y,z[,yaw]."""
        try:
            table = np.genfromtxt(file_path, delimiter=',', names=True, ndmin=1)
        except OSError as error:
            raise TrajectoryIOError(f'file "{file_path}" not accessible', path=file_path) from error
        names = table.dtype.names or ()
        if not {'x', 'y', 'z'}.issubset(names):
            raise ConfigurationError(f'file "{file_path}" needs columns x,y,z, found {names}')
        positions = np.column_stack([table['x'], table['y'], table['z']])
        yaw = table['yaw'] if 'yaw' in names else None
        return cls(positions, yaw)

    @classmethod
    def random(cls, rng, count, box):
        return cls(rng.uniform(0.0, 1.0, size=(count, 3)) * np.asarray(box, dtype=float))


def _basis_row(n_coefficients, derivative, tau):
    """Row of d^r/dtau^r tau^m for m = 0..n-1."""
    row = np.zeros(n_coefficients)
    for m in range(derivative, n_coefficients):
        row[m] = math.factorial(m) / math.factorial(m - derivative) * tau ** (m - derivative)
    return row


class MinDerivativeProblem:
    """Equality-constrained least-squares problem of a rest-to-rest minimum-derivative spline.

    Each segment j is a polynomial of degree 2k-1 in normalized time
    tau = (t - t_j) / T_j. Unknowns are stacked segment by segment.
    """

    def __init__(self, durations, k):
        self.durations = np.asarray(durations, dtype=float)
        self.k = k
        self.n_coefficients = 2 * k
        self.n_segments = len(self.durations)
        self.n_unknowns = self.n_segments * self.n_coefficients

    def _block(self, segment):
        return slice(segment * self.n_coefficients, (segment + 1) * self.n_coefficients)

    def constraints(self, values):
        """Constraint matrix A and right-hand sides b (one column per axis)."""
        values = np.asarray(values, dtype=float)
        k, n, durations = self.k, self.n_coefficients, self.durations
        rows = []
        rhs = []

        def add(entries, target):
            row = np.zeros(self.n_unknowns)
            for segment, coefficients in entries:
                row[self._block(segment)] += coefficients
            rows.append(row)
            rhs.append(target)

        zero = np.zeros(values.shape[1])
        add([(0, _basis_row(n, 0, 0.0))], values[0])
        for r in range(1, k):
            add([(0, _basis_row(n, r, 0.0))], zero)
        for j in range(self.n_segments):
            add([(j, _basis_row(n, 0, 1.0))], values[j + 1])
            if j > 0:
                add([(j, _basis_row(n, 0, 0.0))], values[j])
                for r in range(1, k):
                    add([(j - 1, _basis_row(n, r, 1.0) / durations[j - 1] ** r),
                         (j, -_basis_row(n, r, 0.0) / durations[j] ** r)], zero)
        last = self.n_segments - 1
        for r in range(1, k):
            add([(last, _basis_row(n, r, 1.0))], zero)
        return np.array(rows), np.array(rhs)

    def cost_factor(self):
        """Matrix L with cost = ||L c||^2 = integral of ||d^k p / dt^k||^2."""
        k, n = self.k, self.n_coefficients
        factors = np.array([math.factorial(m) / math.factorial(m - k) for m in range(k, n)])
        exponents = np.arange(k, n)
        hessian = np.outer(factors, factors) / (exponents[:, None] + exponents[None, :] - 2 * k + 1)
        upper = cholesky(hessian, lower=False)
        factor = np.zeros((self.n_segments * k, self.n_unknowns))
        for j, duration in enumerate(self.durations):
            columns = self._block(j)
            factor[j * k:(j + 1) * k, columns.start + k:columns.stop] = upper * duration ** (0.5 - k)
        return factor

    def solve(self, values):
        a, b = self.constraints(values)
        particular, _, rank, _ = lstsq(a, b)
        if rank < a.shape[0]:
            raise FitError(f'constraint system is rank deficient ({rank} < {a.shape[0]})')
        basis = null_space(a)
        if basis.shape[1] == 0:
            return particular
        factor = self.cost_factor()
        reduced, _, rank, _ = lstsq(factor @ basis, -factor @ particular)
        if rank < basis.shape[1]:
            singular = int(np.argmin(self.durations))
            raise FitError(f'cost is degenerate, shortest segment {singular}', segment=singular)
        return particular + basis @ reduced

    def cost(self, coefficients):
        residual = self.cost_factor() @ np.asarray(coefficients, dtype=float)
        return float(np.sum(residual ** 2))


class PiecewisePolynomialPath:
    """Timed piecewise-polynomial trajectory with optional yaw channel."""

    def __init__(self, breakpoints, coefficients, order, waypoints, normalized=None):
        self.breakpoints = np.asarray(breakpoints, dtype=float)
        self.order = order
        self.waypoints = waypoints
        self.normalized_coefficients = normalized
        self.ppoly = PPoly(coefficients[:, :, :3], self.breakpoints)
        self.yaw_ppoly = PPoly(coefficients[:, :, 3], self.breakpoints) if coefficients.shape[2] > 3 else None

    @property
    def duration(self):
        return float(self.breakpoints[-1] - self.breakpoints[0])

    @property
    def segment_times(self):
        return np.diff(self.breakpoints)

    def evaluate(self, t, derivative=0):
        return self.ppoly(t, nu=derivative)

    def cost(self):
        """Integral of the squared minimized derivative, by Gauss-Legendre quadrature (exact)."""
        nodes, weights = leggauss(self.order)
        total = 0.0
        derivative = self.ppoly.derivative(self.order)
        for start, stop in zip(self.breakpoints[:-1], self.breakpoints[1:]):
            half = 0.5 * (stop - start)
            t = start + half * (nodes + 1.0)
            total += half * np.sum(weights * np.sum(derivative(t) ** 2, axis=1))
        return float(total)


def fit_min_derivative(waypoints, order, nominal_velocity):
    """Rest-to-rest minimum acceleration/jerk/snap trajectory through the waypoints.

    Segment times are inter-waypoint distances divided by the nominal velocity.
    """
    k = derivative_order(order)
    if not nominal_velocity > 0.0:
        raise ConfigurationError(f'nominal velocity "{nominal_velocity}" must be positive')
    durations = np.linalg.norm(np.diff(waypoints.positions, axis=0), axis=1) / nominal_velocity
    degenerate = np.flatnonzero(durations <= 0.0)
    if degenerate.size:
        raise FitError(f'segment {degenerate[0]} has zero duration', segment=int(degenerate[0]))

    values = waypoints.positions
    if waypoints.yaw is not None:
        values = np.column_stack([values, waypoints.yaw])

    problem = MinDerivativeProblem(durations, k)
    solution = problem.solve(values)

    n = problem.n_coefficients
    normalized = solution.reshape(problem.n_segments, n, -1)
    powers = np.arange(n)
    local = normalized / durations[:, None, None] ** powers[None, :, None]
    coefficients = np.transpose(local, (1, 0, 2))[::-1]
    breakpoints = np.concatenate([[0.0], np.cumsum(durations)])
    log.debug('fitted minimum-%s trajectory, %d segments, duration %.3f s',
              order, problem.n_segments, breakpoints[-1])
    return PiecewisePolynomialPath(breakpoints, coefficients, k, waypoints, normalized=solution)


class GeometricPath:
    """Curve gamma(s) on [0, s_end] backed by a scipy piecewise polynomial (PPoly or BSpline)."""

    def __init__(self, curve, yaw_curve=None, s_end=None, source=''):
        self.curve = curve
        self.yaw_curve = yaw_curve
        self.source = source
        self.s_end = float(s_end if s_end is not None else curve.x[-1])
        self._derivatives = [curve] + [curve.derivative(r) for r in range(1, MAX_DERIVATIVE + 1)]
        self._yaw_derivatives = None
        if yaw_curve is not None:
            self._yaw_derivatives = [yaw_curve] + [yaw_curve.derivative(r) for r in (1, 2)]

    def __call__(self, s, derivative=0):
        return self._derivatives[derivative](s)

    def gamma(self, s):
        return self(s)

    def yaw(self, s, derivative=0):
        s = np.asarray(s, dtype=float)
        if self._yaw_derivatives is None:
            return np.zeros(s.shape)
        return self._yaw_derivatives[derivative](s)

    def length(self, n_samples=2001):
        s = np.linspace(0.0, self.s_end, n_samples)
        return float(np.sum(np.linalg.norm(np.diff(self(s), axis=0), axis=1)))

    @classmethod
    def from_samples(cls, t, positions, yaw=None, source='samples'):
        """Quintic interpolating spline through time-stamped positions, with s := t - t[0]."""
        t = np.asarray(t, dtype=float)
        s = t - t[0]
        curve = make_interp_spline(s, np.asarray(positions, dtype=float), k=5)
        yaw_curve = make_interp_spline(s, np.asarray(yaw, dtype=float), k=5) if yaw is not None else None
        return cls(curve, yaw_curve, s_end=s[-1], source=source)

    def to_csv(self, file_path, n_samples=1001):
        s = np.linspace(0.0, self.s_end, n_samples)
        table = np.column_stack([s, self(s), self(s, 1), self(s, 2)])
        header = 's,x,y,z,dx,dy,dz,ddx,ddy,ddz'
        try:
            np.savetxt(file_path, table, delimiter=',', header=header, comments='', fmt='%.17g')
        except OSError as error:
            raise TrajectoryIOError(f'file "{file_path}" not writable', path=file_path) from error


def to_geometric(timed):
    """Reinterpret a timed seed as a geometric path, identifying s with the seed's time."""
    return GeometricPath(timed.ppoly, timed.yaw_ppoly, s_end=timed.breakpoints[-1],
                         source=f'min-{order_name(timed.order)}')


@dataclass(frozen=True, eq=False)
class PathGrid:
    path: GeometricPath
    s: np.ndarray
    ds: float
    gamma: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    d4: np.ndarray
    yaw: np.ndarray
    yaw_d1: np.ndarray
    yaw_d2: np.ndarray

    @property
    def N(self):
        return len(self.s) - 1

    @property
    def s_end(self):
        return float(self.s[-1])


def build_grid(path, N):
    if N < 2:
        raise ConfigurationError(f'grid needs N >= 2 intervals, got {N}')
    s = np.linspace(0.0, path.s_end, N + 1)
    return PathGrid(path=path, s=s, ds=path.s_end / N,
                    gamma=path(s), d1=path(s, 1), d2=path(s, 2), d3=path(s, 3), d4=path(s, 4),
                    yaw=path.yaw(s), yaw_d1=path.yaw(s, 1), yaw_d2=path.yaw(s, 2))
