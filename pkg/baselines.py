"""Comparison planners: convex speed-profile relaxations (velocity / velocity + thrust bound) and alpha-scaling.

The relaxations treat the square speed profile as a third-order integrator,
h_i+1 = h_i + h'_i ds + h''_i ds^2/2, h'_i+1 = h'_i + h''_i ds + h'''_i ds^2/2,
h''_i+1 = h''_i + h'''_i ds, driven by one h''' per interval, and minimize the
traversal time plus lam * sum(h'''^2).
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse

from exceptions import ConfigurationError, FlatnessSingularityError, InfeasibleScalingError
from nlp_core import NlpProblem, SolverOptions, solve
from reparam import EPS_H, SpeedProfile, floor_root, traversal_time
from timed_traj import profile_trajectory

log = logging.getLogger(__name__)

ALPHA_BRACKET = (1e-3, 1.0)
ALPHA_TOL = 1e-4
THRUST_MARGIN = 1e-6


@dataclass
class ConvexToppSpec:
    v_max: float = 5.0
    include_thrust_bound: bool = False
    lam: float = 0.1
    N: int = 300
    eps_h: float = EPS_H
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if not self.v_max > 0.0:
            raise ConfigurationError(f'v_max "{self.v_max}" must be positive')
        if not self.lam > 0.0:
            raise ConfigurationError(f'regularization weight "{self.lam}" must be positive')
        if self.N < 2:
            raise ConfigurationError(f'grid size N={self.N} is below 2')


@dataclass
class ConvexToppResult:
    grid: object
    speed: SpeedProfile
    hpp: np.ndarray
    hppp: np.ndarray
    total_time: float
    objective: float
    time_term: float
    report: object
    planner: str = 'topp-vel'

    @property
    def success(self):
        return self.report.converged

    @property
    def hppp_nodes(self):
        """h''' per node, taken from the interval starting at the node (last node repeats the last interval)."""
        return np.append(self.hppp, self.hppp[-1])

    def trajectory(self, params):
        return profile_trajectory(self.grid, params, self.speed.h, self.speed.hp, self.hpp, self.hppp_nodes,
                                  source=self.planner)


class ConvexToppProblem:
    """Variables [h (N+1), h' (N+1), h'' (N+1), h''' (N)]."""

    def __init__(self, grid, spec, params=None):
        if spec.include_thrust_bound and params is None:
            raise ConfigurationError('a thrust bound needs vehicle parameters')
        self.grid = grid
        self.spec = spec
        self.params = params
        self.N = grid.N
        self.n_nodes = grid.N + 1
        self.n = 3 * self.n_nodes + self.N
        speed_norm = np.linalg.norm(grid.d1, axis=1)
        self.h_upper = np.full(self.n_nodes, np.inf)
        moving = speed_norm > 1e-9
        self.h_upper[moving] = spec.v_max ** 2 / speed_norm[moving] ** 2
        self.dynamics = self._dynamics_matrix()
        if spec.include_thrust_bound:
            self.acceleration_limit = float(np.sum(params.u_max)) / params.mass
        else:
            self.acceleration_limit = None

    def h(self, z):
        return z[:self.n_nodes]

    def hp(self, z):
        return z[self.n_nodes:2 * self.n_nodes]

    def hpp(self, z):
        return z[2 * self.n_nodes:3 * self.n_nodes]

    def hppp(self, z):
        return z[3 * self.n_nodes:]

    def _dynamics_matrix(self):
        n, N, ds = self.n_nodes, self.N, self.grid.ds
        i = np.arange(N)
        h, hp, hpp, hppp = 0, n, 2 * n, 3 * n
        rows = np.concatenate([i, i, i, i,
                               N + i, N + i, N + i, N + i,
                               2 * N + i, 2 * N + i, 2 * N + i,
                               [3 * N, 3 * N + 1]])
        cols = np.concatenate([h + i + 1, h + i, hp + i, hpp + i,
                               hp + i + 1, hp + i, hpp + i, hppp + i,
                               hpp + i + 1, hpp + i, hppp + i,
                               [h, h + N]])
        ones = np.ones(N)
        data = np.concatenate([ones, -ones, -ds * ones, -0.5 * ds * ds * ones,
                               ones, -ones, -ds * ones, -0.5 * ds * ds * ones,
                               ones, -ones, -ds * ones,
                               [1.0, 1.0]])
        return sparse.csr_matrix((data, (rows, cols)), shape=(3 * N + 2, self.n))

    def time_term(self, z):
        root, _ = floor_root(self.h(z), self.spec.eps_h)
        return float(np.sum(2.0 * self.grid.ds / (root[:-1] + root[1:])))

    def objective(self, z):
        h = self.h(z)
        hppp = self.hppp(z)
        root, slope = floor_root(h, self.spec.eps_h)
        sums = root[:-1] + root[1:]
        ds = self.grid.ds
        coefficient = -2.0 * ds / sums ** 2
        grad = np.zeros(self.n)
        grad[:self.n_nodes - 1] += coefficient * slope[:-1]
        grad[1:self.n_nodes] += coefficient * slope[1:]
        grad[3 * self.n_nodes:] = 2.0 * self.spec.lam * hppp
        value = float(np.sum(2.0 * ds / sums) + self.spec.lam * np.sum(hppp ** 2))
        return value, grad

    def equalities(self, z):
        return self.dynamics @ z, self.dynamics

    def inequalities(self, z):
        """|g' h'/2 + g'' h - gravity|^2 - a_max^2 per node."""
        h, hp = self.h(z), self.hp(z)
        g = self.grid
        acceleration = 0.5 * hp[:, None] * g.d1 + h[:, None] * g.d2 - self.params.gravity
        values = np.sum(acceleration ** 2, axis=1) - self.acceleration_limit ** 2
        i = np.arange(self.n_nodes)
        rows = np.concatenate([i, i])
        cols = np.concatenate([i, self.n_nodes + i])
        data = np.concatenate([2.0 * np.sum(acceleration * g.d2, axis=1), np.sum(acceleration * g.d1, axis=1)])
        return values, sparse.csr_matrix((data, (rows, cols)), shape=(self.n_nodes, self.n))

    def initial_point(self):
        finite = self.h_upper[np.isfinite(self.h_upper)]
        level = 0.25 * float(np.min(finite)) if finite.size else 1.0
        z = np.zeros(self.n)
        z[1:self.n_nodes - 1] = np.minimum(level, self.h_upper[1:-1])
        return z

    def objective_pattern(self):
        """Traversal time couples neighbouring h; the jerk penalty is diagonal in h'''."""
        h = np.arange(self.n_nodes)
        jerk = np.arange(3 * self.n_nodes, self.n)
        return (np.concatenate([h, h[:-1], jerk]), np.concatenate([h, h[1:], jerk]))

    def nlp(self):
        n_nodes = self.n_nodes
        lower = np.full(self.n, -np.inf)
        upper = np.full(self.n, np.inf)
        lower[:n_nodes] = self.spec.eps_h
        # h_0 = h_N = 0 are equality rows
        lower[[0, n_nodes - 1]] = -np.inf
        upper[:n_nodes] = self.h_upper

        finite = self.h_upper[np.isfinite(self.h_upper)]
        h_scale = max(1.0, float(np.median(finite)) if finite.size else 1.0)
        length = self.grid.s_end / 4.0
        scale = np.concatenate([np.full(n_nodes, h_scale), np.full(n_nodes, max(1.0, h_scale / length)),
                                np.full(n_nodes, max(1.0, h_scale / length ** 2)),
                                np.full(self.N, max(1.0, h_scale / length ** 3))])
        thrust_bound = self.acceleration_limit is not None
        dynamics = self.dynamics.tocoo()
        pattern = None
        if thrust_bound:
            _, jacobian = self.inequalities(self.initial_point())
            jacobian = jacobian.tocoo()
            pattern = (jacobian.row, jacobian.col)
        return NlpProblem(n=self.n, objective=self.objective, lower=lower, upper=upper,
                          equalities=self.equalities, inequalities=self.inequalities if thrust_bound else None,
                          n_eq=self.dynamics.shape[0], n_ineq=n_nodes if thrust_bound else 0,
                          eq_pattern=(dynamics.row, dynamics.col), ineq_pattern=pattern,
                          objective_pattern=self.objective_pattern(),
                          variable_scale=scale,
                          ineq_scale=np.full(n_nodes, self.acceleration_limit ** 2) if thrust_bound else None,
                          eq_families={'integrator': slice(0, 3 * self.N), 'boundary': slice(3 * self.N, 3 * self.N + 2)},
                          ineq_families={'thrust': slice(0, n_nodes)} if thrust_bound else {})


def _solve_relaxation(grid, spec, params, planner):
    problem = ConvexToppProblem(grid, spec, params)
    z, report = solve(problem.nlp(), problem.initial_point(), spec.solver)
    h = np.maximum(problem.h(z), 0.0)
    speed = SpeedProfile(h, problem.hp(z).copy())
    total_time = traversal_time(speed, grid)
    objective, _ = problem.objective(z)
    log.info('%s: T=%.4f s, status %s', planner, total_time, report.status.value)
    return ConvexToppResult(grid=grid, speed=speed, hpp=problem.hpp(z).copy(), hppp=problem.hppp(z).copy(),
                            total_time=total_time, objective=objective, time_term=problem.time_term(z),
                            report=report, planner=planner)


def topp_vel(grid, spec):
    """Speed profile under 0 <= h_i <= v_max^2 / |gamma'_i|^2 only."""
    return _solve_relaxation(grid, replace(spec, include_thrust_bound=False),
                             None, 'topp-vel')


def topp_acc(grid, spec, params):
    """Speed profile under the speed bound and |a - gravity| <= total max thrust / mass."""
    return _solve_relaxation(grid, replace(spec, include_thrust_bound=True),
                             params, 'topp-acc')


def _feasible(traj, alpha, params, margin):
    try:
        thrusts = traj.dilated(alpha, params).thrusts
    except FlatnessSingularityError:
        return False
    return bool(np.all(thrusts >= params.u_min + margin) and np.all(thrusts <= params.u_max - margin))


def alpha_scale(traj, params, margin=THRUST_MARGIN, tol=ALPHA_TOL, bracket=ALPHA_BRACKET):
    """Largest alpha in (0, 1] with all flat-map motor thrusts of traj dilated by alpha inside the bounds.

    Returns (dilated trajectory, alpha); raises InfeasibleScalingError when
    even the slowest bracket value is infeasible.
    """
    low, high = bracket
    if _feasible(traj, high, params, margin):
        return traj.dilated(high, params), high
    if not _feasible(traj, low, params, margin):
        raise InfeasibleScalingError(f'trajectory "{traj.source}" violates thrust bounds even at alpha={low:g}')
    while high / low - 1.0 > tol:
        middle = 0.5 * (low + high)
        if _feasible(traj, middle, params, margin):
            low = middle
        else:
            high = middle
    log.debug('alpha-scaled "%s" by %.6f', traj.source, low)
    return traj.dilated(low, params), low
