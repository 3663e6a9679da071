"""Smooth constrained optimization for the planners.

Problems are stated as

    min f(z)  s.t.  c(z) = 0,  g(z) <= 0,  lower <= z <= upper

with analytic gradients and sparse Jacobians. Inequalities get non-negative
slacks and variables and constraints are divided by user-supplied
characteristic magnitudes before the solve.

Two methods share this interface:

* ``interior-point`` (default): primal-dual barrier method on the regularized
  sparse KKT system with a merit-function line search. The Lagrangian Hessian
  is built from finite differences of the user gradients, one gradient
  evaluation per group of structurally independent columns.
* ``augmented-lagrangian``: multiplier rounds around a bound-constrained
  L-BFGS inner solver.
"""
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, minimize
from scipy.sparse.linalg import splu

from exceptions import ConfigurationError

log = logging.getLogger(__name__)

METHODS = ('interior-point', 'augmented-lagrangian')

BOUND_PUSH = 1e-2
MULTIPLIER_INIT_MAX = 1e3
GRADIENT_SCALE_MAX = 100.0
ERROR_SCALE_MAX = 100.0
BARRIER_TOL_FACTOR = 10.0
BARRIER_LINEAR = 0.2
BARRIER_SUPERLINEAR = 1.5
SIGMA_CLIP = 1e10
ARMIJO = 1e-4
PENALTY_RHO = 0.1
CURVATURE_MIN = 1e-8
REGULARIZATION_FIRST = 1e-4
REGULARIZATION_MIN = 1e-20
REGULARIZATION_MAX = 1e20
MAX_BACKTRACKS = 40
STALL_ITERATIONS = 3
INFEASIBLE_GRADIENT = 1e-6


class SolveStatus(str, Enum):
    CONVERGED = 'converged'
    MAX_ITERATIONS = 'max_iterations'
    INFEASIBLE_STATIONARY = 'infeasible_stationary'
    NUMERICAL_FAILURE = 'numerical_failure'


@dataclass
class SolverOptions:
    method: str = 'interior-point'
    feas_tol: float = 1e-6
    opt_tol: float = 1e-4
    compl_tol: float = 1e-6
    max_iterations: int = 3000
    barrier_initial: float = 0.1
    kkt_regularization: float = 1e-8
    hessian_step: float = 1.5e-8
    # augmented Lagrangian only
    max_inner_iterations: int = 200
    penalty_initial: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e12
    inner_tol_initial: float = 1e-2
    inner_ftol: float = 1e-14
    lbfgs_memory: int = 20
    verbose: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f'unknown solver method "{self.method}", expected one of {METHODS}')
        if self.max_iterations < 1:
            raise ConfigurationError(f'max_iterations "{self.max_iterations}" must be positive')


@dataclass
class NlpProblem:
    n: int
    objective: Callable[[np.ndarray], Tuple[float, np.ndarray]]
    lower: np.ndarray
    upper: np.ndarray
    equalities: Optional[Callable] = None
    inequalities: Optional[Callable] = None
    n_eq: int = 0
    n_ineq: int = 0
    eq_pattern: Optional[Tuple[np.ndarray, np.ndarray]] = None
    ineq_pattern: Optional[Tuple[np.ndarray, np.ndarray]] = None
    objective_pattern: Optional[Tuple[np.ndarray, np.ndarray]] = None
    variable_scale: Optional[np.ndarray] = None
    eq_scale: Optional[np.ndarray] = None
    ineq_scale: Optional[np.ndarray] = None
    eq_families: Dict[str, slice] = field(default_factory=dict)
    ineq_families: Dict[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.n,)).copy()
        self.variable_scale = _scale_or_ones(self.variable_scale, self.n)
        self.eq_scale = _scale_or_ones(self.eq_scale, self.n_eq)
        self.ineq_scale = _scale_or_ones(self.ineq_scale, self.n_ineq)

    def evaluate_equalities(self, z):
        if self.equalities is None or self.n_eq == 0:
            return np.zeros(0), sparse.csr_matrix((0, self.n))
        values, jacobian = self.equalities(z)
        return np.asarray(values, dtype=float), sparse.csr_matrix(jacobian)

    def evaluate_inequalities(self, z):
        if self.inequalities is None or self.n_ineq == 0:
            return np.zeros(0), sparse.csr_matrix((0, self.n))
        values, jacobian = self.inequalities(z)
        return np.asarray(values, dtype=float), sparse.csr_matrix(jacobian)


def _scale_or_ones(scale, size):
    if scale is None:
        return np.ones(size)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (size,)).copy()
    scale[scale <= 0.0] = 1.0
    return scale


@dataclass
class SolveReport:
    status: SolveStatus
    iterations: int
    outer_iterations: int
    objective: float
    max_violation: float
    stationarity: float
    wall_time: float
    penalty: float = 0.0
    message: str = ''
    failed_index: Optional[int] = None

    @property
    def converged(self):
        return self.status == SolveStatus.CONVERGED

    def as_dict(self):
        return {'status': self.status.value, 'iterations': self.iterations,
                'outer_iterations': self.outer_iterations, 'objective': self.objective,
                'max_violation': self.max_violation, 'stationarity': self.stationarity,
                'wall_time': self.wall_time, 'penalty': self.penalty, 'message': self.message,
                'failed_index': self.failed_index}


def max_violation(problem, z):
    """Largest scaled constraint violation at z (equalities in absolute value, inequalities above zero)."""
    violation = 0.0
    c, _ = problem.evaluate_equalities(z)
    if c.size:
        violation = max(violation, float(np.max(np.abs(c) / problem.eq_scale)))
    g, _ = problem.evaluate_inequalities(z)
    if g.size:
        violation = max(violation, float(np.max(np.maximum(g / problem.ineq_scale, 0.0))))
    return violation


class _NonFiniteValue(Exception):

    def __init__(self, where, index):
        super().__init__(f'non-finite {where} value at index {index}')
        self.where = where
        self.index = index


class _FactorizationFailure(Exception):
    pass


class _LineSearchFailure(Exception):

    def __init__(self, message, violation, index=None):
        super().__init__(message)
        self.violation = violation
        self.index = index


def _first_non_finite(values):
    bad = np.flatnonzero(~np.isfinite(values))
    return int(bad[0]) if bad.size else None


def _pattern_matrix(pattern, shape):
    if pattern is None:
        return None
    rows, cols = pattern
    ones = np.ones(len(rows))
    return sparse.csc_matrix((ones, (rows, cols)), shape=shape)


def _log_iteration(options, line):
    if options.verbose:
        log.info(line)
    else:
        log.debug(line)


def hessian_pattern(problem, columns=None):
    """Structural nonzeros of the Lagrangian Hessian restricted to ``columns``.

    Each constraint row couples all variables it depends on, so the pattern
    is the objective pattern plus J^T J. Returns None when a needed pattern
    is not declared.
    """
    if problem.objective_pattern is None:
        return None
    n = problem.n
    objective = _pattern_matrix(problem.objective_pattern, (n, n))
    pattern = objective + objective.T + sparse.identity(n, format='csc')
    blocks = []
    for size, declared in ((problem.n_eq, problem.eq_pattern), (problem.n_ineq, problem.ineq_pattern)):
        if size == 0:
            continue
        if declared is None:
            return None
        blocks.append(_pattern_matrix(declared, (size, n)))
    if blocks:
        jacobian = sparse.vstack(blocks).tocsc()
        pattern = pattern + (jacobian.T @ jacobian)
    pattern = pattern.tocsr()
    if columns is not None:
        pattern = pattern[columns][:, columns]
    pattern = pattern.tocoo()
    pattern.data[:] = 1.0
    return pattern.tocsr()


def color_columns(pattern):
    """Greedy grouping of columns such that no two columns of a group share a row of the pattern."""
    csc = pattern.tocsc()
    csr = pattern.tocsr()
    n = pattern.shape[1]
    colors = np.full(n, -1)
    for j in range(n):
        rows = csc.indices[csc.indptr[j]:csc.indptr[j + 1]]
        if rows.size:
            neighbors = np.concatenate([csr.indices[csr.indptr[r]:csr.indptr[r + 1]] for r in rows])
            used = set(colors[neighbors][colors[neighbors] >= 0].tolist())
        else:
            used = set()
        color = 0
        while color in used:
            color += 1
        colors[j] = color
    return colors


def _max_step(values, direction, tau):
    """Largest alpha in (0, 1] keeping values + alpha direction >= (1 - tau) values for positive values."""
    shrinking = direction < 0.0
    if not np.any(shrinking):
        return 1.0
    return float(min(1.0, np.min(-tau * values[shrinking] / direction[shrinking])))


@dataclass
class _Point:
    y: np.ndarray
    x: np.ndarray
    f: float
    gradient: np.ndarray
    objective_gradient: np.ndarray
    residual: np.ndarray
    jacobian: object
    constraint_jacobian: object
    violation: float


@dataclass
class _Step:
    dy: np.ndarray
    dlam: np.ndarray
    dzl: np.ndarray
    dzu: np.ndarray
    barrier_gradient: np.ndarray
    curvature: float
    factor: object
    delta_w: float


class _InteriorPoint:
    """Primal-dual barrier method over y = [free variables / scale, slacks]."""

    def __init__(self, problem, options):
        self.problem = problem
        self.options = options
        self.d = problem.variable_scale
        lower = problem.lower / self.d
        upper = problem.upper / self.d
        fixed = lower == upper
        self.free = np.flatnonzero(~fixed)
        self.x_fixed = np.where(fixed, lower, 0.0)
        self.n_free = self.free.size
        self.n_s = problem.n_ineq
        self.n_y = self.n_free + self.n_s
        self.m = problem.n_eq + problem.n_ineq
        self.lower = np.concatenate([lower[self.free], np.zeros(self.n_s)])
        self.upper = np.concatenate([upper[self.free], np.full(self.n_s, np.inf)])
        self.has_lower = np.isfinite(self.lower)
        self.has_upper = np.isfinite(self.upper)
        self.objective_scale = 1.0
        slack_rows = problem.n_eq + np.arange(self.n_s)
        self.slack_block = sparse.csr_matrix((np.ones(self.n_s), (slack_rows, np.arange(self.n_s))),
                                             shape=(self.m, self.n_s))
        self.mu_min = 0.1 * min(options.opt_tol, options.compl_tol, options.feas_tol)
        self.delta_w_last = 0.0
        self._prepare_hessian()

    def _prepare_hessian(self):
        pattern = hessian_pattern(self.problem, self.free)
        if pattern is None:
            pattern = sparse.csr_matrix(np.ones((self.n_free, self.n_free)))
        colors = color_columns(pattern) if self.n_free else np.zeros(0, dtype=int)
        pattern = pattern.tocoo()
        self.hessian_rows = pattern.row
        self.hessian_cols = pattern.col
        entry_colors = colors[pattern.col]
        self.color_groups = [(np.flatnonzero(colors == color), np.flatnonzero(entry_colors == color))
                             for color in range(int(colors.max()) + 1 if colors.size else 0)]
        log.debug('Hessian: %d free variables, %d structural entries, %d gradient evaluations',
                  self.n_free, pattern.nnz, len(self.color_groups))

    def variables(self, y):
        x = self.x_fixed.copy()
        x[self.free] = y[:self.n_free]
        return x

    def evaluate(self, y):
        problem = self.problem
        x = self.variables(y)
        z = self.d * x
        f, grad_f = problem.objective(z)
        if not np.isfinite(f):
            raise _NonFiniteValue('objective', None)
        grad_f = np.asarray(grad_f, dtype=float)
        bad = _first_non_finite(grad_f)
        if bad is not None:
            raise _NonFiniteValue('objective gradient', bad)

        parts = []
        blocks = []
        violation = 0.0
        if problem.n_eq:
            c, jc = problem.evaluate_equalities(z)
            bad = _first_non_finite(c)
            if bad is not None:
                raise _NonFiniteValue('equality constraint', bad)
            c = c / problem.eq_scale
            violation = max(violation, float(np.max(np.abs(c))))
            parts.append(c)
            blocks.append(sparse.diags(1.0 / problem.eq_scale) @ jc)
        if problem.n_ineq:
            g, jg = problem.evaluate_inequalities(z)
            bad = _first_non_finite(g)
            if bad is not None:
                raise _NonFiniteValue('inequality constraint', problem.n_eq + bad)
            g = g / problem.ineq_scale
            violation = max(violation, float(np.max(np.maximum(g, 0.0))))
            parts.append(g + y[self.n_free:])
            blocks.append(sparse.diags(1.0 / problem.ineq_scale) @ jg)

        objective_gradient = self.objective_scale * self.d * grad_f
        gradient = np.concatenate([objective_gradient[self.free], np.zeros(self.n_s)])
        if blocks:
            constraint_jacobian = (sparse.vstack(blocks) @ sparse.diags(self.d)).tocsr()
            jacobian = constraint_jacobian[:, self.free]
            if self.n_s:
                jacobian = sparse.hstack([jacobian, self.slack_block]).tocsr()
        else:
            constraint_jacobian = sparse.csr_matrix((0, problem.n))
            jacobian = sparse.csr_matrix((0, self.n_y))
        return _Point(y=y, x=x, f=float(f), gradient=gradient, objective_gradient=objective_gradient,
                      residual=np.concatenate(parts) if parts else np.zeros(0), jacobian=jacobian,
                      constraint_jacobian=constraint_jacobian, violation=violation)

    def lagrangian_gradient(self, x, lam):
        problem = self.problem
        z = self.d * x
        _, grad_f = problem.objective(z)
        grad = self.objective_scale * np.asarray(grad_f, dtype=float)
        if problem.n_eq:
            _, jc = problem.evaluate_equalities(z)
            grad = grad + jc.T @ (lam[:problem.n_eq] / problem.eq_scale)
        if problem.n_ineq:
            _, jg = problem.evaluate_inequalities(z)
            grad = grad + jg.T @ (lam[problem.n_eq:] / problem.ineq_scale)
        return self.d * grad

    def hessian(self, point, lam):
        """Forward-difference Lagrangian Hessian over the free variables, symmetrized."""
        base = point.objective_gradient + point.constraint_jacobian.T @ lam
        x = point.x
        steps = self.options.hessian_step * np.maximum(1.0, np.abs(x[self.free]))
        values = np.zeros(self.hessian_rows.size)
        for columns, entries in self.color_groups:
            shifted = x.copy()
            shifted[self.free[columns]] += steps[columns]
            diff = self.lagrangian_gradient(shifted, lam)[self.free] - base[self.free]
            values[entries] = diff[self.hessian_rows[entries]] / steps[self.hessian_cols[entries]]
        bad = _first_non_finite(values)
        if bad is not None:
            raise _NonFiniteValue('Hessian', None)
        hessian = sparse.csr_matrix((values, (self.hessian_rows, self.hessian_cols)),
                                    shape=(self.n_free, self.n_free))
        return 0.5 * (hessian + hessian.T)

    def distances(self, y):
        lower = np.where(self.has_lower, y - np.where(self.has_lower, self.lower, 0.0), 1.0)
        upper = np.where(self.has_upper, np.where(self.has_upper, self.upper, 0.0) - y, 1.0)
        return lower, upper

    def push_inside(self, y):
        lower = np.where(self.has_lower, self.lower, 0.0)
        upper = np.where(self.has_upper, self.upper, 0.0)
        width = np.where(self.has_lower & self.has_upper, upper - lower, np.inf)
        push_lower = np.minimum(BOUND_PUSH * np.maximum(1.0, np.abs(lower)), BOUND_PUSH * width)
        push_upper = np.minimum(BOUND_PUSH * np.maximum(1.0, np.abs(upper)), BOUND_PUSH * width)
        y = y.copy()
        y = np.where(self.has_lower, np.maximum(y, lower + push_lower), y)
        y = np.where(self.has_upper, np.minimum(y, upper - push_upper), y)
        return y

    def errors(self, point, lam, zl, zu, mu):
        """Dual infeasibility and complementarity at mu, both divided by the multiplier-size scaling."""
        dual = point.gradient - zl + zu
        if self.m:
            dual = dual + point.jacobian.T @ lam
        dist_lower, dist_upper = self.distances(point.y)
        compl = np.concatenate([(dist_lower * zl - mu)[self.has_lower], (dist_upper * zu - mu)[self.has_upper]])
        n_bounds = max(1, int(np.sum(self.has_lower) + np.sum(self.has_upper)))
        bound_sum = float(np.sum(np.abs(zl)) + np.sum(np.abs(zu)))
        multiplier_mean = (float(np.sum(np.abs(lam))) + bound_sum) / max(1, self.m + self.n_y)
        s_d = max(ERROR_SCALE_MAX, multiplier_mean) / ERROR_SCALE_MAX
        s_c = max(ERROR_SCALE_MAX, bound_sum / n_bounds) / ERROR_SCALE_MAX
        dual_error = float(np.max(np.abs(dual))) / s_d if dual.size else 0.0
        compl_error = float(np.max(np.abs(compl))) / s_c if compl.size else 0.0
        return dual_error, compl_error

    def barrier_error(self, point, lam, zl, zu, mu):
        dual, compl = self.errors(point, lam, zl, zu, mu)
        primal = float(np.max(np.abs(point.residual))) if point.residual.size else 0.0
        return max(dual, compl, primal)

    def barrier_objective(self, point, mu):
        dist_lower, dist_upper = self.distances(point.y)
        value = self.objective_scale * point.f
        value -= mu * float(np.sum(np.log(dist_lower[self.has_lower])))
        value -= mu * float(np.sum(np.log(dist_upper[self.has_upper])))
        return value

    def merit(self, point, mu, nu):
        return self.barrier_objective(point, mu) + nu * float(np.linalg.norm(point.residual))

    def initial_multipliers(self, point, zl, zu):
        if not self.m:
            return np.zeros(0)
        kkt = sparse.bmat([[sparse.identity(self.n_y), point.jacobian.T],
                           [point.jacobian, -self.options.kkt_regularization * sparse.identity(self.m)]],
                          format='csc')
        rhs = np.concatenate([-(point.gradient - zl + zu), np.zeros(self.m)])
        try:
            lam = splu(kkt).solve(rhs)[self.n_y:]
        except RuntimeError:
            return np.zeros(self.m)
        if not np.all(np.isfinite(lam)) or np.max(np.abs(lam), initial=0.0) > MULTIPLIER_INIT_MAX:
            return np.zeros(self.m)
        return lam

    def _factor(self, hessian, sigma, jacobian, delta_w, delta_c):
        if self.n_s:
            hessian = sparse.block_diag([hessian, sparse.csr_matrix((self.n_s, self.n_s))])
        upper_left = hessian + sparse.diags(sigma + delta_w)
        if self.m:
            kkt = sparse.bmat([[upper_left, jacobian.T], [jacobian, -delta_c * sparse.identity(self.m)]],
                              format='csc')
        else:
            kkt = upper_left.tocsc()
        try:
            return splu(kkt)
        except RuntimeError:
            return None

    def newton_step(self, point, hessian, lam, zl, zu, mu):
        """Solve the primal-dual system, adding delta_w I until the reduced Hessian shows positive curvature."""
        dist_lower, dist_upper = self.distances(point.y)
        sigma = np.where(self.has_lower, zl / dist_lower, 0.0) + np.where(self.has_upper, zu / dist_upper, 0.0)
        barrier_gradient = (point.gradient - np.where(self.has_lower, mu / dist_lower, 0.0)
                            + np.where(self.has_upper, mu / dist_upper, 0.0))
        dual = barrier_gradient + point.jacobian.T @ lam if self.m else barrier_gradient
        rhs = -np.concatenate([dual, point.residual])
        delta_c = self.options.kkt_regularization * mu ** 0.25

        delta_w = 0.0
        while True:
            factor = self._factor(hessian, sigma, point.jacobian, delta_w, delta_c)
            if factor is not None:
                solution = factor.solve(rhs)
                if np.all(np.isfinite(solution)):
                    dy = solution[:self.n_y]
                    dx = dy[:self.n_free]
                    curvature = float(dx @ (hessian @ dx) + dy @ (sigma * dy))
                    if curvature + delta_w * float(dy @ dy) >= CURVATURE_MIN * float(dy @ dy):
                        break
            if delta_w == 0.0:
                delta_w = REGULARIZATION_FIRST if self.delta_w_last == 0.0 \
                    else max(REGULARIZATION_MIN, self.delta_w_last / 3.0)
            else:
                delta_w *= 100.0 if self.delta_w_last == 0.0 else 8.0
            if delta_w > REGULARIZATION_MAX:
                raise _FactorizationFailure(f'KKT system stays indefinite with delta_w {delta_w:.1e}')
        if delta_w > 0.0:
            self.delta_w_last = delta_w

        dlam = solution[self.n_y:]
        dzl = np.where(self.has_lower, mu / dist_lower - zl - zl / dist_lower * dy, 0.0)
        dzu = np.where(self.has_upper, mu / dist_upper - zu + zu / dist_upper * dy, 0.0)
        return _Step(dy=dy, dlam=dlam, dzl=dzl, dzu=dzu, barrier_gradient=barrier_gradient,
                     curvature=curvature, factor=factor, delta_w=delta_w)

    def primal_step_limit(self, y, direction, tau):
        dist_lower, dist_upper = self.distances(y)
        return min(_max_step(dist_lower[self.has_lower], direction[self.has_lower], tau),
                   _max_step(dist_upper[self.has_upper], -direction[self.has_upper], tau))

    def clip_bound_multipliers(self, y, zl, zu, mu):
        dist_lower, dist_upper = self.distances(y)
        zl = np.where(self.has_lower, np.clip(zl, mu / (SIGMA_CLIP * dist_lower), SIGMA_CLIP * mu / dist_lower), 0.0)
        zu = np.where(self.has_upper, np.clip(zu, mu / (SIGMA_CLIP * dist_upper), SIGMA_CLIP * mu / dist_upper), 0.0)
        return zl, zu

    def run(self, z0):
        options = self.options
        problem = self.problem
        iterations = barrier_updates = stalled = 0
        status = SolveStatus.MAX_ITERATIONS
        message = ''
        failed_index = None
        mu = options.barrier_initial
        nu = 1.0
        dual_error = float('inf')
        point = None

        x0 = np.clip(np.asarray(z0, dtype=float) / self.d, problem.lower / self.d, problem.upper / self.d)
        y = np.concatenate([x0[self.free], np.zeros(self.n_s)])
        try:
            if self.n_s:
                g, _ = problem.evaluate_inequalities(self.d * self.variables(y))
                bad = _first_non_finite(g)
                if bad is not None:
                    raise _NonFiniteValue('inequality constraint', problem.n_eq + bad)
                y[self.n_free:] = np.maximum(-g / problem.ineq_scale, 0.0)
            y = self.push_inside(y)
            point = self.evaluate(y)
            gradient_norm = float(np.max(np.abs(point.gradient), initial=0.0))
            if gradient_norm > GRADIENT_SCALE_MAX:
                self.objective_scale = GRADIENT_SCALE_MAX / gradient_norm
                point = self.evaluate(y)
            zl = np.where(self.has_lower, 1.0, 0.0)
            zu = np.where(self.has_upper, 1.0, 0.0)
            lam = self.initial_multipliers(point, zl, zu)

            while True:
                dual_error, compl_error = self.errors(point, lam, zl, zu, 0.0)
                _log_iteration(options, f'iter {iterations:5d} f {point.f: .8e} viol {point.violation:.2e} '
                                        f'dual {dual_error:.2e} compl {compl_error:.2e} mu {mu:.1e}')
                if point.violation <= options.feas_tol and dual_error <= options.opt_tol \
                        and compl_error <= options.compl_tol:
                    status = SolveStatus.CONVERGED
                    break
                if self.n_y == 0:
                    status = SolveStatus.INFEASIBLE_STATIONARY
                    message = 'no free variables left to reduce the violation'
                    break
                if point.violation > options.feas_tol and self.m:
                    infeasibility_gradient = float(np.max(np.abs(point.jacobian.T @ point.residual), initial=0.0))
                    if infeasibility_gradient <= INFEASIBLE_GRADIENT * float(np.max(np.abs(point.residual))):
                        stalled += 1
                    else:
                        stalled = 0
                    if stalled >= STALL_ITERATIONS:
                        status = SolveStatus.INFEASIBLE_STATIONARY
                        message = f'stationary point of the violation {point.violation:.2e}'
                        break
                if iterations >= options.max_iterations:
                    message = f'stopped after {iterations} iterations'
                    break

                while mu > self.mu_min and self.barrier_error(point, lam, zl, zu, mu) <= BARRIER_TOL_FACTOR * mu:
                    mu = max(self.mu_min, min(BARRIER_LINEAR * mu, mu ** BARRIER_SUPERLINEAR))
                    barrier_updates += 1
                tau = max(0.99, 1.0 - mu)

                step = self.newton_step(point, self.hessian(point, lam), lam, zl, zu, mu)
                nu = self._update_penalty(point, step, nu)
                point, lam = self._line_search(point, step, lam, mu, nu, tau)
                alpha_z = min(_max_step(zl[self.has_lower], step.dzl[self.has_lower], tau),
                              _max_step(zu[self.has_upper], step.dzu[self.has_upper], tau))
                zl, zu = self.clip_bound_multipliers(point.y, zl + alpha_z * step.dzl, zu + alpha_z * step.dzu, mu)
                iterations += 1
        except _NonFiniteValue as error:
            status = SolveStatus.NUMERICAL_FAILURE
            message = str(error)
            failed_index = error.index
        except _FactorizationFailure as error:
            status = SolveStatus.NUMERICAL_FAILURE
            message = str(error)
        except _LineSearchFailure as error:
            status = SolveStatus.INFEASIBLE_STATIONARY if error.violation > options.feas_tol \
                else SolveStatus.NUMERICAL_FAILURE
            message = str(error)
            failed_index = error.index
        if point is not None:
            y = point.y

        z = np.clip(self.d * self.variables(y), problem.lower, problem.upper)
        return z, _report(problem, z, status, iterations, barrier_updates, dual_error, nu, message, failed_index)

    def _update_penalty(self, point, step, nu):
        norm = float(np.linalg.norm(point.residual))
        if norm <= 0.0:
            return nu
        required = (float(step.barrier_gradient @ step.dy) + 0.5 * max(step.curvature, 0.0)) \
            / ((1.0 - PENALTY_RHO) * norm)
        return required + 1.0 if required > nu else nu

    def _directional_derivative(self, point, step, nu):
        slope = float(step.barrier_gradient @ step.dy)
        if self.m:
            change = point.jacobian @ step.dy
            norm = float(np.linalg.norm(point.residual))
            slope += nu * (float(point.residual @ change) / norm if norm > 0.0 else float(np.linalg.norm(change)))
        return min(slope, 0.0)

    def _line_search(self, point, step, lam, mu, nu, tau):
        """Backtracking on the barrier merit with one second-order correction; returns (point, lam)."""
        reference = self.merit(point, mu, nu)
        slope = self._directional_derivative(point, step, nu)
        slack = 10.0 * np.finfo(float).eps * abs(reference)
        alpha = self.primal_step_limit(point.y, step.dy, tau)
        last_error = None
        for attempt in range(MAX_BACKTRACKS):
            try:
                trial = self.evaluate(point.y + alpha * step.dy)
            except _NonFiniteValue as error:
                last_error = error
                trial = None
            if trial is not None:
                if self.merit(trial, mu, nu) <= reference + ARMIJO * alpha * slope + slack:
                    return trial, lam + alpha * step.dlam
                if attempt == 0 and self.m and \
                        np.linalg.norm(trial.residual) >= np.linalg.norm(point.residual):
                    corrected = self._second_order_correction(point, step, trial, lam, mu, alpha, tau)
                    if corrected is not None and \
                            self.merit(corrected[0], mu, nu) <= reference + ARMIJO * alpha * slope + slack:
                        return corrected
            alpha *= 0.5
        raise _LineSearchFailure(f'line search failed at violation {point.violation:.2e}', point.violation,
                                  last_error.index if last_error is not None else None)

    def _second_order_correction(self, point, step, trial, lam, mu, alpha, tau):
        residual = alpha * point.residual + trial.residual
        dual = step.barrier_gradient + point.jacobian.T @ lam
        solution = step.factor.solve(-np.concatenate([dual, residual]))
        if not np.all(np.isfinite(solution)):
            return None
        direction = solution[:self.n_y]
        alpha_soc = self.primal_step_limit(point.y, direction, tau)
        try:
            corrected = self.evaluate(point.y + alpha_soc * direction)
        except _NonFiniteValue:
            return None
        return corrected, lam + alpha_soc * solution[self.n_y:]


def _report(problem, z, status, iterations, outer, stationarity, penalty, message, failed_index):
    try:
        objective = float(problem.objective(z)[0])
        violation = max_violation(problem, z)
    except (FloatingPointError, ValueError, ZeroDivisionError):
        objective = violation = float('nan')
    return SolveReport(status=status, iterations=iterations, outer_iterations=outer, objective=objective,
                       max_violation=violation, stationarity=float(stationarity), wall_time=0.0,
                       penalty=float(penalty), message=message, failed_index=failed_index)


class _AugmentedLagrangian:
    """Merit function over x = [z / D, slacks] for fixed multipliers and penalty."""

    def __init__(self, problem):
        self.problem = problem
        self.n = problem.n
        self.n_eq = problem.n_eq
        self.n_ineq = problem.n_ineq
        self.d = problem.variable_scale
        self.eq_rows = sparse.diags(1.0 / problem.eq_scale) if self.n_eq else None
        self.ineq_rows = sparse.diags(1.0 / problem.ineq_scale) if self.n_ineq else None
        self.multipliers = np.zeros(self.n_eq + self.n_ineq)
        self.penalty = 1.0

    def variables(self, x):
        return self.d * x[:self.n]

    def residuals(self, x, with_jacobian=True):
        """Scaled constraint residuals r(x) and, optionally, their Jacobian blocks w.r.t. x."""
        z = self.variables(x)
        parts = []
        jac_eq = jac_ineq = None
        if self.n_eq:
            c, jc = self.problem.evaluate_equalities(z)
            bad = _first_non_finite(c)
            if bad is not None:
                raise _NonFiniteValue('equality constraint', bad)
            parts.append(c / self.problem.eq_scale)
            if with_jacobian:
                jac_eq = (self.eq_rows @ jc @ sparse.diags(self.d)).tocsr()
        if self.n_ineq:
            g, jg = self.problem.evaluate_inequalities(z)
            bad = _first_non_finite(g)
            if bad is not None:
                raise _NonFiniteValue('inequality constraint', self.n_eq + bad)
            parts.append(g / self.problem.ineq_scale + x[self.n:])
            if with_jacobian:
                jac_ineq = (self.ineq_rows @ jg @ sparse.diags(self.d)).tocsr()
        residual = np.concatenate(parts) if parts else np.zeros(0)
        return residual, jac_eq, jac_ineq

    def merit(self, x, penalty=None):
        """Augmented Lagrangian value and gradient; penalty=0 gives the plain Lagrangian."""
        penalty = self.penalty if penalty is None else penalty
        z = self.variables(x)
        f, grad_f = self.problem.objective(z)
        if not np.isfinite(f) or _first_non_finite(grad_f) is not None:
            raise _NonFiniteValue('objective', None)
        residual, jac_eq, jac_ineq = self.residuals(x)
        weights = self.multipliers + penalty * residual

        value = f + weights @ residual - 0.5 * penalty * residual @ residual
        grad = np.zeros_like(x)
        grad[:self.n] = self.d * np.asarray(grad_f, dtype=float)
        if self.n_eq:
            grad[:self.n] += jac_eq.T @ weights[:self.n_eq]
        if self.n_ineq:
            grad[:self.n] += jac_ineq.T @ weights[self.n_eq:]
            grad[self.n:] = weights[self.n_eq:]
        return float(value), grad


def _projected_gradient_norm(x, grad, lower, upper):
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(x - np.clip(x - grad, lower, upper))))


def _augmented_lagrangian(problem, z0, options):
    """Multiplier rounds; each round is one iteration and runs at most max_inner_iterations L-BFGS steps."""
    lagrangian = _AugmentedLagrangian(problem)
    lagrangian.penalty = options.penalty_initial

    z0 = np.clip(np.asarray(z0, dtype=float), problem.lower, problem.upper)
    lower = np.concatenate([problem.lower / problem.variable_scale, np.zeros(problem.n_ineq)])
    upper = np.concatenate([problem.upper / problem.variable_scale, np.full(problem.n_ineq, np.inf)])
    x = np.concatenate([z0 / problem.variable_scale, np.zeros(problem.n_ineq)])
    x = np.clip(x, lower, upper)

    iterations = 0
    inner_iterations = 0
    inner_tol = options.inner_tol_initial
    previous_violation = np.inf
    stationarity = np.inf
    status = SolveStatus.MAX_ITERATIONS
    message = ''
    failed_index = None
    bounds = Bounds(lower, upper)

    try:
        if problem.n_ineq:
            g, _ = problem.evaluate_inequalities(z0)
            x[problem.n:] = np.maximum(-g / problem.ineq_scale, 0.0)
        while iterations < options.max_iterations:
            iterations += 1
            result = minimize(lagrangian.merit, x, jac=True, method='L-BFGS-B', bounds=bounds,
                              options={'maxiter': options.max_inner_iterations, 'gtol': inner_tol,
                                       'ftol': options.inner_ftol, 'maxcor': options.lbfgs_memory, 'maxls': 40})
            inner_iterations += int(result.nit)
            x = np.clip(result.x, lower, upper)

            residual, _, _ = lagrangian.residuals(x, with_jacobian=False)
            violation = float(np.max(np.abs(residual))) if residual.size else 0.0
            lagrangian.multipliers = lagrangian.multipliers + lagrangian.penalty * residual
            _, grad = lagrangian.merit(x, penalty=0.0)
            stationarity = _projected_gradient_norm(x, grad, lower, upper)

            z = np.clip(lagrangian.variables(x), problem.lower, problem.upper)
            actual_violation = max_violation(problem, z)
            objective = problem.objective(z)[0]
            _log_iteration(options, f'round {iterations:4d} inner {inner_iterations:6d} f {objective: .8e} '
                                    f'viol {actual_violation:.2e} stat {stationarity:.2e} rho {lagrangian.penalty:.1e}')

            if actual_violation <= options.feas_tol and stationarity <= options.opt_tol:
                status = SolveStatus.CONVERGED
                break
            if violation > 0.25 * previous_violation and violation > options.feas_tol:
                lagrangian.penalty *= options.penalty_growth
                if lagrangian.penalty > options.penalty_max:
                    status = SolveStatus.INFEASIBLE_STATIONARY
                    message = f'penalty exceeded {options.penalty_max:g} with violation {violation:.2e}'
                    break
            previous_violation = violation
            inner_tol = max(0.1 * options.opt_tol, 0.1 * inner_tol)
        else:
            message = f'stopped after {iterations} rounds / {inner_iterations} inner iterations'
    except _NonFiniteValue as error:
        status = SolveStatus.NUMERICAL_FAILURE
        message = str(error)
        failed_index = error.index

    z = np.clip(lagrangian.variables(x), problem.lower, problem.upper)
    return z, _report(problem, z, status, iterations, inner_iterations, stationarity, lagrangian.penalty,
                      message, failed_index)


def solve(problem, z0, options=None):
    """Minimize the problem from z0. Returns (z, SolveReport); never raises on solver failure."""
    options = options or SolverOptions()
    started = time.perf_counter()
    if options.method == 'augmented-lagrangian':
        z, report = _augmented_lagrangian(problem, z0, options)
    else:
        z, report = _InteriorPoint(problem, options).run(z0)
    report.wall_time = time.perf_counter() - started
    log.info('solve finished (%s): %s after %d iterations, f=%.6g, violation=%.2e',
             options.method, report.status.value, report.iterations, report.objective, report.max_violation)
    return z, report


@dataclass
class DerivativeReport:
    objective_error: float = 0.0
    objective_index: Optional[int] = None
    equality_error: float = 0.0
    equality_index: Optional[Tuple[int, int]] = None
    inequality_error: float = 0.0
    inequality_index: Optional[Tuple[int, int]] = None
    pattern_violations: list = field(default_factory=list)

    @property
    def max_error(self):
        return max(self.objective_error, self.equality_error, self.inequality_error)


def _relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))


def check_derivatives(problem, z, step=1e-6, columns=None):
    """Compare analytic gradient and Jacobians against central finite differences.

    Columns whose variable is fixed by its bounds are skipped; near a bound
    a one-sided difference is used. Numeric nonzeros outside the declared
    sparsity patterns are collected in ``pattern_violations``.
    """
    z = np.asarray(z, dtype=float)
    report = DerivativeReport()
    _, grad = problem.objective(z)
    _, jac_eq = problem.evaluate_equalities(z)
    _, jac_ineq = problem.evaluate_inequalities(z)
    jac_eq = jac_eq.tocsc()
    jac_ineq = jac_ineq.tocsc()
    pattern_eq = _pattern_matrix(problem.eq_pattern, (problem.n_eq, problem.n))
    pattern_ineq = _pattern_matrix(problem.ineq_pattern, (problem.n_ineq, problem.n))

    if columns is None:
        columns = range(problem.n)
    for j in columns:
        h = step * max(1.0, abs(z[j]))
        forward = z[j] + h <= problem.upper[j]
        backward = z[j] - h >= problem.lower[j]
        if not forward and not backward:
            continue
        plus = z.copy()
        minus = z.copy()
        if forward:
            plus[j] += h
        if backward:
            minus[j] -= h
        width = plus[j] - minus[j]

        numeric = (problem.objective(plus)[0] - problem.objective(minus)[0]) / width
        error = float(_relative_error(grad[j], numeric))
        if error > report.objective_error:
            report.objective_error, report.objective_index = error, j

        for kind, evaluate, jacobian, pattern in (
                ('equality', problem.evaluate_equalities, jac_eq, pattern_eq),
                ('inequality', problem.evaluate_inequalities, jac_ineq, pattern_ineq)):
            if jacobian.shape[0] == 0:
                continue
            numeric = (evaluate(plus)[0] - evaluate(minus)[0]) / width
            analytic = jacobian[:, j].toarray().ravel()
            errors = _relative_error(analytic, numeric)
            row = int(np.argmax(errors))
            if errors[row] > getattr(report, f'{kind}_error'):
                setattr(report, f'{kind}_error', float(errors[row]))
                setattr(report, f'{kind}_index', (row, j))
            if pattern is not None:
                declared = np.zeros(jacobian.shape[0], dtype=bool)
                declared[pattern[:, j].nonzero()[0]] = True
                outside = np.flatnonzero((np.abs(numeric) > 1e-7) & ~declared)
                report.pattern_violations.extend((kind, int(r), j) for r in outside)
    return report
