"""Time-optimal path parameterization with full rigid-body dynamics and per-motor thrust bounds.

The path is discretized on a uniform grid; every node i carries the block
(h, h', q, w, alpha, u) of NODE_SIZE variables at offset NODE_SIZE * i.
w and alpha are body rate and its derivative per unit of path parameter.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import sparse

from exceptions import ConfigurationError, DegenerateIntervalError
from geometric_path import PathGrid, build_grid
from nlp_core import NlpProblem, SolverOptions, solve
from quad_model import quat_body_z, thrust_violation
from reparam import (EPS_H, NODE_SIZE, ToppDecisionState, ToppSolution, floor_root, initial_guess_from_profile,
                     traversal_time)

log = logging.getLogger(__name__)

H, HP, Q, W, ALPHA, U = 0, 1, 2, 6, 9, 12

BOUNDARY_MODES = ('rest', 'free')
QUATERNION_BOX = 1.1
RESIDUAL_TOL = 1e-5
THRUST_TOL = 1e-6
QUATERNION_NORM_TOL = 1e-7

__all__ = ['ToppOptions', 'ToppDecisionState', 'ToppQuadProblem', 'ValidationReport', 'assemble',
           'solve_toppquad', 'validate_solution']


@dataclass
class ToppOptions:
    N: int = 300
    v_max: Optional[float] = None
    w_max: Optional[float] = None
    bidirectional: bool = False
    boundary: str = 'rest'
    eps_h: float = EPS_H
    failure_ratio: float = 1.01
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(feas_tol=1e-8))

    def __post_init__(self):
        if self.N < 10:
            raise ConfigurationError(f'grid size N={self.N} is below 10')
        if self.v_max is not None and not self.v_max > 0.0:
            raise ConfigurationError(f'v_max "{self.v_max}" must be positive')
        if self.w_max is not None and not self.w_max > 0.0:
            raise ConfigurationError(f'w_max "{self.w_max}" must be positive')
        if self.boundary not in BOUNDARY_MODES:
            raise ConfigurationError(f'unknown boundary mode "{self.boundary}"')

    def effective_params(self, params):
        return params.bidirectional() if self.bidirectional else params


def _columns(nodes, offset, width=1):
    return (NODE_SIZE * np.asarray(nodes))[:, None] + offset + np.arange(width)[None, :]


def _block(rows, cols, values):
    """COO triplets of a batch of dense blocks; rows (n, r), cols (n, c), values (n, r, c)."""
    values = np.broadcast_to(values, (rows.shape[0], rows.shape[1], cols.shape[1]))
    r = np.broadcast_to(rows[:, :, None], values.shape)
    c = np.broadcast_to(cols[:, None, :], values.shape)
    return r.ravel(), c.ravel(), values.ravel()


def _skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _omega_batch(w):
    """Batched quad_model.omega_matrix."""
    out = np.zeros(w.shape[:-1] + (4, 4))
    out[..., 0, 1:] = -w
    out[..., 1:, 0] = w
    out[..., 1:, 1:] = -_skew_batch(w)
    return out


def _body_z_jacobian(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    return 2.0 * np.stack([np.stack([y, z, w, x], axis=-1),
                           np.stack([-x, -w, z, y], axis=-1),
                           np.stack([w, -x, -y, z], axis=-1)], axis=-2)


def _rate_jacobian(q):
    """Xi(q) with omega_matrix(w) @ q == Xi(q) @ w."""
    xi = np.zeros(q.shape[:-1] + (4, 3))
    xi[..., 0, :] = -q[..., 1:]
    xi[..., 1:, :] = q[..., 0, None, None] * np.eye(3) + _skew_batch(q[..., 1:])
    return xi


def _identity_rows(n, size):
    return np.arange(n * size).reshape(n, size)


class ToppQuadProblem:
    """Objective, constraint families and bounds of the discretized minimum-time program."""

    def __init__(self, grid, params, opts, boundary_attitudes=None):
        self.grid = grid
        self.opts = opts
        self.params = opts.effective_params(params)
        self.N = grid.N
        self.n_nodes = grid.N + 1
        self.n = NODE_SIZE * self.n_nodes
        if boundary_attitudes is None:
            boundary_attitudes = np.tile([1.0, 0.0, 0.0, 0.0], (2, 1))
        attitudes = np.asarray(boundary_attitudes, dtype=float).reshape(2, 4)
        self.boundary_attitudes = attitudes / np.linalg.norm(attitudes, axis=1, keepdims=True)
        self.speed_norm = np.linalg.norm(grid.d1, axis=1)
        self.h_upper = self._speed_limit()
        self.equality_families = self._equality_layout()
        self.inequality_families = self._inequality_layout()
        self.n_eq = sum(size for size, _ in self.equality_families.values())
        self.n_ineq = sum(size for size, _ in self.inequality_families.values())

    @classmethod
    def from_guess(cls, grid, params, guess, opts):
        guess.check_dimensions(grid.N + 1)
        return cls(grid, params, opts, boundary_attitudes=np.stack([guess.q[0], guess.q[-1]]))

    def _speed_limit(self):
        upper = np.full(self.n_nodes, np.inf)
        if self.opts.v_max is not None:
            moving = self.speed_norm > 1e-9
            upper[moving] = self.opts.v_max ** 2 / self.speed_norm[moving] ** 2
        return upper

    def _equality_layout(self):
        p = self.params
        families = {
            'h_euler': (self.N, 1.0),
            'w_euler': (3 * self.N, 1.0),
            'translational': (3 * self.n_nodes, p.weight),
            'rotational': (3 * self.n_nodes, p.max_torque),
            'quaternion_update': (4 * self.N, 1.0),
            'unit_norm': (self.n_nodes, 1.0),
        }
        if self.opts.boundary == 'rest':
            families['boundary'] = (16, 1.0)
        return families

    def _inequality_layout(self):
        if self.opts.w_max is None:
            return {}
        return {'body_rate': (self.n_nodes, self.opts.w_max ** 2)}

    @staticmethod
    def nodes(z):
        return np.asarray(z, dtype=float).reshape(-1, NODE_SIZE)

    def objective(self, z):
        h = self.nodes(z)[:, H]
        root, slope = floor_root(h, self.opts.eps_h)
        sums = root[:-1] + root[1:]
        ds = self.grid.ds
        value = float(np.sum(2.0 * ds / sums))
        coefficient = -2.0 * ds / sums ** 2
        dh = np.zeros(self.n_nodes)
        dh[:-1] += coefficient * slope[:-1]
        dh[1:] += coefficient * slope[1:]
        grad = np.zeros(self.n)
        grad[H::NODE_SIZE] = dh
        return value, grad

    # equality families: each returns (residual, [(rows, cols, values), ...]) with family-local rows

    def _h_euler(self, x):
        i = np.arange(self.N)
        residual = x[1:, H] - x[:-1, H] - x[:-1, HP] * self.grid.ds
        rows = i[:, None]
        entries = [_block(rows, _columns(i + 1, H), np.ones((1, 1, 1))),
                   _block(rows, _columns(i, H), -np.ones((1, 1, 1))),
                   _block(rows, _columns(i, HP), np.full((1, 1, 1), -self.grid.ds))]
        return residual, entries

    def _w_euler(self, x):
        i = np.arange(self.N)
        ds = self.grid.ds
        residual = x[1:, W:W + 3] - x[:-1, W:W + 3] - x[:-1, ALPHA:ALPHA + 3] * ds
        rows = _identity_rows(self.N, 3)
        eye = np.eye(3)[None]
        entries = [_block(rows, _columns(i + 1, W, 3), eye),
                   _block(rows, _columns(i, W, 3), -eye),
                   _block(rows, _columns(i, ALPHA, 3), -ds * eye)]
        return residual.ravel(), entries

    def _translational(self, x):
        p = self.params
        g = self.grid
        i = np.arange(self.n_nodes)
        h, hp, q, u = x[:, H], x[:, HP], x[:, Q:Q + 4], x[:, U:U + 4]
        thrust = u @ p.allocation[0]
        body_z = quat_body_z(q)
        residual = p.mass * (0.5 * hp[:, None] * g.d1 + h[:, None] * g.d2 - p.gravity) - body_z * thrust[:, None]
        rows = _identity_rows(self.n_nodes, 3)
        entries = [_block(rows, _columns(i, H), (p.mass * g.d2)[:, :, None]),
                   _block(rows, _columns(i, HP), (0.5 * p.mass * g.d1)[:, :, None]),
                   _block(rows, _columns(i, Q, 4), -thrust[:, None, None] * _body_z_jacobian(q)),
                   _block(rows, _columns(i, U, 4), -body_z[:, :, None] * p.allocation[0][None, None, :])]
        return residual.ravel(), entries

    def _rotational(self, x):
        p = self.params
        inertia = p.inertia
        i = np.arange(self.n_nodes)
        h, hp = x[:, H], x[:, HP]
        w, alpha, u = x[:, W:W + 3], x[:, ALPHA:ALPHA + 3], x[:, U:U + 4]
        j_w = w @ inertia.T
        j_alpha = alpha @ inertia.T
        gyro = np.cross(w, j_w)
        residual = 0.5 * hp[:, None] * j_w + h[:, None] * (j_alpha + gyro) - u @ p.allocation[1:].T
        d_w = (0.5 * hp[:, None, None] * inertia
               + h[:, None, None] * (_skew_batch(w) @ inertia - _skew_batch(j_w)))
        rows = _identity_rows(self.n_nodes, 3)
        entries = [_block(rows, _columns(i, H), (j_alpha + gyro)[:, :, None]),
                   _block(rows, _columns(i, HP), (0.5 * j_w)[:, :, None]),
                   _block(rows, _columns(i, W, 3), d_w),
                   _block(rows, _columns(i, ALPHA, 3), h[:, None, None] * inertia[None]),
                   _block(rows, _columns(i, U, 4), -p.allocation[1:][None])]
        return residual.ravel(), entries

    def _quaternion_update(self, x):
        """q_{i+1} - (I + ds/2 Omega(w_i)) q_i / sqrt(1 + ds^2/4 |w_i|^2)"""
        i = np.arange(self.N)
        a = 0.5 * self.grid.ds
        q, w = x[:-1, Q:Q + 4], x[:-1, W:W + 3]
        xi = _rate_jacobian(q)
        propagated = q + a * np.einsum('nij,nj->ni', xi, w)
        d = np.sqrt(1.0 + a * a * np.sum(w * w, axis=1))
        residual = x[1:, Q:Q + 4] - propagated / d[:, None]
        step = np.eye(4)[None] + a * _omega_batch(w)
        d_q = -step / d[:, None, None]
        d_w = -a * xi / d[:, None, None] + propagated[:, :, None] * (a * a * w)[:, None, :] / d[:, None, None] ** 3
        rows = _identity_rows(self.N, 4)
        entries = [_block(rows, _columns(i + 1, Q, 4), np.eye(4)[None]),
                   _block(rows, _columns(i, Q, 4), d_q),
                   _block(rows, _columns(i, W, 3), d_w)]
        return residual.ravel(), entries

    def _unit_norm(self, x):
        i = np.arange(self.n_nodes)
        q = x[:, Q:Q + 4]
        residual = np.sum(q * q, axis=1) - 1.0
        return residual, [_block(i[:, None], _columns(i, Q, 4), 2.0 * q[:, None, :])]

    def _boundary(self, x):
        last = self.N
        residual = np.concatenate([[x[0, H], x[last, H]], x[0, W:W + 3], x[last, W:W + 3],
                                   x[0, Q:Q + 4] - self.boundary_attitudes[0],
                                   x[last, Q:Q + 4] - self.boundary_attitudes[1]])
        cols = np.concatenate([[H, NODE_SIZE * last + H],
                               W + np.arange(3), NODE_SIZE * last + W + np.arange(3),
                               Q + np.arange(4), NODE_SIZE * last + Q + np.arange(4)])
        return residual, [(np.arange(16), cols, np.ones(16))]

    def _body_rate(self, x):
        i = np.arange(self.n_nodes)
        h, w = x[:, H], x[:, W:W + 3]
        rate2 = np.sum(w * w, axis=1)
        residual = h * rate2 - self.opts.w_max ** 2
        entries = [_block(i[:, None], _columns(i, H), rate2[:, None, None]),
                   _block(i[:, None], _columns(i, W, 3), (2.0 * h[:, None] * w)[:, None, :])]
        return residual, entries

    def _stack(self, families, x):
        values = []
        rows, cols, data = [], [], []
        offset = 0
        for name, (size, _) in families.items():
            residual, entries = getattr(self, f'_{name}')(x)
            values.append(residual)
            for r, c, v in entries:
                rows.append(r + offset)
                cols.append(c)
                data.append(v)
            offset += size
        if not values:
            return np.zeros(0), sparse.csr_matrix((0, self.n))
        jacobian = sparse.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                                     shape=(offset, self.n))
        return np.concatenate(values), jacobian.tocsr()

    def equalities(self, z):
        return self._stack(self.equality_families, self.nodes(z))

    def inequalities(self, z):
        return self._stack(self.inequality_families, self.nodes(z))

    def family_residuals(self, z):
        """Scaled residual of every constraint family; inequalities contribute their positive part."""
        x = self.nodes(z)
        out = {}
        for name, (_, scale) in self.equality_families.items():
            residual, _ = getattr(self, f'_{name}')(x)
            out[name] = float(np.max(np.abs(residual))) / scale if residual.size else 0.0
        for name, (_, scale) in self.inequality_families.items():
            residual, _ = getattr(self, f'_{name}')(x)
            out[name] = float(np.max(np.maximum(residual, 0.0))) / scale if residual.size else 0.0
        return out

    def bounds(self):
        lower = np.full((self.n_nodes, NODE_SIZE), -np.inf)
        upper = np.full((self.n_nodes, NODE_SIZE), np.inf)
        lower[:, H] = self.opts.eps_h
        # rest mode pins the end speeds through the boundary family
        lower[[0, -1], H] = -np.inf if self.opts.boundary == 'rest' else 0.0
        upper[:, H] = self.h_upper
        lower[:, Q:Q + 4] = -QUATERNION_BOX
        upper[:, Q:Q + 4] = QUATERNION_BOX
        lower[:, U:U + 4] = self.params.u_min
        upper[:, U:U + 4] = self.params.u_max
        return lower.ravel(), upper.ravel()

    def variable_scale(self, guess):
        finite = self.h_upper[np.isfinite(self.h_upper)]
        h_scale = max(1.0, float(np.median(finite)) if finite.size else float(np.max(guess.h)))
        hp_scale = max(1.0, 4.0 * h_scale / self.grid.s_end)
        scale = np.ones((self.n_nodes, NODE_SIZE))
        scale[:, H] = h_scale
        scale[:, HP] = hp_scale
        scale[:, W:W + 3] = max(1.0, float(np.max(np.abs(guess.w))))
        scale[:, ALPHA:ALPHA + 3] = max(1.0, float(np.max(np.abs(guess.alpha))))
        scale[:, U:U + 4] = float(np.max(np.abs(np.concatenate([self.params.u_min, self.params.u_max]))))
        return scale.ravel()

    def _scales(self, families):
        if not families:
            return np.zeros(0)
        return np.concatenate([np.full(size, scale) for size, scale in families.values()])

    def _slices(self, families):
        out = {}
        offset = 0
        for name, (size, _) in families.items():
            out[name] = slice(offset, offset + size)
            offset += size
        return out

    def objective_pattern(self):
        """Hessian entries of the traversal time: each interval couples h_i and h_i+1."""
        h = _columns(np.arange(self.n_nodes), H).ravel()
        return np.concatenate([h, h[:-1]]), np.concatenate([h, h[1:]])

    def nlp(self, guess):
        lower, upper = self.bounds()
        z0 = guess.to_vector()
        _, eq_jacobian = self.equalities(z0)
        _, ineq_jacobian = self.inequalities(z0)
        eq_jacobian = eq_jacobian.tocoo()
        ineq_jacobian = ineq_jacobian.tocoo()
        return NlpProblem(n=self.n, objective=self.objective, lower=lower, upper=upper,
                          equalities=self.equalities, inequalities=self.inequalities if self.n_ineq else None,
                          n_eq=self.n_eq, n_ineq=self.n_ineq,
                          eq_pattern=(eq_jacobian.row, eq_jacobian.col),
                          ineq_pattern=(ineq_jacobian.row, ineq_jacobian.col),
                          objective_pattern=self.objective_pattern(),
                          variable_scale=self.variable_scale(guess),
                          eq_scale=self._scales(self.equality_families),
                          ineq_scale=self._scales(self.inequality_families),
                          eq_families=self._slices(self.equality_families),
                          ineq_families=self._slices(self.inequality_families))


def assemble(grid, params, guess, opts):
    """Build the NlpProblem for a grid and an initial guess; raises AssemblyError on a size mismatch."""
    return ToppQuadProblem.from_guess(grid, params, guess, opts).nlp(guess)


def _as_grid(path, opts):
    if isinstance(path, PathGrid):
        if path.N != opts.N:
            raise ConfigurationError(f'grid has N={path.N}, options ask for N={opts.N}')
        return path
    return build_grid(path, opts.N)


def solve_toppquad(path, params, opts, guess=None):
    """Solve the minimum-time program on a path (or a prepared grid).

    Without a guess, the path parameter is taken as time of a feasible seed
    (h = 1). The result is a success only if the solver converged and the
    traversal time does not exceed the guess time by more than
    ``opts.failure_ratio``.
    """
    grid = _as_grid(path, opts)
    effective = opts.effective_params(params)
    if guess is None:
        n_nodes = grid.N + 1
        guess = initial_guess_from_profile(grid, effective, np.ones(n_nodes), np.zeros(n_nodes))
    guess_time = traversal_time(guess.speed, grid)

    problem = ToppQuadProblem.from_guess(grid, params, guess, opts)
    log.info('solving time-optimal problem: N=%d, %d variables, %d equalities, %d inequalities',
             grid.N, problem.n, problem.n_eq, problem.n_ineq)
    z, report = solve(problem.nlp(guess), guess.to_vector(), opts.solver)
    state = ToppDecisionState.from_vector(z, grid.N)

    failure_reason = ''
    try:
        total_time = traversal_time(state.speed, grid)
    except DegenerateIntervalError as error:
        total_time = float('inf')
        failure_reason = str(error)
    if not report.converged:
        failure_reason = failure_reason or f'solver stopped with status {report.status.value}: {report.message}'
    elif total_time > guess_time * opts.failure_ratio:
        failure_reason = (f'total time {total_time:.4f} s exceeds guess time {guess_time:.4f} s '
                          f'by more than {100.0 * (opts.failure_ratio - 1.0):.1f}%')
    success = not failure_reason
    if success:
        log.info('time-optimal solution: %.4f s (guess %.4f s)', total_time, guess_time)
    else:
        log.warning('time-optimal solve failed: %s', failure_reason)

    return ToppSolution(grid=grid, speed=state.speed, rotation=state.rotation, thrusts=state.u,
                        total_time=total_time, report=report, success=success, guess_time=guess_time,
                        failure_reason=failure_reason, boundary_attitudes=problem.boundary_attitudes,
                        options=opts, metadata={'params_hash': effective.params_hash(),
                                                'u_min': effective.u_min.tolist(),
                                                'u_max': effective.u_max.tolist()})


@dataclass
class ValidationReport:
    residuals: Dict[str, float]
    thrust_violation: float
    quaternion_norm_error: float
    speed_violation: float = 0.0

    @property
    def failed_families(self):
        failed = [name for name, value in self.residuals.items() if not value <= RESIDUAL_TOL]
        if not self.thrust_violation <= THRUST_TOL:
            failed.append('thrust_bounds')
        if not self.quaternion_norm_error <= QUATERNION_NORM_TOL:
            failed.append('quaternion_norm')
        if not self.speed_violation <= RESIDUAL_TOL:
            failed.append('speed_bound')
        return failed

    @property
    def passed(self):
        return not self.failed_families

    def as_dict(self):
        return {'residuals': dict(self.residuals), 'thrust_violation': self.thrust_violation,
                'quaternion_norm_error': self.quaternion_norm_error, 'speed_violation': self.speed_violation,
                'passed': self.passed, 'failed': self.failed_families}


def validate_solution(sol, params, opts=None):
    """Re-evaluate every constraint family at a solution; never raises."""
    opts = opts or sol.options or ToppOptions(N=sol.grid.N)
    problem = ToppQuadProblem(sol.grid, params, opts, boundary_attitudes=sol.boundary_attitudes)
    z = sol.state.to_vector()
    residuals = problem.family_residuals(z)
    h = np.asarray(sol.speed.h, dtype=float)
    limited = np.isfinite(problem.h_upper)
    speed_violation = float(np.max(np.maximum(h[limited] - problem.h_upper[limited], 0.0)
                                   / problem.h_upper[limited])) if np.any(limited) else 0.0
    norms = np.linalg.norm(sol.rotation.q, axis=1)
    report = ValidationReport(residuals=residuals,
                              thrust_violation=thrust_violation(sol.thrusts, problem.params),
                              quaternion_norm_error=float(np.max(np.abs(norms - 1.0))),
                              speed_violation=speed_violation)
    if not report.passed:
        log.info('validation failed for %s', ', '.join(report.failed_families))
    return report
