import sys, os
sys.path.append(os.path.dirname(os.path.realpath(__file__)) + "/..")

import logging
import unittest

import numpy as np

from config import load_quad_params
from exceptions import AssemblyError, ConfigurationError
from geometric_path import WaypointSet, build_grid, fit_min_derivative, to_geometric
from nlp_core import check_derivatives
from reparam import NODE_SIZE, ToppSolution, initial_guess_from_seed, traversal_time
from toppquad import (ToppDecisionState, ToppOptions, ToppQuadProblem, assemble, solve_toppquad,
                      validate_solution)

CURVE = WaypointSet([[0.0, 0.0, 1.0], [1.0, 0.5, 1.2], [1.5, 1.5, 1.0]])
LINE = WaypointSet([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]])


def seed_grid(waypoints, N, velocity=1.0):
    seed = fit_min_derivative(waypoints, 'snap', velocity)
    return seed, build_grid(to_geometric(seed), N)


class TestToppQuad(unittest.TestCase):
    log = logging.getLogger(__name__)

    def setUp(self):
        self.params = load_quad_params()

    def test_options(self):
        with self.assertRaises(ConfigurationError):
            ToppOptions(N=5)
        with self.assertRaises(ConfigurationError):
            ToppOptions(boundary='loose')
        with self.assertRaises(ConfigurationError):
            ToppOptions(v_max=-1.0)
        self.assertEqual(ToppOptions().solver.feas_tol, 1e-8)
        both = ToppOptions(bidirectional=True).effective_params(self.params)
        np.testing.assert_allclose(both.u_min, -self.params.u_max)

    def test_dimensions(self):
        seed, grid = seed_grid(CURVE, 12)
        N = 12
        problem = ToppQuadProblem(grid, self.params, ToppOptions(N=N, w_max=10.0))
        self.assertEqual(problem.n, NODE_SIZE * (N + 1))
        self.assertEqual(problem.n_eq, N + 3 * N + 3 * (N + 1) + 3 * (N + 1) + 4 * N + (N + 1) + 16)
        self.assertEqual(problem.n_ineq, N + 1)
        free = ToppQuadProblem(grid, self.params, ToppOptions(N=N, boundary='free'))
        self.assertNotIn('boundary', free.equality_families)
        self.assertEqual(free.n_ineq, 0)

        guess = initial_guess_from_seed(seed, grid, self.params)
        nlp = assemble(grid, self.params, guess, ToppOptions(N=N))
        values, jacobian = nlp.evaluate_equalities(guess.to_vector())
        self.assertEqual(values.shape, (nlp.n_eq,))
        self.assertEqual(jacobian.shape, (nlp.n_eq, nlp.n))
        self.assertEqual(set(nlp.eq_families), set(problem.equality_families))

    def test_guess_size_mismatch(self):
        seed, grid = seed_grid(CURVE, 12)
        _, other = seed_grid(CURVE, 14)
        guess = initial_guess_from_seed(seed, other, self.params)
        with self.assertRaises(AssemblyError):
            assemble(grid, self.params, guess, ToppOptions(N=12))
        with self.assertRaises(ConfigurationError):
            solve_toppquad(grid, self.params, ToppOptions(N=14))

    def test_bounds(self):
        _, grid = seed_grid(CURVE, 12)
        opts = ToppOptions(N=12, v_max=2.0, bidirectional=True)
        problem = ToppQuadProblem(grid, self.params, opts)
        lower, upper = problem.bounds()
        lower = lower.reshape(-1, NODE_SIZE)
        upper = upper.reshape(-1, NODE_SIZE)
        np.testing.assert_allclose(lower[:, 12:], -self.params.u_max[None].repeat(13, axis=0))
        np.testing.assert_allclose(upper[:, 12:], self.params.u_max[None].repeat(13, axis=0))
        self.assertEqual(lower[0, 0], -np.inf)
        free = ToppQuadProblem(grid, self.params, ToppOptions(N=12, boundary='free'))
        self.assertEqual(free.bounds()[0][0], 0.0)
        self.assertEqual(lower[5, 0], opts.eps_h)
        speed = np.linalg.norm(grid.d1[5])
        self.assertAlmostEqual(upper[5, 0], 4.0 / speed ** 2)

    def test_seed_guess_is_dynamically_consistent(self):
        seed, grid = seed_grid(CURVE, 40)
        opts = ToppOptions(N=40, boundary='free')
        problem = ToppQuadProblem(grid, self.params, opts)
        guess = initial_guess_from_seed(seed, grid, self.params)
        residuals = problem.family_residuals(guess.to_vector())
        self.assertLess(residuals['translational'], 1e-9)
        self.assertLess(residuals['h_euler'], 1e-12)
        self.assertLess(residuals['unit_norm'], 1e-9)
        self.assertLess(residuals['quaternion_update'], 1e-2)

    def test_objective_is_traversal_time(self):
        seed, grid = seed_grid(CURVE, 20)
        guess = initial_guess_from_seed(seed, grid, self.params)
        problem = ToppQuadProblem(grid, self.params, ToppOptions(N=20))
        value, _ = problem.objective(guess.to_vector())
        self.assertAlmostEqual(value, traversal_time(guess.speed, grid))
        self.assertAlmostEqual(value, seed.duration)

    def test_derivatives(self):
        rng = np.random.default_rng(11)
        for velocity in (0.5, 1.0, 2.0):
            seed, grid = seed_grid(CURVE, 10, velocity)
            guess = initial_guess_from_seed(seed, grid, self.params)
            z = guess.to_vector() + 1e-2 * rng.standard_normal(NODE_SIZE * 11)
            nlp = assemble(grid, self.params, guess, ToppOptions(N=10, w_max=5.0))
            report = check_derivatives(nlp, z)
            self.assertLessEqual(report.max_error, 1e-5, report)
            self.assertEqual(report.pattern_violations, [])

    def test_validate_guess(self):
        seed, grid = seed_grid(CURVE, 20)
        guess = initial_guess_from_seed(seed, grid, self.params)
        sol = ToppSolution(grid=grid, speed=guess.speed, rotation=guess.rotation, thrusts=guess.u,
                           total_time=seed.duration, report=None, boundary_attitudes=np.stack([guess.q[0], guess.q[-1]]))
        report = validate_solution(sol, self.params, ToppOptions(N=20))
        self.assertFalse(report.passed)
        self.assertIn('boundary', report.failed_families)
        self.assertNotIn('translational', report.failed_families)
        self.assertLessEqual(report.quaternion_norm_error, 1e-12)
        self.assertEqual(report.as_dict()['passed'], False)

        free = validate_solution(sol, self.params, ToppOptions(N=20, boundary='free', v_max=0.01))
        self.assertIn('speed_bound', free.failed_families)

    def test_zero_rate_keeps_attitude(self):
        seed, grid = seed_grid(CURVE, 12)
        guess = initial_guess_from_seed(seed, grid, self.params)
        z = guess.to_vector().reshape(-1, NODE_SIZE)
        z[:, 2:6] = guess.q[3]
        z[:, 6:9] = 0.0
        problem = ToppQuadProblem(grid, self.params, ToppOptions(N=12, boundary='free'))
        self.assertEqual(problem.family_residuals(z.ravel())['quaternion_update'], 0.0)

    def test_state_round_trip(self):
        seed, grid = seed_grid(CURVE, 12)
        guess = initial_guess_from_seed(seed, grid, self.params)
        state = ToppDecisionState.from_vector(guess.to_vector(), 12)
        np.testing.assert_array_equal(state.alpha, guess.alpha)

    def test_solve_line(self):
        _, grid = seed_grid(LINE, 20)
        opts = ToppOptions(N=20, v_max=5.0)
        sol = solve_toppquad(grid, self.params, opts)
        self.assertTrue(sol.success, sol.failure_reason)
        self.assertEqual(sol.grid.N, 20)
        self.assertEqual(len(sol.speed.h), 21)
        self.assertTrue(np.all(sol.thrusts >= self.params.u_min - 1e-12))
        self.assertTrue(np.all(sol.thrusts <= self.params.u_max + 1e-12))
        self.assertEqual(sol.metadata['params_hash'], self.params.params_hash())
        self.assertAlmostEqual(sol.guess_time, grid.s_end)
        report = validate_solution(sol, self.params)
        self.assertTrue(report.passed, report.as_dict())
        self.assertLessEqual(sol.total_time, sol.guess_time * opts.failure_ratio)

        # bang-like: some motor sits at its upper bound
        self.assertGreaterEqual(float(np.max(sol.thrusts)), 0.99 * self.params.u_max[0])
        # point mass on the 1 m horizontal line, accelerating and braking with the largest
        # horizontal acceleration the total thrust allows while carrying the weight
        thrust_acceleration = 4.0 * self.params.u_max[0] / self.params.mass
        a_max = np.sqrt(thrust_acceleration ** 2 - 9.81 ** 2)
        self.assertGreaterEqual(sol.total_time, 2.0 * np.sqrt(1.0 / a_max))

        again = solve_toppquad(grid, self.params, opts, guess=sol.state)
        self.assertTrue(again.success, again.failure_reason)
        self.assertLessEqual(abs(again.total_time - sol.total_time), 1e-3 * sol.total_time)


if __name__ == '__main__':
    unittest.main()
