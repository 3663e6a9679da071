import sys, os
sys.path.append(os.path.dirname(os.path.realpath(__file__)) + "/..")

import logging
import unittest

import numpy as np
from scipy import sparse

from exceptions import ConfigurationError
from nlp_core import (METHODS, NlpProblem, SolverOptions, SolveStatus, check_derivatives, color_columns,
                      hessian_pattern, max_violation, solve)


def quadratic(target):
    target = np.asarray(target, dtype=float)

    def objective(z):
        return float(np.sum((z - target) ** 2)), 2.0 * (z - target)
    return objective


def linear(rows, rhs):
    matrix = sparse.csr_matrix(np.asarray(rows, dtype=float))
    rhs = np.asarray(rhs, dtype=float)

    def constraint(z):
        return matrix @ z - rhs, matrix
    return constraint


def rosenbrock(z):
    x, y = z
    value = (1.0 - x) ** 2 + 100.0 * (y - x * x) ** 2
    grad = np.array([-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)])
    return value, grad


def unit_disk(z):
    return np.array([z @ z - 1.0]), sparse.csr_matrix(2.0 * z[None, :])


class TestNlpCore(unittest.TestCase):
    log = logging.getLogger(__name__)

    def test_unconstrained(self):
        problem = NlpProblem(n=3, objective=quadratic([1.0, -2.0, 0.5]), lower=-np.inf, upper=np.inf)
        z, report = solve(problem, np.zeros(3))
        self.assertEqual(report.status, SolveStatus.CONVERGED)
        self.assertTrue(report.converged)
        np.testing.assert_allclose(z, [1.0, -2.0, 0.5], atol=1e-5)

    def test_equality(self):
        problem = NlpProblem(n=2, objective=quadratic([0.0, 0.0]), lower=-np.inf, upper=np.inf,
                             equalities=linear([[1.0, 1.0]], [1.0]), n_eq=1)
        z, report = solve(problem, np.zeros(2))
        self.assertTrue(report.converged)
        np.testing.assert_allclose(z, [0.5, 0.5], atol=1e-5)
        self.assertLessEqual(report.max_violation, 1e-6)

    def test_inequality_and_bounds(self):
        problem = NlpProblem(n=2, objective=quadratic([2.0, 5.0]), lower=[-np.inf, -1.0], upper=[np.inf, 3.0],
                             inequalities=linear([[1.0, 0.0]], [1.0]), n_ineq=1)
        z, report = solve(problem, np.zeros(2))
        self.assertTrue(report.converged)
        np.testing.assert_allclose(z, [1.0, 3.0], atol=1e-5)

    def test_nonlinear_inequality(self):
        problem = NlpProblem(n=2, objective=rosenbrock, lower=-np.inf, upper=np.inf,
                             inequalities=unit_disk, n_ineq=1)
        z, report = solve(problem, np.zeros(2))
        self.assertTrue(report.converged, report.message)
        np.testing.assert_allclose(z, [0.7864, 0.6177], atol=5e-3)
        self.assertLessEqual(max_violation(problem, z), 1e-6)

    def test_variable_scaling(self):
        problem = NlpProblem(n=2, objective=quadratic([0.0, 0.0]), lower=-np.inf, upper=np.inf,
                             equalities=linear([[1.0, 1.0]], [2000.0]), n_eq=1,
                             variable_scale=[1000.0, 1000.0], eq_scale=[1000.0])
        z, report = solve(problem, np.zeros(2))
        self.assertTrue(report.converged)
        np.testing.assert_allclose(z, [1000.0, 1000.0], rtol=1e-6)

    def test_infeasible(self):
        problem = NlpProblem(n=1, objective=quadratic([0.0]), lower=-np.inf, upper=np.inf,
                             equalities=linear([[1.0], [1.0]], [0.0, 1.0]), n_eq=2)
        for method in METHODS:
            with self.subTest(method=method):
                _, report = solve(problem, np.zeros(1), SolverOptions(method=method, penalty_max=1e6))
                self.assertFalse(report.converged)
                self.assertEqual(report.status, SolveStatus.INFEASIBLE_STATIONARY)
                self.assertAlmostEqual(report.max_violation, 0.5, places=2)

    def test_numerical_failure(self):
        def broken(z):
            values = np.array([z[0] - 1.0, z[0], np.nan])
            return values, sparse.csr_matrix(np.array([[1.0], [1.0], [0.0]]))
        problem = NlpProblem(n=1, objective=quadratic([0.0]), lower=-np.inf, upper=np.inf,
                             equalities=broken, n_eq=3)
        _, report = solve(problem, np.zeros(1))
        self.assertEqual(report.status, SolveStatus.NUMERICAL_FAILURE)
        self.assertEqual(report.failed_index, 2)
        self.assertEqual(report.as_dict()['status'], 'numerical_failure')

    def test_iteration_limit(self):
        problem = NlpProblem(n=2, objective=rosenbrock, lower=-np.inf, upper=np.inf)
        _, report = solve(problem, np.array([-1.5, 2.0]), SolverOptions(max_iterations=3))
        self.assertEqual(report.status, SolveStatus.MAX_ITERATIONS)
        self.assertLessEqual(report.iterations, 3 + 1)

    def test_methods_agree(self):
        problem = NlpProblem(n=2, objective=quadratic([2.0, 5.0]), lower=[-np.inf, -1.0], upper=[np.inf, 3.0],
                             inequalities=linear([[1.0, 0.0]], [1.5]), n_ineq=1,
                             equalities=linear([[1.0, -1.0]], [-2.0]), n_eq=1)
        for method in METHODS:
            with self.subTest(method=method):
                z, report = solve(problem, np.zeros(2), SolverOptions(method=method))
                self.assertTrue(report.converged, report.message)
                np.testing.assert_allclose(z, [1.0, 3.0], atol=1e-3)

    def test_unit_circle(self):
        def circle(z):
            return np.array([z @ z - 1.0]), sparse.csr_matrix(2.0 * z[None, :])

        def total(z):
            return float(np.sum(z)), np.ones(2)
        problem = NlpProblem(n=2, objective=total, lower=-np.inf, upper=np.inf, equalities=circle, n_eq=1)
        for method in METHODS:
            with self.subTest(method=method):
                z, report = solve(problem, np.array([-1.0, 0.0]), SolverOptions(method=method))
                self.assertTrue(report.converged, report.message)
                np.testing.assert_allclose(z, [-np.sqrt(0.5), -np.sqrt(0.5)], atol=1e-3)

    def test_convex_qp_matches_kkt_solve(self):
        rng = np.random.default_rng(11)
        n, m = 6, 2
        factor = rng.normal(size=(n, n))
        hessian = factor @ factor.T + n * np.eye(n)
        gradient = rng.normal(size=n)
        rows = rng.normal(size=(m, n))
        rhs = rng.normal(size=m)
        kkt = np.block([[hessian, rows.T], [rows, np.zeros((m, m))]])
        expected = np.linalg.solve(kkt, np.concatenate([-gradient, rhs]))[:n]

        def objective(z):
            return float(0.5 * z @ hessian @ z + gradient @ z), hessian @ z + gradient
        problem = NlpProblem(n=n, objective=objective, lower=-np.inf, upper=np.inf, equalities=linear(rows, rhs),
                             n_eq=m, eq_pattern=np.nonzero(np.ones((m, n))),
                             objective_pattern=np.nonzero(np.ones((n, n))))
        z, report = solve(problem, np.zeros(n))
        self.assertTrue(report.converged, report.message)
        np.testing.assert_allclose(z, expected, atol=1e-6)

    def test_hessian_pattern_and_coloring(self):
        n = 7
        band = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) <= 1
        problem = NlpProblem(n=n, objective=quadratic(np.zeros(n)), lower=-np.inf, upper=np.inf,
                             equalities=linear([[1.0, 0, 0, 0, 0, 0, 1.0]], [0.0]), n_eq=1,
                             eq_pattern=(np.array([0, 0]), np.array([0, 6])), objective_pattern=np.nonzero(band))
        pattern = hessian_pattern(problem)
        self.assertEqual(pattern[0, 6], 1.0)
        self.assertEqual(pattern[0, 3], 0.0)
        self.assertEqual(hessian_pattern(problem, columns=np.arange(1, 6)).shape, (5, 5))

        colors = color_columns(pattern)
        self.assertLessEqual(colors.max() + 1, 4)
        dense = pattern.toarray() != 0.0
        for row in dense:
            used = colors[row]
            self.assertEqual(len(used), len(set(used.tolist())))

        problem.eq_pattern = None
        self.assertIsNone(hessian_pattern(problem))

    def test_unknown_method(self):
        with self.assertRaises(ConfigurationError):
            SolverOptions(method='simplex')
        with self.assertRaises(ConfigurationError):
            SolverOptions(max_iterations=0)

    def test_check_derivatives(self):
        problem = NlpProblem(n=2, objective=rosenbrock, lower=-np.inf, upper=np.inf,
                             inequalities=unit_disk, n_ineq=1, ineq_pattern=(np.array([0, 0]), np.array([0, 1])))
        report = check_derivatives(problem, np.array([0.3, -0.7]))
        self.assertLessEqual(report.max_error, 1e-6)
        self.assertEqual(report.pattern_violations, [])

    def test_check_derivatives_finds_errors(self):
        def wrong(z):
            value, grad = rosenbrock(z)
            return value, grad * np.array([1.0, 0.5])
        problem = NlpProblem(n=2, objective=wrong, lower=-np.inf, upper=np.inf,
                             inequalities=unit_disk, n_ineq=1, ineq_pattern=(np.array([0]), np.array([0])))
        report = check_derivatives(problem, np.array([0.3, -0.7]))
        self.assertGreater(report.objective_error, 1e-2)
        self.assertEqual(report.objective_index, 1)
        self.assertIn(('inequality', 0, 1), report.pattern_violations)

    def test_check_derivatives_skips_fixed(self):
        problem = NlpProblem(n=2, objective=rosenbrock, lower=[0.3, -np.inf], upper=[0.3, np.inf])
        report = check_derivatives(problem, np.array([0.3, 0.2]))
        self.assertLessEqual(report.max_error, 1e-6)
        problem = NlpProblem(n=2, objective=rosenbrock, lower=[0.3, -np.inf], upper=[1.0, np.inf])
        report = check_derivatives(problem, np.array([0.3, 0.2]))
        self.assertLessEqual(report.objective_error, 1e-4)


if __name__ == '__main__':
    unittest.main()
