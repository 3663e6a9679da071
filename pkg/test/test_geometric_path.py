import sys, os
sys.path.append(os.path.dirname(os.path.realpath(__file__)) + "/..")

import logging
import pathlib
import tempfile
import unittest

import numpy as np

from exceptions import ConfigurationError, TrajectoryIOError
from geometric_path import (MinDerivativeProblem, GeometricPath, WaypointSet, build_grid, derivative_order,
                            fit_min_derivative, order_name, to_geometric)

WAYPOINTS = [[0.0, 0.0, 0.0], [2.0, 1.0, 0.5], [3.0, 4.0, 1.0], [6.0, 3.0, 2.0]]


class TestGeometricPath(unittest.TestCase):
    log = logging.getLogger(__name__)

    def test_orders(self):
        self.assertEqual(derivative_order('snap'), 4)
        self.assertEqual(derivative_order(3), 3)
        self.assertEqual(order_name(2), 'acc')
        with self.assertRaises(ConfigurationError):
            derivative_order('crackle')
        with self.assertRaises(ConfigurationError):
            derivative_order(5)

    def test_waypoint_validation(self):
        with self.assertRaises(ConfigurationError):
            WaypointSet([[0.0, 0.0, 0.0]])
        with self.assertRaises(ConfigurationError):
            WaypointSet([[0.0, 0.0], [1.0, 1.0]])
        with self.assertRaises(ConfigurationError):
            WaypointSet([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        with self.assertRaises(ConfigurationError):
            WaypointSet(WAYPOINTS, yaw=[0.0, 1.0])

    def test_random_waypoints(self):
        first = WaypointSet.random(np.random.default_rng(7), 4, (10.0, 10.0, 10.0))
        second = WaypointSet.random(np.random.default_rng(7), 4, (10.0, 10.0, 10.0))
        np.testing.assert_array_equal(first.positions, second.positions)
        self.assertTrue(np.all(first.positions >= 0.0) and np.all(first.positions <= 10.0))
        self.assertEqual(len(first), 4)

    def test_fit_interpolates_and_rests(self):
        waypoints = WaypointSet(WAYPOINTS)
        for order in ('acc', 'jerk', 'snap'):
            seed = fit_min_derivative(waypoints, order, 2.0)
            k = derivative_order(order)
            np.testing.assert_allclose(seed.evaluate(seed.breakpoints), waypoints.positions, atol=1e-8)
            for r in range(1, k):
                np.testing.assert_allclose(seed.evaluate(seed.breakpoints[[0, -1]], r), 0.0, atol=1e-7)
                inner = seed.breakpoints[1:-1]
                np.testing.assert_allclose(seed.evaluate(inner - 1e-9, r), seed.evaluate(inner + 1e-9, r),
                                           atol=1e-5 * 10 ** r)

    def test_segment_times(self):
        waypoints = WaypointSet(WAYPOINTS)
        seed = fit_min_derivative(waypoints, 'snap', 5.0)
        distances = np.linalg.norm(np.diff(waypoints.positions, axis=0), axis=1)
        np.testing.assert_allclose(seed.segment_times, distances / 5.0)
        self.assertAlmostEqual(seed.duration, waypoints.polyline_length / 5.0)
        with self.assertRaises(ConfigurationError):
            fit_min_derivative(waypoints, 'snap', 0.0)

    def test_cost_quadrature(self):
        seed = fit_min_derivative(WaypointSet(WAYPOINTS), 'snap', 2.0)
        problem = MinDerivativeProblem(seed.segment_times, 4)
        self.assertGreater(seed.cost(), 0.0)
        self.assertAlmostEqual(seed.cost() / problem.cost(seed.normalized_coefficients), 1.0, places=6)

    def test_fit_is_optimal(self):
        waypoints = WaypointSet(WAYPOINTS)
        seed = fit_min_derivative(waypoints, 'jerk', 2.0)
        problem = MinDerivativeProblem(seed.segment_times, 3)
        a, b = problem.constraints(waypoints.positions)
        np.testing.assert_allclose(a @ seed.normalized_coefficients, b, atol=1e-8)
        direction = np.linalg.svd(a)[2][-1]
        for step in (1e-3, -1e-3):
            perturbed = seed.normalized_coefficients + step * direction[:, None]
            self.assertGreaterEqual(problem.cost(perturbed), problem.cost(seed.normalized_coefficients))

    def test_straight_line_stays_on_line(self):
        seed = fit_min_derivative(WaypointSet([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]), 'snap', 1.0)
        t = np.linspace(0.0, seed.duration, 50)
        p = seed.evaluate(t)
        np.testing.assert_allclose(p[:, 0] * 4.0, p[:, 1] * 3.0, atol=1e-9)
        np.testing.assert_allclose(p[:, 2], 0.0, atol=1e-9)

    def test_geometry_independent_of_nominal_velocity(self):
        waypoints = WaypointSet(WAYPOINTS)
        slow = fit_min_derivative(waypoints, 'snap', 1.0)
        fast = fit_min_derivative(waypoints, 'snap', 5.0)
        t = np.linspace(0.0, fast.duration, 40)
        np.testing.assert_allclose(fast.evaluate(t), slow.evaluate(5.0 * t), atol=1e-8)

    def test_yaw_channel(self):
        seed = fit_min_derivative(WaypointSet(WAYPOINTS, yaw=[0.0, 0.5, 1.0, 0.0]), 'snap', 2.0)
        self.assertIsNotNone(seed.yaw_ppoly)
        np.testing.assert_allclose(seed.yaw_ppoly(seed.breakpoints), [0.0, 0.5, 1.0, 0.0], atol=1e-8)
        path = to_geometric(seed)
        self.assertAlmostEqual(float(path.yaw(seed.breakpoints[2])), 1.0, places=8)

    def test_to_geometric_and_grid(self):
        seed = fit_min_derivative(WaypointSet(WAYPOINTS), 'snap', 2.0)
        path = to_geometric(seed)
        self.assertEqual(path.source, 'min-snap')
        self.assertAlmostEqual(path.s_end, seed.duration)
        grid = build_grid(path, 40)
        self.assertEqual(grid.N, 40)
        self.assertEqual(len(grid.s), 41)
        self.assertAlmostEqual(grid.ds * 40, grid.s_end)
        np.testing.assert_allclose(grid.gamma, seed.evaluate(grid.s))
        np.testing.assert_allclose(grid.d4, seed.evaluate(grid.s, 4))
        np.testing.assert_allclose(grid.yaw, 0.0)
        self.assertGreaterEqual(path.length(), 0.999 * WaypointSet(WAYPOINTS).polyline_length)
        with self.assertRaises(ConfigurationError):
            build_grid(path, 1)

    def test_from_samples(self):
        t = np.linspace(1.0, 3.0, 21)
        positions = np.column_stack([t, t ** 2, np.sin(t)])
        path = GeometricPath.from_samples(t, positions)
        self.assertAlmostEqual(path.s_end, 2.0)
        np.testing.assert_allclose(path(t - 1.0), positions, atol=1e-10)
        np.testing.assert_allclose(path(np.array([1.0]), 1)[0], [1.0, 4.0, np.cos(2.0)], atol=1e-4)

    def test_csv_files(self):
        with tempfile.TemporaryDirectory() as directory:
            file_path = pathlib.Path(directory) / 'waypoints.csv'
            file_path.write_text('x,y,z,yaw\n0,0,0,0\n1,2,3,0.5\n4,4,4,1.0\n')
            waypoints = WaypointSet.from_csv(file_path)
            np.testing.assert_allclose(waypoints.positions[1], [1.0, 2.0, 3.0])
            np.testing.assert_allclose(waypoints.yaw, [0.0, 0.5, 1.0])

            path = to_geometric(fit_min_derivative(waypoints, 'acc', 1.0))
            out = pathlib.Path(directory) / 'path.csv'
            path.to_csv(out, n_samples=11)
            self.assertTrue(out.read_text().startswith('s,x,y,z'))

            bad = pathlib.Path(directory) / 'bad.csv'
            bad.write_text('a,b\n1,2\n3,4\n')
            with self.assertRaises(ConfigurationError):
                WaypointSet.from_csv(bad)
            with self.assertRaises(TrajectoryIOError):
                WaypointSet.from_csv(pathlib.Path(directory) / 'missing.csv')


if __name__ == '__main__':
    unittest.main()
