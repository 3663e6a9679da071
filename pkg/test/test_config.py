import sys, os
sys.path.append(os.path.dirname(os.path.realpath(__file__)) + "/..")

import logging
import pathlib
import tempfile
import unittest

import numpy as np

import config as configuration
from exceptions import ConfigurationError


class TestConfig(unittest.TestCase):
    log = logging.getLogger(__name__)

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.directory.name)

    def tearDown(self):
        self.directory.cleanup()

    def write(self, name, text):
        file_path = self.root / name
        file_path.write_text(text, encoding='utf-8')
        return file_path

    def test_default(self):
        config = configuration.load_config()
        params = configuration.quad_params(config)
        self.assertAlmostEqual(params.mass, 0.032)
        np.testing.assert_allclose(params.u_max, 0.14375)
        np.testing.assert_allclose(params.u_min, 0.0)
        self.assertEqual(params.allocation.shape, (4, 4))
        np.testing.assert_allclose(params.allocation[0], 1.0)

        opts = configuration.topp_options(config)
        self.assertEqual(opts.N, 300)
        self.assertEqual(opts.v_max, 5.0)
        self.assertIsNone(opts.w_max)
        self.assertEqual(opts.solver.feas_tol, 1e-8)
        self.assertEqual(opts.solver.method, 'interior-point')
        self.assertEqual(configuration.solver_options(config, method='augmented-lagrangian').method,
                         'augmented-lagrangian')
        self.assertEqual(configuration.topp_options(config, n_grid=40, v_max=None).N, 40)

        spec = configuration.baseline_spec(config)
        self.assertEqual(spec.lam, 0.1)
        self.assertFalse(spec.include_thrust_bound)
        self.assertTrue(configuration.baseline_spec(config, thrust_bound=True).include_thrust_bound)

        gains = configuration.controller_gains(config)
        np.testing.assert_allclose(gains.kp, [8.0, 8.0, 19.0])
        sim_dt, control_dt = configuration.simulation_settings(config)
        self.assertEqual(sim_dt, 0.001)
        self.assertAlmostEqual(control_dt, 0.01)

    def test_include(self):
        bench = configuration.load_config(configuration.CONFIG_DIR / 'bench.yaml')
        self.assertEqual(bench['bench']['trials'], 200)
        self.assertAlmostEqual(bench['quad']['mass'], 0.032)

        self.write('base.yaml', 'quad:\n  mass: 1.0\n  thrust_max: 5.0\nsolver:\n  feas_tol: 1.0e-6\n')
        file_path = self.write('child.yaml', 'include: base.yaml\nquad:\n  mass: 2.0\n')
        config = configuration.load_config(file_path)
        self.assertEqual(config['quad'], {'mass': 2.0, 'thrust_max': 5.0})
        self.assertEqual(configuration.solver_options(config).feas_tol, 1e-6)

    def test_errors(self):
        with self.assertRaises(ConfigurationError):
            configuration.load_config(self.root / 'missing.yaml')
        with self.assertRaises(ConfigurationError):
            configuration.load_config(self.write('broken.yaml', 'quad: [1, 2\n'))
        with self.assertRaises(ConfigurationError):
            configuration.load_config(self.write('list.yaml', '- 1\n- 2\n'))
        with self.assertRaises(ConfigurationError):
            configuration.quad_params(configuration.load_config(self.write('partial.yaml', 'quad:\n  mass: 1.0\n')))
        with self.assertRaises(ConfigurationError):
            configuration.waypoints({'waypoints': {'yaw': [0.0]}})
        with self.assertRaises(ConfigurationError):
            configuration.controller_gains({'controller': {'kp': 1.0}})
        with self.assertRaises(ConfigurationError):
            configuration.simulation_settings({'controller': {'control_rate': 0.0}})
        with self.assertRaises(ConfigurationError):
            configuration.topp_options({'toppquad': 'fast'})

    def test_explicit_allocation(self):
        document = configuration.load_config()
        matrix = [[1.0, 1.0, 1.0, 1.0], [0.0, 0.1, 0.0, -0.1], [-0.1, 0.0, 0.1, 0.0], [0.01, -0.01, 0.01, -0.01]]
        document['quad']['allocation'] = {'matrix': matrix}
        params = configuration.quad_params(document)
        np.testing.assert_array_equal(params.allocation, matrix)
        document['quad']['allocation'] = {'layout': 'plus', 'arm_length': 0.1, 'drag_coefficient': 0.01}
        with self.assertRaises(ConfigurationError):
            configuration.quad_params(document)

    def test_waypoints(self):
        config = {'waypoints': {'points': [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]}}
        waypoints = configuration.waypoints(config)
        self.assertEqual(waypoints.positions.shape, (3, 3))
        self.assertAlmostEqual(waypoints.polyline_length, 2.0)
        self.assertEqual(configuration.controller_gains({}).kp.tolist(), [8.0, 8.0, 19.0])


if __name__ == '__main__':
    unittest.main()
