import sys, os
sys.path.append(os.path.dirname(os.path.realpath(__file__)) + "/..")

import logging
import unittest
from dataclasses import replace

import numpy as np

import config as configuration
from baselines import alpha_scale, topp_acc, topp_vel
from bench import BenchConfig, run_trials
from geometric_path import WaypointSet, build_grid, fit_min_derivative, to_geometric
from nlp_core import check_derivatives
from reparam import initial_guess_from_seed
from rollout_sim import simulate
from timed_traj import sample_solution, seed_trajectory
from toppquad import assemble, solve_toppquad

# Full-scale checks on the CrazyFlie parameters with N = 300; hours of runtime.
ACCEPTANCE = os.environ.get('TOPP_ACCEPTANCE') == '1'
TRIALS = int(os.environ.get('TOPP_ACCEPTANCE_TRIALS', '50'))

SHAPES = {'line': [[0.0, 0.0, 1.0], [2.0, 0.0, 1.0]],
          'l-curve': [[0.0, 0.0, 1.0], [2.0, 0.0, 1.0], [2.0, 2.0, 1.0]],
          'x-curve': [[0.0, 0.0, 1.0], [2.0, 2.0, 1.0], [2.0, 0.0, 1.0], [0.0, 2.0, 1.0]]}


def _rate(records, key):
    results = [record.result(key) for record in records]
    results = [r for r in results if r is not None]
    return sum(r.success for r in results) / len(results)


@unittest.skipUnless(ACCEPTANCE, 'set TOPP_ACCEPTANCE=1 to run the full-scale checks')
class TestAcceptance(unittest.TestCase):
    log = logging.getLogger(__name__)

    @classmethod
    def setUpClass(cls):
        config = configuration.load_config(configuration.CONFIG_DIR / 'bench.yaml')
        cls.params = configuration.quad_params(config)
        cls.topp_opts = configuration.topp_options(config)
        cls.spec = configuration.baseline_spec(config)
        cls.cfg = BenchConfig.from_config(config, trials=TRIALS, orders=('snap',), constraints=('none', 'acc'))
        cls.records = run_trials(cls.cfg, cls.params, cls.topp_opts, cls.spec)
        cls.rng = np.random.default_rng(2024)

    def random_seed(self, velocity=5.0):
        waypoints = WaypointSet.random(self.rng, 4, self.cfg.box)
        return fit_min_derivative(waypoints, 'snap', velocity)

    def test_converged_solutions_are_feasible(self):
        checked = 0
        for record in self.records:
            result = record.result('snap-toppquad')
            if result.validation is None or not result.status.startswith('converged'):
                continue
            checked += 1
            self.assertTrue(result.validation['passed'], (record.index, result.validation))
            self.assertLessEqual(result.validation['thrust_violation'], 1e-6)
            self.assertLessEqual(result.validation['quaternion_norm_error'], 1e-7)
        self.log.info('%d converged solutions validated', checked)
        self.assertGreater(checked, 0)

    def test_seeds_violate_thrust_bounds(self):
        raw = [record.result('snap-none-raw') for record in self.records]
        infeasible = sum(not r.feasible for r in raw if r.success)
        self.assertGreaterEqual(infeasible / len(raw), 0.3)

    def test_time_ordering(self):
        improvements = []
        for record in self.records:
            for key in ('snap-none-alpha', 'snap-acc-alpha'):
                if key in record.improvements:
                    self.assertGreaterEqual(record.improvements[key], -0.01, (record.index, key))
            if 'snap-none-alpha' in record.improvements:
                improvements.append(record.improvements['snap-none-alpha'])
        self.assertTrue(improvements)
        self.assertGreaterEqual(float(np.median(improvements)), 0.2)

    def test_slow_guess_succeeds_more_often(self):
        fast = replace(self.cfg, v_guess=5.0, constraints=())
        records = run_trials(fast, self.params, self.topp_opts, self.spec)
        self.assertGreater(_rate(self.records, 'snap-toppquad'), _rate(records, 'snap-toppquad'))

    def test_bidirectional(self):
        cfg = replace(self.cfg, trials=min(TRIALS, 10), constraints=(), bidirectional=True)
        records = run_trials(cfg, self.params, self.topp_opts, self.spec)
        negative = False
        for both, single in zip(records, self.records):
            both, single = both.result('snap-toppquad'), single.result('snap-toppquad')
            if both.success and single.success:
                self.assertLessEqual(both.time, single.time + 1e-3)
            negative = negative or (both.success and both.min_thrust < 0.0)
        self.assertTrue(negative)

    def test_derivatives(self):
        for _ in range(10):
            seed = self.random_seed()
            grid = build_grid(to_geometric(seed), self.topp_opts.N)
            guess = initial_guess_from_seed(seed, grid, self.params)
            report = check_derivatives(assemble(grid, self.params, guess, self.topp_opts), guess.to_vector())
            self.assertLessEqual(report.max_error, 1e-5, report)

    def test_thrust_bound_relaxation_is_slower(self):
        for _ in range(20):
            grid = build_grid(to_geometric(self.random_seed()), self.spec.N)
            fast = topp_vel(grid, self.spec)
            bounded = topp_acc(grid, self.spec, self.params)
            if fast.success and bounded.success:
                self.assertGreaterEqual(bounded.total_time, fast.total_time * (1.0 - 1e-3))

    def test_alpha_scale_is_maximal(self):
        tested = 0
        while tested < 20:
            traj = seed_trajectory(self.random_seed(), self.params)
            low, high = traj.thrust_range()
            if low >= self.params.u_min[0] and high <= self.params.u_max[0]:
                continue
            tested += 1
            scaled, alpha = alpha_scale(traj, self.params)
            low, high = scaled.thrust_range()
            self.assertTrue(low >= self.params.u_min[0] and high <= self.params.u_max[0])
            low, high = traj.dilated(alpha / (1.0 - 1e-3), self.params).thrust_range()
            self.assertTrue(low < self.params.u_min[0] or high > self.params.u_max[0])

    def test_trajectories_are_trackable(self):
        gains = configuration.controller_gains(configuration.load_config())
        for name, points in SHAPES.items():
            grid = build_grid(to_geometric(fit_min_derivative(WaypointSet(points), 'snap', 1.0)), self.topp_opts.N)
            sol = solve_toppquad(grid, self.params, self.topp_opts)
            self.assertTrue(sol.success, (name, sol.failure_reason))
            traj = sample_solution(sol, 0.01)
            rollout = simulate(traj, self.params, gains)
            self.assertFalse(rollout.diverged, name)
            self.assertTrue(rollout.settled, name)
            self.assertLessEqual(rollout.completion_time, 1.2 * traj.duration, name)


if __name__ == '__main__':
    unittest.main()
