# Command line entry point:
# python topp_cli.py plan --config config/crazyflie.yaml --waypoints waypoints.csv --out plan.csv
# python topp_cli.py bench --config config/bench.yaml --trials 20 --seed 0

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

import config as configuration
from bench import GUESS_SOURCES, BenchConfig, OrderPlanner, run_bench, run_trial
from exceptions import ToppError
from geometric_path import ORDERS, WaypointSet
from rollout_sim import simulate
from timed_traj import FORMATS, export, load_trajectory, sample_solution, with_metadata

log = logging.getLogger(__name__)

PLANNERS = {'toppquad': (None, None),
            'minsnap': ('snap', ('none', False)), 'minjerk': ('jerk', ('none', False)),
            'minacc': ('acc', ('none', False)),
            'alpha-minsnap': ('snap', ('none', True)), 'alpha-minjerk': ('jerk', ('none', True)),
            'alpha-minacc': ('acc', ('none', True)),
            'topp-vel': (None, ('vel', False)), 'topp-acc': (None, ('acc', False)),
            'alpha-topp-vel': (None, ('vel', True)), 'alpha-topp-acc': (None, ('acc', True))}

EXIT_FAILURE = 1
EXIT_ERROR = 2


def _bench_config(args, config, **extra):
    return BenchConfig.from_config(config, seed=args.seed, v_nominal=args.v_nominal, v_guess=args.v_guess,
                                   vmax=args.vmax, n_grid=args.n_grid, bidirectional=args.bidirectional or None,
                                   guess=args.guess, lam=args.lam, out=args.out, **extra)


def _planner_options(config, args):
    params = configuration.quad_params(config)
    topp_opts = configuration.topp_options(config)
    spec = configuration.baseline_spec(config, thrust_bound=args.thrust_bound or None)
    return params, topp_opts, spec


def _waypoints(args, config):
    if args.waypoints:
        return WaypointSet.from_csv(args.waypoints)
    return configuration.waypoints(config)


def plan(args):
    config = configuration.load_config(args.config)
    params, topp_opts, spec = _planner_options(config, args)
    cfg = _bench_config(args, config, trials=1)
    order, baseline = PLANNERS[args.planner]
    if args.thrust_bound and baseline is not None and baseline[0] == 'vel':
        baseline = ('acc', baseline[1])
    planner = OrderPlanner(_waypoints(args, config), order or args.order, params, cfg, topp_opts, spec)

    if baseline is None:
        result, sol = planner.toppquad()
        traj = sample_solution(sol, args.dt) if sol is not None else None
    else:
        result, traj = planner.baseline(*baseline)

    bounds = f'[{np.min(planner.params.u_min):g}, {np.max(planner.params.u_max):g}] N'
    print(f'{args.planner}: status {result.status}, T={result.time:.4f} s, thrust range '
          f'[{result.min_thrust:.5f}, {result.max_thrust:.5f}] N within {bounds}: {result.feasible}, '
          f'iterations {result.iterations}')
    if not result.success or traj is None:
        return EXIT_FAILURE

    checks = {} if result.validation is None else {'validation_passed': result.validation['passed']}
    traj = with_metadata(traj, planner=args.planner, total_time=result.time, feasible=result.feasible,
                         u_min=float(np.min(planner.params.u_min)), u_max=float(np.max(planner.params.u_max)),
                         **checks)
    out = Path(args.out)
    if out.suffix.lstrip('.').lower() not in FORMATS:
        out = out / f'{args.planner}.{args.format}'
        out.parent.mkdir(parents=True, exist_ok=True)
    export(traj, out)
    print(f'trajectory written to "{out}"')
    return 0


def bench(args):
    config = configuration.load_config(args.config)
    params, topp_opts, spec = _planner_options(config, args)
    cfg = _bench_config(args, config, trials=args.trials, workers=args.workers)
    out_dir, records = run_bench(cfg, params, topp_opts, spec, run_id=args.run_id)
    failed = sum(bool(record.error) for record in records)
    print(f'{len(records)} trials ({failed} with setup errors), report in "{out_dir}"')
    return 0


def compare(args):
    config = configuration.load_config(args.config)
    params, topp_opts, spec = _planner_options(config, args)
    cfg = _bench_config(args, config, trials=1, orders=[args.order] if args.order else None)
    record = run_trial(0, cfg, params, topp_opts, spec, waypoints=_waypoints(args, config))
    print(f'{"planner":<22}{"status":<28}{"T [s]":>10}{"feasible":>10}{"improvement":>13}')
    for result in record.results:
        improvement = record.improvements.get(result.key)
        print(f'{result.key:<22}{result.status[:27]:<28}{result.time:>10.4f}{str(result.feasible):>10}'
              f'{"" if improvement is None else f"{improvement:.3f}":>13}')
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(record.as_dict(), indent=1), encoding='utf-8')
    return 0 if not record.error else EXIT_FAILURE


def rollout(args):
    config = configuration.load_config(args.config)
    params = configuration.quad_params(config)
    if args.bidirectional:
        params = params.bidirectional()
    gains = configuration.controller_gains(config)
    sim_dt, control_dt = configuration.simulation_settings(config)
    traj = load_trajectory(args.trajectory)
    result = simulate(traj, params, gains, sim_dt=sim_dt, control_dt=control_dt,
                      divergence_factor=args.divergence_factor)
    summary = result.summary()
    print(', '.join(f'{key} {value}' for key, value in summary.items()))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result.export(out / f'rollout.{"tdms" if args.format == "tdms" else "csv"}')
        result.write_summary(out / 'rollout.json')
    return EXIT_FAILURE if result.diverged else 0


def build_parser():
    parser = argparse.ArgumentParser(description='Time-optimal quadrotor path parameterization')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    verbs = parser.add_subparsers(dest='verb', required=True)

    def planning(name, handler, help):
        sub = verbs.add_parser(name, help=help)
        sub.set_defaults(handler=handler)
        sub.add_argument('--config', default=None, help='YAML configuration file')
        sub.add_argument('--seed', type=int, default=None)
        sub.add_argument('--n-grid', type=int, default=None)
        sub.add_argument('--vmax', type=float, default=None, help='speed limit, m/s')
        sub.add_argument('--v-nominal', '--v', type=float, default=None, help='seed fit velocity, m/s')
        sub.add_argument('--v-guess', type=float, default=None, help='initial guess velocity, m/s')
        sub.add_argument('--guess', choices=GUESS_SOURCES, default=None)
        sub.add_argument('--lambda', dest='lam', type=float, default=None, help='h\'\'\' regularization weight')
        sub.add_argument('--thrust-bound', action='store_true', help='enable the thrust bound of the baseline')
        sub.add_argument('--bidirectional', action='store_true', help='thrust range [-u_max, u_max]')
        return sub

    sub = planning('plan', plan, 'plan one trajectory and export it')
    sub.add_argument('--waypoints', default=None, help='CSV file with x,y,z[,yaw] rows')
    sub.add_argument('--planner', choices=sorted(PLANNERS), default='toppquad')
    sub.add_argument('--order', choices=ORDERS, default='snap', help='seed order of the geometric path')
    sub.add_argument('--dt', type=float, default=0.01, help='export sample interval, s')
    sub.add_argument('--format', choices=FORMATS, default='csv')
    sub.add_argument('--out', default='out')

    sub = planning('bench', bench, 'randomized planner comparison')
    sub.add_argument('--trials', type=int, default=None)
    sub.add_argument('--workers', type=int, default=None)
    sub.add_argument('--run-id', default=None)
    sub.add_argument('--out', default=None)

    sub = planning('compare', compare, 'every planner on one waypoint set')
    sub.add_argument('--waypoints', default=None, help='CSV file with x,y,z[,yaw] rows')
    sub.add_argument('--order', choices=ORDERS, default=None)
    sub.add_argument('--out', default=None, help='JSON file for the trial record')

    sub = verbs.add_parser('rollout', help='track a trajectory file in closed loop')
    sub.set_defaults(handler=rollout)
    sub.add_argument('trajectory', help='trajectory file (csv, json or tdms)')
    sub.add_argument('--config', default=None)
    sub.add_argument('--bidirectional', action='store_true')
    sub.add_argument('--divergence-factor', type=float, default=10.0)
    sub.add_argument('--format', choices=['csv', 'tdms'], default='csv')
    sub.add_argument('--out', default=None, help='directory for the rollout log and summary')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.getLogger().setLevel(args.log_level)
    try:
        return args.handler(args)
    except ToppError as error:
        log.error('%s failed: %s', args.verb, error)
        print(f'{args.verb}: error: {error}', file=sys.stderr)
        return EXIT_ERROR


if __name__ == '__main__':
    logging.basicConfig()
    sys.exit(main())
