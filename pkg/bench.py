"""Randomized planner comparison: per-trial planner matrix, records and reports"""
import csv
import json
import logging
import time
from concurrent import futures
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from baselines import alpha_scale, topp_acc, topp_vel
from exceptions import ConfigurationError, ToppError
from geometric_path import ORDERS, WaypointSet, build_grid, fit_min_derivative, to_geometric
from reparam import initial_guess_from_profile
from timed_traj import seed_trajectory
from toppquad import solve_toppquad, validate_solution

log = logging.getLogger(__name__)

CONSTRAINTS = ('none', 'vel', 'acc')
GUESS_SOURCES = ('seed', 'alpha-seed', 'alpha-vel', 'alpha-acc')
TOPPQUAD_KEYS = {'n_grid': 'n_grid', 'vmax': 'v_max', 'bidirectional': 'bidirectional'}
FEASIBILITY_TOL = 1e-6
ORDERING_TOL = 0.01
SEED_DT = 0.01

AGGREGATE_COLUMNS = ('trial', 'planner', 'order', 'success', 'status', 'time', 'feasible', 'max_thrust',
                     'min_thrust', 'alpha', 'iterations', 'average_speed', 'improvement', 'wall_time')


@dataclass
class BenchConfig:
    trials: int = 200
    seed: int = 0
    box: tuple = (10.0, 10.0, 10.0)
    waypoints_per_trial: int = 4
    orders: tuple = ('snap', 'jerk', 'acc')
    constraints: tuple = CONSTRAINTS
    v_nominal: float = 5.0
    v_guess: float = 1.0
    vmax: float = 5.0
    n_grid: int = 300
    bidirectional: bool = False
    guess: str = 'seed'
    toppquad: bool = True
    lam: Optional[float] = None
    workers: int = 4
    out: str = 'out'

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        self.orders = tuple(self.orders)
        self.constraints = tuple(self.constraints)
        if self.trials < 1:
            raise ConfigurationError(f'trial count "{self.trials}" must be at least 1')
        if len(self.box) != 3 or min(self.box) <= 0.0:
            raise ConfigurationError(f'waypoint box {self.box} must have three positive extents')
        if self.waypoints_per_trial < 2:
            raise ConfigurationError(f'{self.waypoints_per_trial} waypoints per trial, need at least 2')
        unknown = [order for order in self.orders if order not in ORDERS]
        if unknown:
            raise ConfigurationError(f'unknown seed orders {unknown}')
        unknown = [name for name in self.constraints if name not in CONSTRAINTS]
        if unknown:
            raise ConfigurationError(f'unknown baseline constraints {unknown}')
        if self.guess not in GUESS_SOURCES:
            raise ConfigurationError(f'unknown initial guess "{self.guess}"')
        for name in ('v_nominal', 'v_guess', 'vmax'):
            if not getattr(self, name) > 0.0:
                raise ConfigurationError(f'{name} "{getattr(self, name)}" must be positive')

    @classmethod
    def from_config(cls, config, **overrides):
        """Flags override the `bench` section, which overrides n_grid, v_max and bidirectional of `toppquad`."""
        planner = config.get('toppquad') or {}
        section = {name: planner[key] for name, key in TOPPQUAD_KEYS.items() if planner.get(key) is not None}
        section.update(config.get('bench') or {})
        section.update({key: value for key, value in overrides.items() if value is not None})
        known = {name: section[name] for name in cls.__dataclass_fields__ if name in section}
        return cls(**known)

    def trial_rng(self, index):
        return np.random.default_rng(self.seed ^ index)


@dataclass
class PlannerResult:
    planner: str
    order: str
    success: bool
    status: str = ''
    time: float = float('nan')
    feasible: bool = False
    max_thrust: float = float('nan')
    min_thrust: float = float('nan')
    alpha: Optional[float] = None
    iterations: int = 0
    average_speed: float = float('nan')
    wall_time: float = 0.0
    validation: Optional[dict] = None

    @property
    def key(self):
        return f'{self.order}-{self.planner}'


@dataclass
class TrialRecord:
    index: int
    waypoints: list
    path_length: float
    results: List[PlannerResult] = field(default_factory=list)
    improvements: Dict[str, float] = field(default_factory=dict)
    error: str = ''

    def result(self, key):
        return next((r for r in self.results if r.key == key), None)

    def as_dict(self, wall_times=True):
        document = asdict(self)
        if not wall_times:
            for result in document['results']:
                result.pop('wall_time')
        return document

    @classmethod
    def from_dict(cls, document):
        document = dict(document)
        document['results'] = [PlannerResult(**r) for r in document.get('results', [])]
        return cls(**document)


def _thrust_verdict(thrusts, params):
    thrusts = np.asarray(thrusts, dtype=float)
    low, high = float(np.min(thrusts)), float(np.max(thrusts))
    feasible = low >= float(np.min(params.u_min)) - FEASIBILITY_TOL and high <= float(np.max(params.u_max)) + FEASIBILITY_TOL
    return feasible, low, high


class OrderPlanner:
    """Every planner of one seed order on one waypoint set; all share the geometric path of the seed."""

    def __init__(self, waypoints, order, params, cfg, topp_opts, spec):
        self.order = order
        self.params = params.bidirectional() if cfg.bidirectional else params
        self.cfg = cfg
        self.topp_opts = replace(topp_opts, N=cfg.n_grid, v_max=cfg.vmax, bidirectional=cfg.bidirectional)
        self.spec = replace(spec, N=cfg.n_grid, v_max=cfg.vmax, lam=spec.lam if cfg.lam is None else cfg.lam)
        self.seed = fit_min_derivative(waypoints, order, cfg.v_nominal)
        self.path = to_geometric(self.seed)
        self.grid = build_grid(self.path, cfg.n_grid)
        self.length = self.path.length()
        self._seed_traj = None
        self._relaxations = {}

    def seed_trajectory(self):
        if self._seed_traj is None:
            self._seed_traj = seed_trajectory(self.seed, self.params, SEED_DT)
        return self._seed_traj

    def relaxation(self, constraint):
        if constraint not in self._relaxations:
            if constraint == 'vel':
                self._relaxations[constraint] = topp_vel(self.grid, self.spec)
            else:
                self._relaxations[constraint] = topp_acc(self.grid, self.spec, self.params)
        return self._relaxations[constraint]

    def _result(self, planner, started, **values):
        result = PlannerResult(planner=planner, order=self.order, wall_time=time.perf_counter() - started, **values)
        if result.success and result.time > 0.0:
            result.average_speed = self.length / result.time
        return result

    def baseline(self, constraint, scaled):
        """Returns (PlannerResult, trajectory or None)."""
        planner = f'{constraint}-{"alpha" if scaled else "raw"}'
        started = time.perf_counter()
        try:
            iterations = 0
            if constraint == 'none':
                traj = self.seed_trajectory()
                duration = self.seed.duration
                status = 'fitted'
            else:
                relaxation = self.relaxation(constraint)
                status = relaxation.report.status.value
                iterations = relaxation.report.iterations
                if not relaxation.success:
                    return self._result(planner, started, success=False, status=status, iterations=iterations), None
                traj = relaxation.trajectory(self.params)
                duration = relaxation.total_time
            alpha = None
            if scaled:
                traj, alpha = alpha_scale(traj, self.params)
                duration = duration / alpha
            feasible, low, high = _thrust_verdict(traj.thrusts, self.params)
            return self._result(planner, started, success=True, status=status, time=duration, feasible=feasible,
                                max_thrust=high, min_thrust=low, alpha=alpha, iterations=iterations), traj
        except ToppError as error:
            log.info('%s %s failed: %s', self.order, planner, error)
            return self._result(planner, started, success=False, status=f'error: {error}'), None

    def guess(self, source):
        n_nodes = self.grid.N + 1
        if source == 'seed':
            h = np.full(n_nodes, (self.cfg.v_guess / self.cfg.v_nominal) ** 2)
            return initial_guess_from_profile(self.grid, self.params, h, np.zeros(n_nodes))
        if source == 'alpha-seed':
            _, alpha = alpha_scale(self.seed_trajectory(), self.params)
            return initial_guess_from_profile(self.grid, self.params, np.full(n_nodes, alpha ** 2), np.zeros(n_nodes))
        relaxation = self.relaxation(source.split('-', 1)[1])
        _, alpha = alpha_scale(relaxation.trajectory(self.params), self.params)
        k = alpha ** 2
        return initial_guess_from_profile(self.grid, self.params, k * relaxation.speed.h, k * relaxation.speed.hp,
                                          k * relaxation.hpp, k * relaxation.hppp_nodes)

    def toppquad(self, source=None):
        source = source or self.cfg.guess
        started = time.perf_counter()
        try:
            guess = self.guess(source)
            sol = solve_toppquad(self.grid, self.params, self.topp_opts, guess)
        except ToppError as error:
            log.info('%s toppquad failed: %s', self.order, error)
            return self._result('toppquad', started, success=False, status=f'error: {error}'), None
        validation = validate_solution(sol, self.params, self.topp_opts)
        feasible, low, high = _thrust_verdict(sol.thrusts, self.params)
        status = sol.report.status.value if sol.success else f'{sol.report.status.value}: {sol.failure_reason}'
        result = self._result('toppquad', started, success=sol.success and validation.passed, status=status,
                              time=sol.total_time, feasible=feasible and validation.passed, max_thrust=high,
                              min_thrust=low, iterations=sol.report.iterations, validation=validation.as_dict())
        return result, sol


def _improvements(record, cfg):
    out = {}
    for order in cfg.orders:
        optimized = record.result(f'{order}-toppquad')
        if optimized is None or not optimized.success:
            continue
        for constraint in cfg.constraints:
            baseline = record.result(f'{order}-{constraint}-alpha')
            if baseline is not None and baseline.success:
                out[baseline.key] = (baseline.time - optimized.time) / baseline.time
    return out


def run_trial(index, cfg, params, topp_opts, spec, waypoints=None):
    """Plan one waypoint set with every planner of the matrix; failures are recorded, never raised."""
    if waypoints is None:
        waypoints = WaypointSet.random(cfg.trial_rng(index), cfg.waypoints_per_trial, cfg.box)
    record = TrialRecord(index=index, waypoints=waypoints.positions.tolist(), path_length=waypoints.polyline_length)
    for order in cfg.orders:
        try:
            planner = OrderPlanner(waypoints, order, params, cfg, topp_opts, spec)
        except ToppError as error:
            record.error = f'{order}: {error}'
            log.warning('trial %d: %s', index, record.error)
            continue
        for constraint in cfg.constraints:
            for scaled in (False, True):
                record.results.append(planner.baseline(constraint, scaled)[0])
        if cfg.toppquad:
            record.results.append(planner.toppquad()[0])
    record.improvements = _improvements(record, cfg)
    log.info('trial %d done: %d planner results', index, len(record.results))
    return record


def run_trials(cfg, params, topp_opts, spec):
    with futures.ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        pending = [executor.submit(run_trial, index, cfg, params, topp_opts, spec) for index in range(cfg.trials)]
        records = [task.result() for task in pending]
    return sorted(records, key=lambda r: r.index)


def _aggregate_rows(records):
    for record in records:
        for result in record.results:
            yield {'trial': record.index, 'planner': result.key, 'order': result.order, 'success': int(result.success),
                   'status': result.status, 'time': result.time, 'feasible': int(result.feasible),
                   'max_thrust': result.max_thrust, 'min_thrust': result.min_thrust,
                   'alpha': '' if result.alpha is None else result.alpha, 'iterations': result.iterations,
                   'average_speed': result.average_speed,
                   'improvement': record.improvements.get(result.key, ''), 'wall_time': result.wall_time}


def summarize(records, cfg, params):
    """Per-planner statistics; every count is derived from the records."""
    if cfg.bidirectional:
        params = params.bidirectional()
    u_max = float(np.max(params.u_max))
    u_min = float(np.min(params.u_min))
    keys = []
    for record in records:
        for result in record.results:
            if result.key not in keys:
                keys.append(result.key)
    rows = []
    for key in keys:
        results = [r for r in (record.result(key) for record in records) if r is not None]
        succeeded = [r for r in results if r.success]
        times = [r.time for r in succeeded]
        improvements = [record.improvements[key] for record in records if key in record.improvements]
        rows.append({'planner': key, 'trials': len(results), 'successes': len(succeeded),
                     'success_rate': len(succeeded) / len(results) if results else 0.0,
                     'feasible': sum(r.feasible for r in succeeded),
                     'above_u_max': sum(r.max_thrust > u_max + FEASIBILITY_TOL for r in succeeded),
                     'below_u_min': sum(r.min_thrust < u_min - FEASIBILITY_TOL for r in succeeded),
                     'median_time': float(np.median(times)) if times else float('nan'),
                     'median_speed': float(np.median([r.average_speed for r in succeeded])) if succeeded else float('nan'),
                     'median_improvement': float(np.median(improvements)) if improvements else float('nan'),
                     'ordering_violations': sum(v < -ORDERING_TOL for v in improvements)})
    return rows


def _format_cell(value):
    if isinstance(value, float):
        return f'{value:.4g}'
    return str(value)


def write_report(records, cfg, params, out_dir):
    out_dir = Path(out_dir)
    (out_dir / 'trials').mkdir(parents=True, exist_ok=True)
    for record in records:
        with open(out_dir / 'trials' / f'{record.index:04d}.json', 'w', encoding='utf-8') as file:
            json.dump(record.as_dict(), file, indent=1)

    with open(out_dir / 'aggregate.csv', 'w', newline='', encoding='utf-8') as file:
        writer = csv.DictWriter(file, fieldnames=AGGREGATE_COLUMNS)
        writer.writeheader()
        writer.writerows(_aggregate_rows(records))

    rows = summarize(records, cfg, params)
    columns = list(rows[0].keys()) if rows else ['planner']
    lines = [f'# Planner comparison ({cfg.trials} trials, seed {cfg.seed})', '',
             f'v_nominal {cfg.v_nominal} m/s, v_guess {cfg.v_guess} m/s, v_max {cfg.vmax} m/s, '
             f'N {cfg.n_grid}, bidirectional {cfg.bidirectional}, guess {cfg.guess}', '',
             '| ' + ' | '.join(columns) + ' |', '|' + '---|' * len(columns)]
    lines += ['| ' + ' | '.join(_format_cell(row[c]) for c in columns) + ' |' for row in rows]
    failed = [record.index for record in records if record.error]
    if failed:
        lines += ['', f'Trials with setup errors: {", ".join(str(i) for i in failed)}']
    (out_dir / 'summary.md').write_text('\n'.join(lines) + '\n', encoding='utf-8')
    log.info('report written to "%s"', out_dir)
    return rows


def run_bench(cfg, params, topp_opts, spec, run_id=None):
    """Run all trials and write out/<run-id>/{trials/*.json, aggregate.csv, summary.md}."""
    run_id = run_id or datetime.now().strftime('%Y%m%d-%H%M%S')
    out_dir = Path(cfg.out) / run_id
    log.info('benchmark "%s": %d trials, %d workers', run_id, cfg.trials, cfg.workers)
    records = run_trials(cfg, params, topp_opts, spec)
    write_report(records, cfg, params, out_dir)
    return out_dir, records
