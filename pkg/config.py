"""YAML configuration: vehicle parameters, waypoints, solver, planner, controller and benchmark settings"""
import logging
from pathlib import Path

import numpy as np
import yaml

from baselines import ConvexToppSpec
from exceptions import ConfigurationError
from geometric_path import WaypointSet
from nlp_core import SolverOptions
from quad_model import QuadParams, x_configuration_allocation
from rollout_sim import ControllerGains
from toppquad import ToppOptions

log = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent.resolve() / 'config'
DEFAULT_CONFIG = CONFIG_DIR / 'crazyflie.yaml'


def _merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(file_path=None):
    """Read a YAML file; an `include` key names files (relative to it) whose content it overrides."""
    file_path = Path(file_path) if file_path else DEFAULT_CONFIG
    if not file_path.is_file():
        raise ConfigurationError(f'file "{file_path}" not accessible')
    with open(file_path, 'r', encoding='utf-8') as stream:
        try:
            document = yaml.safe_load(stream) or {}
        except yaml.YAMLError as error:
            raise ConfigurationError(f'file "{file_path}" is not valid YAML: {error}') from error
    if not isinstance(document, dict):
        raise ConfigurationError(f'file "{file_path}" does not contain a mapping')

    includes = document.pop('include', None) or []
    if isinstance(includes, str):
        includes = [includes]
    merged = {}
    for include in includes:
        merged = _merge(merged, load_config(file_path.parent / include))
    return _merge(merged, document)


def _section(config, name):
    section = config.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigurationError(f'section "{name}" must be a mapping')
    return section


def quad_params(config):
    section = _section(config, 'quad')
    try:
        allocation = section['allocation']
        if 'matrix' in allocation:
            matrix = np.asarray(allocation['matrix'], dtype=float)
        elif allocation.get('layout', 'x') == 'x':
            matrix = x_configuration_allocation(allocation['arm_length'], allocation['drag_coefficient'])
        else:
            raise ConfigurationError(f'unknown allocation layout "{allocation.get("layout")}"')
        params = QuadParams(mass=float(section['mass']), inertia=np.asarray(section['inertia'], dtype=float),
                            allocation=matrix, u_min=section['thrust_min'], u_max=section['thrust_max'],
                            gravity=section.get('gravity', [0.0, 0.0, -9.81]))
    except KeyError as error:
        raise ConfigurationError(f'section "quad" misses key {error}') from error
    log.debug('vehicle parameters %s', params.params_hash())
    return params


def load_quad_params(file_path=None):
    return quad_params(load_config(file_path))


def waypoints(config):
    """Section `waypoints` with `points` (n x 3) and optional `yaw`."""
    section = _section(config, 'waypoints')
    if 'points' not in section:
        raise ConfigurationError('section "waypoints" misses key "points"')
    return WaypointSet(np.asarray(section['points'], dtype=float), section.get('yaw'))


def solver_options(config, **overrides):
    section = dict(_section(config, 'solver'), **overrides)
    known = {name: section[name] for name in SolverOptions.__dataclass_fields__ if name in section}
    return SolverOptions(**known)


def topp_options(config, **overrides):
    section = dict(_section(config, 'toppquad'), **{k: v for k, v in overrides.items() if v is not None})
    return ToppOptions(N=int(section.get('n_grid', 300)), v_max=section.get('v_max'), w_max=section.get('w_max'),
                       bidirectional=bool(section.get('bidirectional', False)),
                       boundary=section.get('boundary', 'rest'), eps_h=float(section.get('eps_h', 1e-6)),
                       failure_ratio=float(section.get('failure_ratio', 1.01)),
                       solver=solver_options(config))


def baseline_spec(config, **overrides):
    section = dict(_section(config, 'baseline'), **{k: v for k, v in overrides.items() if v is not None})
    solver = solver_options(config, feas_tol=section.get('feas_tol', 1e-6))
    return ConvexToppSpec(v_max=float(section.get('v_max', 5.0)),
                          include_thrust_bound=bool(section.get('thrust_bound', False)),
                          lam=float(section.get('lambda', 0.1)), N=int(section.get('n_grid', 300)), solver=solver)


def controller_gains(config):
    section = _section(config, 'controller')
    if not section:
        return ControllerGains.defaults()
    try:
        return ControllerGains(kp=section['kp'], kd=section['kd'], kr=section['kr'], kw=section['kw'])
    except KeyError as error:
        raise ConfigurationError(f'section "controller" misses key {error}') from error


def simulation_settings(config):
    section = _section(config, 'controller')
    sim_dt = float(section.get('sim_dt', 1e-3))
    rate = float(section.get('control_rate', 100.0))
    if not sim_dt > 0.0 or not rate > 0.0:
        raise ConfigurationError(f'sim_dt "{sim_dt}" and control_rate "{rate}" must be positive')
    return sim_dt, 1.0 / rate
