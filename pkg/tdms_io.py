"""TDMS persistence of column tables (trajectories and rollout logs)"""
import logging
import os
from pathlib import Path
from urllib.parse import urlparse, unquote
from urllib.request import url2pathname

import numpy as np
from nptdms import ChannelObject, GroupObject, RootObject, TdmsFile, TdmsWriter

from exceptions import TrajectoryIOError

log = logging.getLogger(__name__)


def uri_to_path(uri):
    parsed = urlparse(uri)
    host = "{0}{0}{mnt}{0}".format(os.path.sep, mnt=parsed.netloc)
    return os.path.normpath(
        os.path.join(host, url2pathname(unquote(parsed.path)))
    )


def resolve_path(file_url):
    """Accept plain paths as well as file:// urls."""
    file_url = str(file_url)
    if urlparse(file_url).scheme == 'file':
        return Path(uri_to_path(file_url))
    return Path(file_url)


def _to_property(name, value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (str, int, float)):
        return value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    raise TrajectoryIOError(f'Attribute "{name}": "{value}" not assignable')


def _from_property(value):
    if isinstance(value, np.datetime64):
        return str(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def write_table(file_path, group, columns, properties=None, units=None):
    """Write equally long float channels into one group; properties go to the file object."""
    file_path = resolve_path(file_path)
    units = units or {}
    root = RootObject(properties={name: _to_property(name, value)
                                  for name, value in (properties or {}).items() if value is not None})
    objects = [root, GroupObject(group)]
    for name, values in columns.items():
        objects.append(ChannelObject(group, name, np.asarray(values, dtype=np.float64),
                                     properties={'unit_string': units.get(name, '')}))
    try:
        with TdmsWriter(str(file_path)) as writer:
            writer.write_segment(objects)
    except OSError as error:
        raise TrajectoryIOError(f'file "{file_path}" not writable', path=str(file_path)) from error
    log.debug('wrote %d channels to "%s"', len(columns), file_path)


def read_table(file_path, group):
    """Return ({channel name: values}, file properties) of one group."""
    file_path = resolve_path(file_path)
    if not file_path.is_file():
        raise TrajectoryIOError(f'file "{file_path}" not accessible', path=str(file_path))
    try:
        tdms_file = TdmsFile.read(str(file_path))
    except (OSError, ValueError) as error:
        raise TrajectoryIOError(f'file "{file_path}" is not a readable tdms file', path=str(file_path)) from error
    names = [g.name for g in tdms_file.groups()]
    if group not in names:
        raise TrajectoryIOError(f'file "{file_path}" has no group "{group}"', path=str(file_path))
    columns = {channel.name: np.asarray(channel[:], dtype=np.float64) for channel in tdms_file[group].channels()}
    properties = {name: _from_property(value) for name, value in tdms_file.properties.items()}
    return columns, properties
