'''
satde

Density evolution and Monte Carlo laboratory for saturated belief propagation
decoding of LDPC codes.
'''
import os
import logging

import yaml

log = logging.getLogger(__name__)

__version__ = '0.1.0'

# Used when config.yml is not shipped next to the package
BUILTIN_SETTINGS = {
    'DEBUG': False,
    'GRID_DELTA': 0.0625,
    'SUPPORT_BOUND': 64.0,
    'DE_MAX_ITERS': 2000,
    'FLOOR_WINDOW': 10,
    'FLOOR_TOL': 1e-9,
    'BP_SUCCESS_E': 1e-10,
    'SAT_INTERIOR_TOL': 1e-10,
    'BISECTION_MAX_STEPS': 40,
    'THRESHOLD_TOL': 1e-3,
    'VC_SLACK': 1e-9,
    'CHANNELS_FILE': 'data/channels.yml',
    'LOG_LEVEL': 'INFO',
    'LOG_FILE': False,
    'LOG_DIR': 'logs',
    'REDIS_URL': 'redis://localhost:6379/8',
    'QUEUE_NAME': 'satde',
    'JOB_TIMEOUT': 3600,
}

cur_dir = os.path.dirname(__file__)
root_dir = os.path.abspath(os.path.join(cur_dir, '..'))


def load_settings(config_path=None, local_path=None):
    '''
    Returns the settings dictionary built from config.yml, with
    config.local.yml merged over it when it exists.

    :param config_path: path to the base YAML file
    :param local_path: path to the optional local override file
    '''
    config_path = config_path or os.path.join(root_dir, 'config.yml')
    local_path = local_path or os.path.join(root_dir, 'config.local.yml')

    settings = dict(BUILTIN_SETTINGS)
    if not os.path.exists(config_path):
        log.debug("No config file at %s, using built-in settings", config_path)
        return settings

    with open(config_path) as base_config:
        config_dict = yaml.safe_load(base_config) or {}

    # merge in settings from config.local.yml, if it exists
    if os.path.exists(local_path):
        with open(local_path) as extra_config:
            config_dict = {**config_dict, **(yaml.safe_load(extra_config) or {})}

    try:
        settings.update(config_dict['PRODUCTION'])
    except KeyError:
        settings.update(config_dict.get('DEVELOPMENT', {}))
    return settings


settings = load_settings()
