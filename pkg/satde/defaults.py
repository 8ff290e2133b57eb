'''
Environment overrides for the settings loaded from config.yml
'''
import os

from satde import settings

GRID_DELTA = float(os.environ.get('SATDE_GRID_DELTA', settings['GRID_DELTA']))
SUPPORT_BOUND = float(os.environ.get('SATDE_SUPPORT_BOUND', settings['SUPPORT_BOUND']))

DE_MAX_ITERS = int(settings['DE_MAX_ITERS'])
FLOOR_WINDOW = int(settings['FLOOR_WINDOW'])
FLOOR_TOL = float(settings['FLOOR_TOL'])
BP_SUCCESS_E = float(settings['BP_SUCCESS_E'])
SAT_INTERIOR_TOL = float(settings['SAT_INTERIOR_TOL'])
BISECTION_MAX_STEPS = int(settings['BISECTION_MAX_STEPS'])
THRESHOLD_TOL = float(settings['THRESHOLD_TOL'])
VC_SLACK = float(settings['VC_SLACK'])

CHANNELS_FILE = os.environ.get('SATDE_CHANNELS_FILE', settings['CHANNELS_FILE'])

LOG_LEVEL = os.environ.get('SATDE_LOG_LEVEL', settings['LOG_LEVEL'])
LOG_FILE = settings['LOG_FILE']
LOG_DIR = settings['LOG_DIR']

# Job queue
REDIS_URL = os.environ.get('SATDE_REDIS_URL', settings['REDIS_URL'])
QUEUE_NAME = os.environ.get('SATDE_QUEUE_NAME', settings['QUEUE_NAME'])
JOB_TIMEOUT = int(settings['JOB_TIMEOUT'])
