'''
satde/tasks.py

Job functions for the rq queue and the helper that runs a batch of them,
inline when no queue is given.
'''
import time
import logging

import redis
from rq import Queue

from satde import defaults
from satde.common import NumericalError

log = logging.getLogger(__name__)
__RCONN = None

POLL_INTERVAL = 0.5


def get_redis_connection():
    '''
    Returns a redis connection built from REDIS_URL. The connection is
    created once per process.
    '''
    global __RCONN
    if __RCONN is not None:
        return __RCONN
    __RCONN = redis.Redis(connection_pool=redis.ConnectionPool.from_url(defaults.REDIS_URL))
    return __RCONN


def get_queue(name=None):
    return Queue(name or defaults.QUEUE_NAME, connection=get_redis_connection())


def run_jobs(func, arg_list, queue=None, timeout=None):
    '''
    Calls func(*args) for every args tuple and returns the results in
    submission order.

    :param func: module-level function, importable by workers
    :param arg_list: list of argument tuples
    :param queue: rq Queue; jobs run inline when None
    :param timeout: seconds to wait for the whole batch
    '''
    arg_list = list(arg_list)
    if queue is None:
        return [func(*args) for args in arg_list]

    timeout = defaults.JOB_TIMEOUT if timeout is None else timeout
    jobs = [queue.enqueue(func, *args, job_timeout=timeout) for args in arg_list]
    log.info("Enqueued %d %s jobs on %s", len(jobs), func.__name__, queue.name)
    deadline = time.time() + timeout
    while True:
        failed = [job for job in jobs if job.is_failed]
        if failed:
            raise NumericalError("job %s failed: %s" % (failed[0].id, failed[0].exc_info))
        if all(job.is_finished for job in jobs):
            return [job.result for job in jobs]
        if time.time() > deadline:
            raise NumericalError("timed out waiting for %d jobs" % len(jobs))
        time.sleep(POLL_INTERVAL)


def probe_channel(kind, parameter_range, clip, sigma, ensemble, mode, K, grid, max_iters):
    '''
    One threshold-search probe. Returns True when DE succeeds.
    '''
    from satde.channels import ChannelFamily
    from satde.de_engine import parse_ensemble, probe
    from satde.density import GridParams
    family = ChannelFamily(kind, tuple(parameter_range), clip)
    return probe(family, sigma, parse_ensemble(ensemble), mode, K,
                 GridParams(grid['grid_spacing'], grid['support_bound']), max_iters)


def mc_trial(l, r, n, channel, decoder, trial):
    '''
    One Monte Carlo trial. Returns the per-iteration error counts.
    '''
    from satde.channels import parse_channel
    from satde.mc_decoder import DecoderConfig, run_trial
    return run_trial(l, r, n, parse_channel(channel), DecoderConfig(**decoder), trial)
