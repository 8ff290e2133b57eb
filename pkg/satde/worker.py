#!/usr/bin/env python
'''
Starts an rq worker serving threshold probes and Monte Carlo trials.
'''
from rq import Worker, Queue

from satde import defaults
from satde.tasks import get_redis_connection

listen = [defaults.QUEUE_NAME]


def main():
    conn = get_redis_connection()
    worker = Worker([Queue(name, connection=conn) for name in listen], connection=conn)
    worker.work()


if __name__ == '__main__':
    main()
