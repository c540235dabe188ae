#
# This file is part of the hjhom project.
#
# The contents of this file are subject to the BSD 3-Clause License, the
# full text of which is available in the accompanying LICENSE file at the
# root directory of this project.
#
import concurrent.futures
import itertools
import logging
import multiprocessing
import threading

logger = logging.getLogger(__name__)

# Functions handed to forked workers; the children inherit this table at fork time
_REGISTRY = {}
_KEYS = itertools.count()
_REGISTRY_LOCK = threading.Lock()
_IN_WORKER = False


def restoreError(cls, args, state):
    error = cls.__new__(cls)
    error.args = args
    error.__dict__.update(state)
    return error


class PicklableError(Exception):
    """Base for exceptions whose constructor signature differs from their
    `args`, so that they survive the trip back from a worker process."""
    def __reduce__(self):
        return restoreError, (type(self), self.args, dict(self.__dict__))


def _forkContext():
    try:
        return multiprocessing.get_context('fork')
    except ValueError:
        return None


def _runRegistered(key, arguments):
    global _IN_WORKER # pylint: disable=global-statement
    _IN_WORKER = True
    return _REGISTRY[key](*arguments)


def inWorker():
    return _IN_WORKER


def scheduleJobs(function, argumentsList, workers, processes=True):
    """Calls function(*arguments) for every entry of argumentsList and returns
    the results in submission order.

    With `processes` the workers are forked, so `function` and whatever it
    closes over is inherited rather than pickled; only the arguments and the
    results (or the raised exception) cross the process boundary. Platforms
    without fork, and jobs started inside a worker, fall back to threads and
    to serial execution respectively.
    """
    argumentsList = [tuple(arguments) for arguments in argumentsList]
    if workers <= 1 or len(argumentsList) <= 1 or _IN_WORKER:
        return [function(*arguments) for arguments in argumentsList]

    context = _forkContext() if processes else None
    if context is None:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(function, *arguments) for arguments in argumentsList]
            return [future.result() for future in futures]

    with _REGISTRY_LOCK:
        key = next(_KEYS)
        _REGISTRY[key] = function
    try:
        logger.debug("forking %d workers for %d jobs", min(workers, len(argumentsList)), len(argumentsList))
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(workers, len(argumentsList)),
                                                    mp_context=context) as executor:
            futures = [executor.submit(_runRegistered, key, arguments) for arguments in argumentsList]
            return [future.result() for future in futures]
    finally:
        with _REGISTRY_LOCK:
            del _REGISTRY[key]
