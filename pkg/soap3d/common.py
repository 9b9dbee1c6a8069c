# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

import os
import sys
import zlib
import logging

from datetime import datetime
from concurrent.futures import ThreadPoolExecutor

import numpy as np

MAJOR_VERSION = 0
MINOR_VERSION = 3
PATCH_VERSION = 0
PRERELEASE_VERSION = ""

__version__ = "{}.{}.{}{}".format(MAJOR_VERSION, MINOR_VERSION, PATCH_VERSION,
                                   PRERELEASE_VERSION)

# a dict that contains the runtime configuration values:
GlobalOptions = None

CONSOLE_LOG_FORMAT = \
    '[%(relativeCreated)d] %(name)s:%(levelname)s: %(message)s'
FILE_LOG_FORMAT = \
    '[%(asctime)s] %(name)s<%(threadName)s>:%(levelname)s: %(message)s'

ROOT_LOGGER_NAME = 'soap3d'

log = logging.getLogger(__name__)

class Soap3dException(Exception): pass
class ArgumentException(Soap3dException): pass
class ValidationException(Soap3dException): pass
class ReferenceException(Soap3dException): pass
class NumericException(Soap3dException): pass
class UndefinedMetricException(Soap3dException): pass
class ConfigurationError(Soap3dException): pass
class InvalidStateException(Soap3dException): pass

DEFAULT_OPTIONS = {
    'threads': 1,
    'no_log': False,
    'logconsolelevel': 'info',
    'logfile': False,
    'logfilename': None,
    'logfilelevel': 'debug',
}


def get_runtime_option(key, default=None):
    """Returns the configured value of runtime option 'key', or 'default' if 'key'
    is not configured.

    Library code may run without `initialize_runtime_options` having been
    called, in which case the built-in defaults apply.

    """
    if GlobalOptions is None:
        return DEFAULT_OPTIONS.get(key, default)
    return GlobalOptions.get(key, default)

def set_runtime_option(key, value):
    if GlobalOptions is None:
        raise InvalidStateException("soap3d runtime is not initialized.")
    GlobalOptions[key] = value

def initialize_runtime_options(options=None):
    """Sets and sanitizes runtime options.

    'options' should be a dict-like object containing mappings from options
    names to corresponding values.

    """
    global GlobalOptions

    GlobalOptions = dict(DEFAULT_OPTIONS)
    if options:
        GlobalOptions.update((k, v) for k, v in options.items()
                             if v is not None)
    threads = GlobalOptions['threads']
    if not isinstance(threads, int) or threads < 1:
        raise ConfigurationError(
            "'threads' must be a positive integer, got {!r}".format(threads))

def setup_logging(modulename=ROOT_LOGGER_NAME,
                  consolefmt=CONSOLE_LOG_FORMAT,
                  filefmt=FILE_LOG_FORMAT):
    """Configures package level logger.

    """
    rootlog = logging.getLogger(modulename)
    rootlog.handlers = []       # Clear all handlers

    if not get_runtime_option('no_log'):
        rootlog.propagate = False
        rootlog.setLevel(logging.DEBUG)
        consolelvl = logging.getLevelName(
            get_runtime_option('logconsolelevel').upper())
        ch = logging.StreamHandler(sys.stderr)
        ch.setFormatter(logging.Formatter(consolefmt))
        ch.setLevel(consolelvl)
        rootlog.addHandler(ch)

        if get_runtime_option('logfile'):
            filelvl = logging.getLevelName(
                get_runtime_option('logfilelevel').upper())
            logfilename = get_runtime_option('logfilename')
            if logfilename is None:
                logfilename = datetime.now().strftime('%Y-%m-%d_%H%M%S') + '.log'
            fh = logging.FileHandler(logfilename)
            fh.setFormatter(logging.Formatter(filefmt))
            fh.setLevel(filelvl)
            rootlog.addHandler(fh)
    else:
        rootlog.addHandler(logging.NullHandler())

def global_init(config):
    """Convenience method for one-time process setup."""
    initialize_runtime_options(config)
    setup_logging()

####################
# Seeding

def _stream_key(name):
    return zlib.crc32(name.encode('utf-8'))

def derive_seed(root, name):
    """Derives the named sub-seed `name` from the root seed `root`.

    Sub-seeds are stable across releases: they depend only on `root` and the
    stream name, never on the order in which components ask for them.

    """
    seq = np.random.SeedSequence([int(root), _stream_key(name)])
    return int(seq.generate_state(1)[0])

def make_rng(seed, *stream):
    """Returns a `numpy.random.Generator` for `seed` and an optional stream
    path made of names and integers, e.g. ``make_rng(seed, 'shuffle', epoch)``.

    """
    entropy = [int(seed)]
    for part in stream:
        entropy.append(_stream_key(part) if isinstance(part, str) else int(part))
    return np.random.default_rng(entropy)

####################
# Parallelism

def parallel_map(func, items):
    """Maps `func` over `items`, preserving order.

    Uses a thread pool of size `threads` when that runtime option is above 1;
    with one thread this is a plain loop, the bit-reproducible mode.

    """
    items = list(items)
    nthreads = get_runtime_option('threads', 1)
    if nthreads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(nthreads, len(items))) as pool:
        return list(pool.map(func, items))

def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
