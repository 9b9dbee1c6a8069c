# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""Run configuration.

A configuration file is an INI-style list of ``key = value`` lines grouped in
sections::

    [run]
    seed = 7
    threads = 1

    [pipeline]
    downsample_points = 10000
    grid_size = 0.1

    [head]
    use_log = yes

    [train]
    epochs = 50

    [eval]
    sweep_k = 1, 10

    [synth]
    permeability = 0.5

Values resolve in this order, later ones winning: built-in defaults, the
configuration file, ``-o section.key=value`` overrides, then the dedicated
command-line flags (``--seed``, ``--threads``). Unknown sections or keys are
errors.

Every component seed not given explicitly is derived from ``run.seed`` under
the component's name, so changing one component never shifts another's
random stream.

"""

import logging
import configparser
from dataclasses import dataclass, fields, asdict
from typing import Optional

from .common import ConfigurationError, derive_seed
from .head import HeadParams, StageFlags, DEFAULT_EPS, POOLING_MODES
from .localfeat import MAX_FEATURE_DIM, MIN_NEIGHBORS
from .trainer import TrainConfig
from .retrieval import EvalConfig
from .synthgen import OrchardSpec

__all__ = ["RunSection", "PipelineConfig", "HeadConfig", "RunConfig",
           "SECTIONS", "parse_override"]

log = logging.getLogger(__name__)


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigurationError("run.threads must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("run.seed must be non-negative")


@dataclass
class PipelineConfig:
    downsample_points: int = 10000
    grid_size: float = 0.1
    k_neighbors: int = 16
    feature_dim: int = MAX_FEATURE_DIM
    scan_format: str = 'bin-xyz'
    standardize_imported: bool = False
    submap_window: int = 5
    submap_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.downsample_points < 1:
            raise ConfigurationError("pipeline.downsample_points must be >= 1")
        if not self.grid_size > 0:
            raise ConfigurationError("pipeline.grid_size must be positive")
        if self.k_neighbors < MIN_NEIGHBORS:
            raise ConfigurationError("pipeline.k_neighbors must be >= {}"
                                     .format(MIN_NEIGHBORS))
        if not 2 <= self.feature_dim <= MAX_FEATURE_DIM:
            raise ConfigurationError("pipeline.feature_dim must lie in [2, {}]"
                                     .format(MAX_FEATURE_DIM))
        if self.submap_window < 1 or self.submap_stride < 1:
            raise ConfigurationError(
                "pipeline.submap_window and submap_stride must be >= 1")

    def scan_seed(self, scan_id):
        return derive_seed(self.seed, "scan-{}".format(scan_id))


@dataclass
class HeadConfig:
    descriptor_dim: int = 256
    h_init: float = 0.75
    use_log: bool = True
    use_pn: bool = True
    use_fc: bool = True
    pooling: str = 'avg'
    eps: float = DEFAULT_EPS
    seed: int = 0

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise ConfigurationError("head.pooling must be one of {}"
                                     .format(", ".join(POOLING_MODES)))
        if self.pooling == 'max' and self.use_log:
            raise ConfigurationError(
                "head.pooling = max requires head.use_log = no")
        if self.descriptor_dim < 1:
            raise ConfigurationError("head.descriptor_dim must be >= 1")
        if self.eps < 0:
            raise ConfigurationError("head.eps must be non-negative")

    @property
    def flags(self):
        return StageFlags(self.use_log, self.use_pn, self.use_fc, self.pooling)

    def initial_params(self, c, flags=None):
        return HeadParams.initial(c, self.descriptor_dim, self.h_init,
                                  flags or self.flags, self.seed)


SECTIONS = {
    'run': RunSection,
    'pipeline': PipelineConfig,
    'head': HeadConfig,
    'train': TrainConfig,
    'eval': EvalConfig,
    'synth': OrchardSpec,
}

# Sections whose `seed` is derived from run.seed, and the stream names used.
SEED_STREAMS = {
    'pipeline': 'downsample',
    'head': 'init',
    'train': 'train',
    'synth': 'synthgen',
}

_BOOLEANS = configparser.ConfigParser.BOOLEAN_STATES


def _convert(section, f, raw):
    raw = raw.strip()
    try:
        if f.type is bool:
            return _BOOLEANS[raw.lower()]
        if f.type is int:
            return int(raw)
        if f.type is float:
            return float(raw)
        if f.type is str:
            return raw
        if f.type in (tuple, Optional[tuple]):
            if raw.lower() in ('', 'none', 'auto'):
                if f.type is tuple:
                    raise ValueError("a value is required")
                return None
            item = f.metadata.get('item', float)
            return tuple(item(v.strip()) for v in raw.split(','))
    except (KeyError, ValueError) as e:
        raise ConfigurationError("{}.{}: invalid value {!r} ({})".format(
            section, f.name, raw, e)) from None
    raise ConfigurationError("{}.{}: unsupported field type".format(
        section, f.name))

def parse_override(item):
    """Splits ``section.key=value``."""
    try:
        name, value = item.split('=', 1)
        section, key = name.strip().split('.', 1)
    except ValueError:
        raise ConfigurationError(
            "invalid override {!r}, expected section.key=value".format(
                item)) from None
    return section, key, value


class RunConfig:
    """The resolved configuration of one command invocation."""

    def __init__(self, run=None, pipeline=None, head=None, train=None,
                 eval=None, synth=None):
        self.run = run or RunSection()
        self.pipeline = pipeline or PipelineConfig()
        self.head = head or HeadConfig()
        self.train = train or TrainConfig()
        self.eval = eval or EvalConfig()
        self.synth = synth or OrchardSpec()

    @classmethod
    def load(cls, path=None, overrides=(), seed=None, threads=None):
        raw = {name: dict() for name in SECTIONS}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path) as fd:
                    parser.read_file(fd)
            except configparser.Error as e:
                raise ConfigurationError("{}: {}".format(
                    path, str(e).splitlines()[0])) from None
            for section in parser.sections():
                if section not in SECTIONS:
                    raise ConfigurationError(
                        "{}: unknown section [{}]".format(path, section))
                raw[section].update(parser.items(section))
            log.debug("Read configuration from %s.", path)
        for item in overrides:
            section, key, value = parse_override(item)
            if section not in SECTIONS:
                raise ConfigurationError("unknown section {!r} in override {!r}"
                                         .format(section, item))
            raw[section][key.strip()] = value
        if seed is not None:
            raw['run']['seed'] = str(seed)
        if threads is not None:
            raw['run']['threads'] = str(threads)
        return cls.from_raw(raw)

    @classmethod
    def from_raw(cls, raw):
        values = dict()
        for section, klass in SECTIONS.items():
            known = {f.name: f for f in fields(klass)}
            given = raw.get(section, {})
            unknown = sorted(set(given) - set(known))
            if unknown:
                raise ConfigurationError("unknown key(s) in [{}]: {}".format(
                    section, ", ".join(unknown)))
            values[section] = {key: _convert(section, known[key], value)
                               for key, value in given.items()}

        root = RunSection(**values['run'])
        for section, stream in SEED_STREAMS.items():
            if 'seed' not in values[section]:
                values[section]['seed'] = derive_seed(root.seed, stream)
        try:
            return cls(root, *(SECTIONS[s](**values[s]) for s in
                               ('pipeline', 'head', 'train', 'eval', 'synth')))
        except TypeError as e:
            raise ConfigurationError(str(e)) from None

    def as_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def flat(self):
        """Returns ``{'section.key': value}`` for text sidecars."""
        return {"{}.{}".format(section, key): value
                for section, values in self.as_dict().items()
                for key, value in values.items()}
