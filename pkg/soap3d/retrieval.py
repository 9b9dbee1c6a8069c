# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""Descriptor database, exact top-k search and recall metrics.

Rankings are exact: candidates are ordered by Euclidean descriptor distance
with ties going to the lower scan id.

Recall is computed from the rank of each query's first true positive (a
candidate within `r_th` metres of the query position) among its allowed
candidates, so recall@k for every k and every radius falls out of one ranking
per query.

"""

import csv
import json
import math
import logging
from dataclasses import dataclass, field, asdict
from collections import namedtuple
from typing import Optional

import numpy as np

from .common import (ArgumentException, ConfigurationError, ReferenceException,
                     UndefinedMetricException, ValidationException,
                     parallel_map)
from .head import DEFAULT_EPS, head_forward
from .trainer import train_sequences
from .formats import write_descriptor_file, read_descriptor_file

__all__ = ["DescriptorDB", "QuerySet", "Ranking", "EvalConfig", "EvalReport",
           "SweepPoint", "CrossValReport", "build_db", "query_topk",
           "first_positive_ranks", "recall_at_k", "recall_at_percent",
           "percent_to_k", "segment_sweep", "default_sweep_radii",
           "protocol_queries", "compute_descriptors", "evaluate_descriptors",
           "evaluate_sequence", "cross_validate", "save_descriptors",
           "load_descriptors"]

log = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-6
# Deviations below this are float rounding and are fixed silently.
SILENT_RENORM = 1e-12


@dataclass(frozen=True, eq=False)
class DescriptorDB:
    ids: np.ndarray
    matrix: np.ndarray
    positions: np.ndarray
    segment_ids: np.ndarray
    pass_ids: np.ndarray
    timestamps: np.ndarray

    def __len__(self):
        return len(self.ids)

    def row_of(self, scan_id):
        return int(np.flatnonzero(self.ids == scan_id)[0])


@dataclass(frozen=True, eq=False)
class QuerySet:
    """Query descriptors with their ground-truth positions.

    With `timestamps` set, a query may only retrieve database scans recorded
    more than `exclusion_window` seconds before it. Otherwise every database
    scan except the query's own is a candidate.

    """
    ids: np.ndarray
    matrix: np.ndarray
    positions: np.ndarray
    segment_ids: np.ndarray
    timestamps: Optional[np.ndarray] = None
    exclusion_window: float = 0.0

    def __len__(self):
        return len(self.ids)

    def allowed(self, i, db):
        if self.timestamps is None:
            return db.ids != self.ids[i]
        return db.timestamps < self.timestamps[i] - self.exclusion_window

    @classmethod
    def from_db(cls, db, rows, exclusion_window=None):
        rows = np.asarray(rows, dtype=np.int64)
        return cls(db.ids[rows], db.matrix[rows], db.positions[rows],
                   db.segment_ids[rows],
                   None if exclusion_window is None else db.timestamps[rows],
                   0.0 if exclusion_window is None else float(exclusion_window))


class Ranking(namedtuple("Ranking", "ids, distances")):
    """Scan ids and descriptor distances, nearest first."""
    __slots__ = ()

    @property
    def empty(self):
        return len(self.ids) == 0

    def pairs(self):
        return [(int(i), float(d)) for i, d in zip(self.ids, self.distances)]


def _integers(name, values):
    out = []
    for v in values:
        if isinstance(v, bool) or int(v) != v:
            raise ConfigurationError("{} must hold integers, got {!r}"
                                     .format(name, v))
        out.append(int(v))
    return tuple(out)


@dataclass
class EvalConfig:
    r_th: float = 10.0
    k_list: tuple = field(default=(1,), metadata={'item': int})
    recall_percent: float = 1.0
    sweep_k: tuple = field(default=(1, 10), metadata={'item': int})
    sweep_radii: Optional[tuple] = None
    exclusion_window: float = 30.0
    min_query_pass: int = 1

    def __post_init__(self):
        self.k_list = _integers('eval.k_list', self.k_list)
        self.sweep_k = _integers('eval.sweep_k', self.sweep_k)
        if self.sweep_radii is not None:
            self.sweep_radii = tuple(float(r) for r in self.sweep_radii)
        self.validate()

    def validate(self):
        if not self.r_th > 0:
            raise ConfigurationError("eval.r_th must be positive")
        if any(k < 1 for k in self.k_list + self.sweep_k):
            raise ConfigurationError("eval k values must be >= 1")
        if not 0 < self.recall_percent <= 100:
            raise ConfigurationError("eval.recall_percent must lie in (0, 100]")
        if self.exclusion_window < 0:
            raise ConfigurationError("eval.exclusion_window must be >= 0")
        if self.sweep_radii is not None:
            radii = self.sweep_radii
            if not radii or radii[0] <= 0 or \
               any(b <= a for a, b in zip(radii, radii[1:])):
                raise ConfigurationError(
                    "eval.sweep_radii must be positive and strictly ascending")


SweepPoint = namedtuple("SweepPoint", "k, r_th, segment_id, recall, eligible")


@dataclass
class EvalReport:
    recalls: dict
    k_values: dict
    r_th: float
    n_queries: int
    n_eligible: int
    n_dropped: int
    n_database: int
    sweep: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            'config': self.config,
            'r_th': self.r_th,
            'recalls': self.recalls,
            'k_values': self.k_values,
            'queries': {'total': self.n_queries, 'eligible': self.n_eligible,
                        'dropped': self.n_dropped},
            'database_size': self.n_database,
            'sweep': [p._asdict() for p in self.sweep],
        }

    def to_json(self, path):
        with open(path, 'w') as fd:
            json.dump(self.as_dict(), fd, indent=2, sort_keys=True)

    def to_csv(self, path):
        """Flat export, one row per recall value; undefined values are empty."""
        with open(path, 'w', newline='') as fd:
            writer = csv.writer(fd, lineterminator='\n')
            writer.writerow(['kind', 'metric', 'k', 'r_th', 'segment_id',
                             'recall', 'eligible'])
            for name, value in self.recalls.items():
                writer.writerow(['fixed', name, self.k_values[name], self.r_th,
                                 '', value, self.n_eligible])
            for p in self.sweep:
                writer.writerow(['sweep', 'recall@{}'.format(p.k), p.k, p.r_th,
                                 '' if p.segment_id is None else p.segment_id,
                                 '' if p.recall is None else p.recall,
                                 p.eligible])


@dataclass
class CrossValReport:
    rows: list                  # [(sequence name, EvalReport)]
    config: dict = field(default_factory=dict)

    @property
    def metrics(self):
        return list(self.rows[0][1].recalls) if self.rows else []

    def mean(self):
        return {m: float(np.mean([r.recalls[m] for _, r in self.rows]))
                for m in self.metrics}

    def table(self):
        out = [(name, dict(r.recalls)) for name, r in self.rows]
        out.append(('MEAN', self.mean()))
        return out

    def to_json(self, path):
        with open(path, 'w') as fd:
            json.dump({'config': self.config,
                       'folds': {name: r.as_dict() for name, r in self.rows},
                       'table': [{'sequence': name, **values}
                                 for name, values in self.table()]},
                      fd, indent=2, sort_keys=True)

    def to_csv(self, path):
        with open(path, 'w', newline='') as fd:
            writer = csv.writer(fd, lineterminator='\n')
            writer.writerow(['sequence'] + self.metrics)
            for name, values in self.table():
                writer.writerow([name] + [values[m] for m in self.metrics])

####################
# Database and search

def _as_mapping(descriptors):
    if isinstance(descriptors, dict):
        return descriptors
    ids, matrix = descriptors
    ids = [int(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ReferenceException("duplicate scan ids among descriptors")
    return dict(zip(ids, np.asarray(matrix)))

def build_db(descriptors, records):
    """Aligns descriptors with scan records.

    `descriptors` maps scan id to descriptor, or is an ``(ids, matrix)``
    pair. Rows follow the order of `records`. Descriptors whose norm is off by
    less than 1e-6 are re-normalized with a warning.

    """
    descriptors = _as_mapping(descriptors)
    if not records:
        raise ArgumentException("no scan records")
    ids = np.array([r.scan_id for r in records], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ReferenceException("duplicate scan_id in records")
    missing = [int(i) for i in ids if int(i) not in descriptors]
    if missing:
        raise ReferenceException("no descriptor for scan ids {}".format(
            missing[:10]))
    extra = len(descriptors) - len(ids)
    if extra:
        log.debug("%d descriptors have no scan record and were ignored.",
                  extra)

    matrix = np.array([np.asarray(descriptors[int(i)], dtype=np.float64)
                       for i in ids])
    if matrix.ndim != 2:
        raise ValidationException("descriptors differ in dimension")
    if not np.isfinite(matrix).all():
        raise ValidationException("descriptors contain non-finite entries")
    norms = np.linalg.norm(matrix, axis=1)
    deviation = np.abs(norms - 1.0)
    bad = np.flatnonzero(deviation >= UNIT_NORM_TOLERANCE)
    if len(bad):
        raise ValidationException(
            "descriptor of scan {} has norm {:.6g}, expected unit norm".format(
                int(ids[bad[0]]), norms[bad[0]]))
    fixed = int(np.sum(deviation > SILENT_RENORM))
    if fixed:
        log.warning("Re-normalized %d descriptors with norm deviation below "
                    "%g.", fixed, UNIT_NORM_TOLERANCE)
    matrix = np.ascontiguousarray(matrix / norms[:, None])
    return DescriptorDB(
        ids, matrix,
        np.array([r.position for r in records], dtype=np.float64),
        np.array([r.segment_id for r in records], dtype=np.int64),
        np.array([r.pass_id for r in records], dtype=np.int64),
        np.array([r.timestamp for r in records], dtype=np.float64))

def _exclusion_mask(db, exclude):
    if exclude is None:
        return np.ones(len(db), dtype=bool)
    if callable(exclude):
        return np.array([not exclude(int(i)) for i in db.ids], dtype=bool)
    exclude = np.asarray(exclude, dtype=bool)
    if exclude.shape != (len(db),):
        raise ArgumentException("exclusion mask does not match the database")
    return ~exclude

def _rank(db, q, allowed):
    candidates = np.flatnonzero(allowed)
    dist = np.linalg.norm(db.matrix[candidates] - q, axis=1)
    order = np.lexsort((db.ids[candidates], dist))
    return candidates[order], dist[order]

def query_topk(db, q, k, exclude=None):
    """Returns the `k` nearest database entries to descriptor `q`.

    `exclude` is a predicate on scan ids or a boolean mask over database rows
    marking entries that may not be returned. `k` is capped at the number of
    remaining entries; when none remain the `Ranking` is empty.

    """
    if k < 1:
        raise ArgumentException("k must be >= 1, got {}".format(k))
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (db.matrix.shape[1],):
        raise ArgumentException("query has dimension {}, database {}".format(
            q.shape, db.matrix.shape[1]))
    rows, dist = _rank(db, q, _exclusion_mask(db, exclude))
    return Ranking(db.ids[rows[:k]], dist[:k])

####################
# Recall

def _query_ranks(db, queries, i, radii):
    rows, _ = _rank(db, queries.matrix[i], queries.allowed(i, db))
    geo = np.linalg.norm(db.positions[rows] - queries.positions[i], axis=1)
    # Non-increasing: nearest place seen within the top j+1 candidates.
    closest = np.minimum.accumulate(geo) if len(geo) else geo
    first = np.searchsorted(-closest, -np.asarray(radii), side='left')
    return np.where(first < len(geo), first + 1, 0)

def first_positive_ranks(db, queries, radii):
    """Returns a ``(Q, R)`` array: the 1-based rank of each query's first
    candidate within each radius, 0 where no allowed candidate is that close.

    """
    radii = np.asarray(radii, dtype=np.float64)
    if len(queries) == 0:
        return np.zeros((0, len(radii)), dtype=np.int64)
    ranks = parallel_map(lambda i: _query_ranks(db, queries, i, radii),
                         range(len(queries)))
    return np.array(ranks, dtype=np.int64).reshape(len(queries), len(radii))

def _recall_from_ranks(ranks, k):
    eligible = ranks > 0
    n = int(eligible.sum())
    if n == 0:
        raise UndefinedMetricException(
            "no query has an attainable positive in the database")
    return float(np.sum(eligible & (ranks <= k))) / n

def _log_dropped(ranks, r_th):
    dropped = int(np.sum(ranks == 0))
    if dropped:
        log.info("%d of %d queries have no positive within %g m and are "
                 "excluded.", dropped, len(ranks), r_th)
    return dropped

def recall_at_k(db, queries, k, r_th):
    """Fraction of eligible queries with a true positive in their top `k`.

    Queries without any allowed candidate within `r_th` are excluded from the
    denominator; their number is logged.

    """
    if k < 1:
        raise ArgumentException("k must be >= 1, got {}".format(k))
    ranks = first_positive_ranks(db, queries, [r_th])[:, 0]
    _log_dropped(ranks, r_th)
    return _recall_from_ranks(ranks, k)

def percent_to_k(pct, n_db):
    return max(1, int(math.ceil(pct * n_db / 100.0)))

def recall_at_percent(db, queries, pct, r_th):
    return recall_at_k(db, queries, percent_to_k(pct, len(db)), r_th)

def _sweep_from_ranks(ranks, segment_ids, k_list, r_values):
    # Eligibility is decided at the largest radius for the whole sweep.
    eligible = ranks[:, -1] > 0
    groups = [(None, np.ones(len(ranks), dtype=bool))]
    groups += [(int(s), segment_ids == s) for s in np.unique(segment_ids)]
    points = []
    for segment, members in groups:
        pool = members & eligible
        n = int(pool.sum())
        for k in k_list:
            for j, r in enumerate(r_values):
                value = None
                if n:
                    hits = pool & (ranks[:, j] > 0) & (ranks[:, j] <= k)
                    value = float(hits.sum()) / n
                points.append(SweepPoint(int(k), float(r), segment, value, n))
    undefined = sum(p.recall is None for p in points)
    if undefined:
        log.warning("%d sweep points are undefined (no eligible queries).",
                    undefined)
    return points

def segment_sweep(db, queries, k_list, r_values):
    """Recall@k over a range of acceptance radii.

    Returns `SweepPoint`s for the whole query set (``segment_id=None``) and
    for each query segment. Points with no eligible query carry
    ``recall=None``.

    """
    r_values = [float(r) for r in r_values]
    if not r_values or any(b <= a for a, b in zip(r_values, r_values[1:])):
        raise ArgumentException("r_values must be non-empty and ascending")
    if any(k < 1 for k in k_list):
        raise ArgumentException("k values must be >= 1")
    ranks = first_positive_ranks(db, queries, r_values)
    return _sweep_from_ranks(ranks, queries.segment_ids, k_list, r_values)

def default_sweep_radii(records):
    """Radii ``1, 2, ..., ceil(l)`` metres, `l` the largest segment extent."""
    by_segment = dict()
    for r in records:
        by_segment.setdefault(r.segment_id, []).append(r.position)
    extent = max(float(np.linalg.norm(np.ptp(np.array(p), axis=0)))
                 for p in by_segment.values())
    return tuple(float(r) for r in range(1, max(1, math.ceil(extent)) + 1))

####################
# Protocol

def protocol_queries(db, cfg):
    rows = np.flatnonzero(db.pass_ids >= cfg.min_query_pass)
    return QuerySet.from_db(db, rows, cfg.exclusion_window)

def evaluate_descriptors(records, descriptors, cfg, config_echo=None):
    """Runs the evaluation protocol on precomputed descriptors.

    Revisit scans are the queries; each retrieves from the scans recorded
    more than `exclusion_window` seconds before it.

    """
    db = build_db(descriptors, records)
    queries = protocol_queries(db, cfg)
    if len(queries) == 0:
        raise UndefinedMetricException(
            "no revisit queries: every scan has pass_id < {}".format(
                cfg.min_query_pass))
    sweep_radii = cfg.sweep_radii or default_sweep_radii(records)
    radii = sorted(set(sweep_radii) | {float(cfg.r_th)})
    ranks = first_positive_ranks(db, queries, radii)

    fixed = ranks[:, radii.index(float(cfg.r_th))]
    dropped = _log_dropped(fixed, cfg.r_th)
    k_values = {'recall@{}'.format(k): k for k in cfg.k_list}
    k_values['recall@{:g}%'.format(cfg.recall_percent)] = \
        percent_to_k(cfg.recall_percent, len(db))
    recalls = {name: _recall_from_ranks(fixed, k)
               for name, k in k_values.items()}

    columns = [radii.index(r) for r in sweep_radii]
    sweep = _sweep_from_ranks(ranks[:, columns], queries.segment_ids,
                              cfg.sweep_k, sweep_radii)
    report = EvalReport(recalls, k_values, float(cfg.r_th), len(queries),
                        len(queries) - dropped, dropped, len(db), sweep,
                        dict(config_echo or {'eval': asdict(cfg)}))
    log.info("Evaluated %d queries against %d scans: %s", len(queries),
             len(db), ", ".join("{} = {:.4f}".format(n, v)
                                for n, v in recalls.items()))
    return report

def compute_descriptors(features, params, eps=DEFAULT_EPS):
    """Returns ``{scan_id: descriptor}`` for a mapping of feature matrices."""
    ids = sorted(features)
    descriptors = parallel_map(
        lambda sid: head_forward(features[sid], params, eps)[0], ids)
    return dict(zip(ids, descriptors))

def evaluate_sequence(records, features, params, cfg, eps=DEFAULT_EPS,
                      config_echo=None):
    return evaluate_descriptors(records,
                                compute_descriptors(features, params, eps),
                                cfg, config_echo)

def cross_validate(sequences, train_cfg, eval_cfg, params, eps=DEFAULT_EPS,
                   config_echo=None):
    """Leave-one-out evaluation.

    `sequences` is a list of ``(name, records, features)``. For each sequence
    a head is trained from `params` on all the others and evaluated on it.

    """
    if len(sequences) < 2:
        raise ArgumentException(
            "leave-one-out needs at least 2 sequences, got {}".format(
                len(sequences)))
    names = [s[0] for s in sequences]
    if len(set(names)) != len(names):
        raise ArgumentException("sequence names must be unique")
    rows = []
    for held, (name, records, features) in enumerate(sequences):
        log.info("Fold %d/%d: holding out %s.", held + 1, len(sequences), name)
        training = [(r, f) for i, (_, r, f) in enumerate(sequences)
                    if i != held]
        trained, _ = train_sequences(training, train_cfg, params, eps=eps)
        rows.append((name, evaluate_sequence(records, features, trained,
                                             eval_cfg, eps, config_echo)))
    return CrossValReport(rows, dict(config_echo or {}))

####################
# Persistence

def save_descriptors(path, descriptors):
    """Writes ``{scan_id: descriptor}`` sorted by scan id."""
    descriptors = _as_mapping(descriptors)
    ids = sorted(descriptors)
    write_descriptor_file(path, ids, np.array([descriptors[i] for i in ids]))

def load_descriptors(path):
    ids, matrix = read_descriptor_file(path)
    return _as_mapping((ids, matrix))
