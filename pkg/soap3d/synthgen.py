# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""Synthetic orchard scenes driven in a serpentine pattern.

The scene has ``n_rows + 1`` parallel tree lines along x, spaced
`row_spacing` apart, with the driven corridors between them. One lap enters
through a start extremity, drives every corridor in turn with a headland
U-turn between consecutive corridors, and leaves through an end extremity.
Each of those pieces is its own segment:

    0               start extremity
    1, 3, 5, ...    corridors
    2, 4, ...       headland turns
    2 * n_rows      end extremity

Laps repeat the same path, separated by an unrecorded return transit, so the
pass id of a scan is its lap number.

Tree lines occlude each other: a point is only seen if, for every tree line
between it and the sensor, its beam passes through. The per-crossing draws
are independent of `permeability`, so raising it only ever adds points.

"""

import logging
from dataclasses import dataclass, fields
from collections import namedtuple

import numpy as np

from .common import ConfigurationError, make_rng, parallel_map
from .geom import PointCloud, ScanRecord
from .dataset import write_dataset

__all__ = ["OrchardSpec", "PathPiece", "generate_orchard", "plan_path",
           "corridor_y", "write_dataset"]

log = logging.getLogger(__name__)

# Canopy shape ranges in metres.
TREE_JITTER = 0.25
LINE_JITTER = 0.1
CANOPY_SIGMA_XY = (0.3, 0.6)
CANOPY_SIGMA_Z = (0.4, 0.8)
CANOPY_HEIGHT = (1.2, 2.2)


@dataclass
class OrchardSpec:
    n_rows: int = 4
    row_length: float = 40.0
    row_spacing: float = 3.0
    trees_per_row: int = 20
    points_per_tree: int = 200
    noise_sigma: float = 0.05
    permeability: float = 0.5
    n_passes: int = 2
    scan_spacing: float = 0.5
    seed: int = 0
    sensor_range: float = 15.0
    sensor_height: float = 1.0
    headland: float = 4.0
    extremity_length: float = 8.0
    ground_points: int = 400
    missing_tree_rate: float = 0.1
    speed: float = 1.0
    lap_gap: float = 120.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ('n_rows', 'trees_per_row', 'points_per_tree', 'n_passes'):
            if getattr(self, name) < 1:
                raise ConfigurationError("synth.{} must be >= 1, got {}".format(
                    name, getattr(self, name)))
        for name in ('row_length', 'row_spacing', 'scan_spacing',
                     'sensor_range', 'headland', 'extremity_length',
                     'speed'):
            if not getattr(self, name) > 0:
                raise ConfigurationError(
                    "synth.{} must be positive, got {}".format(
                        name, getattr(self, name)))
        for name in ('noise_sigma', 'ground_points',
                     'lap_gap', 'seed'):
            if getattr(self, name) < 0:
                raise ConfigurationError(
                    "synth.{} must be non-negative, got {}".format(
                        name, getattr(self, name)))
        for name in ('permeability', 'missing_tree_rate'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(
                    "synth.{} must lie in [0, 1], got {}".format(
                        name, getattr(self, name)))

    @property
    def n_segments(self):
        return 2 * self.n_rows + 1

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


PathPiece = namedtuple("PathPiece", "start, end, segment_id")
Trees = namedtuple("Trees", "centers, sigmas")


def corridor_y(spec, row):
    return (row + 0.5) * spec.row_spacing

def _line_y(spec):
    return np.arange(spec.n_rows + 1) * spec.row_spacing

def plan_path(spec):
    """Returns the straight `PathPiece`s of one lap, in driving order."""
    L, H, E = spec.row_length, spec.headland, spec.extremity_length
    pieces = []
    y0 = corridor_y(spec, 0)
    pieces.append(PathPiece((-E, y0), (0.0, y0), 0))
    for row in range(spec.n_rows):
        y = corridor_y(spec, row)
        x_from, x_to = (0.0, L) if row % 2 == 0 else (L, 0.0)
        pieces.append(PathPiece((x_from, y), (x_to, y), 2 * row + 1))
        if row + 1 < spec.n_rows:
            y_next = corridor_y(spec, row + 1)
            x_out = x_to + (H if row % 2 == 0 else -H)
            turn = 2 * row + 2
            pieces += [PathPiece((x_to, y), (x_out, y), turn),
                       PathPiece((x_out, y), (x_out, y_next), turn),
                       PathPiece((x_out, y_next), (x_to, y_next), turn)]
    last = pieces[-1].end
    direction = 1.0 if spec.n_rows % 2 == 1 else -1.0
    pieces.append(PathPiece(last, (last[0] + direction * E, last[1]),
                            2 * spec.n_rows))
    return pieces

def _sample_path(pieces, spacing, offset):
    starts = np.array([p.start for p in pieces], dtype=np.float64)
    ends = np.array([p.end for p in pieces], dtype=np.float64)
    lengths = np.linalg.norm(ends - starts, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    arc = np.arange(offset, cum[-1] + 1e-9, spacing)
    piece = np.clip(np.searchsorted(cum, arc, side='right') - 1,
                    0, len(pieces) - 1)
    frac = ((arc - cum[piece]) / lengths[piece])[:, None]
    xy = starts[piece] + frac * (ends[piece] - starts[piece])
    segments = np.array([pieces[i].segment_id for i in piece])
    return arc, xy, segments, cum[-1]

def _plant_trees(spec, rng):
    pitch = spec.row_length / spec.trees_per_row
    centers, sigmas = [], []
    for y in _line_y(spec):
        x = (np.arange(spec.trees_per_row) + 0.5) * pitch
        x = x + rng.uniform(-TREE_JITTER, TREE_JITTER, len(x)) * pitch
        ys = y + rng.uniform(-LINE_JITTER, LINE_JITTER, len(x))
        z = rng.uniform(*CANOPY_HEIGHT, len(x))
        sxy = rng.uniform(*CANOPY_SIGMA_XY, len(x))
        sz = rng.uniform(*CANOPY_SIGMA_Z, len(x))
        present = rng.random(len(x)) >= spec.missing_tree_rate
        centers.append(np.stack([x, ys, z], axis=1)[present])
        sigmas.append(np.stack([sxy, sxy, sz], axis=1)[present])
    return Trees(np.vstack(centers), np.vstack(sigmas))

def _scan_points(spec, trees, lines, position, rng):
    xy = position[:2]
    near = np.flatnonzero(np.linalg.norm(trees.centers[:, :2] - xy, axis=1)
                          <= spec.sensor_range)
    k = spec.points_per_tree
    canopy = (np.repeat(trees.centers[near], k, axis=0) +
              rng.standard_normal((len(near) * k, 3)) *
              np.repeat(trees.sigmas[near], k, axis=0))
    radius = spec.sensor_range * np.sqrt(rng.random(spec.ground_points))
    theta = rng.uniform(0.0, 2.0 * np.pi, spec.ground_points)
    ground = np.stack([xy[0] + radius * np.cos(theta),
                       xy[1] + radius * np.sin(theta),
                       np.zeros(spec.ground_points)], axis=1)
    points = np.vstack([canopy, ground])
    points = points + rng.normal(0.0, spec.noise_sigma, points.shape)
    passes = rng.random((len(points), len(lines)))

    crossed = ((lines[None, :] - xy[1]) *
               (lines[None, :] - points[:, 1:2])) < 0.0
    blocked = np.any(crossed & (passes >= spec.permeability), axis=1)
    in_range = np.linalg.norm(points[:, :2] - xy, axis=1) <= spec.sensor_range
    return points[in_range & ~blocked] - position

def generate_orchard(spec):
    """Returns ``(scans, records)``: sensor-frame clouds and their records.

    Scans are taken every `scan_spacing` metres of path. Lap ``i`` starts
    ``i / n_passes`` of a spacing into the path, so revisits fall between
    earlier scan positions.

    """
    pieces = plan_path(spec)
    trees = _plant_trees(spec, make_rng(spec.seed, 'synthgen', 'scene'))
    lines = _line_y(spec)
    laps = []
    for lap in range(spec.n_passes):
        arc, xy, segments, length = _sample_path(
            pieces, spec.scan_spacing, spec.scan_spacing * lap / spec.n_passes)
        start = lap * (length / spec.speed + spec.lap_gap)
        laps += [(lap, start + a / spec.speed, p, s)
                 for a, p, s in zip(arc, xy, segments)]

    def make_scan(item):
        index, (lap, t, xy, segment) = item
        position = np.array([xy[0], xy[1], spec.sensor_height])
        rng = make_rng(spec.seed, 'synthgen', 'scan', index)
        cloud = PointCloud(_scan_points(spec, trees, lines, position, rng),
                           timestamp=float(t))
        record = ScanRecord(index, float(t), tuple(float(v) for v in position),
                            int(segment), lap)
        return cloud, record

    out = parallel_map(make_scan, list(enumerate(laps)))
    log.info("Generated %d scans over %d passes (%d trees, %d segments).",
             len(out), spec.n_passes, len(trees.centers), spec.n_segments)
    return [c for c, _ in out], [r for _, r in out]
