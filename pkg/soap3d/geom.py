# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""Point-cloud ingestion and trajectory metadata.

All functions here are pure: they never modify their inputs.

"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .common import ArgumentException, ValidationException, ReferenceException
from .formats import (get_scan_codec, EmptyCloudException, read_pose_table,
                      read_segment_table)

__all__ = ["PointCloud", "VoxelCloud", "ScanRecord", "Pose",
           "load_scan", "save_scan", "random_downsample", "voxelize",
           "merge_submap", "build_submaps", "load_poses", "load_trajectory",
           "assign_pass_ids", "associate_timestamps"]

log = logging.getLogger(__name__)

QUATERNION_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ``(n, 3)`` point matrix in metres with optional intensities.

    `timestamp` is the reference time of the cloud when it is known (a merged
    sub-map carries the time of its first scan).

    """
    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    timestamp: Optional[float] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValidationException(
                "points must be an (n, 3) matrix, got shape {}".format(
                    points.shape))
        if len(points) == 0:
            raise EmptyCloudException("point cloud has no points")
        if not np.isfinite(points).all():
            raise ValidationException("point cloud has non-finite coordinates")
        object.__setattr__(self, 'points', points)
        if self.intensity is not None:
            intensity = np.asarray(self.intensity, dtype=np.float64)
            if intensity.shape != (len(points),):
                raise ValidationException(
                    "{} intensities for {} points".format(len(intensity),
                                                          len(points)))
            object.__setattr__(self, 'intensity', intensity)

    def __len__(self):
        return len(self.points)

    def take(self, index):
        return PointCloud(self.points[index],
                          None if self.intensity is None
                          else self.intensity[index],
                          self.timestamp)


@dataclass(frozen=True, eq=False)
class VoxelCloud:
    """One centroid per occupied voxel; rows sorted by voxel key."""
    centroids: np.ndarray
    voxel_keys: np.ndarray
    grid_size: float
    counts: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.centroids)


@dataclass(frozen=True)
class ScanRecord:
    scan_id: int
    timestamp: float
    position: tuple
    segment_id: int
    pass_id: int = 0


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from a sensor frame into the world frame.

    `rotation` is a unit quaternion in scalar-last ``(x, y, z, w)`` order.

    """
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        translation = np.asarray(self.translation, dtype=np.float64)
        rotation = np.asarray(self.rotation, dtype=np.float64)
        if translation.shape != (3,) or rotation.shape != (4,):
            raise ValidationException("pose needs a 3-vector and a quaternion")
        if abs(np.linalg.norm(rotation) - 1.0) > QUATERNION_TOLERANCE:
            raise ValidationException(
                "quaternion {} is not unit norm".format(rotation.tolist()))
        object.__setattr__(self, 'translation', translation)
        object.__setattr__(self, 'rotation', rotation)

    @classmethod
    def from_quaternion(cls, translation, quat):
        """Builds a pose, normalizing a nearly-unit quaternion."""
        quat = np.asarray(quat, dtype=np.float64)
        norm = np.linalg.norm(quat)
        if norm == 0.0 or not np.isfinite(norm):
            raise ValidationException("degenerate quaternion {}".format(
                quat.tolist()))
        return cls(translation, quat / norm)

    @property
    def is_identity_rotation(self):
        return (self.rotation[:3] == 0.0).all() and self.rotation[3] == 1.0

    def apply(self, points):
        if self.is_identity_rotation:
            return points + self.translation
        return Rotation.from_quat(self.rotation).apply(points) + self.translation

####################
# Scans

def load_scan(path, format='bin-xyz'):
    """Reads one scan from `path` in the named format.

    Raises `ParseException` (with the byte offset) on malformed input and
    `EmptyCloudException` when the file holds no points.

    """
    points, intensity = get_scan_codec(format).read(path)
    if len(points) == 0:
        raise EmptyCloudException("{}: scan has no points".format(path))
    return PointCloud(points, intensity)

def save_scan(cloud, path, format='bin-xyz'):
    get_scan_codec(format).write(path, cloud.points, cloud.intensity)

def random_downsample(cloud, target, seed):
    """Keeps `target` points drawn uniformly without replacement.

    Surviving points keep their original relative order. Clouds with at most
    `target` points are returned unchanged.

    """
    if target < 1:
        raise ArgumentException("target must be >= 1, got {}".format(target))
    n = len(cloud)
    if n <= target:
        return cloud
    rng = np.random.default_rng(seed)
    index = np.sort(rng.choice(n, size=target, replace=False))
    return cloud.take(index)

def voxelize(cloud, grid_size):
    """Replaces the points of each occupied voxel by their centroid.

    The voxel key of a point is ``floor(coordinate / grid_size)`` per axis, so
    a point exactly on a cell boundary belongs to the higher-index cell.

    """
    if not grid_size > 0:
        raise ArgumentException(
            "grid_size must be positive, got {}".format(grid_size))
    keys = np.floor(cloud.points / grid_size).astype(np.int64)
    unique_keys, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                             return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(unique_keys), 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    # Rounding can push a centroid of a very thin cluster out of its cell.
    lower = unique_keys * grid_size
    upper = (unique_keys + 1) * grid_size
    centroids = np.minimum(np.maximum(centroids, lower),
                           np.nextafter(upper, -np.inf))
    return VoxelCloud(centroids, unique_keys, float(grid_size), counts)

def merge_submap(scans, poses, stride=1):
    """Transforms every `stride`-th scan into the world frame and concatenates
    them. The merged cloud takes the timestamp of the first scan.

    """
    if len(scans) != len(poses):
        raise ArgumentException("{} scans but {} poses".format(len(scans),
                                                                len(poses)))
    if stride < 1:
        raise ArgumentException("stride must be >= 1, got {}".format(stride))
    if not scans:
        raise ArgumentException("no scans to merge")
    chosen = list(range(0, len(scans), stride))
    points = np.vstack([poses[i].apply(scans[i].points) for i in chosen])
    intensity = None
    if all(scans[i].intensity is not None for i in chosen):
        intensity = np.concatenate([scans[i].intensity for i in chosen])
    return PointCloud(points, intensity, scans[0].timestamp)

def build_submaps(scans, poses, timestamps, window, stride=1):
    """Groups consecutive scans into sub-maps of `window` scans each and
    merges every group. Returns the sub-maps and their reference timestamps.

    """
    if window < 1:
        raise ArgumentException("window must be >= 1, got {}".format(window))
    if not (len(scans) == len(poses) == len(timestamps)):
        raise ArgumentException("scans, poses and timestamps differ in length")
    submaps = []
    for start in range(0, len(scans), window):
        group = [PointCloud(s.points, s.intensity, float(t)) for s, t in
                 zip(scans[start:start + window],
                     timestamps[start:start + window])]
        submaps.append(merge_submap(group, poses[start:start + window], stride))
    log.debug("Merged %d scans into %d sub-maps.", len(scans), len(submaps))
    return submaps, [m.timestamp for m in submaps]

####################
# Trajectories

def associate_timestamps(reference_times, target_times):
    """For each target time, returns the index of the nearest reference time.

    `reference_times` must be sorted ascending. An exact tie between two
    reference samples resolves to the earlier one.

    """
    ref = np.asarray(reference_times, dtype=np.float64)
    targets = np.asarray(target_times, dtype=np.float64)
    if len(ref) == 0:
        raise ArgumentException("no reference timestamps")
    if np.any(np.diff(ref) < 0):
        raise ValidationException("reference timestamps are not sorted")
    right = np.clip(np.searchsorted(ref, targets, side='left'), 0, len(ref) - 1)
    left = np.clip(right - 1, 0, len(ref) - 1)
    take_left = np.abs(targets - ref[left]) <= np.abs(ref[right] - targets)
    return np.where(take_left, left, right)

def load_poses(path):
    """Returns ``{scan_id: (timestamp, Pose)}`` from a poses CSV file."""
    poses = dict()
    for scan_id, timestamp, position, quat in read_pose_table(path):
        if scan_id in poses:
            raise ValidationException(
                "{}: duplicate scan_id {}".format(path, scan_id))
        poses[scan_id] = (timestamp, Pose.from_quaternion(position, quat))
    return poses

def assign_pass_ids(scan_ids, segment_ids):
    """Numbers the traversals of each segment.

    Scans must be given in time order. A new traversal starts whenever the
    segment differs from the previous scan's; its pass id is the number of
    earlier entries into the same segment.

    """
    entries = dict()
    pass_ids = []
    previous = None
    for segment in segment_ids:
        if segment != previous:
            entries[segment] = entries.get(segment, -1) + 1
            previous = segment
        pass_ids.append(entries[segment])
    return pass_ids

def load_trajectory(poses_path, segments_path):
    """Joins the pose and segment tables into `ScanRecord`s sorted by scan id.

    Scans present only in the pose table are ignored.

    """
    poses = load_poses(poses_path)
    segments = dict()
    for scan_id, segment_id in read_segment_table(segments_path):
        if scan_id not in poses:
            raise ReferenceException(
                "{}: scan_id {} has no pose in {}".format(segments_path,
                                                         scan_id, poses_path))
        if segment_id < 0:
            raise ValidationException(
                "{}: negative segment_id for scan {}".format(segments_path,
                                                            scan_id))
        if scan_id in segments:
            raise ValidationException(
                "{}: duplicate scan_id {}".format(segments_path, scan_id))
        segments[scan_id] = segment_id
    scan_ids = sorted(segments)
    times = [poses[i][0] for i in scan_ids]
    for prev, cur, sid in zip(times, times[1:], scan_ids[1:]):
        if cur < prev:
            raise ValidationException(
                "timestamps decrease at scan_id {} ({} < {})".format(sid, cur,
                                                                   prev))
    pass_ids = assign_pass_ids(scan_ids, [segments[i] for i in scan_ids])
    unused = len(poses) - len(scan_ids)
    if unused:
        log.debug("%d poses have no segment label and were skipped.", unused)
    return [ScanRecord(sid, float(poses[sid][0]),
                       tuple(float(v) for v in poses[sid][1].translation),
                       segments[sid], p)
            for sid, p in zip(scan_ids, pass_ids)]
