# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""On-disk dataset layout.

    <root>/poses.csv            scan_id,timestamp,x,y,z[,qx,qy,qz,qw]
    <root>/segments.csv         scan_id,segment_id
    <root>/scans/NNNNNN.bin     one scan per file (or .ply)
    <root>/features/NNNNNN.feat local features written by `extract`

"""

import os
import logging

from .common import ArgumentException, ReferenceException, ensure_dir
from .geom import (PointCloud, ScanRecord, load_scan, save_scan,
                   load_trajectory, load_poses, build_submaps,
                   associate_timestamps)
from .localfeat import load_features
from .formats import write_pose_table, write_segment_table, IDENTITY_QUAT

__all__ = ["Dataset", "open_dataset", "write_dataset", "write_submaps",
           "POSES_FILE",
           "SEGMENTS_FILE", "SCANS_DIR", "FEATURES_DIR"]

log = logging.getLogger(__name__)

POSES_FILE = 'poses.csv'
SEGMENTS_FILE = 'segments.csv'
SCANS_DIR = 'scans'
FEATURES_DIR = 'features'
FEATURE_SUFFIX = '.feat'

SCAN_SUFFIXES = {
    'bin-xyz': '.bin',
    'bin-xyzi': '.bin',
    'ply-ascii': '.ply',
}


def _scan_name(scan_id, suffix):
    return "{:06d}{}".format(scan_id, suffix)

def _suffix_for(scan_format):
    try:
        return SCAN_SUFFIXES[scan_format]
    except KeyError:
        raise ArgumentException("unknown scan format {!r}".format(
            scan_format)) from None


class Dataset:
    """A sequence on disk: its scan records and the files behind them."""

    def __init__(self, root, records, scan_format='bin-xyz'):
        self.root = root
        self.records = records
        self.scan_format = scan_format
        self._suffix = _suffix_for(scan_format)
        self._log = log.getChild(self.__class__.__name__)

    @property
    def name(self):
        return os.path.basename(os.path.normpath(self.root))

    @property
    def scan_ids(self):
        return [r.scan_id for r in self.records]

    def scan_path(self, scan_id):
        return os.path.join(self.root, SCANS_DIR,
                            _scan_name(scan_id, self._suffix))

    def feature_dir(self):
        return os.path.join(self.root, FEATURES_DIR)

    def feature_path(self, scan_id):
        return os.path.join(self.feature_dir(),
                            _scan_name(scan_id, FEATURE_SUFFIX))

    def load_scan(self, scan_id):
        return load_scan(self.scan_path(scan_id), self.scan_format)

    def load_features(self, standardize_features=False):
        """Returns ``{scan_id: LocalFeatureSet}`` for every record."""
        missing = [sid for sid in self.scan_ids
                   if not os.path.exists(self.feature_path(sid))]
        if missing:
            raise ReferenceException(
                "{}: no features for {} scans (first: {}); run 'extract' "
                "first".format(self.root, len(missing), missing[0]))
        self._log.debug("Loading features of %d scans from %s.",
                        len(self.records), self.feature_dir())
        return {sid: load_features(self.feature_path(sid),
                                   standardize_features)
                for sid in self.scan_ids}

    def __repr__(self):
        return "<Dataset {} ({} scans)>".format(self.root, len(self.records))


def open_dataset(root, scan_format='bin-xyz'):
    if not os.path.isdir(root):
        raise ArgumentException("{}: not a dataset directory".format(root))
    records = load_trajectory(os.path.join(root, POSES_FILE),
                              os.path.join(root, SEGMENTS_FILE))
    return Dataset(root, records, scan_format)

def write_dataset(root, scans, records, scan_format='bin-xyz'):
    """Writes scans (sensor frame) and their records under `root`.

    Poses are written without rotation columns: every pose is a pure
    translation to the record's position.

    """
    if len(scans) != len(records):
        raise ArgumentException("{} scans but {} records".format(
            len(scans), len(records)))
    ensure_dir(os.path.join(root, SCANS_DIR))
    dataset = Dataset(root, records, scan_format)
    for cloud, record in zip(scans, records):
        save_scan(cloud, dataset.scan_path(record.scan_id), scan_format)
    write_pose_table(os.path.join(root, POSES_FILE),
                     [(r.scan_id, r.timestamp, r.position, IDENTITY_QUAT)
                      for r in records])
    write_segment_table(os.path.join(root, SEGMENTS_FILE),
                        [(r.scan_id, r.segment_id) for r in records])
    log.info("Wrote %d scans to %s.", len(records), root)
    return dataset

def write_submaps(ds, root, window, stride=1, positions_path=None):
    """Merges every `window` consecutive scans of `ds` into one sub-map and
    writes the sub-maps as a new dataset under `root`.

    A sub-map keeps the scan id, timestamp, segment and pass of its first
    scan. It is stored relative to the positioning sample nearest its
    timestamp, taken from `positions_path` when given and from the
    dataset's own poses otherwise.

    """
    poses = load_poses(os.path.join(ds.root, POSES_FILE))
    records = sorted(ds.records, key=lambda r: (r.timestamp, r.scan_id))
    scans = [ds.load_scan(r.scan_id) for r in records]
    submaps, times = build_submaps(scans,
                                   [poses[r.scan_id][1] for r in records],
                                   [r.timestamp for r in records],
                                   window, stride)

    samples = load_poses(positions_path or os.path.join(ds.root, POSES_FILE))
    samples = sorted(samples.values(), key=lambda s: s[0])
    nearest = associate_timestamps([t for t, _ in samples], times)

    out_scans, out_records = [], []
    for i, (cloud, j) in enumerate(zip(submaps, nearest)):
        first = records[i * window]
        position = samples[j][1].translation
        out_scans.append(PointCloud(cloud.points - position, cloud.intensity,
                                    cloud.timestamp))
        out_records.append(ScanRecord(first.scan_id, cloud.timestamp,
                                      tuple(float(v) for v in position),
                                      first.segment_id, first.pass_id))
    log.info("%s: merged %d scans into %d sub-maps.", ds.name, len(records),
             len(out_records))
    return write_dataset(root, out_scans, out_records, ds.scan_format)
