# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""CSV tables describing a trajectory: poses and segment labels."""

import csv

from .base import ParseException

__all__ = ["POSE_FIELDS", "QUAT_FIELDS", "SEGMENT_FIELDS", "IDENTITY_QUAT",
           "read_pose_table", "write_pose_table",
           "read_segment_table", "write_segment_table"]

POSE_FIELDS = ['scan_id', 'timestamp', 'x', 'y', 'z']
QUAT_FIELDS = ['qx', 'qy', 'qz', 'qw']
SEGMENT_FIELDS = ['scan_id', 'segment_id']

IDENTITY_QUAT = (0.0, 0.0, 0.0, 1.0)


def _read_rows(path, expected, optional=()):
    with open(path, newline='') as fd:
        reader = csv.reader(fd)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseException("empty table", path=path, offset=0) from None
        if header not in (expected, expected + list(optional)):
            raise ParseException(
                "bad header {}, expected {}".format(
                    ",".join(header), ",".join(expected + list(optional))),
                path=path, offset=0)
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ParseException(
                    "line {}: expected {} fields, found {}".format(
                        reader.line_num, len(header), len(row)), path=path)
            yield header, reader.line_num, row

def read_pose_table(path):
    """Yields ``(scan_id, timestamp, (x, y, z), (qx, qy, qz, qw))`` rows.

    A table without quaternion columns yields the identity rotation.

    """
    for header, lineno, row in _read_rows(path, POSE_FIELDS, QUAT_FIELDS):
        try:
            scan_id = int(row[0])
            values = [float(v) for v in row[1:]]
        except ValueError:
            raise ParseException("line {}: non-numeric field".format(lineno),
                                 path=path) from None
        quat = tuple(values[4:8]) if len(header) == 9 else IDENTITY_QUAT
        yield scan_id, values[0], tuple(values[1:4]), quat

def write_pose_table(path, rows, with_rotation=False):
    """Writes ``(scan_id, timestamp, position, quaternion)`` rows."""
    with open(path, 'w', newline='') as fd:
        writer = csv.writer(fd, lineterminator='\n')
        writer.writerow(POSE_FIELDS + (QUAT_FIELDS if with_rotation else []))
        for scan_id, timestamp, position, quat in rows:
            row = [int(scan_id), repr(float(timestamp))]
            row += [repr(float(v)) for v in position]
            if with_rotation:
                row += [repr(float(v)) for v in quat]
            writer.writerow(row)

def read_segment_table(path):
    """Yields ``(scan_id, segment_id)`` rows."""
    for _, lineno, row in _read_rows(path, SEGMENT_FIELDS):
        try:
            yield int(row[0]), int(row[1])
        except ValueError:
            raise ParseException("line {}: non-integer field".format(lineno),
                                 path=path) from None

def write_segment_table(path, rows):
    with open(path, 'w', newline='') as fd:
        writer = csv.writer(fd, lineterminator='\n')
        writer.writerow(SEGMENT_FIELDS)
        for scan_id, segment_id in rows:
            writer.writerow([int(scan_id), int(segment_id)])
