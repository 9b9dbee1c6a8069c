# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

import io
import logging

import numpy as np

from .base import *

__all__ = ["BinXyzCodec", "BinXyziCodec", "PlyAsciiCodec", "BYTEORDER"]

logger = logging.getLogger(__name__)

BYTEORDER = 'little'
FLOAT32 = np.dtype('<f4')

PLY_FLOAT_TYPES = {'float', 'float32', 'double', 'float64'}


class BinaryScanCodec(ScanCodec):
    """Headerless little-endian float32 records, KITTI style.

    """
    fields = 3

    @property
    def record_size(self):
        return self.fields * FLOAT32.itemsize

    def read(self, path):
        with open(path, 'rb') as fd:
            data = fd.read()
        tail = len(data) % self.record_size
        if tail != 0:
            raise ParseException(
                "{} bytes is not a whole number of {}-byte records".format(
                    len(data), self.record_size),
                path=path, offset=len(data) - tail)
        raw = np.frombuffer(data, dtype=FLOAT32).reshape(-1, self.fields)
        points = raw[:, :3].astype(np.float64)
        intensity = raw[:, 3].astype(np.float64) if self.has_intensity else None
        return points, intensity

    def write(self, path, points, intensity=None):
        points = np.asarray(points)
        if self.has_intensity:
            if intensity is None:
                intensity = np.zeros(len(points))
            raw = np.column_stack([points, intensity])
        else:
            raw = points
        with open(path, 'wb') as fd:
            fd.write(np.ascontiguousarray(raw, dtype=FLOAT32).tobytes())

@scan_format
class BinXyzCodec(BinaryScanCodec):
    name = 'bin-xyz'
    fields = 3

@scan_format
class BinXyziCodec(BinaryScanCodec):
    name = 'bin-xyzi'
    fields = 4
    has_intensity = True


@scan_format
class PlyAsciiCodec(ScanCodec):
    """Minimal ASCII PLY reader/writer.

    Only the `vertex` element is interpreted; it must carry float properties
    `x`, `y`, `z` and may carry `intensity`. Other vertex properties are
    skipped, and elements declared before `vertex` have their lines skipped.

    """
    name = 'ply-ascii'
    has_intensity = True

    def read(self, path):
        with open(path, 'rb') as fd:
            data = fd.read()
        offset = 0
        lines = io.BytesIO(data)

        def next_line():
            nonlocal offset
            start = offset
            line = lines.readline()
            if not line:
                raise ParseException("unexpected end of file", path, start)
            offset += len(line)
            try:
                return line.decode('ascii').strip(), start
            except UnicodeDecodeError:
                raise ParseException("non-ASCII content", path, start) from None

        magic, start = next_line()
        if magic != 'ply':
            raise ParseException("missing 'ply' magic", path, start)
        elements = []           # [name, count, [property names]]
        while True:
            line, start = next_line()
            words = line.split()
            if not words or words[0] in ('comment', 'obj_info'):
                continue
            if words[0] == 'format':
                if len(words) < 2 or words[1] != 'ascii':
                    raise ParseException("only 'format ascii' is supported",
                                         path, start)
            elif words[0] == 'element':
                try:
                    elements.append([words[1], int(words[2]), []])
                except (IndexError, ValueError):
                    raise ParseException("malformed element line", path,
                                         start) from None
            elif words[0] == 'property':
                if not elements:
                    raise ParseException("property before any element", path,
                                         start)
                if words[1] == 'list':
                    elements[-1][2].append(None)
                elif len(words) != 3:
                    raise ParseException("malformed property line", path, start)
                else:
                    if elements[-1][0] == 'vertex' and \
                       words[2] in ('x', 'y', 'z', 'intensity') and \
                       words[1] not in PLY_FLOAT_TYPES:
                        raise ParseException(
                            "property {} must be a float type".format(words[2]),
                            path, start)
                    elements[-1][2].append(words[2])
            elif words[0] == 'end_header':
                break
            else:
                raise ParseException("unknown header keyword {!r}".format(
                    words[0]), path, start)

        names = [e[0] for e in elements]
        if 'vertex' not in names:
            raise ParseException("no vertex element", path, offset)
        for name, count, _ in elements[:names.index('vertex')]:
            for _ in range(count):
                next_line()
        _, count, props = elements[names.index('vertex')]
        for axis in ('x', 'y', 'z'):
            if axis not in props:
                raise ParseException("vertex element lacks property " + axis,
                                     path, offset)
        if None in props:
            raise ParseException("list properties on vertex are unsupported",
                                 path, offset)
        rows = np.empty((count, len(props)))
        for i in range(count):
            line, start = next_line()
            try:
                values = [float(w) for w in line.split()]
            except ValueError:
                raise ParseException("non-numeric vertex value", path,
                                     start) from None
            if len(values) != len(props):
                raise ParseException(
                    "expected {} values, found {}".format(len(props),
                                                          len(values)),
                    path, start)
            rows[i] = values
        points = rows[:, [props.index(a) for a in ('x', 'y', 'z')]]
        intensity = rows[:, props.index('intensity')] \
                    if 'intensity' in props else None
        return points, intensity

    def write(self, path, points, intensity=None):
        points = np.asarray(points, dtype=np.float64)
        cols = [points] if intensity is None \
               else [points, np.asarray(intensity, dtype=np.float64)[:, None]]
        header = ["ply", "format ascii 1.0",
                  "element vertex {}".format(len(points)),
                  "property double x", "property double y",
                  "property double z"]
        if intensity is not None:
            header.append("property double intensity")
        header.append("end_header")
        buf = io.StringIO()
        buf.write("\n".join(header) + "\n")
        np.savetxt(buf, np.hstack(cols), fmt='%.17g')
        with open(path, 'w', encoding='ascii') as fd:
            fd.write(buf.getvalue())
