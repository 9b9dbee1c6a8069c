# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""Fixed-layout little-endian binary files.

Every file starts with a 6-byte magic and a u32 version followed by a
per-kind header; payload arrays are row-major and little-endian.

    SOAPF  local features   u32 n, u32 c, u64 source_scan_id, f32[n*c]
    SOAPM  head checkpoint  u32 c, u32 d, u8 stage flags, f64 h, f64[d*c*c]
    SOAPO  optimizer state  u64 step, u32 epoch, u32 c, u32 d,
                            f64 m_h, f64 v_h, f64[d*c*c] m_W, f64[d*c*c] v_W
    SOAPD  descriptors      u32 n, u32 d, u64[n] ids, f32[n*d]

The weight arrays of SOAPM and SOAPO are present only when the FC stage flag
is set. Stage flag bits: 1 log, 2 power normalization, 4 FC, 8 max pooling
(average pooling when clear).

"""

import struct
import logging
from collections import namedtuple

import numpy as np

from .base import FormatException, VersionMismatchException

__all__ = ["FORMAT_VERSION", "FLAG_LOG", "FLAG_PN", "FLAG_FC", "FLAG_MAX",
           "ModelRecord", "OptimizerRecord",
           "write_feature_file", "read_feature_file",
           "write_model_file", "read_model_file",
           "write_optimizer_file", "read_optimizer_file",
           "write_descriptor_file", "read_descriptor_file"]

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

FEATURE_MAGIC = b'SOAPF\0'
MODEL_MAGIC = b'SOAPM\0'
OPTIMIZER_MAGIC = b'SOAPO\0'
DESCRIPTOR_MAGIC = b'SOAPD\0'

FEATURE_HEADER = struct.Struct('<6sIIIQ')
MODEL_HEADER = struct.Struct('<6sIIIBd')
OPTIMIZER_HEADER = struct.Struct('<6sIQIIIdd')
DESCRIPTOR_HEADER = struct.Struct('<6sIII')

FLAG_LOG = 1
FLAG_PN = 2
FLAG_FC = 4
FLAG_MAX = 8

F32 = np.dtype('<f4')
F64 = np.dtype('<f8')
U64 = np.dtype('<u8')

ModelRecord = namedtuple("ModelRecord", "c, d, flags, h, W")
OptimizerRecord = namedtuple("OptimizerRecord",
                             "step, epoch, c, d, m_h, v_h, m_W, v_W")


def _read_file(path):
    with open(path, 'rb') as fd:
        return fd.read()

def _unpack_header(layout, magic, data, path):
    if len(data) < layout.size:
        raise FormatException("{}: truncated header ({} bytes, need {})"
                              .format(path, len(data), layout.size))
    fields = layout.unpack_from(data)
    if fields[0] != magic:
        raise FormatException("{}: bad magic {!r}, expected {!r}"
                              .format(path, fields[0], magic))
    if fields[1] != FORMAT_VERSION:
        raise VersionMismatchException(
            "{}: version {} is not supported (expected {})"
            .format(path, fields[1], FORMAT_VERSION))
    return fields[2:]

def _take(data, offset, dtype, count, path, what):
    nbytes = dtype.itemsize * count
    if len(data) - offset < nbytes:
        raise FormatException("{}: {} needs {} bytes at offset {}, only {} left"
                              .format(path, what, nbytes, offset,
                                      len(data) - offset))
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr, offset + nbytes

def _expect_end(data, offset, path):
    if offset != len(data):
        raise FormatException("{}: {} trailing bytes after payload"
                              .format(path, len(data) - offset))

####################
# Local features

def write_feature_file(path, features, source_scan_id):
    features = np.asarray(features)
    n, c = features.shape
    with open(path, 'wb') as fd:
        fd.write(FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, n, c,
                                     int(source_scan_id)))
        fd.write(np.ascontiguousarray(features, dtype=F32).tobytes())

def read_feature_file(path):
    """Returns ``(features, source_scan_id)`` with features as float64."""
    data = _read_file(path)
    n, c, scan_id = _unpack_header(FEATURE_HEADER, FEATURE_MAGIC, data, path)
    payload = len(data) - FEATURE_HEADER.size
    if payload != n * c * F32.itemsize:
        raise FormatException(
            "{}: header declares {}x{} features ({} bytes) but payload has {} "
            "bytes".format(path, n, c, n * c * F32.itemsize, payload))
    arr, _ = _take(data, FEATURE_HEADER.size, F32, n * c, path, "features")
    return arr.reshape(n, c).astype(np.float64), scan_id

####################
# Head checkpoints

def write_model_file(path, c, d, flags, h, W):
    with open(path, 'wb') as fd:
        fd.write(MODEL_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, c, d, flags,
                                   float(h)))
        if flags & FLAG_FC:
            fd.write(np.ascontiguousarray(W, dtype=F64).tobytes())

def read_model_file(path):
    data = _read_file(path)
    c, d, flags, h = _unpack_header(MODEL_HEADER, MODEL_MAGIC, data, path)
    offset = MODEL_HEADER.size
    W = None
    if flags & FLAG_FC:
        W, offset = _take(data, offset, F64, d * c * c, path, "weights")
        W = W.reshape(d, c * c).copy()
    _expect_end(data, offset, path)
    return ModelRecord(c, d, flags, h, W)

####################
# Optimizer state

def write_optimizer_file(path, record):
    with open(path, 'wb') as fd:
        fd.write(OPTIMIZER_HEADER.pack(OPTIMIZER_MAGIC, FORMAT_VERSION,
                                       record.step, record.epoch, record.c,
                                       record.d, record.m_h, record.v_h))
        if record.m_W is not None:
            fd.write(np.ascontiguousarray(record.m_W, dtype=F64).tobytes())
            fd.write(np.ascontiguousarray(record.v_W, dtype=F64).tobytes())

def read_optimizer_file(path, has_weights):
    data = _read_file(path)
    step, epoch, c, d, m_h, v_h = _unpack_header(OPTIMIZER_HEADER,
                                                 OPTIMIZER_MAGIC, data, path)
    offset = OPTIMIZER_HEADER.size
    m_W = v_W = None
    if has_weights:
        m_W, offset = _take(data, offset, F64, d * c * c, path, "first moments")
        v_W, offset = _take(data, offset, F64, d * c * c, path,
                            "second moments")
        m_W = m_W.reshape(d, c * c).copy()
        v_W = v_W.reshape(d, c * c).copy()
    _expect_end(data, offset, path)
    return OptimizerRecord(step, epoch, c, d, m_h, v_h, m_W, v_W)

####################
# Descriptors

def write_descriptor_file(path, ids, matrix):
    ids = np.asarray(ids)
    matrix = np.asarray(matrix)
    n, d = matrix.shape
    if len(ids) != n:
        raise FormatException("{} ids for {} descriptor rows".format(len(ids), n))
    with open(path, 'wb') as fd:
        fd.write(DESCRIPTOR_HEADER.pack(DESCRIPTOR_MAGIC, FORMAT_VERSION, n, d))
        fd.write(np.ascontiguousarray(ids, dtype=U64).tobytes())
        fd.write(np.ascontiguousarray(matrix, dtype=F32).tobytes())

def read_descriptor_file(path):
    """Returns ``(ids, matrix)`` as int64 and float64 arrays."""
    data = _read_file(path)
    n, d = _unpack_header(DESCRIPTOR_HEADER, DESCRIPTOR_MAGIC, data, path)
    ids, offset = _take(data, DESCRIPTOR_HEADER.size, U64, n, path, "ids")
    matrix, offset = _take(data, offset, F32, n * d, path, "descriptors")
    _expect_end(data, offset, path)
    return ids.astype(np.int64), matrix.reshape(n, d).astype(np.float64)
