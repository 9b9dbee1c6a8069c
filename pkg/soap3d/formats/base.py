# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

import logging

from ..common import Soap3dException

__all__ = ["FormatException", "ParseException", "EmptyCloudException",
           "VersionMismatchException",
           "ScanCodec", "ScanFormats", "scan_format", "get_scan_codec"]

logger = logging.getLogger(__name__)

class FormatException(Soap3dException): pass
class EmptyCloudException(FormatException): pass
class VersionMismatchException(FormatException): pass

class ParseException(FormatException):
    """Raised when a file does not parse under its declared format.

    `offset` is the byte offset at which parsing stopped making sense.

    """
    def __init__(self, mesg, path=None, offset=None):
        if path is not None:
            mesg = "{}: {}".format(path, mesg)
        if offset is not None:
            mesg = "{} (at byte offset {})".format(mesg, offset)
        super().__init__(mesg)
        self.path = path
        self.offset = offset

# name -> codec class, in registration order:
ScanFormats = dict()

class ScanCodec:
    """Reads and writes one on-disk point-cloud format.

    This is the abstract base class for all scan formats. Codecs work on raw
    arrays: an ``(n, 3)`` coordinate matrix and an optional length-n intensity
    vector, so they stay independent of the geometry types.

    """
    name = None
    has_intensity = False

    def __init__(self):
        self._log = logger.getChild(self.__class__.__name__)

    def read(self, path):
        """Returns ``(points, intensity)`` parsed from `path`; `intensity` is
        None when the format does not carry it.

        """
        raise NotImplementedError()

    def write(self, path, points, intensity=None):
        raise NotImplementedError()

    def __str__(self):
        return "<{}:{}>".format(self.__class__.__name__, self.name)

def scan_format(cls):
    """Decorator to register `cls` as a scan format under `cls.name`.

    """
    assert cls.name is not None
    ScanFormats[cls.name] = cls
    return cls

def get_scan_codec(name):
    try:
        return ScanFormats[name]()
    except KeyError:
        raise FormatException(
            "unknown scan format {!r}, expected one of {}".format(
                name, ", ".join(ScanFormats))) from None
