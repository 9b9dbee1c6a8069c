# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

from .base import *
from .scans import *
from .tables import *
from .binary import *

__all__ = (base.__all__ +
           scans.__all__ +
           tables.__all__ +
           binary.__all__)
