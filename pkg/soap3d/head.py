# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""The aggregation head.

A scan's local features ``F`` (n' x c) become a unit-norm descriptor through
five stages:

    pool   S = F^T F / n'                     second-order average pooling
    log    L = Q log(Lambda) Q^T              Log-Euclidean projection
    pn     R = sign(L) |L|^h                  power normalization
    fc     y = W vec(R)                       linear projection, no bias
    l2     D = y / |y|

The log, pn and fc stages can be switched off individually; a disabled stage
is the identity. Every stage has an analytic backward pass.

For comparison the pool stage can instead take the entry-wise maximum of the
outer products ``f_i f_i^T``. That matrix is generally indefinite, so max
pooling excludes the log stage.

The pool and log stages do not depend on trainable parameters, so
`encode_features` runs them once and `forward_from_encoding` finishes the
pass; `head_forward` composes both.

"""

import os
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .common import (ArgumentException, ValidationException, NumericException,
                     InvalidStateException, make_rng)
from .formats import (write_model_file, read_model_file,
                      FLAG_LOG, FLAG_PN, FLAG_FC, FLAG_MAX)

__all__ = ["StageFlags", "HeadParams", "LogCache", "Encoding", "ForwardCache",
           "H_MIN", "DEFAULT_EPS", "EPS_FLOOR",
           "POOLING_MODES", "soap_pool", "soap_max_pool",
           "soap_max_pool_backward",
           "logm_spd", "logm_spd_backward",
           "power_normalize", "power_normalize_backward",
           "encode_features", "forward_from_encoding",
           "head_forward", "head_backward", "descriptor_dim",
           "save_checkpoint", "load_checkpoint"]

log = logging.getLogger(__name__)

H_MIN = 0.01
DEFAULT_EPS = 1e-6
EPS_FLOOR = 1e-12
SYMMETRY_TOLERANCE = 1e-10
# Relative gap below which two eigenvalues are treated as equal.
DEGENERATE_GAP = 1e-12
POOLING_MODES = ('avg', 'max')


@dataclass(frozen=True)
class StageFlags:
    use_log: bool = True
    use_pn: bool = True
    use_fc: bool = True
    pooling: str = 'avg'

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise ValidationException("pooling must be one of {}, got {!r}"
                                      .format(POOLING_MODES, self.pooling))
        if self.pooling == 'max' and self.use_log:
            # Max-pooled matrices are in general indefinite.
            raise ValidationException(
                "the log stage requires average pooling")

    def to_byte(self):
        return ((FLAG_LOG if self.use_log else 0) |
                (FLAG_PN if self.use_pn else 0) |
                (FLAG_FC if self.use_fc else 0) |
                (FLAG_MAX if self.pooling == 'max' else 0))

    @classmethod
    def from_byte(cls, flags):
        return cls(bool(flags & FLAG_LOG), bool(flags & FLAG_PN),
                   bool(flags & FLAG_FC),
                   'max' if flags & FLAG_MAX else 'avg')

    @property
    def label(self):
        parts = [name for name, on in (('max', self.pooling == 'max'),
                                       ('FC', self.use_fc),
                                       ('LOG', self.use_log),
                                       ('PN', self.use_pn)) if on]
        return '+'.join(parts) if parts else 'pool'


@dataclass(frozen=True, eq=False)
class HeadParams:
    """Trainable head state: power exponent `h` and FC weights `W` (d x c^2).

    `W` is None when the FC stage is off; the descriptor then has c^2 entries.

    """
    c: int
    h: float = 0.75
    W: Optional[np.ndarray] = None
    flags: StageFlags = field(default_factory=StageFlags)

    def __post_init__(self):
        if not H_MIN <= self.h <= 1.0:
            raise ValidationException(
                "h must lie in [{}, 1], got {}".format(H_MIN, self.h))
        if self.flags.use_fc:
            if self.W is None:
                raise ValidationException("FC stage enabled without weights")
            W = np.asarray(self.W, dtype=np.float64)
            if W.ndim != 2 or W.shape[1] != self.c * self.c:
                raise ValidationException(
                    "W must have shape (d, {}), got {}".format(self.c * self.c,
                                                               W.shape))
            if not np.isfinite(W).all():
                raise ValidationException("W has non-finite entries")
            object.__setattr__(self, 'W', W)
        elif self.W is not None:
            object.__setattr__(self, 'W', None)

    @property
    def d(self):
        return descriptor_dim(self.c, self.W.shape[0] if self.W is not None
                              else None, self.flags)

    @classmethod
    def initial(cls, c, d=256, h=0.75, flags=StageFlags(), seed=0):
        """Fresh parameters with W drawn from uniform(-1/c, 1/c)."""
        W = None
        if flags.use_fc:
            W = make_rng(seed, 'init').uniform(-1.0 / c, 1.0 / c,
                                               size=(d, c * c))
        return cls(c, h, W, flags)

    def evolve(self, **changes):
        return replace(self, **changes)


def descriptor_dim(c, d, flags):
    return d if flags.use_fc else c * c


@dataclass(frozen=True, eq=False)
class LogCache:
    Q: np.ndarray
    lam: np.ndarray
    # d(shift)/d(trace S) of the eps regularization, 0 when the floor applied.
    shift_slope: float = 0.0


@dataclass(frozen=True, eq=False)
class Encoding:
    """Output of the parameter-free stages for one feature set."""
    F: np.ndarray
    S: np.ndarray
    L: np.ndarray
    log_cache: Optional[LogCache]
    flags: StageFlags
    # Row attaining each entry of a max-pooled S.
    pool_rows: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ForwardCache:
    encoding: Encoding
    R: np.ndarray
    x: np.ndarray
    y: np.ndarray
    norm: float
    D: np.ndarray
    h: float
    w_shape: Optional[tuple]

####################
# Stages

def _features_of(F):
    F = getattr(F, 'features', F)
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or len(F) < 1:
        raise ArgumentException("features must be a non-empty (n, c) matrix")
    if not np.isfinite(F).all():
        raise NumericException("features contain non-finite entries")
    return F

def soap_pool(F):
    """Second-order average pooling ``(1/n) sum_i f_i f_i^T``.

    Rows are summed in a canonical order, so any permutation of the input
    yields a bit-identical matrix.

    """
    F = _features_of(F)
    canonical = F[np.lexsort(F.T[::-1])]
    S = canonical.T @ canonical / len(F)
    return 0.5 * (S + S.T)

def soap_max_pool(F):
    """Second-order max pooling: entry-wise ``max_i f_i f_i^T``.

    Returns ``(S, rows)`` where ``rows[j, k]`` is the feature row attaining
    ``S[j, k]``, the first one on ties.

    """
    F = _features_of(F)
    products = F[:, :, None] * F[:, None, :]
    rows = np.argmax(products, axis=0)
    S = np.take_along_axis(products, rows[None], axis=0)[0]
    return S, rows

def soap_max_pool_backward(F, rows, G):
    """Subgradient of `soap_max_pool` wrt `F` given ``G = dL/dS``; only the
    attaining rows receive gradient.

    """
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    j, k = np.indices(G.shape)
    dF = np.zeros_like(F)
    np.add.at(dF, (rows, j), G * F[rows, k])
    np.add.at(dF, (rows, k), G * F[rows, j])
    return dF

def _check_symmetric(S):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ArgumentException("expected a square matrix, got shape {}"
                                .format(S.shape))
    scale = max(1.0, float(np.abs(S).max()))
    if np.abs(S - S.T).max() > SYMMETRY_TOLERANCE * scale:
        raise ArgumentException("matrix is not symmetric")
    return S

def logm_spd(S, eps=DEFAULT_EPS, eps_floor=EPS_FLOOR):
    """Principal matrix logarithm of a symmetric positive (semi)definite matrix.

    The matrix is first regularized to ``S + shift * I`` with
    ``shift = eps * max(trace(S) / c, eps_floor)``. Returns the logarithm and
    the `LogCache` needed by `logm_spd_backward`.

    """
    S = _check_symmetric(S)
    c = len(S)
    mean_eig = np.trace(S) / c
    if mean_eig >= eps_floor:
        shift, slope = eps * mean_eig, eps / c
    else:
        shift, slope = eps * eps_floor, 0.0
    reg = S + shift * np.eye(c)
    try:
        lam, Q = np.linalg.eigh(reg)
    except np.linalg.LinAlgError as e:
        raise NumericException(
            "eigendecomposition failed (trace {:.3g}, max |entry| {:.3g})"
            .format(np.trace(reg), np.abs(reg).max())) from e
    if lam[0] <= 0.0:
        raise NumericException(
            "matrix is not positive definite: eigenvalues in [{:.3g}, {:.3g}], "
            "condition number undefined; increase eps".format(lam[0], lam[-1]))
    L = (Q * np.log(lam)) @ Q.T
    return 0.5 * (L + L.T), LogCache(Q, lam, slope)

def _log_divided_differences(lam):
    lam_max = lam.max()
    diff = lam[:, None] - lam[None, :]
    near = np.abs(diff) < DEGENERATE_GAP * lam_max
    logs = np.log(lam)
    safe = np.where(near, 1.0, diff)
    K = np.where(near, 1.0 / lam[:, None], (logs[:, None] - logs[None, :]) / safe)
    return K

def logm_spd_backward(cache, G):
    """Gradient of a loss wrt the input of `logm_spd`, given the gradient `G`
    wrt its output (Daleckii-Krein formula).

    The gradient flowing through the trace-scaled regularization shift is
    included, so the result is the exact gradient wrt the unregularized input.

    """
    if cache.lam.min() <= 0.0:
        raise NumericException("log backward needs positive eigenvalues")
    G = np.asarray(G, dtype=np.float64)
    Q = cache.Q
    sym = 0.5 * (G + G.T)
    K = _log_divided_differences(cache.lam)
    grad = Q @ (K * (Q.T @ sym @ Q)) @ Q.T
    grad = 0.5 * (grad + grad.T)
    if cache.shift_slope:
        grad = grad + cache.shift_slope * np.trace(grad) * np.eye(len(grad))
    return grad

def power_normalize(M, h):
    """Element-wise ``sign(v) |v|^h``."""
    if not 0.0 < h <= 1.0:
        raise ArgumentException("h must lie in (0, 1], got {}".format(h))
    M = np.asarray(M, dtype=np.float64)
    return np.sign(M) * np.abs(M) ** h

def power_normalize_backward(M, h, G):
    """Returns ``(dL/dM, dL/dh)`` for `power_normalize`.

    Both partial derivatives are taken as 0 at entries equal to 0, where the
    derivative wrt the entry diverges for h < 1.

    """
    M = np.asarray(M, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    mag = np.abs(M)
    nonzero = mag > 0.0
    safe = np.where(nonzero, mag, 1.0)
    dM = np.where(nonzero, h * safe ** (h - 1.0), 0.0) * G
    dh = np.where(nonzero, np.sign(M) * safe ** h * np.log(safe), 0.0)
    return dM, float(np.sum(G * dh))

####################
# Composed head

def encode_features(F, flags=StageFlags(), eps=DEFAULT_EPS):
    F = _features_of(F)
    rows = None
    if flags.pooling == 'max':
        S, rows = soap_max_pool(F)
    else:
        S = soap_pool(F)
    if flags.use_log:
        L, log_cache = logm_spd(S, eps)
    else:
        L, log_cache = S, None
    return Encoding(F, S, L, log_cache, flags, rows)

def forward_from_encoding(enc, p):
    """Runs the parametric stages on an `Encoding`; returns
    ``(descriptor, ForwardCache)``.

    """
    c = enc.S.shape[0]
    if c != p.c or enc.flags != p.flags:
        raise InvalidStateException(
            "encoding (c={}, {}) does not match head params (c={}, {})"
            .format(c, enc.flags.label, p.c, p.flags.label))
    R = power_normalize(enc.L, p.h) if p.flags.use_pn else enc.L
    x = R.reshape(-1)
    y = p.W @ x if p.flags.use_fc else x
    norm = float(np.linalg.norm(y))
    if not np.isfinite(norm) or norm == 0.0:
        raise NumericException("descriptor pre-image has norm {}".format(norm))
    D = y / norm
    cache = ForwardCache(enc, R, x, y, norm, D, p.h,
                         None if p.W is None else p.W.shape)
    return D, cache

def head_forward(F, p, eps=DEFAULT_EPS):
    return forward_from_encoding(encode_features(F, p.flags, eps), p)

def head_backward(cache, p, dD, wrt_features=True):
    """Back-propagates ``dL/dD`` through the head.

    Returns ``(dF, dW, dh)``; `dW` is None without an FC stage and `dF` is
    None when `wrt_features` is false (frozen backbone training).

    """
    enc = cache.encoding
    w_shape = None if p.W is None else p.W.shape
    if (w_shape != cache.w_shape or p.flags != enc.flags or p.h != cache.h
            or p.c != enc.S.shape[0]):
        raise InvalidStateException("forward cache does not match head params")
    dD = np.asarray(dD, dtype=np.float64)
    if dD.shape != cache.D.shape:
        raise InvalidStateException("upstream gradient has shape {}, expected {}"
                                    .format(dD.shape, cache.D.shape))
    c = p.c
    D = cache.D
    dy = (dD - D * (D @ dD)) / cache.norm
    dW = None
    if p.flags.use_fc:
        dW = np.outer(dy, cache.x)
        dx = p.W.T @ dy
    else:
        dx = dy
    dR = dx.reshape(c, c)
    dh = 0.0
    if p.flags.use_pn:
        dL, dh = power_normalize_backward(enc.L, p.h, dR)
    else:
        dL = dR
    if not wrt_features:
        return None, dW, dh
    dS = logm_spd_backward(enc.log_cache, dL) if p.flags.use_log else dL
    if p.flags.pooling == 'max':
        return soap_max_pool_backward(enc.F, enc.pool_rows, dS), dW, dh
    dF = enc.F @ (dS + dS.T) / len(enc.F)
    return dF, dW, dh

####################
# Checkpoints

def sidecar_path(path):
    return os.fspath(path) + '.cfg'

def save_checkpoint(p, path, config_echo=None):
    """Writes `p` in the SOAPM layout plus a plain-text sidecar echoing the
    run configuration.

    """
    write_model_file(path, p.c, p.d, p.flags.to_byte(), p.h, p.W)
    with open(sidecar_path(path), 'w') as fd:
        fd.write("# soap3d head checkpoint\n")
        fd.write("c = {}\nd = {}\nh = {!r}\nstages = {}\n".format(
            p.c, p.d, p.h, p.flags.label))
        for key, value in (config_echo or {}).items():
            fd.write("{} = {}\n".format(key, value))

def load_checkpoint(path):
    record = read_model_file(path)
    return HeadParams(record.c, record.h, record.W,
                      StageFlags.from_byte(record.flags))
