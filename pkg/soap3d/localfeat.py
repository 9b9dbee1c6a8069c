# Copyright (c) 2024 The soap3d developers
# Released under the MIT license, see LICENSE.

"""Per-voxel local features.

The learned sparse-convolution backbone is replaced by handcrafted
neighbourhood geometry with the same contract: an ``(n', c)`` matrix with one
row per occupied voxel. Features produced elsewhere can be brought in through
`load_features`.

"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .common import ArgumentException, ValidationException
from .formats import write_feature_file, read_feature_file

__all__ = ["LocalFeatureSet", "FEATURE_NAMES", "MAX_FEATURE_DIM",
           "raw_features", "standardize", "extract_local_features",
           "save_features", "load_features"]

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    'linearity', 'planarity', 'sphericity', 'omnivariance', 'anisotropy',
    'eigenentropy', 'eigensum', 'curvature', 'normal_z', 'height',
    'density', 'radius', 'centroid_offset', 'verticality',
    'mean_neighbor_distance', 'constant',
)
MAX_FEATURE_DIM = len(FEATURE_NAMES)
MIN_NEIGHBORS = 4
# Below this largest eigenvalue a neighbourhood counts as coincident points.
DEGENERATE_EIGENVALUE = 1e-20
# Neighbour ranking resolution, 1 nm.
TIE_DECIMALS = 9


@dataclass(frozen=True, eq=False)
class LocalFeatureSet:
    features: np.ndarray
    source_scan_id: int = 0

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or len(features) < 1 or features.shape[1] < 2:
            raise ValidationException(
                "features must be an (n, c) matrix with n >= 1 and c >= 2, "
                "got shape {}".format(features.shape))
        if not np.isfinite(features).all():
            raise ValidationException("features contain non-finite entries")
        object.__setattr__(self, 'features', features)

    @property
    def c(self):
        return self.features.shape[1]

    def __len__(self):
        return len(self.features)


def _select_slots(c):
    if not 2 <= c <= MAX_FEATURE_DIM:
        raise ArgumentException("feature dimension must lie in [2, {}], got {}"
                                .format(MAX_FEATURE_DIM, c))
    return list(range(c - 1)) + [MAX_FEATURE_DIM - 1]

def _neighbourhoods(centered, k):
    """k nearest centroids of every centroid, itself included.

    Candidates are ranked by distance and then coordinates, both rounded to
    `TIE_DECIMALS`, so equidistant neighbours are chosen the same way after a
    translation or a reordering of the input.

    """
    m = min(len(centered), 2 * k)
    dist, index = cKDTree(centered).query(centered, k=m)
    q = np.round(centered, TIE_DECIMALS)
    order = np.lexsort((q[index, 2], q[index, 1], q[index, 0],
                        np.round(dist, TIE_DECIMALS)), axis=-1)[:, :k]
    return (np.take_along_axis(dist, order, axis=1),
            np.take_along_axis(index, order, axis=1))

def raw_features(centroids, k_neighbors):
    """Returns the unstandardized ``(n', 16)`` neighbourhood descriptors.

    Each row describes the k nearest centroids of one centroid (itself
    included) through the eigenvalues ``l1 >= l2 >= l3`` of their covariance.

    """
    centroids = np.asarray(centroids, dtype=np.float64)
    n = len(centroids)
    if k_neighbors < MIN_NEIGHBORS:
        raise ArgumentException("k_neighbors must be >= {}, got {}".format(
            MIN_NEIGHBORS, k_neighbors))
    if n < k_neighbors:
        raise ArgumentException(
            "{} voxels is fewer than k_neighbors={}".format(n, k_neighbors))

    centered = centroids - centroids.mean(axis=0)
    dist, index = _neighbourhoods(centered, k_neighbors)
    hoods = centered[index]                               # (n, k, 3)
    means = hoods.mean(axis=1)
    spread = hoods - means[:, None, :]
    cov = np.einsum('nki,nkj->nij', spread, spread) / k_neighbors
    evals, evecs = np.linalg.eigh(cov)                    # ascending
    evals = np.clip(evals, 0.0, None)
    l3, l2, l1 = evals[:, 0], evals[:, 1], evals[:, 2]
    normal_z = np.abs(evecs[:, 2, 0])

    out = np.zeros((n, MAX_FEATURE_DIM))
    out[:, -1] = 1.0
    ok = l1 > DEGENERATE_EIGENVALUE
    if not ok.all():
        log.debug("%d of %d neighbourhoods are degenerate.", n - ok.sum(), n)
    l1, l2, l3 = l1[ok], l2[ok], l3[ok]
    total = l1 + l2 + l3
    shares = evals[ok] / total[:, None]
    safe = np.where(shares > 0, shares, 1.0)
    radius = dist[ok, -1]
    volume = (4.0 / 3.0) * np.pi * radius ** 3

    out[ok, 0] = (l1 - l2) / l1
    out[ok, 1] = (l2 - l3) / l1
    out[ok, 2] = l3 / l1
    out[ok, 3] = np.cbrt(l1 * l2 * l3)
    out[ok, 4] = (l1 - l3) / l1
    out[ok, 5] = -np.sum(shares * np.log(safe), axis=1)
    out[ok, 6] = total
    out[ok, 7] = l3 / total
    out[ok, 8] = normal_z[ok]
    out[ok, 9] = centroids[ok, 2]
    out[ok, 10] = np.where(volume > 0, k_neighbors / np.where(volume > 0,
                                                              volume, 1.0), 0.0)
    out[ok, 11] = radius
    out[ok, 12] = np.linalg.norm(means[ok] - centered[ok], axis=1)
    out[ok, 13] = 1.0 - normal_z[ok]
    out[ok, 14] = dist[ok].mean(axis=1)
    out[:, [0, 1, 2, 4, 7]] = np.clip(out[:, [0, 1, 2, 4, 7]], 0.0, 1.0)
    return out

def standardize(features):
    """Scales every column except the trailing constant slot to zero mean and
    unit variance. Constant columns are only centered.

    """
    features = np.array(features, dtype=np.float64)
    body = features[:, :-1]
    mean = body.mean(axis=0)
    std = body.std(axis=0)
    features[:, :-1] = (body - mean) / np.where(std > 0, std, 1.0)
    return features

def extract_local_features(voxels, k_neighbors=16, c=MAX_FEATURE_DIM,
                           source_scan_id=0):
    """Computes the standardized local features of a voxel cloud.

    For ``c < 16`` the first ``c - 1`` geometric slots are kept together with
    the constant slot.

    """
    slots = _select_slots(c)
    features = standardize(raw_features(voxels.centroids, k_neighbors)[:, slots])
    return LocalFeatureSet(features, source_scan_id)

def save_features(fs, path):
    write_feature_file(path, fs.features, fs.source_scan_id)

def load_features(path, standardize_features=False):
    """Reads a feature file.

    Features written by an external backbone may need the same per-scan
    standardization the built-in extractor applies; `standardize_features`
    applies it on import.

    """
    features, scan_id = read_feature_file(path)
    if standardize_features:
        features = standardize(features)
    return LocalFeatureSet(features, scan_id)
