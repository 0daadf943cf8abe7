#
# Copyright 2024-2026 Ghent University
#
# This file is part of vsc-subspacekit,
# originally created by the HPC team of Ghent University (http://ugent.be/hpc/en),
# with support of Ghent University (http://ugent.be/hpc),
# the Flemish Supercomputer Centre (VSC) (https://www.vscentrum.be),
# the Flemish Research Foundation (FWO) (http://www.fwo.be/en)
# and the Department of Economy, Science and Innovation (EWI) (http://www.ewi-vlaanderen.be/en).
#
# https://github.com/hpcugent/vsc-subspacekit
#
# All rights reserved.
#
"""
Affinity construction and normalized spectral clustering of coefficient matrices.
"""
from collections import namedtuple

import numpy as np

from vsc.subspacekit import SubspaceKitError
from vsc.subspacekit.numkernel import KMEANS_DEFAULT_RESTARTS, KTooLarge, as_matrix, kmeans_fit, symmetric_eig
from vsc.utils import fancylogger

DEGREE_EPSILON = 1e-12
THRESHOLD_RTOL = 1e-12

_log = fancylogger.getLogger(__name__, fname=False)

AffinityMatrix = namedtuple('AffinityMatrix', ['n', 'values'])


class SpectralError(SubspaceKitError):
    pass


class AllZeroRow(SpectralError):
    pass


class ClusterConfig(namedtuple('ClusterConfig', ['k', 'threshold_ratio', 'seed', 'kmeans_restarts'],
                               defaults=(1.0, 0, KMEANS_DEFAULT_RESTARTS))):
    __slots__ = ()

    def validate(self, n_samples=None):
        if self.k < 2:
            _log.raiseException(f"need at least 2 clusters, got k={self.k}", SpectralError)
        if n_samples is not None and self.k > n_samples:
            _log.raiseException(f"k={self.k} larger than the number of samples {n_samples}", KTooLarge)
        _check_ratio(self.threshold_ratio)
        if self.kmeans_restarts < 1:
            _log.raiseException(f"need at least one k-means restart, got {self.kmeans_restarts}", SpectralError)
        return self


def _check_ratio(threshold_ratio):
    if not 0 < threshold_ratio <= 1:
        _log.raiseException(f"threshold ratio must be in (0, 1], got {threshold_ratio}", SpectralError)


def _coefficient_values(b):
    values = as_matrix(getattr(b, 'values', b), 'coefficients')
    if values.shape[0] != values.shape[1]:
        _log.raiseException(f"coefficient matrix must be square, got {values.shape}", SpectralError)
    return values


def threshold_rows(magnitudes, threshold_ratio):
    """Per row keep the fewest largest entries holding threshold_ratio of the row total"""
    if threshold_ratio == 1:
        return magnitudes.copy()

    kept = np.zeros_like(magnitudes)
    for row, values in enumerate(magnitudes):
        order = np.argsort(-values, kind='stable')
        cumulative = np.cumsum(values[order])
        target = threshold_ratio * cumulative[-1] * (1 - THRESHOLD_RTOL)
        count = int(np.searchsorted(cumulative, target, side='left')) + 1
        keep = order[:count]
        kept[row, keep] = values[keep]
    return kept


def build_affinity(b, threshold_ratio=1.0):
    """Symmetric non-negative affinity from a coefficient matrix.

    Rows of |B| are thresholded to the smallest set of largest entries holding threshold_ratio
    of their mass, then A = (|B~| + |B~|^T) / 2 with a zero diagonal.

    @raise AllZeroRow: a row of B is entirely zero
    """
    _check_ratio(threshold_ratio)
    magnitudes = np.abs(_coefficient_values(b))

    zero_rows = np.flatnonzero(~magnitudes.any(axis=1))
    if zero_rows.size:
        _log.raiseException(f"coefficient rows {zero_rows[:10].tolist()} are entirely zero", AllZeroRow)

    kept = threshold_rows(magnitudes, threshold_ratio)
    values = (kept + kept.T) / 2.0
    np.fill_diagonal(values, 0.0)
    return AffinityMatrix(values.shape[0], values)


def spectral_embedding(a, k):
    """Row-normalized bottom-k eigenvectors of the symmetric normalized Laplacian of a.

    Eigenvector signs are fixed so that the largest-magnitude entry of each is positive.
    """
    values = as_matrix(getattr(a, 'values', a), 'affinity')
    degrees = values.sum(axis=1)

    if np.any(degrees <= 0):
        isolated = np.flatnonzero(degrees <= 0)
        _log.warning("spectral: %d isolated vertices (first %s), adding %s to all degrees",
                     isolated.size, isolated[:10].tolist(), DEGREE_EPSILON)
        degrees = degrees + DEGREE_EPSILON

    inv_sqrt = 1.0 / np.sqrt(degrees)
    laplacian = np.eye(values.shape[0]) - inv_sqrt[:, np.newaxis] * values * inv_sqrt[np.newaxis, :]
    laplacian = (laplacian + laplacian.T) / 2.0

    vectors = symmetric_eig(laplacian).eigenvectors[:, :k].copy()
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.where(vectors[pivots, np.arange(k)] < 0, -1.0, 1.0)
    vectors *= signs

    norms = np.linalg.norm(vectors, axis=1)
    norms[norms == 0] = 1.0
    return vectors / norms[:, np.newaxis]


def spectral_cluster(a, config):
    """Labels in [0, k) from normalized spectral clustering of affinity a"""
    n_samples = a.n if isinstance(a, AffinityMatrix) else np.shape(a)[0]
    config.validate(n_samples)

    embedding = spectral_embedding(a, config.k)
    result = kmeans_fit(embedding, config.k, seed=config.seed, restarts=config.kmeans_restarts)

    used = np.unique(result.labels).size
    if used < config.k:
        _log.warning("spectral: k-means left %d of %d clusters empty", config.k - used, config.k)

    return result.labels


def cluster_from_coefficients(b, config):
    """build_affinity followed by spectral_cluster"""
    return spectral_cluster(build_affinity(b, config.threshold_ratio), config)
