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
Dense linear algebra used by the rest of subspacekit: SPD solves, symmetric
eigendecomposition and seeded k-means.

All routines work on 64-bit numpy arrays, never modify their inputs and are
deterministic for a fixed seed.
"""
from collections import namedtuple

import numpy as np
import scipy.linalg

from vsc.subspacekit import SubspaceKitError
from vsc.utils import fancylogger

SYMMETRY_RTOL = 1e-12

KMEANS_DEFAULT_RESTARTS = 20
KMEANS_MAX_ITER = 300

_log = fancylogger.getLogger(__name__, fname=False)

EigenDecomposition = namedtuple('EigenDecomposition', ['eigenvalues', 'eigenvectors'])

KMeansResult = namedtuple('KMeansResult', ['labels', 'centers', 'inertia', 'inertia_history'])


class NumKernelError(SubspaceKitError):
    pass


class NotPositiveDefinite(NumKernelError):
    pass


class DimensionMismatch(NumKernelError):
    pass


class ConvergenceFailure(NumKernelError):
    pass


class EmptyInput(NumKernelError):
    pass


class KTooLarge(NumKernelError):
    pass


def as_matrix(data, name='matrix'):
    """Return data as a 2-d float64 array, rejecting empty or non-finite input"""
    mat = np.asarray(data, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat.reshape(-1, 1)
    if mat.ndim != 2:
        _log.raiseException(f"{name} must be 2-dimensional, got shape {mat.shape}", DimensionMismatch)
    if mat.size == 0:
        _log.raiseException(f"{name} is empty (shape {mat.shape})", EmptyInput)
    if not np.all(np.isfinite(mat)):
        _log.raiseException(f"{name} contains non-finite entries", NumKernelError)
    return mat


def check_symmetric(a, name='matrix'):
    """Raise DimensionMismatch unless a is square and symmetric within SYMMETRY_RTOL"""
    if a.shape[0] != a.shape[1]:
        _log.raiseException(f"{name} must be square, got shape {a.shape}", DimensionMismatch)

    if np.max(np.abs(a - a.T)) > SYMMETRY_RTOL * np.max(np.abs(a)):
        _log.raiseException(f"{name} is not symmetric within {SYMMETRY_RTOL} relative", DimensionMismatch)


def spd_solve(a, b):
    """Solve a x = b for symmetric positive definite a.

    Uses a Cholesky factorisation; a non-positive pivot raises NotPositiveDefinite.

    @type a: n x n array-like, symmetric positive definite
    @type b: n x m (or length n) array-like

    @return: x with the shape of b
    """
    a = as_matrix(a, 'a')
    b_arr = np.asarray(b, dtype=np.float64)
    vector_rhs = b_arr.ndim == 1
    b_mat = as_matrix(b_arr, 'b')

    check_symmetric(a, 'a')
    if a.shape[0] != b_mat.shape[0]:
        _log.raiseException(f"spd_solve: a is {a.shape}, b has {b_mat.shape[0]} rows", DimensionMismatch)

    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as err:
        _log.raiseException(f"spd_solve: Cholesky factorisation failed: {err}", NotPositiveDefinite)

    x = scipy.linalg.cho_solve(factor, b_mat, check_finite=False)
    if not np.all(np.isfinite(x)):
        _log.raiseException("spd_solve: solution is not finite", NotPositiveDefinite)

    return x.ravel() if vector_rhs else x


def spd_inverse(a):
    """Inverse of a symmetric positive definite matrix through its Cholesky factor"""
    a = as_matrix(a, 'a')
    inv = spd_solve(a, np.eye(a.shape[0]))
    # cho_solve leaves roundoff asymmetry of order eps
    return (inv + inv.T) / 2.0


def symmetric_eig(a):
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending.

    The LAPACK tridiagonal QR driver is used; it is deterministic for a given input.

    @return: EigenDecomposition(eigenvalues, eigenvectors) with orthonormal eigenvector columns
    """
    a = as_matrix(a, 'a')
    check_symmetric(a, 'a')

    try:
        eigenvalues, eigenvectors = scipy.linalg.eigh(a, driver='ev', check_finite=False)
    except np.linalg.LinAlgError as err:
        _log.raiseException(f"symmetric_eig: QR iteration did not converge: {err}", ConvergenceFailure)

    return EigenDecomposition(eigenvalues, eigenvectors)


def _sq_distances(points, centers):
    """Squared euclidean distances, points x centers"""
    diff = points[:, np.newaxis, :] - centers[np.newaxis, :, :]
    return np.einsum('ijk,ijk->ij', diff, diff)


def kmeans_plusplus(points, k, rng):
    """Pick k initial centers with k-means++ D^2 sampling"""
    n_points = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(0, n_points)]

    closest = _sq_distances(points, centers[:1]).ravel()
    for idx in range(1, k):
        total = closest.sum()
        if total > 0:
            choice = rng.choice(n_points, p=closest / total)
        else:
            # all points coincide with a center
            choice = rng.integers(0, n_points)
        centers[idx] = points[choice]
        closest = np.minimum(closest, _sq_distances(points, centers[idx:idx + 1]).ravel())

    return centers


def lloyd(points, centers, max_iter=KMEANS_MAX_ITER):
    """Run Lloyd iterations from the given centers until the labeling is stable.

    Empty clusters keep their previous center, so the inertia never increases.
    """
    centers = centers.copy()
    labels = None
    history = []

    for _ in range(max_iter):
        dist = _sq_distances(points, centers)
        new_labels = np.argmin(dist, axis=1)
        inertia = float(dist[np.arange(points.shape[0]), new_labels].sum())
        history.append(inertia)

        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels

        for cluster in range(centers.shape[0]):
            members = points[labels == cluster]
            if members.shape[0]:
                centers[cluster] = members.mean(axis=0)
    else:
        _log.debug("lloyd: reached max_iter %d", max_iter)

    return KMeansResult(labels, centers, history[-1], history)


def kmeans_fit(points, k, seed=0, restarts=KMEANS_DEFAULT_RESTARTS):
    """k-means with k-means++ seeding and several restarts.

    Every restart draws from its own child of numpy.random.SeedSequence(seed), so the
    outcome depends only on (points, k, seed, restarts).

    @return: KMeansResult of the restart with the smallest inertia (first one on ties)
    """
    points = as_matrix(points, 'points')
    n_points = points.shape[0]

    if k < 1 or restarts < 1:
        _log.raiseException(f"kmeans: need k >= 1 and restarts >= 1, got k={k} restarts={restarts}",
                            NumKernelError)
    if k > n_points:
        _log.raiseException(f"kmeans: k={k} larger than number of points {n_points}", KTooLarge)

    best = None
    for restart, child in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        rng = np.random.default_rng(child)
        result = lloyd(points, kmeans_plusplus(points, k, rng))
        _log.debug("kmeans restart %d: inertia %s after %d iterations", restart, result.inertia,
                   len(result.inertia_history))
        if best is None or result.inertia < best.inertia:
            best = result

    return best


def kmeans(points, k, seed=0, restarts=KMEANS_DEFAULT_RESTARTS):
    """Label vector of kmeans_fit"""
    return kmeans_fit(points, k, seed=seed, restarts=restarts).labels
