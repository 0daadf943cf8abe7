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
Closed-form ridge self-expression.

For a latent matrix X (one sample per row) and lambda > 0 the problem

    min_B ||X - B X||_F^2 + lambda ||B||_F^2   s.t. diag(B) = 0

is solved without iteration: with P = (X X^T + lambda I)^-1 the solution is
B_ij = -P_ij / P_ii for i != j and B_ii = 0.

Rows are samples, so the Gram matrix X X^T is N x N.
"""
from collections import namedtuple

import numpy as np

from vsc.subspacekit import SubspaceKitError
from vsc.subspacekit.numkernel import DimensionMismatch, as_matrix, spd_inverse, spd_solve
from vsc.utils import fancylogger

_log = fancylogger.getLogger(__name__, fname=False)

CoefficientMatrix = namedtuple('CoefficientMatrix', ['n', 'values'])
PrecisionMatrix = namedtuple('PrecisionMatrix', ['n', 'values'])


class SelfExpressError(SubspaceKitError):
    pass


class NonPositiveLambda(SelfExpressError):
    pass


class ZeroDiagonalPivot(SelfExpressError):
    pass


def coefficient_matrix(values):
    """Wrap a square array as CoefficientMatrix, forcing an exactly zero diagonal"""
    values = np.array(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        _log.raiseException(f"coefficient matrix must be square, got shape {values.shape}", DimensionMismatch)
    np.fill_diagonal(values, 0.0)
    return CoefficientMatrix(values.shape[0], values)


def _check_lambda(lambda_):
    if not lambda_ > 0:
        _log.raiseException(f"lambda must be strictly positive, got {lambda_}", NonPositiveLambda)


def _check_latent(latent):
    latent = as_matrix(latent, 'latent')
    if latent.shape[0] < 2:
        _log.raiseException(f"need at least 2 samples, got {latent.shape[0]}", DimensionMismatch)
    return latent


def gram_matrix(latent):
    """Inner products of the samples (rows) of latent"""
    return latent @ latent.T


def compute_p(latent, lambda_):
    """Regularised inverse Gram matrix P = (latent latent^T + lambda I)^-1.

    @type latent: N x d array-like, one sample per row
    @type lambda_: strictly positive float

    @raise NotPositiveDefinite: lambda is too small for the numeric range of the Gram matrix
    """
    _check_lambda(lambda_)
    latent = _check_latent(latent)

    shifted = gram_matrix(latent)
    shifted[np.diag_indices_from(shifted)] += lambda_

    values = spd_inverse(shifted)
    return PrecisionMatrix(values.shape[0], values)


def _precision_values(p):
    values = p.values if isinstance(p, PrecisionMatrix) else np.asarray(p, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        _log.raiseException(f"precision matrix must be square, got shape {values.shape}", DimensionMismatch)

    diag = np.diag(values)
    if np.any(diag <= 0):
        bad = np.flatnonzero(diag <= 0)
        _log.raiseException(f"precision matrix has non-positive diagonal at rows {bad[:10].tolist()}",
                            ZeroDiagonalPivot)
    return values, diag


def compute_b(p):
    """Coefficient matrix from a precision matrix, elementwise: B_ij = -P_ij / P_ii, B_ii = 0"""
    values, diag = _precision_values(p)

    b = values / (-diag[:, np.newaxis])
    np.fill_diagonal(b, 0.0)
    return CoefficientMatrix(b.shape[0], b)


def compute_b_matrix_form(p):
    """Coefficient matrix in matrix form, diagonal forced to zero.

    With samples as rows the matrix form reads I - diagMat(1 / diag(P)) P; the column-sample
    form I - P diagMat(1 / diag(P)) is its transpose. Kept as an independent check of compute_b.
    """
    values, diag = _precision_values(p)

    b = np.eye(values.shape[0]) - np.diag(1.0 / diag) @ values
    np.fill_diagonal(b, 0.0)
    return CoefficientMatrix(b.shape[0], b)


def solve_self_expression(latent, lambda_):
    """Closed-form zero-diagonal ridge self-expression coefficients of latent"""
    return compute_b(compute_p(latent, lambda_))


def rowwise_ridge_oracle(latent, lambda_, row):
    """Solve the ridge problem of a single row directly.

    min_b ||x_row - sum_{j != row} b_j x_j||^2 + lambda ||b||^2 through its (N-1)-variable
    normal equations (X_o X_o^T + lambda I) b_o = X_o x_row, X_o the other rows.

    @return: length N vector with a zero at position row
    """
    _check_lambda(lambda_)
    latent = _check_latent(latent)
    n_samples = latent.shape[0]
    if not 0 <= row < n_samples:
        _log.raiseException(f"row {row} out of range for {n_samples} samples", DimensionMismatch)

    others = np.delete(np.arange(n_samples), row)
    x_others = latent[others]

    normal = x_others @ x_others.T
    normal[np.diag_indices_from(normal)] += lambda_
    rhs = x_others @ latent[row]

    coef = np.zeros(n_samples, dtype=np.float64)
    coef[others] = spd_solve(normal, rhs)
    return coef


def self_expression_residual(latent, b):
    """Squared Frobenius norm of latent - B latent"""
    latent = as_matrix(latent, 'latent')
    values = b.values if isinstance(b, CoefficientMatrix) else as_matrix(b, 'b')

    if values.shape != (latent.shape[0], latent.shape[0]):
        _log.raiseException(f"coefficient matrix {values.shape} does not match {latent.shape[0]} samples",
                            DimensionMismatch)

    residual = latent - values @ latent
    return float(np.sum(residual * residual))
