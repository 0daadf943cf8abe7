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
Evaluation and data handling: clustering error under optimal label matching, synthetic
union-of-subspaces data, matrix files (.csv and .sscm) and directories of PGM images.

The .sscm format is the 4 byte magic 'SSCM', the number of rows and columns as unsigned
64-bit little-endian integers and the values as row-major 64-bit little-endian floats.
"""
import os
import re
import struct

from collections import namedtuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from vsc.subspacekit import SubspaceKitError
from vsc.utils import fancylogger

SSCM_MAGIC = b'SSCM'
SSCM_HEADER = struct.Struct('<4sQQ')
CSV_FORMAT = '%.17g'
PGM_SCALE = 255.0

_log = fancylogger.getLogger(__name__, fname=False)

_PGM_HEADER = re.compile(rb'\AP5(?:\s+|#[^\n]*\n)+?(\d+)(?:\s+|#[^\n]*\n)+?(\d+)(?:\s+|#[^\n]*\n)+?(\d+)\s')


class EvalDataError(SubspaceKitError):
    pass


class LengthMismatch(EvalDataError):
    pass


class InfeasibleSpec(EvalDataError):
    pass


class MalformedFile(EvalDataError):
    pass


class IoFailure(EvalDataError):
    pass


class EmptyDirectory(EvalDataError):
    pass


class SyntheticSpec(namedtuple('SyntheticSpec', [
        'k', 'subspace_dim', 'points_per_subspace', 'ambient_dim', 'noise_sigma', 'seed', 'orthogonal'],
        defaults=(0.0, 0, True))):
    """
    Union of k linear subspaces of dimension subspace_dim in an ambient_dim space.

    With orthogonal set the bases are mutually orthogonal, otherwise each basis is drawn on
    its own (independent but not orthogonal).
    """
    __slots__ = ()

    def validate(self):
        if min(self.k, self.subspace_dim, self.points_per_subspace, self.ambient_dim) < 1:
            _log.raiseException(f"all counts must be positive: {self}", InfeasibleSpec)
        if self.subspace_dim >= self.ambient_dim:
            _log.raiseException(f"subspace dimension {self.subspace_dim} must be smaller than the ambient "
                                f"dimension {self.ambient_dim}", InfeasibleSpec)
        if self.k * self.subspace_dim > self.ambient_dim:
            _log.raiseException(f"{self.k} subspaces of dimension {self.subspace_dim} cannot be independent in "
                                f"dimension {self.ambient_dim}", InfeasibleSpec)
        if not self.noise_sigma >= 0:
            _log.raiseException(f"noise sigma must be non-negative, got {self.noise_sigma}", InfeasibleSpec)
        return self


def as_labels(labels, name='labels'):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        _log.raiseException(f"{name} must be a non-empty vector, got shape {labels.shape}", EvalDataError)
    if labels.dtype.kind == 'f':
        if not np.all(labels == np.round(labels)):
            _log.raiseException(f"{name} must be integers", EvalDataError)
        labels = labels.astype(np.int64)
    if np.any(labels < 0):
        _log.raiseException(f"{name} must be non-negative", EvalDataError)
    return labels.astype(np.int64)


def confusion_matrix(pred, truth):
    """Counts of (predicted, true) label pairs over the labels that occur"""
    _, pred_idx = np.unique(pred, return_inverse=True)
    _, truth_idx = np.unique(truth, return_inverse=True)
    confusion = np.zeros((pred_idx.max() + 1, truth_idx.max() + 1), dtype=np.int64)
    np.add.at(confusion, (pred_idx, truth_idx), 1)
    return confusion


def clustering_error(pred, truth):
    """Fraction of samples misclassified under the best one-to-one label mapping.

    The mapping is the maximum weight assignment of the confusion matrix (Hungarian method).
    """
    pred = as_labels(pred, 'pred')
    truth = as_labels(truth, 'truth')
    if pred.size != truth.size:
        _log.raiseException(f"pred has {pred.size} labels, truth {truth.size}", LengthMismatch)

    confusion = confusion_matrix(pred, truth)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    matched = int(confusion[rows, cols].sum())
    return 1.0 - matched / pred.size


def generate_subspaces(spec):
    """Sample a noisy union of subspaces.

    Points of subspace i are basis_i c with c Gaussian and scaled to unit norm, stored
    class after class; Gaussian noise of deviation noise_sigma is added when positive.

    @return: (data N x ambient_dim, labels of length N)
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dim, ambient = spec.subspace_dim, spec.ambient_dim

    if spec.orthogonal:
        joint, _ = np.linalg.qr(rng.standard_normal((ambient, spec.k * dim)))
        bases = [joint[:, idx * dim:(idx + 1) * dim] for idx in range(spec.k)]
    else:
        bases = [np.linalg.qr(rng.standard_normal((ambient, dim)))[0] for _ in range(spec.k)]

    blocks = []
    for basis in bases:
        coef = rng.standard_normal((spec.points_per_subspace, dim))
        coef /= np.linalg.norm(coef, axis=1, keepdims=True)
        blocks.append(coef @ basis.T)

    data = np.vstack(blocks)
    if spec.noise_sigma > 0:
        data = data + spec.noise_sigma * rng.standard_normal(data.shape)

    labels = np.repeat(np.arange(spec.k), spec.points_per_subspace)
    _log.debug("generated %d points on %d subspaces of dimension %d in %d dimensions", data.shape[0], spec.k,
               dim, ambient)
    return data, labels


def _extension(path):
    ext = os.path.splitext(path)[1].lower()
    if ext not in ('.csv', '.sscm'):
        _log.raiseException(f"unsupported matrix file extension for {path}, use .csv or .sscm", MalformedFile)
    return ext


def _read_bytes(path):  # pylint: disable=inconsistent-return-statements
    try:
        with open(path, 'rb') as fp:
            return fp.read()
    except OSError as err:
        _log.raiseException(f"could not read {path}: {err}", IoFailure)


def _write_bytes(path, data):
    try:
        with open(path, 'wb') as fp:
            fp.write(data)
    except OSError as err:
        _log.raiseException(f"could not write {path}: {err}", IoFailure)


def load_matrix(path):
    """Matrix from a .csv or .sscm file"""
    ext = _extension(path)
    data = _read_bytes(path)

    if ext == '.sscm':
        if len(data) < SSCM_HEADER.size:
            _log.raiseException(f"{path} is too short for an sscm header", MalformedFile)
        magic, rows, cols = SSCM_HEADER.unpack_from(data)
        if magic != SSCM_MAGIC:
            _log.raiseException(f"{path} has bad magic {magic!r}", MalformedFile)
        if rows < 1 or cols < 1 or len(data) != SSCM_HEADER.size + 8 * rows * cols:
            _log.raiseException(f"{path} holds {len(data) - SSCM_HEADER.size} value bytes for a {rows}x{cols} matrix",
                                MalformedFile)
        matrix = np.frombuffer(data, dtype='<f8', offset=SSCM_HEADER.size).reshape(rows, cols).astype(np.float64)
    else:
        try:
            lines = [line for line in data.decode('ascii').splitlines() if line.strip()]
            matrix = np.loadtxt(lines, delimiter=',', dtype=np.float64, ndmin=2)
        except (UnicodeDecodeError, ValueError) as err:
            _log.raiseException(f"could not parse {path}: {err}", MalformedFile)
        if matrix.size == 0:
            _log.raiseException(f"{path} holds no values", MalformedFile)

    if not np.all(np.isfinite(matrix)):
        _log.raiseException(f"{path} holds non-finite values", MalformedFile)
    return matrix


def save_matrix(path, matrix):
    """Write matrix to a .csv or .sscm file, chosen by extension"""
    ext = _extension(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(-1, 1)

    if ext == '.sscm':
        header = SSCM_HEADER.pack(SSCM_MAGIC, matrix.shape[0], matrix.shape[1])
        _write_bytes(path, header + np.ascontiguousarray(matrix, dtype='<f8').tobytes())
    else:
        rows = [','.join(CSV_FORMAT % value for value in row) for row in matrix]
        _write_bytes(path, ('\n'.join(rows) + '\n').encode('ascii'))
    _log.debug("wrote %dx%d matrix to %s", matrix.shape[0], matrix.shape[1], path)


def load_labels(path):
    """Label vector from a one-column matrix file"""
    matrix = load_matrix(path)
    if matrix.shape[1] != 1:
        _log.raiseException(f"{path} must hold one label per line, got {matrix.shape[1]} columns", MalformedFile)
    return as_labels(matrix.ravel(), path)


def save_labels(path, labels):
    """Write labels one integer per line"""
    labels = as_labels(labels)
    _write_bytes(path, ''.join(f"{label}\n" for label in labels).encode('ascii'))


def read_pgm(path):
    """8-bit binary (P5) PGM image as a 2-d uint8 array"""
    data = _read_bytes(path)
    match = _PGM_HEADER.match(data)
    if not match:
        _log.raiseException(f"{path} is not a binary PGM file", MalformedFile)

    width, height, maxval = (int(x) for x in match.groups())
    if not 0 < maxval < 256:
        _log.raiseException(f"{path}: only 8-bit PGM is supported, maxval is {maxval}", MalformedFile)
    if len(data) - match.end() < width * height:
        _log.raiseException(f"{path}: expected {width * height} pixels, got {len(data) - match.end()}",
                            MalformedFile)

    return np.frombuffer(data, dtype=np.uint8, count=width * height, offset=match.end()).reshape(height, width)


def _bilinear_weights(size_in, size_out):
    """size_out x size_in interpolation matrix with half-pixel centers"""
    weights = np.zeros((size_out, size_in))
    for idx in range(size_out):
        src = min(max((idx + 0.5) * size_in / size_out - 0.5, 0.0), size_in - 1)
        low = int(np.floor(src))
        high = min(low + 1, size_in - 1)
        frac = src - low
        weights[idx, low] += 1.0 - frac
        weights[idx, high] += frac
    return weights


def resize_bilinear(image, target_h, target_w):
    """Bilinear resize of a 2-d image"""
    image = np.asarray(image, dtype=np.float64)
    return _bilinear_weights(image.shape[0], target_h) @ image @ _bilinear_weights(image.shape[1], target_w).T


def load_pgm_dir(path, target_h, target_w):
    """All .pgm images of a directory, sorted by file name, resized and scaled to [0, 1].

    @return: N x (target_h * target_w) data matrix, one row-major flattened image per row
    """
    if target_h < 1 or target_w < 1:
        _log.raiseException(f"target size must be positive, got {target_h}x{target_w}", EvalDataError)
    try:
        names = sorted(name for name in os.listdir(path) if name.lower().endswith('.pgm'))
    except OSError as err:
        _log.raiseException(f"could not list {path}: {err}", IoFailure)

    if not names:
        _log.raiseException(f"no PGM files in {path}", EmptyDirectory)

    rows = [resize_bilinear(read_pgm(os.path.join(path, name)), target_h, target_w).ravel() / PGM_SCALE
            for name in names]
    _log.info("Loaded %d images from %s at %dx%d", len(rows), path, target_h, target_w)
    return np.vstack(rows)
