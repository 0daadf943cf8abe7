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
Training loops: auto-encoder pretraining, deep closed-form subspace clustering and the
learnable self-expressive layer baseline.

All loops are full batch: one epoch is one forward/backward pass over all N samples.
"""
import time

from collections import namedtuple

import numpy as np

from vsc.subspacekit import SubspaceKitError
from vsc.subspacekit.evaldata import IoFailure
from vsc.subspacekit.neuralnet import (
    SELF_EXPRESSIVE_BLOCK, Mode, ShapeMismatch, adam_step, backward, dsc_loss_terms, forward, init_adam,
    init_params, reconstruction_gradient, reconstruction_loss, self_expression_backward, self_expression_forward,
)
from vsc.subspacekit.selfexpress import CoefficientMatrix, coefficient_matrix, solve_self_expression
from vsc.utils import fancylogger

NUMERIC_WIDTHS = {32: np.float32, 64: np.float64}

_log = fancylogger.getLogger(__name__, fname=False)

FitResult = namedtuple('FitResult', ['coefficient', 'final_params', 'loss_history'])
StepResult = namedtuple('StepResult', ['loss', 'gradients', 'coefficient', 'running_updates'])


class PipelineError(SubspaceKitError):
    pass


class NonFiniteLoss(PipelineError):
    pass


class TrainConfig(namedtuple('TrainConfig', [
        'lambda_', 'lambda1', 'lambda2', 'learning_rate', 'epochs', 'seed', 'numeric_width', 'squared_l2'],
        defaults=(1.0, 1.0, 1e-3, 200, 0, 64, True))):
    """
    Training configuration.

    lambda_ is the ridge weight of the closed-form self-expression, lambda1 and lambda2 weigh
    the regularisation and self-expression terms of the baseline loss.
    """
    __slots__ = ()

    def validate(self, method='dcfsc'):
        """Raise PipelineError for a configuration that cannot be trained"""
        if method == 'dcfsc' and not (self.lambda_ is not None and self.lambda_ > 0):
            _log.raiseException(f"lambda must be strictly positive, got {self.lambda_}", PipelineError)
        if self.lambda1 < 0 or self.lambda2 < 0:
            _log.raiseException(f"lambda1 and lambda2 must be non-negative, got {self.lambda1}, {self.lambda2}",
                                PipelineError)
        if not self.learning_rate > 0:
            _log.raiseException(f"learning rate must be strictly positive, got {self.learning_rate}", PipelineError)
        if self.epochs < 0:
            _log.raiseException(f"epochs must be non-negative, got {self.epochs}", PipelineError)
        if self.numeric_width not in NUMERIC_WIDTHS:
            _log.raiseException(f"numeric width must be one of {sorted(NUMERIC_WIDTHS)}, got {self.numeric_width}",
                                PipelineError)
        return self

    @property
    def dtype(self):
        return NUMERIC_WIDTHS[self.numeric_width]


class TrainLog:
    """Tab-separated epoch, loss and wall-clock seconds records, one per line"""

    def __init__(self, path=None):
        self.log = fancylogger.getLogger(name=self.__class__.__name__, fname=False)
        self.path = path
        self.records = []
        self._fp = None
        self._start = None
        if path:
            try:
                self._fp = open(path, 'w')  # pylint: disable=consider-using-with
            except OSError as err:
                self.log.raiseException(f"could not write training log {path}: {err}", IoFailure)

    def stage(self, name):
        """Start a new stage: reset the clock and mark the stage in the file"""
        self._start = time.time()
        if self._fp:
            self._fp.write(f"# {name}\n")

    def record(self, epoch, loss):
        if self._start is None:
            self._start = time.time()
        seconds = time.time() - self._start
        self.records.append((epoch, loss, seconds))
        if self._fp:
            self._fp.write(f"{epoch}\t{loss!r}\t{seconds:.6f}\n")
        self.log.debug("epoch %d: loss %s (%.3fs)", epoch, loss, seconds)

    def close(self):
        if self._fp:
            self._fp.close()
            self._fp = None
            self.log.info("Wrote training log to %s", self.path)


def prepare_data(spec, data, dtype=np.float64):
    """Reshape an N x D data matrix to N x spec.input_shape"""
    data = np.asarray(data, dtype=dtype)
    if data.ndim < 2 or data.shape[0] < 1:
        _log.raiseException(f"data must hold at least one sample per row, got shape {data.shape}", ShapeMismatch)

    n_samples = data.shape[0]
    if int(np.prod(data.shape[1:])) != int(np.prod(spec.input_shape)):
        _log.raiseException(f"{spec.name} expects samples of shape {spec.input_shape}, got {data.shape[1:]}",
                            ShapeMismatch)
    return data.reshape((n_samples,) + spec.input_shape)


def _check_loss(loss, epoch, stage):
    if not np.isfinite(loss):
        _log.raiseException(f"{stage}: loss became {loss} at epoch {epoch}", NonFiniteLoss)


def _start_params(spec, config, params):
    if params is None:
        params = init_params(spec, seed=config.seed, dtype=config.dtype)
    return params.astype(config.dtype)


def autoencoder_step(spec, params, x):
    """Loss and gradients of the plain reconstruction objective"""
    x_hat, tape = forward(spec, params, x, Mode.TRAIN)
    loss = reconstruction_loss(x, x_hat)
    grads = backward(tape, reconstruction_gradient(x, x_hat), params)
    return StepResult(loss, grads.blocks, None, tape.running_updates)


def pretrain_autoencoder(spec, data, config, params=None, trainlog=None):
    """Minimise the reconstruction loss of the auto-encoder with full-batch Adam.

    Any self-expressive layer of spec is bypassed and left untouched.

    @return: NetworkParams after config.epochs updates
    """
    config.validate(method='pretrain')
    x = prepare_data(spec, data, config.dtype)
    params = _start_params(spec, config, params)
    state = init_adam(params)

    if trainlog:
        trainlog.stage('pretrain')
    _log.info("Pretraining %s for %d epochs on %d samples", spec.name, config.epochs, x.shape[0])

    history = []
    for epoch in range(config.epochs):
        step = autoencoder_step(spec, params, x)
        _check_loss(step.loss, epoch, 'pretrain')
        history.append(step.loss)
        if trainlog:
            trainlog.record(epoch, step.loss)
        params = params.replace(step.running_updates)
        params, state = adam_step(params, step.gradients, state, lr=config.learning_rate)

    if history:
        _log.info("Pretraining done: loss %s -> %s", history[0], history[-1])
    return params


def _flat(latent):
    return latent.reshape(latent.shape[0], -1)


def dcfsc_step(spec, params, x, lambda_, frozen_b=None):
    """Loss and gradients of one closed-form epoch.

    The coefficients are computed from the current latent code in 64-bit and enter the
    decoder input as a constant: only the latent operand of B z carries a gradient. With
    frozen_b the given coefficients are used instead of recomputing them.
    """
    latent, enc_tape = forward(spec.encoder, params, x, Mode.TRAIN)
    z = _flat(latent)

    if frozen_b is None:
        b = solve_self_expression(z.astype(np.float64), lambda_)
    else:
        b = frozen_b if isinstance(frozen_b, CoefficientMatrix) else coefficient_matrix(frozen_b)

    z_se, se_cache = self_expression_forward(b.values.astype(z.dtype), z, stop_gradient=True)
    x_hat, dec_tape = forward(spec.decoder, params, z_se.reshape(latent.shape), Mode.TRAIN)

    loss = reconstruction_loss(x, x_hat)
    dec_grads = backward(dec_tape, reconstruction_gradient(x, x_hat), params)
    dlatent, _ = self_expression_backward(se_cache, _flat(dec_grads.input_gradient))
    enc_grads = backward(enc_tape, dlatent.reshape(latent.shape), params)

    grads = dict(enc_grads.blocks)
    grads.update(dec_grads.blocks)
    running = dict(enc_tape.running_updates)
    running.update(dec_tape.running_updates)
    return StepResult(loss, grads, b, running)


def _check_no_self_expressive(spec, params):
    if spec.self_expressive or SELF_EXPRESSIVE_BLOCK in params:
        _log.raiseException(f"{spec.name} has a learnable self-expressive layer, the closed-form fit has none",
                            PipelineError)


def fit_dcfsc(spec, data, config, params=None, trainlog=None):
    """Deep closed-form subspace clustering.

    Every epoch encodes all samples, solves the ridge self-expression of the latent code in
    closed form, decodes B z and takes one Adam step on the reconstruction loss.

    @type params: start parameters, typically from pretrain_autoencoder (default: seeded init)

    @return: FitResult with the coefficients of the final epoch (or of params when epochs is 0)
    """
    config.validate(method='dcfsc')
    x = prepare_data(spec, data, config.dtype)
    params = _start_params(spec, config, params)
    _check_no_self_expressive(spec, params)
    state = init_adam(params)

    if trainlog:
        trainlog.stage('dcfsc')
    _log.info("Fitting dcfsc on %s for %d epochs, lambda %s", spec.name, config.epochs, config.lambda_)

    history = []
    coefficient = None
    for epoch in range(config.epochs):
        step = dcfsc_step(spec, params, x, config.lambda_)
        _check_loss(step.loss, epoch, 'dcfsc')
        history.append(step.loss)
        coefficient = step.coefficient
        if trainlog:
            trainlog.record(epoch, step.loss)
        params = params.replace(step.running_updates)
        params, state = adam_step(params, step.gradients, state, lr=config.learning_rate)

    if coefficient is None:
        latent, _ = forward(spec.encoder, params, x, Mode.TRAIN)
        coefficient = solve_self_expression(_flat(latent).astype(np.float64), config.lambda_)

    if history:
        _log.info("dcfsc done: loss %s -> %s", history[0], history[-1])
    return FitResult(coefficient, params, history)


def dsc_step(spec, params, x, config):
    """Loss and gradients of one epoch of the learnable self-expressive baseline.

    The diagonal of the coefficient gradient is zeroed, so a zero-diagonal layer stays so.
    """
    latent, enc_tape = forward(spec.encoder, params, x, Mode.TRAIN)
    z = _flat(latent)
    coef = params[SELF_EXPRESSIVE_BLOCK]

    z_se, se_cache = self_expression_forward(coef, z, stop_gradient=False)
    x_hat, dec_tape = forward(spec.decoder, params, z_se.reshape(latent.shape), Mode.TRAIN)

    terms = dsc_loss_terms(x, x_hat, z, z_se, coef, config.lambda1, config.lambda2, squared=config.squared_l2)
    dec_grads = backward(dec_tape, reconstruction_gradient(x, x_hat), params)

    residual = z - z_se
    dz_se = _flat(dec_grads.input_gradient) - config.lambda2 * residual
    dlatent, dcoef = self_expression_backward(se_cache, dz_se)
    dlatent = dlatent + config.lambda2 * residual

    if config.squared_l2:
        dcoef = dcoef + 2.0 * config.lambda1 * coef
    else:
        norm = np.sqrt(np.sum(coef * coef))
        if norm > 0:
            dcoef = dcoef + config.lambda1 * coef / norm
    np.fill_diagonal(dcoef, 0.0)

    enc_grads = backward(enc_tape, dlatent.reshape(latent.shape), params)

    grads = dict(enc_grads.blocks)
    grads.update(dec_grads.blocks)
    grads[SELF_EXPRESSIVE_BLOCK] = dcoef.astype(coef.dtype)
    running = dict(enc_tape.running_updates)
    running.update(dec_tape.running_updates)
    return StepResult(float(sum(terms)), grads, None, running)


def fit_dsc_baseline(spec, data, config, params=None, trainlog=None):
    """Learnable self-expressive layer baseline.

    Joint full-batch Adam over encoder, N x N self-expressive coefficients and decoder.
    spec must carry a self-expressive layer for exactly N samples; the coefficients start at
    zero unless params provides them (pretrained auto-encoder parameters without the layer
    get a zero layer added).

    @return: FitResult with the trained coefficients, diagonal zero
    """
    config.validate(method='dsc')
    x = prepare_data(spec, data, config.dtype)
    n_samples = x.shape[0]

    if spec.self_expressive != n_samples:
        _log.raiseException(f"{spec.name} has a self-expressive layer for {spec.self_expressive} samples, "
                            f"data has {n_samples}", ShapeMismatch)

    if params is not None and SELF_EXPRESSIVE_BLOCK not in params:
        blocks = dict(params.blocks)
        blocks[SELF_EXPRESSIVE_BLOCK] = np.zeros((n_samples, n_samples))
        params = type(params)(blocks)
    params = _start_params(spec, config, params)

    coef = params[SELF_EXPRESSIVE_BLOCK].copy()
    np.fill_diagonal(coef, 0.0)
    params = params.replace({SELF_EXPRESSIVE_BLOCK: coef})
    state = init_adam(params)

    if trainlog:
        trainlog.stage('dsc')
    _log.info("Fitting dsc baseline on %s for %d epochs, lambda1 %s lambda2 %s", spec.name, config.epochs,
              config.lambda1, config.lambda2)

    history = []
    for epoch in range(config.epochs):
        step = dsc_step(spec, params, x, config)
        _check_loss(step.loss, epoch, 'dsc')
        history.append(step.loss)
        if trainlog:
            trainlog.record(epoch, step.loss)
        params = params.replace(step.running_updates)
        params, state = adam_step(params, step.gradients, state, lr=config.learning_rate)

    if history:
        _log.info("dsc done: loss %s -> %s", history[0], history[-1])
    return FitResult(coefficient_matrix(params[SELF_EXPRESSIVE_BLOCK]), params, history)


def fit_shallow(data, config):
    """Closed-form self-expression of the raw data, no network"""
    config.validate(method='dcfsc')
    flat = np.asarray(data, dtype=np.float64)
    flat = flat.reshape(flat.shape[0], -1)
    return FitResult(solve_self_expression(flat, config.lambda_), None, [])
