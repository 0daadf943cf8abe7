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
Small layer-wise network engine for the auto-encoders.

Supported layers: dense, 2-d convolution (NHWC, same padding, optionally transposed and
optionally followed by batch normalisation), rectifier and a stop-gradient marker.
forward() records a tape, backward() walks it in reverse and returns the exact gradient of
every trainable block. Optimisation is done with adam_step().

Parameter blocks are named '<layer>/<block>', e.g. 'enc1/kernel' or 'dec2/moving_variance'.
"""
import struct

from collections import OrderedDict, namedtuple
from enum import Enum

import numpy as np

from vsc.subspacekit import SubspaceKitError
from vsc.subspacekit.evaldata import IoFailure
from vsc.utils import fancylogger

BATCHNORM_EPSILON = 1e-3
BATCHNORM_MOMENTUM = 0.99

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

CHECKPOINT_MAGIC = b'SKCP'
CHECKPOINT_VERSION = 1

SELF_EXPRESSIVE_BLOCK = 'self_expressive/coef'
NON_TRAINABLE_SUFFIXES = ('/moving_mean', '/moving_variance')

_log = fancylogger.getLogger(__name__, fname=False)


class Mode(Enum):
    TRAIN = 'train'
    EVAL = 'eval'


Conv2D = namedtuple('Conv2D',
    ['name', 'kernel_h', 'kernel_w', 'in_channels', 'out_channels',
     'stride', 'has_bias', 'has_batchnorm', 'transpose', 'bias_width'],
    defaults=(1, True, False, False, None))
# bias_width only differs from out_channels for audit-only layers

Dense = namedtuple('Dense', ['name', 'in_dim', 'out_dim', 'has_bias', 'init'], defaults=(True, 'he'))

Activation = namedtuple('Activation', ['name', 'kind'], defaults=('relu',))

StopGradientMarker = namedtuple('StopGradientMarker', ['name'])

LayerCount = namedtuple('LayerCount', ['name', 'count'])
ParamAudit = namedtuple('ParamAudit', ['total', 'layers'])

GradientSet = namedtuple('GradientSet', ['blocks', 'input_gradient'])
AdamState = namedtuple('AdamState', ['step', 'm', 'v'])
LossTerms = namedtuple('LossTerms', ['reconstruction', 'regularisation', 'self_expression'])


class NeuralNetError(SubspaceKitError):
    pass


class ShapeMismatch(NeuralNetError):
    pass


class StaleTape(NeuralNetError):
    pass


class MalformedCheckpoint(NeuralNetError):
    pass


def _same_padding(size, kernel, stride):
    """Output size and (before, after) padding of a same-padded strided convolution"""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def layer_output_shape(layer, in_shape):
    """Per-sample output shape of layer for per-sample input shape in_shape"""
    in_shape = tuple(in_shape)

    if isinstance(layer, Dense):
        if in_shape != (layer.in_dim,):
            raise ShapeMismatch(f"layer {layer.name} expects ({layer.in_dim},), got {in_shape}")
        return (layer.out_dim,)

    if isinstance(layer, Conv2D):
        if len(in_shape) != 3 or in_shape[2] != layer.in_channels:
            raise ShapeMismatch(f"layer {layer.name} expects (H, W, {layer.in_channels}), got {in_shape}")
        height, width, _ = in_shape
        if layer.transpose:
            return (height * layer.stride, width * layer.stride, layer.out_channels)
        return (_same_padding(height, layer.kernel_h, layer.stride)[0],
                _same_padding(width, layer.kernel_w, layer.stride)[0],
                layer.out_channels)

    return in_shape


class NetworkSpec:
    """
    Layer-by-layer description of a network.

    For an auto-encoder, split is the number of encoder layers: the encoder output is the
    latent code and the decoder consumes it. self_expressive is the number of samples N of a
    learnable N x N self-expressive layer between both halves, or None.
    """

    def __init__(self, layers, input_shape, name=None, split=None, self_expressive=None):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(x) for x in input_shape)
        self.name = name or 'network'
        self.split = len(self.layers) if split is None else split
        self.self_expressive = self_expressive

        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ShapeMismatch(f"network {self.name} has duplicate layer names {names}")

        # validates that adjacent layers compose
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer_output_shape(layer, self.shapes[-1]))

    @property
    def output_shape(self):
        return self.shapes[-1]

    @property
    def latent_shape(self):
        return self.shapes[self.split]

    @property
    def latent_dim(self):
        return int(np.prod(self.latent_shape))

    @property
    def encoder(self):
        return NetworkSpec(self.layers[:self.split], self.input_shape, name=f"{self.name}-encoder")

    @property
    def decoder(self):
        return NetworkSpec(self.layers[self.split:], self.latent_shape, name=f"{self.name}-decoder")

    def with_self_expressive(self, n_samples):
        """Copy of this spec with a learnable self-expressive layer for n_samples (None drops it)"""
        return NetworkSpec(self.layers, self.input_shape, name=self.name, split=self.split,
                           self_expressive=n_samples)

    def __repr__(self):
        return (f"NetworkSpec(name={self.name!r}, input_shape={self.input_shape}, layers={len(self.layers)}, "
                f"split={self.split}, self_expressive={self.self_expressive})")


class NetworkParams:
    """Ordered named parameter blocks of a network"""

    def __init__(self, blocks):
        self.blocks = OrderedDict(blocks)

    def __getitem__(self, name):
        return self.blocks[name]

    def __contains__(self, name):
        return name in self.blocks

    def names(self):
        return list(self.blocks)

    def trainable_names(self):
        return [name for name in self.blocks if not name.endswith(NON_TRAINABLE_SUFFIXES)]

    @property
    def dtype(self):
        return next(iter(self.blocks.values())).dtype if self.blocks else np.dtype(np.float64)

    def replace(self, updates):
        """New NetworkParams with the given blocks replaced, shapes are checked"""
        blocks = OrderedDict(self.blocks)
        for name, value in updates.items():
            if name not in blocks:
                raise ShapeMismatch(f"unknown parameter block {name}")
            if blocks[name].shape != value.shape:
                raise ShapeMismatch(f"block {name} has shape {blocks[name].shape}, update has {value.shape}")
            blocks[name] = value
        return NetworkParams(blocks)

    def subset(self, spec):
        """Blocks belonging to the layers of spec"""
        prefixes = tuple(f"{layer.name}/" for layer in spec.layers)
        return NetworkParams((n, v) for n, v in self.blocks.items() if n.startswith(prefixes))

    def astype(self, dtype):
        return NetworkParams((n, v.astype(dtype)) for n, v in self.blocks.items())

    def equals(self, other):
        """Bitwise equality of names, shapes and values"""
        return (self.names() == other.names() and
                all(np.array_equal(self[n], other[n]) for n in self.names()))


def init_params(spec, seed=0, dtype=np.float64):
    """Seeded parameters for spec.

    Kernels and dense weights are He-scaled Gaussians (or identity for Dense(init='identity')),
    biases zero, batch norm gamma 1, beta 0, moving mean 0, moving variance 1 and the
    self-expressive coefficients zero.
    """
    rng = np.random.default_rng(seed)
    blocks = OrderedDict()

    for layer in spec.layers:
        if isinstance(layer, Conv2D):
            fan_in = layer.kernel_h * layer.kernel_w * layer.in_channels
            if layer.transpose:
                shape = (layer.kernel_h, layer.kernel_w, layer.out_channels, layer.in_channels)
            else:
                shape = (layer.kernel_h, layer.kernel_w, layer.in_channels, layer.out_channels)
            blocks[f"{layer.name}/kernel"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            if layer.has_batchnorm:
                blocks[f"{layer.name}/gamma"] = np.ones(layer.out_channels)
                blocks[f"{layer.name}/beta"] = np.zeros(layer.out_channels)
                blocks[f"{layer.name}/moving_mean"] = np.zeros(layer.out_channels)
                blocks[f"{layer.name}/moving_variance"] = np.ones(layer.out_channels)
            elif layer.has_bias:
                blocks[f"{layer.name}/bias"] = np.zeros(layer.bias_width or layer.out_channels)

        elif isinstance(layer, Dense):
            if layer.init == 'identity':
                weights = np.eye(layer.in_dim, layer.out_dim)
            elif layer.init == 'he':
                weights = rng.normal(0.0, np.sqrt(2.0 / layer.in_dim), size=(layer.in_dim, layer.out_dim))
            else:
                raise NeuralNetError(f"unknown init {layer.init} for layer {layer.name}")
            blocks[f"{layer.name}/weights"] = weights
            if layer.has_bias:
                blocks[f"{layer.name}/bias"] = np.zeros(layer.out_dim)

    if spec.self_expressive:
        blocks[SELF_EXPRESSIVE_BLOCK] = np.zeros((spec.self_expressive, spec.self_expressive))

    return NetworkParams((name, value.astype(dtype)) for name, value in blocks.items())


def param_count(spec):
    """Exact number of parameter values of spec, with a per-layer breakdown.

    A convolution with batch normalisation carries no bias and 4 values per output channel
    (gamma, beta, moving mean, moving variance). The self-expressive layer counts N^2.
    Layers without parameters are left out of the breakdown.

    @return: ParamAudit(total, [LayerCount(name, count), ...])
    """
    layers = []
    for idx, layer in enumerate(spec.layers):
        if idx == spec.split and spec.self_expressive:
            layers.append(LayerCount('self-expressive', spec.self_expressive ** 2))

        if isinstance(layer, Conv2D):
            count = layer.kernel_h * layer.kernel_w * layer.in_channels * layer.out_channels
            if layer.has_batchnorm:
                count += 4 * layer.out_channels
            elif layer.has_bias:
                count += layer.bias_width or layer.out_channels
            layers.append(LayerCount(layer.name, count))
        elif isinstance(layer, Dense):
            count = layer.in_dim * layer.out_dim + (layer.out_dim if layer.has_bias else 0)
            layers.append(LayerCount(layer.name, count))

    if spec.split == len(spec.layers) and spec.self_expressive:
        layers.append(LayerCount('self-expressive', spec.self_expressive ** 2))

    return ParamAudit(sum(layer.count for layer in layers), layers)


def self_expressive_bytes(n_samples, width=64):
    """Storage of an N x N self-expressive layer at the given float width in bits"""
    return n_samples * n_samples * width // 8


class Tape:
    """Record of one forward pass, consumed by a single backward pass"""

    def __init__(self, spec, mode):
        self.spec = spec
        self.mode = mode
        self.records = []
        self.running_updates = OrderedDict()
        self.consumed = False


def _conv_forward(layer, params, x):
    kernel = params[f"{layer.name}/kernel"]
    n_samples, height, width, _ = x.shape
    stride = layer.stride

    if layer.transpose:
        out_h, out_w = height * stride, width * stride
        _, pad_t, pad_b = _same_padding(out_h, layer.kernel_h, stride)
        _, pad_l, pad_r = _same_padding(out_w, layer.kernel_w, stride)
        padded = np.zeros((n_samples, out_h + pad_t + pad_b, out_w + pad_l + pad_r, layer.out_channels),
                          dtype=x.dtype)
        for i in range(layer.kernel_h):
            for j in range(layer.kernel_w):
                padded[:, i:i + stride * (height - 1) + 1:stride,
                       j:j + stride * (width - 1) + 1:stride, :] += x @ kernel[i, j].T
        y = padded[:, pad_t:pad_t + out_h, pad_l:pad_l + out_w, :].copy()
        cache = (x, None, (pad_t, pad_l), padded.shape)
    else:
        out_h, pad_t, pad_b = _same_padding(height, layer.kernel_h, stride)
        out_w, pad_l, pad_r = _same_padding(width, layer.kernel_w, stride)
        padded = np.pad(x, ((0, 0), (pad_t, pad_b), (pad_l, pad_r), (0, 0)))
        y = np.zeros((n_samples, out_h, out_w, layer.out_channels), dtype=x.dtype)
        for i in range(layer.kernel_h):
            for j in range(layer.kernel_w):
                y += padded[:, i:i + stride * (out_h - 1) + 1:stride,
                            j:j + stride * (out_w - 1) + 1:stride, :] @ kernel[i, j]
        cache = (x, padded, (pad_t, pad_l), y.shape)

    if not layer.has_batchnorm and layer.has_bias:
        bias = params[f"{layer.name}/bias"]
        if bias.shape != (layer.out_channels,):
            raise ShapeMismatch(f"layer {layer.name} has bias width {bias.shape[0]} for "
                                f"{layer.out_channels} output channels, it can only be audited")
        y = y + bias

    return y, cache


def _conv_backward(layer, params, cache, dy):
    kernel = params[f"{layer.name}/kernel"]
    x, padded, (pad_t, pad_l), big_shape = cache
    _, height, width, _ = x.shape
    stride = layer.stride
    grads = {}
    dkernel = np.zeros_like(kernel)

    if layer.transpose:
        out_h, out_w = dy.shape[1:3]
        dpadded = np.zeros(big_shape, dtype=dy.dtype)
        dpadded[:, pad_t:pad_t + out_h, pad_l:pad_l + out_w, :] = dy
        dx = np.zeros_like(x)
        flat_x = x.reshape(-1, layer.in_channels)
        for i in range(layer.kernel_h):
            for j in range(layer.kernel_w):
                window = dpadded[:, i:i + stride * (height - 1) + 1:stride, j:j + stride * (width - 1) + 1:stride, :]
                dx += window @ kernel[i, j]
                dkernel[i, j] = window.reshape(-1, layer.out_channels).T @ flat_x
    else:
        out_h, out_w = dy.shape[1:3]
        dpadded = np.zeros_like(padded)
        flat_dy = dy.reshape(-1, layer.out_channels)
        for i in range(layer.kernel_h):
            for j in range(layer.kernel_w):
                rows = slice(i, i + stride * (out_h - 1) + 1, stride)
                cols = slice(j, j + stride * (out_w - 1) + 1, stride)
                dkernel[i, j] = padded[:, rows, cols, :].reshape(-1, layer.in_channels).T @ flat_dy
                dpadded[:, rows, cols, :] += dy @ kernel[i, j].T
        dx = dpadded[:, pad_t:pad_t + height, pad_l:pad_l + width, :]

    grads[f"{layer.name}/kernel"] = dkernel
    if not layer.has_batchnorm and layer.has_bias:
        grads[f"{layer.name}/bias"] = dy.sum(axis=(0, 1, 2))

    return dx, grads


def _batchnorm_forward(layer, params, x, mode, running_updates):
    gamma = params[f"{layer.name}/gamma"]
    beta = params[f"{layer.name}/beta"]

    if mode is Mode.TRAIN:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        moving_mean = params[f"{layer.name}/moving_mean"]
        moving_var = params[f"{layer.name}/moving_variance"]
        running_updates[f"{layer.name}/moving_mean"] = (
            BATCHNORM_MOMENTUM * moving_mean + (1 - BATCHNORM_MOMENTUM) * mean).astype(moving_mean.dtype)
        running_updates[f"{layer.name}/moving_variance"] = (
            BATCHNORM_MOMENTUM * moving_var + (1 - BATCHNORM_MOMENTUM) * var).astype(moving_var.dtype)
    else:
        mean = params[f"{layer.name}/moving_mean"]
        var = params[f"{layer.name}/moving_variance"]

    inv_std = 1.0 / np.sqrt(var + BATCHNORM_EPSILON)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std)


def _batchnorm_backward(layer, params, cache, dy, mode):
    xhat, inv_std = cache
    gamma = params[f"{layer.name}/gamma"]
    grads = {
        f"{layer.name}/gamma": (dy * xhat).sum(axis=(0, 1, 2)),
        f"{layer.name}/beta": dy.sum(axis=(0, 1, 2)),
    }
    dxhat = dy * gamma

    if mode is Mode.TRAIN:
        count = dy.shape[0] * dy.shape[1] * dy.shape[2]
        dx = inv_std / count * (count * dxhat - dxhat.sum(axis=(0, 1, 2))
                                - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    else:
        dx = dxhat * inv_std

    return dx, grads


def forward(spec, params, inputs, mode=Mode.TRAIN):
    """Run inputs (N x input_shape) through spec.

    Train mode normalises with batch statistics and records the updated moving averages in
    tape.running_updates; eval mode uses the stored moving averages. params are never modified.

    @return: (output, tape)
    """
    mode = Mode(mode)
    x = np.asarray(inputs)
    if x.shape[1:] != spec.input_shape:
        _log.raiseException(f"forward: {spec.name} expects samples of shape {spec.input_shape}, "
                            f"got {x.shape[1:]}", ShapeMismatch)

    tape = Tape(spec, mode)
    for layer in spec.layers:
        if isinstance(layer, Conv2D):
            x, conv_cache = _conv_forward(layer, params, x)
            bn_cache = None
            if layer.has_batchnorm:
                x, bn_cache = _batchnorm_forward(layer, params, x, mode, tape.running_updates)
            tape.records.append((layer, (conv_cache, bn_cache)))
        elif isinstance(layer, Dense):
            weights = params[f"{layer.name}/weights"]
            cache = x
            x = x @ weights
            if layer.has_bias:
                x = x + params[f"{layer.name}/bias"]
            tape.records.append((layer, cache))
        elif isinstance(layer, Activation):
            if layer.kind != 'relu':
                _log.raiseException(f"unsupported activation {layer.kind}", NeuralNetError)
            tape.records.append((layer, x > 0))
            x = np.maximum(x, 0)
        elif isinstance(layer, StopGradientMarker):
            tape.records.append((layer, None))
        else:
            _log.raiseException(f"unsupported layer {layer!r}", NeuralNetError)

    return x, tape


def backward(tape, loss_gradient, params):
    """Reverse pass over tape.

    @type loss_gradient: gradient of the scalar loss with respect to the forward output
    @type params: the NetworkParams used for the forward pass

    @return: GradientSet with one block per trainable block of the taped layers and the
             gradient with respect to the forward input. Layers upstream of a
             StopGradientMarker get exactly zero blocks.
    """
    if tape.consumed:
        _log.raiseException("backward: tape was already used for a backward pass", StaleTape)
    if tape.mode is not Mode.TRAIN:
        _log.raiseException("backward: tape was recorded in eval mode", StaleTape)
    tape.consumed = True

    grads = OrderedDict()
    dy = np.asarray(loss_gradient)
    blocked = False

    for layer, cache in reversed(tape.records):
        if isinstance(layer, Conv2D):
            conv_cache, bn_cache = cache
            if blocked:
                layer_grads = {}
            else:
                if layer.has_batchnorm:
                    dy, layer_grads = _batchnorm_backward(layer, params, bn_cache, dy, tape.mode)
                else:
                    layer_grads = {}
                dy, conv_grads = _conv_backward(layer, params, conv_cache, dy)
                layer_grads.update(conv_grads)
            for name in _trainable_blocks_of(layer, params):
                grads[name] = layer_grads.get(name, np.zeros_like(params[name]))
        elif isinstance(layer, Dense):
            if not blocked:
                grads[f"{layer.name}/weights"] = cache.T @ dy
                if layer.has_bias:
                    grads[f"{layer.name}/bias"] = dy.sum(axis=0)
                dy = dy @ params[f"{layer.name}/weights"].T
            else:
                for name in _trainable_blocks_of(layer, params):
                    grads[name] = np.zeros_like(params[name])
        elif isinstance(layer, Activation):
            if not blocked:
                dy = dy * cache
        elif isinstance(layer, StopGradientMarker):
            blocked = True

    input_gradient = dy
    if blocked:
        input_gradient = np.zeros((dy.shape[0],) + tape.spec.input_shape, dtype=dy.dtype)

    ordered = OrderedDict((name, grads[name]) for name in params.trainable_names() if name in grads)
    return GradientSet(ordered, input_gradient)


def _trainable_blocks_of(layer, params):
    prefix = f"{layer.name}/"
    return [name for name in params.trainable_names() if name.startswith(prefix)]


def self_expression_forward(coef, latent, stop_gradient=True):
    """Apply the self-expressive map latent -> coef latent.

    With stop_gradient the coefficients are a constant of the backward pass: only the latent
    operand receives a gradient.

    @return: (z_se, cache)
    """
    coef = np.asarray(coef)
    latent = np.asarray(latent)
    if coef.shape != (latent.shape[0], latent.shape[0]):
        _log.raiseException(f"coefficients {coef.shape} do not match {latent.shape[0]} latent rows",
                            ShapeMismatch)
    return coef @ latent, (coef, latent, stop_gradient)


def self_expression_backward(cache, grad):
    """Gradients of the self-expressive map: (d latent, d coef or None when stopped)"""
    coef, latent, stop_gradient = cache
    dlatent = coef.T @ grad
    dcoef = None if stop_gradient else grad @ latent.T
    return dlatent, dcoef


def _check_same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        _log.raiseException(f"shape mismatch: {sorted(shapes)}", ShapeMismatch)


def reconstruction_loss(x, x_recon):
    """Squared Frobenius norm of x - x_recon"""
    _check_same_shape(x, x_recon)
    diff = np.asarray(x_recon, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float(np.sum(diff * diff))


def reconstruction_gradient(x, x_recon):
    """Gradient of reconstruction_loss with respect to x_recon"""
    _check_same_shape(x, x_recon)
    return 2.0 * (np.asarray(x_recon) - np.asarray(x))


def dsc_loss_terms(x, x_recon, z, z_se, theta_sel, lambda1, lambda2, squared=True):
    """The three weighted terms of the deep subspace clustering loss"""
    _check_same_shape(x, x_recon)
    _check_same_shape(z, z_se)
    theta = np.asarray(getattr(theta_sel, 'values', theta_sel), dtype=np.float64)
    if theta.shape != (np.shape(z)[0], np.shape(z)[0]):
        _log.raiseException(f"theta_sel {theta.shape} does not match {np.shape(z)[0]} latent rows", ShapeMismatch)
    if lambda1 < 0 or lambda2 < 0:
        _log.raiseException(f"loss weights must be non-negative, got {lambda1}, {lambda2}", NeuralNetError)

    frob_sq = float(np.sum(theta * theta))
    regularisation = lambda1 * (frob_sq if squared else np.sqrt(frob_sq))
    self_expression = lambda2 / 2.0 * reconstruction_loss(z, z_se)

    return LossTerms(reconstruction_loss(x, x_recon), regularisation, self_expression)


def dsc_loss(x, x_recon, z, z_se, theta_sel, lambda1, lambda2, squared=True):
    """||x - x_recon||^2 + lambda1 ||theta_sel||_2 (squared by default) + lambda2 / 2 ||z - z_se||^2"""
    return float(sum(dsc_loss_terms(x, x_recon, z, z_se, theta_sel, lambda1, lambda2, squared=squared)))


def init_adam(params):
    """Zero moments for every trainable block"""
    zeros = OrderedDict((name, np.zeros_like(params[name])) for name in params.trainable_names())
    return AdamState(0, zeros, OrderedDict((name, v.copy()) for name, v in zeros.items()))


def adam_step(params, grads, state, lr=1e-3, beta1=ADAM_BETA1, beta2=ADAM_BETA2, epsilon=ADAM_EPSILON):
    """One bias-corrected Adam update.

    @type grads: GradientSet or dict of block name to gradient

    @return: (new params, new state); the inputs are left untouched
    """
    blocks = getattr(grads, 'blocks', grads)
    step = state.step + 1
    new_m, new_v, updates = OrderedDict(state.m), OrderedDict(state.v), OrderedDict()

    for name, grad in blocks.items():
        if name not in params or name not in state.m:
            _log.raiseException(f"adam_step: gradient for unknown block {name}", ShapeMismatch)
        value = params[name]
        if grad.shape != value.shape:
            _log.raiseException(f"adam_step: block {name} has shape {value.shape}, gradient {grad.shape}",
                                ShapeMismatch)

        m = beta1 * state.m[name] + (1 - beta1) * grad
        v = beta2 * state.v[name] + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)

        updates[name] = (value - lr * m_hat / (np.sqrt(v_hat) + epsilon)).astype(value.dtype)
        new_m[name], new_v[name] = m, v

    return params.replace(updates), AdamState(step, new_m, new_v)


def finite_difference_gradient(loss_fn, params, name, eps=1e-5):
    """Central finite differences of loss_fn(params) with respect to block name"""
    base = params[name]
    grad = np.zeros(base.shape, dtype=np.float64)

    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += eps
        minus = base.copy()
        minus[idx] -= eps
        grad[idx] = (loss_fn(params.replace({name: plus})) - loss_fn(params.replace({name: minus}))) / (2 * eps)

    return grad


def relative_error(analytic, numeric):
    """max |a - n| relative to the largest magnitude of either"""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(loss_fn, gradients, params, names=None, eps=1e-5):
    """Compare analytic gradients with central finite differences.

    @type loss_fn: callable params -> float
    @type gradients: GradientSet or dict computed at params

    @return: dict of block name to relative error
    """
    blocks = getattr(gradients, 'blocks', gradients)
    errors = OrderedDict()
    for name in names or list(blocks):
        errors[name] = relative_error(blocks[name], finite_difference_gradient(loss_fn, params, name, eps=eps))
        _log.debug("check_gradients: %s relative error %s", name, errors[name])
    return errors


def save_checkpoint(path, params):
    """Write params as SKCP: magic, u32 version, then per block name, rank, u64 dims, f64 values"""
    chunks = [CHECKPOINT_MAGIC, struct.pack('<I', CHECKPOINT_VERSION)]
    for name, value in params.blocks.items():
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<I', value.ndim))
        chunks.append(struct.pack(f'<{value.ndim}Q', *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype='<f8').tobytes())

    try:
        with open(path, 'wb') as fp:
            fp.write(b''.join(chunks))
    except OSError as err:
        _log.raiseException(f"could not write checkpoint {path}: {err}", IoFailure)
    _log.info("Wrote checkpoint with %d blocks to %s", len(params.blocks), path)


def load_checkpoint(path):
    """Read an SKCP checkpoint written by save_checkpoint"""
    try:
        with open(path, 'rb') as fp:
            data = fp.read()
    except OSError as err:
        _log.raiseException(f"could not read checkpoint {path}: {err}", IoFailure)

    if data[:4] != CHECKPOINT_MAGIC:
        _log.raiseException(f"{path} is not a checkpoint (magic {data[:4]!r})", MalformedCheckpoint)

    try:
        (version,) = struct.unpack_from('<I', data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported version {version}")
        offset = 8
        blocks = OrderedDict()
        while offset < len(data):
            (name_len,) = struct.unpack_from('<I', data, offset)
            name = data[offset + 4:offset + 4 + name_len].decode('utf-8')
            offset += 4 + name_len
            (rank,) = struct.unpack_from('<I', data, offset)
            shape = struct.unpack_from(f'<{rank}Q', data, offset + 4)
            offset += 4 + 8 * rank
            count = int(np.prod(shape))
            if offset + 8 * count > len(data):
                raise ValueError(f"block {name} is truncated")
            blocks[name] = np.frombuffer(data, dtype='<f8', count=count,
                                         offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as err:
        _log.raiseException(f"malformed checkpoint {path}: {err}", MalformedCheckpoint)

    return NetworkParams(blocks)
