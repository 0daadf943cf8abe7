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
Architecture presets and YAML architecture files.

The face and object presets reproduce the published network settings, including the
self-expressive layer size of the learnable baseline. mlp-small is a linear auto-encoder
for synthetic union-of-subspaces data.

An architecture file looks like

    name: my-arch
    input_shape: [30]
    self_expressive: null
    encoder:
      - {type: dense, in_dim: 30, out_dim: 12, bias: true, init: he}
      - {type: relu}
    decoder:
      - {type: dense, in_dim: 12, out_dim: 30}
"""
import os

from collections import namedtuple

import numpy as np
import yaml

from vsc.subspacekit.neuralnet import Activation, Conv2D, Dense, NetworkSpec, NeuralNetError, StopGradientMarker
from vsc.utils import fancylogger

EYALEB = 'eyaleb'
ORL = 'orl'
COIL100 = 'coil100'
SYNTHETIC = 'synthetic'

DEFAULT_LEARNING_RATE = 1e-3
MLP_SMALL_LATENT = 24
SYNTHETIC_LAMBDA2 = 10.0
ARCH_FILE_EXTENSIONS = ('.yaml', '.yml')

_log = fancylogger.getLogger(__name__, fname=False)

Preset = namedtuple('Preset', ['name', 'family', 'method', 'input_shape', 'n_samples', 'n_clusters',
                               'lambda_', 'learning_rate'])


class UnknownPreset(NeuralNetError):
    pass


class MalformedArchitecture(NeuralNetError):
    pass


PRESETS = {
    'eyaleb-dcfsc': Preset('eyaleb-dcfsc', EYALEB, 'dcfsc', (48, 48, 1), 2432, 38, 5e5, DEFAULT_LEARNING_RATE),
    'eyaleb-dsc': Preset('eyaleb-dsc', EYALEB, 'dsc', (48, 48, 1), 2432, 38, 5e5, DEFAULT_LEARNING_RATE),
    'orl-dcfsc': Preset('orl-dcfsc', ORL, 'dcfsc', (32, 32, 1), 400, 40, 5e5, DEFAULT_LEARNING_RATE),
    'orl-dsc': Preset('orl-dsc', ORL, 'dsc', (32, 32, 1), 400, 40, 5e5, DEFAULT_LEARNING_RATE),
    'coil100-dcfsc': Preset('coil100-dcfsc', COIL100, 'dcfsc', (32, 32, 1), 7200, 100, 10.0, DEFAULT_LEARNING_RATE),
    # decoder bias of width 50 on a single output channel: audit only
    'coil100-dsc': Preset('coil100-dsc', COIL100, 'dsc', (32, 32, 1), 7200, 100, 10.0, DEFAULT_LEARNING_RATE),
    'mlp-small': Preset('mlp-small', SYNTHETIC, 'dcfsc', (30,), 160, 4, 0.1, DEFAULT_LEARNING_RATE),
}


def _with_relu(layers, last):
    """Put a rectifier after every layer, after the final one only if last is set"""
    result = []
    for idx, layer in enumerate(layers):
        result.append(layer)
        if last or idx < len(layers) - 1:
            result.append(Activation(f"{layer.name}_relu"))
    return result


def _small_image_layers(channels, in_channels=1):
    """Three stride-2 convolutions (5x5, 3x3, 3x3) and their transposed mirror"""
    c1, c2, c3 = channels
    return [
        Conv2D('enc1', 5, 5, in_channels, c1, stride=2),
        Conv2D('enc2', 3, 3, c1, c2, stride=2),
        Conv2D('enc3', 3, 3, c2, c3, stride=2),
    ], [
        Conv2D('dec1', 3, 3, c3, c2, stride=2, transpose=True),
        Conv2D('dec2', 3, 3, c2, c1, stride=2, transpose=True),
        Conv2D('dec3', 5, 5, c1, in_channels, stride=2, transpose=True),
    ]


def _coil100_dcfsc_layers():
    bn = dict(has_bias=False, has_batchnorm=True)
    return [
        Conv2D('enc1', 5, 5, 1, 24, stride=1, **bn),
        Conv2D('enc2', 3, 3, 24, 24, stride=2, **bn),
        Conv2D('enc3', 3, 3, 24, 48, stride=1, **bn),
        Conv2D('enc4', 3, 3, 48, 48, stride=2, **bn),
        Conv2D('enc5', 1, 1, 48, 72, stride=1),
    ], [
        Conv2D('dec1', 1, 1, 72, 48, stride=1, transpose=True, **bn),
        Conv2D('dec2', 3, 3, 48, 48, stride=2, transpose=True, **bn),
        Conv2D('dec3', 3, 3, 48, 24, stride=1, transpose=True, **bn),
        Conv2D('dec4', 3, 3, 24, 24, stride=2, transpose=True, **bn),
        Conv2D('dec5', 5, 5, 24, 1, stride=1, transpose=True),
    ]


def _coil100_dsc_layers():
    return [
        Conv2D('enc1', 5, 5, 1, 50, stride=2),
    ], [
        Conv2D('dec1', 5, 5, 50, 1, stride=2, transpose=True, bias_width=50),
    ]


def _mlp_small_layers(input_dim):
    return [
        Dense('enc1', input_dim, MLP_SMALL_LATENT, has_bias=False),
    ], [
        Dense('dec1', MLP_SMALL_LATENT, input_dim, has_bias=False),
    ]


def get_preset(name):  # pylint: disable=inconsistent-return-statements
    """Preset record by name"""
    if isinstance(name, Preset):
        return name
    try:
        return PRESETS[name]
    except KeyError:
        _log.raiseException(f"unknown preset {name}, known presets: {', '.join(sorted(PRESETS))}", UnknownPreset)


def preset_spec(name, sample_shape=None, n_samples=None):
    """NetworkSpec of a preset.

    @type sample_shape: per-sample shape of the data to fit; image presets need the same
                        number of values as their input shape, mlp-small adapts its width
    @type n_samples: size of the self-expressive layer of the dsc presets (default: the
                     published sample count)
    """
    preset = get_preset(name)
    input_shape = preset.input_shape

    if preset.family == SYNTHETIC:
        if sample_shape is not None:
            input_shape = (int(np.prod(sample_shape)),)
        encoder, decoder = _mlp_small_layers(input_shape[0])
    else:
        if sample_shape is not None and int(np.prod(sample_shape)) != int(np.prod(input_shape)):
            _log.raiseException(f"preset {preset.name} expects samples of shape {input_shape}, "
                                f"got {tuple(sample_shape)}", NeuralNetError)
        if preset.family == EYALEB:
            encoder, decoder = _small_image_layers((10, 20, 30))
        elif preset.family == ORL:
            encoder, decoder = _small_image_layers((5, 3, 3))
        elif preset.method == 'dcfsc':
            encoder, decoder = _coil100_dcfsc_layers()
        else:
            encoder, decoder = _coil100_dsc_layers()
        encoder = _with_relu(encoder, last=True)
        decoder = _with_relu(decoder, last=False)

    self_expressive = None
    if preset.method == 'dsc':
        self_expressive = n_samples or preset.n_samples

    return NetworkSpec(encoder + decoder, input_shape, name=preset.name, split=len(encoder),
                       self_expressive=self_expressive)


def _layer_from_dict(entry, default_name):
    kind = entry.get('type')
    name = str(entry.get('name', default_name))

    if kind == 'dense':
        return Dense(name, int(entry['in_dim']), int(entry['out_dim']),
                     has_bias=bool(entry.get('bias', True)), init=entry.get('init', 'he'))
    if kind == 'conv2d':
        kernel = entry['kernel']
        kernel_h, kernel_w = (kernel, kernel) if isinstance(kernel, int) else kernel
        return Conv2D(name, int(kernel_h), int(kernel_w), int(entry['in_channels']), int(entry['out_channels']),
                      stride=int(entry.get('stride', 1)),
                      has_bias=bool(entry.get('bias', True)),
                      has_batchnorm=bool(entry.get('batchnorm', False)),
                      transpose=bool(entry.get('transpose', False)),
                      bias_width=entry.get('bias_width'))
    if kind == 'relu':
        return Activation(name)
    if kind == 'stop_gradient':
        return StopGradientMarker(name)

    raise ValueError(f"unknown layer type {kind!r}")


def load_arch_file(path, sample_shape=None, n_samples=None):
    """NetworkSpec from a YAML architecture file.

    n_samples overrides the self_expressive entry of the file.
    """
    try:
        with open(path) as fp:
            arch = yaml.safe_load(fp)
    except (OSError, yaml.YAMLError) as err:
        _log.raiseException(f"could not read architecture file {path}: {err}", MalformedArchitecture)

    try:
        layers = []
        encoder = arch.get('encoder') or []
        decoder = arch.get('decoder') or []
        for idx, entry in enumerate(encoder):
            layers.append(_layer_from_dict(entry, f"enc{idx + 1}"))
        for idx, entry in enumerate(decoder):
            layers.append(_layer_from_dict(entry, f"dec{idx + 1}"))
        input_shape = tuple(int(x) for x in arch['input_shape'])
        name = str(arch.get('name', os.path.splitext(os.path.basename(path))[0]))
    except (AttributeError, KeyError, TypeError, ValueError) as err:
        _log.raiseException(f"malformed architecture file {path}: {err!r}", MalformedArchitecture)

    if sample_shape is not None and int(np.prod(sample_shape)) != int(np.prod(input_shape)):
        _log.raiseException(f"architecture {name} expects samples of shape {input_shape}, "
                            f"got {tuple(sample_shape)}", NeuralNetError)

    return NetworkSpec(layers, input_shape, name=name, split=len(encoder),
                       self_expressive=n_samples or arch.get('self_expressive'))


def is_arch_file(arch):
    return arch.endswith(ARCH_FILE_EXTENSIONS) or os.path.isfile(arch)


def build_spec(arch, sample_shape=None, n_samples=None):  # pylint: disable=inconsistent-return-statements
    """NetworkSpec for a preset name or an architecture file path"""
    if arch in PRESETS:
        return preset_spec(arch, sample_shape=sample_shape, n_samples=n_samples)
    if is_arch_file(arch):
        return load_arch_file(arch, sample_shape=sample_shape, n_samples=n_samples)
    _log.raiseException(f"{arch} is neither a preset nor an architecture file; presets: "
                        f"{', '.join(sorted(PRESETS))}", UnknownPreset)


def epoch_schedule(preset, k=None):
    """Default number of training epochs for preset with k clusters"""
    preset = get_preset(preset)
    k = preset.n_clusters if k is None else k

    if preset.family == EYALEB:
        return 50 + 25 * k
    if preset.family == ORL:
        return 700
    if preset.family == COIL100:
        return 175
    return 200


def dsc_weights(preset, k=None):
    """Default (lambda1, lambda2) of the learnable baseline for preset with k clusters"""
    preset = get_preset(preset)
    k = preset.n_clusters if k is None else k

    if preset.family == EYALEB:
        return 1.0, 10 ** (k / 10.0 - 3)
    if preset.family == ORL:
        return 1.0, 0.2
    if preset.family == COIL100:
        return 1.0, 15.0
    return 1.0, SYNTHETIC_LAMBDA2


def preset_defaults(preset, k=None):
    """Training defaults of preset: lambda, learning rate, epochs and baseline loss weights"""
    preset = get_preset(preset)
    lambda1, lambda2 = dsc_weights(preset, k)
    return {
        'lambda': preset.lambda_,
        'learning_rate': preset.learning_rate,
        'epochs': epoch_schedule(preset, k),
        'lambda1': lambda1,
        'lambda2': lambda2,
    }
