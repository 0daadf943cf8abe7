#
# Copyright 2024-2024 Ghent University
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
Tests for vsc.subspacekit.presets
"""
import os
import shutil
import tempfile

from vsc.install.testing import TestCase

from vsc.subspacekit.neuralnet import Activation, Conv2D, Dense, NeuralNetError, param_count
from vsc.subspacekit.presets import (
    PRESETS, MalformedArchitecture, UnknownPreset,
    build_spec, dsc_weights, epoch_schedule, load_arch_file, preset_defaults, preset_spec,
)

IDENTITY_ARCH = os.path.join(os.path.dirname(__file__), 'data', 'identity-linear.yaml')

PUBLISHED_COUNTS = {
    'eyaleb-dcfsc': (14991, [260, 1820, 5430, 5420, 1810, 251]),
    'eyaleb-dsc': (5929615, [260, 1820, 5430, 5914624, 5420, 1810, 251]),
    'orl-dcfsc': (702, [130, 138, 84, 84, 140, 126]),
    'orl-dsc': (160702, [130, 138, 84, 160000, 84, 140, 126]),
    'coil100-dcfsc': (81913, [696, 5280, 10560, 20928, 3528, 3648, 20928, 10464, 5280, 601]),
    'coil100-dsc': (51842600, [1300, 51840000, 1300]),
}


class PresetsTest(TestCase):
    """Tests for the architecture presets and files"""

    def setUp(self):
        super().setUp()
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)
        super().tearDown()

    def write_arch(self, text):
        path = os.path.join(self.tmpdir, 'arch.yaml')
        with open(path, 'w') as fp:
            fp.write(text)
        return path

    def test_published_counts(self):
        """Totals and per-layer counts of all six published architectures"""
        for name, (total, layers) in PUBLISHED_COUNTS.items():
            audit = param_count(preset_spec(name))
            self.assertEqual(audit.total, total, msg=name)
            self.assertEqual([layer.count for layer in audit.layers], layers, msg=name)
            self.assertEqual(sum(layers), total)

    def test_self_expressive_accounting(self):
        """dsc presets differ from their dcfsc counterpart by exactly N^2"""
        for family, n_samples in (('eyaleb', 2432), ('orl', 400)):
            closed = param_count(preset_spec(f"{family}-dcfsc")).total
            learnable = param_count(preset_spec(f"{family}-dsc")).total
            self.assertEqual(learnable - closed, n_samples ** 2)

        self.assertEqual(param_count(preset_spec('orl-dsc', n_samples=10)).total, 702 + 100)
        self.assertIsNone(preset_spec('orl-dcfsc').self_expressive)

    def test_layers(self):
        """Rectifiers after every convolution but the last, batch norm where published"""
        spec = preset_spec('eyaleb-dcfsc')
        kinds = [type(layer).__name__ for layer in spec.layers]
        self.assertEqual(kinds, ['Conv2D', 'Activation'] * 5 + ['Conv2D'])
        self.assertEqual(spec.split, 6)
        self.assertTrue(all(layer.stride == 2 for layer in spec.layers if isinstance(layer, Conv2D)))

        coil = [layer for layer in preset_spec('coil100-dcfsc').layers if isinstance(layer, Conv2D)]
        self.assertEqual([layer.has_batchnorm for layer in coil], [True] * 4 + [False] + [True] * 4 + [False])
        self.assertEqual([layer.stride for layer in coil], [1, 2, 1, 2, 1, 1, 2, 1, 2, 1])

    def test_mlp_small(self):
        """Linear auto-encoder adapting to the data width"""
        spec = preset_spec('mlp-small')
        self.assertEqual(spec.input_shape, (30,))
        self.assertEqual(spec.latent_shape, (24,))
        self.assertFalse(any(isinstance(layer, Activation) for layer in spec.layers))

        wide = preset_spec('mlp-small', sample_shape=(50,))
        self.assertEqual(wide.layers[0], Dense('enc1', 50, 24, has_bias=False))
        self.assertEqual(param_count(wide).total, 2 * 50 * 24)

    def test_sample_shape_check(self):
        """Image presets need data of their input size"""
        self.assertEqual(preset_spec('orl-dcfsc', sample_shape=(1024,)).input_shape, (32, 32, 1))
        self.assertErrorRegex(NeuralNetError, 'expects samples', preset_spec, 'orl-dcfsc', sample_shape=(30,))

    def test_unknown(self):
        """Unknown preset names"""
        self.assertErrorRegex(UnknownPreset, 'unknown preset', preset_spec, 'nope')
        self.assertErrorRegex(UnknownPreset, 'neither a preset', build_spec, 'nope')
        self.assertErrorRegex(UnknownPreset, 'unknown preset', epoch_schedule, 'nope', 3)

    def test_schedules(self):
        """Epoch schedules and loss weights"""
        self.assertEqual(epoch_schedule('eyaleb-dcfsc', 10), 300)
        self.assertEqual(epoch_schedule('eyaleb-dsc'), 50 + 25 * 38)
        self.assertEqual(epoch_schedule('orl-dcfsc', 40), 700)
        self.assertEqual(epoch_schedule('coil100-dcfsc', 100), 175)
        self.assertEqual(epoch_schedule('mlp-small', 4), 200)

        self.assertEqual(dsc_weights('eyaleb-dsc', 10), (1.0, 10 ** -2.0))
        self.assertEqual(dsc_weights('orl-dsc'), (1.0, 0.2))
        self.assertEqual(dsc_weights('coil100-dsc'), (1.0, 15.0))
        self.assertEqual(dsc_weights('mlp-small'), (1.0, 10.0))

        defaults = preset_defaults('coil100-dcfsc')
        self.assertEqual(defaults['lambda'], 10.0)
        self.assertEqual(defaults['learning_rate'], 0.001)
        self.assertEqual(preset_defaults('orl-dcfsc')['lambda'], 5e5)
        self.assertEqual(sorted(defaults), ['epochs', 'lambda', 'lambda1', 'lambda2', 'learning_rate'])
        self.assertEqual(len(PRESETS), 7)

    def test_arch_file(self):
        """YAML architecture files"""
        spec = build_spec(IDENTITY_ARCH)
        self.assertEqual(spec.name, 'identity-linear')
        self.assertEqual(spec.layers, (Dense('enc1', 30, 30, has_bias=False, init='identity'),
                                       Dense('dec1', 30, 30, has_bias=False, init='identity')))
        self.assertEqual(spec.split, 1)
        self.assertIsNone(spec.self_expressive)
        self.assertEqual(load_arch_file(IDENTITY_ARCH, n_samples=5).self_expressive, 5)

        path = self.write_arch("\n".join([
            "input_shape: [8, 8, 1]",
            "encoder:",
            "  - {type: conv2d, kernel: 3, stride: 2, in_channels: 1, out_channels: 4, batchnorm: true, bias: false}",
            "  - {type: relu}",
            "  - {type: stop_gradient, name: frozen}",
            "decoder:",
            "  - {type: conv2d, kernel: [3, 3], stride: 2, in_channels: 4, out_channels: 1, transpose: true}",
        ]))
        spec = load_arch_file(path)
        self.assertEqual(spec.name, 'arch')
        self.assertEqual(spec.latent_shape, (4, 4, 4))
        self.assertEqual(spec.output_shape, (8, 8, 1))
        self.assertEqual(spec.layers[2].name, 'frozen')
        self.assertEqual(param_count(spec).total, 36 + 16 + 36 + 1)

    def test_bad_arch_file(self):
        """Unreadable and malformed files"""
        self.assertErrorRegex(MalformedArchitecture, 'could not read', load_arch_file,
                              os.path.join(self.tmpdir, 'missing.yaml'))
        self.assertErrorRegex(MalformedArchitecture, 'malformed', load_arch_file,
                              self.write_arch("encoder:\n  - {type: dense, in_dim: 3, out_dim: 2}\n"))
        self.assertErrorRegex(MalformedArchitecture, 'unknown layer type', load_arch_file,
                              self.write_arch("input_shape: [3]\nencoder:\n  - {type: pool}\n"))
        self.assertErrorRegex(MalformedArchitecture, 'could not read', load_arch_file,
                              self.write_arch("input_shape: [3\n"))
