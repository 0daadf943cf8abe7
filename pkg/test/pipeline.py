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
Tests for vsc.subspacekit.pipeline
"""
import os
import shutil
import tempfile

import numpy as np

from vsc.install.testing import TestCase

from vsc.subspacekit.evaldata import IoFailure, SyntheticSpec, clustering_error, generate_subspaces
from vsc.subspacekit.neuralnet import (
    SELF_EXPRESSIVE_BLOCK, Dense, NetworkSpec, ShapeMismatch, check_gradients, finite_difference_gradient,
    init_params, param_count,
)
from vsc.subspacekit.pipeline import (
    NonFiniteLoss, PipelineError, TrainConfig, TrainLog, dcfsc_step, dsc_step, fit_dcfsc, fit_dsc_baseline,
    fit_shallow, pretrain_autoencoder,
)
from vsc.subspacekit.presets import build_spec, preset_defaults, preset_spec
from vsc.subspacekit.spectral import ClusterConfig, cluster_from_coefficients

IDENTITY_ARCH = os.path.join(os.path.dirname(__file__), 'data', 'identity-linear.yaml')


def linear_autoencoder(width, latent, self_expressive=None, bias=True):
    layers = [Dense('enc1', width, latent, has_bias=bias), Dense('dec1', latent, width, has_bias=bias)]
    return NetworkSpec(layers, (width,), name='linear', split=1, self_expressive=self_expressive)


def synthetic(seed=0, noise_sigma=0.0, per_class=20):
    return generate_subspaces(SyntheticSpec(4, 3, per_class, 30, noise_sigma=noise_sigma, seed=seed))


class PipelineTest(TestCase):
    """Tests for the training loops"""

    def setUp(self):
        super().setUp()
        self.rng = np.random.default_rng(7)
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir)
        super().tearDown()

    def test_identity_matches_shallow(self):
        """With an identity encoder the coefficients are those of the raw data"""
        data, _ = synthetic(noise_sigma=0.01)
        spec = build_spec(IDENTITY_ARCH)
        shallow = fit_shallow(data, TrainConfig(0.5)).coefficient

        for epochs in (0, 1):
            result = fit_dcfsc(spec, data, TrainConfig(0.5, epochs=epochs))
            self.assertTrue(np.array_equal(result.coefficient.values, shallow.values), msg=f"epochs {epochs}")
            self.assertEqual(len(result.loss_history), epochs)

        # the identity auto-encoder reconstructs perfectly: pretraining leaves it unchanged
        start = init_params(spec)
        pretrained = pretrain_autoencoder(spec, data, TrainConfig(None, epochs=5), params=start)
        self.assertTrue(pretrained.equals(start))

    def test_pretrain_rank_one(self):
        """A rank-1 linear auto-encoder learns rank-1 data"""
        direction = self.rng.standard_normal(5)
        data = np.outer(self.rng.standard_normal(40), direction / np.linalg.norm(direction))
        spec = linear_autoencoder(5, 1, bias=False)
        config = TrainConfig(None, learning_rate=0.01, epochs=1500, seed=3)

        trainlog = TrainLog()
        pretrain_autoencoder(spec, data, config, trainlog=trainlog)
        losses = [loss for _, loss, _ in trainlog.records]
        self.assertEqual(len(losses), 1500)
        self.assertLess(losses[-1], 1e-2 * losses[0])

    def test_zero_epochs(self):
        """Zero epochs return the start parameters"""
        data, _ = synthetic()
        spec = preset_spec('mlp-small')
        start = init_params(spec, seed=4)

        self.assertTrue(pretrain_autoencoder(spec, data, TrainConfig(None, epochs=0), params=start).equals(start))
        result = fit_dcfsc(spec, data, TrainConfig(0.1, epochs=0), params=start)
        self.assertTrue(result.final_params.equals(start))
        self.assertEqual(result.loss_history, [])
        self.assertTrue(np.all(np.diag(result.coefficient.values) == 0.0))

    def test_shallow_recovers_subspaces(self):
        """Closed form on noiseless orthogonal subspaces clusters perfectly"""
        data, labels = synthetic()
        coefficient = fit_shallow(data, TrainConfig(1e-4)).coefficient
        pred = cluster_from_coefficients(coefficient, ClusterConfig(4))
        self.assertEqual(clustering_error(pred, labels), 0.0)

    def test_dcfsc_end_to_end(self):
        """Deep closed form with the small preset defaults clusters 4 x 40 synthetic samples"""
        defaults = preset_defaults('mlp-small')
        good = 0
        for seed in range(10):
            data, labels = synthetic(seed=seed, per_class=40)
            spec = preset_spec('mlp-small', sample_shape=data.shape[1:])
            config = TrainConfig(defaults['lambda'], learning_rate=defaults['learning_rate'],
                                 epochs=defaults['epochs'], seed=seed)
            params = pretrain_autoencoder(spec, data, config._replace(epochs=100))
            result = fit_dcfsc(spec, data, config, params=params)

            self.assertEqual(len(result.loss_history), 200)
            self.assertLess(result.loss_history[-1], result.loss_history[0], msg=f"seed {seed}")
            pred = cluster_from_coefficients(result.coefficient, ClusterConfig(4, seed=seed))
            if clustering_error(pred, labels) <= 0.05:
                good += 1
        self.assertGreaterEqual(good, 9)

    def test_dsc_end_to_end(self):
        """Learnable baseline with the small preset weights clusters 4 x 40 synthetic samples"""
        defaults = preset_defaults('mlp-small')
        errors = []
        for seed in range(3):
            data, labels = synthetic(seed=seed, per_class=40)
            spec = preset_spec('mlp-small', sample_shape=data.shape[1:])
            config = TrainConfig(None, lambda1=defaults['lambda1'], lambda2=defaults['lambda2'],
                                 learning_rate=defaults['learning_rate'], epochs=defaults['epochs'], seed=seed)
            params = pretrain_autoencoder(spec, data, config._replace(epochs=100))
            result = fit_dsc_baseline(spec.with_self_expressive(data.shape[0]), data, config, params=params)

            self.assertLess(result.loss_history[-1], result.loss_history[0], msg=f"seed {seed}")
            pred = cluster_from_coefficients(result.coefficient, ClusterConfig(4, seed=seed))
            errors.append(clustering_error(pred, labels))

        self.assertTrue(all(error <= 0.05 for error in errors), msg=f"{errors}")
        self.assertGreaterEqual(errors.count(0.0), 2, msg=f"{errors}")

    def test_dcfsc_stop_gradient(self):
        """Closed-form coefficients act as a constant in the backward pass"""
        spec = linear_autoencoder(6, 4)
        params = init_params(spec, seed=2)
        x = self.rng.standard_normal((9, 6))

        step = dcfsc_step(spec, params, x, 0.3)
        frozen = dcfsc_step(spec, params, x, 0.3, frozen_b=step.coefficient)
        self.assertEqual(frozen.loss, step.loss)
        for name, grad in step.gradients.items():
            self.assertTrue(np.array_equal(grad, frozen.gradients[name]), msg=name)

        def loss_fn(p):
            return dcfsc_step(spec, p, x, 0.3, frozen_b=step.coefficient).loss

        errors = check_gradients(loss_fn, frozen.gradients, params)
        self.assertEqual(sorted(errors), sorted(params.names()))
        for name, error in errors.items():
            self.assertLess(error, 1e-6, msg=name)

        # differentiating through the closed form would give another encoder gradient
        def full_loss(p):
            return dcfsc_step(spec, p, x, 0.3).loss

        through = finite_difference_gradient(full_loss, params, 'enc1/weights')
        self.assertGreater(np.max(np.abs(through - step.gradients['enc1/weights'])), 1e-6)

    def test_dsc_gradients(self):
        """Baseline gradients against finite differences, squared and plain norm"""
        n_samples = 8
        spec = linear_autoencoder(6, 4, self_expressive=n_samples)
        x = self.rng.standard_normal((n_samples, 6))
        coef = 0.1 * self.rng.standard_normal((n_samples, n_samples))
        np.fill_diagonal(coef, 0.0)
        params = init_params(spec, seed=5).replace({SELF_EXPRESSIVE_BLOCK: coef})
        off_diagonal = ~np.eye(n_samples, dtype=bool)

        for squared in (True, False):
            config = TrainConfig(None, lambda1=0.7, lambda2=1.3, squared_l2=squared)
            step = dsc_step(spec, params, x, config)
            self.assertTrue(np.all(np.diag(step.gradients[SELF_EXPRESSIVE_BLOCK]) == 0.0))

            def loss_fn(p, config=config):
                return dsc_step(spec, p, x, config).loss

            numeric = finite_difference_gradient(loss_fn, params, SELF_EXPRESSIVE_BLOCK)
            analytic = step.gradients[SELF_EXPRESSIVE_BLOCK]
            scale = np.max(np.abs(numeric[off_diagonal]))
            self.assertLess(np.max(np.abs(analytic - numeric)[off_diagonal]), 1e-6 * scale)

            names = [name for name in params.names() if name != SELF_EXPRESSIVE_BLOCK]
            for name, error in check_gradients(loss_fn, step.gradients, params, names=names).items():
                self.assertLess(error, 1e-6, msg=f"{name} squared={squared}")

    def test_dsc_baseline(self):
        """Learnable coefficients: sizes, zero diagonal, audit"""
        data, _ = synthetic()
        n_samples = data.shape[0]
        spec = linear_autoencoder(30, 12, self_expressive=n_samples)
        self.assertEqual(param_count(spec).total - param_count(spec.with_self_expressive(None)).total,
                         n_samples ** 2)

        config = TrainConfig(None, lambda1=1.0, lambda2=1.0, epochs=0)
        result = fit_dsc_baseline(spec, data, config)
        self.assertTrue(np.array_equal(result.coefficient.values, np.zeros((n_samples, n_samples))))
        self.assertEqual(result.loss_history, [])

        # pretrained parameters without the layer get a zero one
        pretrained = pretrain_autoencoder(spec.with_self_expressive(None), data, config._replace(epochs=3))
        result = fit_dsc_baseline(spec, data, config._replace(epochs=5), params=pretrained)
        self.assertEqual(len(result.loss_history), 5)
        coef = result.final_params[SELF_EXPRESSIVE_BLOCK]
        self.assertEqual(coef.shape, (n_samples, n_samples))
        self.assertTrue(np.all(np.diag(coef) == 0.0))
        self.assertGreater(np.max(np.abs(coef)), 0.0)

        self.assertErrorRegex(ShapeMismatch, 'self-expressive layer for 10 samples', fit_dsc_baseline,
                              spec.with_self_expressive(10), data, config)
        self.assertErrorRegex(PipelineError, 'learnable self-expressive', fit_dcfsc, spec, data,
                              TrainConfig(0.1, epochs=0))

    def test_determinism(self):
        """Same seed and data, bitwise identical fits"""
        data, _ = synthetic(noise_sigma=0.01)
        spec = preset_spec('mlp-small')
        config = TrainConfig(0.1, epochs=5, seed=9)

        first = fit_dcfsc(spec, data, config)
        second = fit_dcfsc(spec, data, config)
        self.assertEqual(first.loss_history, second.loss_history)
        self.assertTrue(first.final_params.equals(second.final_params))
        self.assertTrue(np.array_equal(first.coefficient.values, second.coefficient.values))

        other = fit_dcfsc(spec, data, config._replace(seed=10))
        self.assertFalse(other.final_params.equals(first.final_params))

    def test_numeric_width(self):
        """32-bit training keeps 32-bit parameters, coefficients stay 64-bit"""
        data, _ = synthetic()
        result = fit_dcfsc(preset_spec('mlp-small'), data, TrainConfig(0.1, epochs=2, numeric_width=32))
        self.assertEqual(result.final_params.dtype, np.float32)
        self.assertEqual(result.coefficient.values.dtype, np.float64)

    def test_config_errors(self):
        """Invalid configurations"""
        data, _ = synthetic()
        spec = preset_spec('mlp-small')
        self.assertErrorRegex(PipelineError, 'strictly positive', fit_dcfsc, spec, data, TrainConfig(0.0))
        self.assertErrorRegex(PipelineError, 'strictly positive', fit_shallow, data, TrainConfig(None))
        self.assertErrorRegex(PipelineError, 'learning rate', fit_dcfsc, spec, data,
                              TrainConfig(0.1, learning_rate=0.0))
        self.assertErrorRegex(PipelineError, 'non-negative', TrainConfig(None, lambda1=-1.0).validate, 'dsc')
        self.assertErrorRegex(PipelineError, 'numeric width', TrainConfig(0.1, numeric_width=16).validate)
        self.assertErrorRegex(ShapeMismatch, 'expects samples', fit_dcfsc, spec, data[:, :10], TrainConfig(0.1))

    def test_non_finite_loss(self):
        """Training stops on a non-finite loss"""
        data, _ = synthetic()
        data[0, 0] = np.inf
        spec = preset_spec('mlp-small')
        with np.errstate(all='ignore'):
            self.assertErrorRegex(NonFiniteLoss, 'pretrain: loss became', pretrain_autoencoder, spec, data,
                                  TrainConfig(None, epochs=3))

    def test_trainlog(self):
        """Tab-separated records per stage"""
        path = os.path.join(self.tmpdir, 'train.log')
        data, _ = synthetic()
        spec = preset_spec('mlp-small')

        trainlog = TrainLog(path)
        params = pretrain_autoencoder(spec, data, TrainConfig(None, epochs=2), trainlog=trainlog)
        fit_dcfsc(spec, data, TrainConfig(0.1, epochs=3), params=params, trainlog=trainlog)
        trainlog.close()

        with open(path) as fp:
            lines = fp.read().splitlines()
        self.assertEqual(len(lines), 2 + 2 + 3)
        self.assertEqual(lines[0], '# pretrain')
        self.assertEqual(lines[3], '# dcfsc')
        epoch, loss, seconds = lines[4].split('\t')
        self.assertEqual(epoch, '0')
        self.assertTrue(np.isfinite(float(loss)))
        self.assertGreaterEqual(float(seconds), 0.0)
        self.assertEqual(len(trainlog.records), 5)

        self.assertErrorRegex(IoFailure, 'could not write training log', TrainLog,
                              os.path.join(self.tmpdir, 'no', 'such', 'train.log'))
