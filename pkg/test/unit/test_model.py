import unittest

import numpy as np
from mock import patch

from cdlf.context import select_references
from cdlf.convnet import dilated_causal_conv_forward
from cdlf.diffusion import build_schedule
from cdlf.errors import ConfigurationError, DimensionError
from cdlf.model import (
    GROUPS,
    ModelConfig,
    ModelParameters,
    TrainingInstance,
    instance_loss,
    loss_and_grads,
    parameter_shapes,
)
from cdlf.numerics import RngStream
from test.unit.helpers import random_params, tiny_config, tiny_model_config, tiny_panel


def make_batch(dataset, model_config, seed=0):
    rng = RngStream(seed)
    library = dataset.library()
    batch = []
    for record, t0, n in zip(list(dataset)[:3], (1, 4, 8), (1, 3, 5)):
        selected = select_references(
            record.descriptor, library.without(record.series_id), model_config.references_k
        )
        batch.append(
            TrainingInstance(
                record.descriptor, selected, record.values, t0, n, rng.normal(model_config.obs_dim)
            )
        )
    return batch


class ModelConfigTest(unittest.TestCase):
    def test_round_trip(self):
        cfg = tiny_model_config()
        self.assertEqual(ModelConfig.from_dict(cfg.to_dict()), cfg)

    def test_rejects_unknown_fusion(self):
        with self.assertRaises(ConfigurationError):
            tiny_model_config()._replace(fusion="sum").validate()

    def test_context_dim(self):
        self.assertEqual(tiny_model_config().context_dim, 5)


class ParameterShapesTest(unittest.TestCase):
    def test_groups(self):
        shapes = parameter_shapes(tiny_model_config())
        self.assertEqual([g for g in GROUPS if any(k.startswith(g + ".") for k in shapes)], list(GROUPS))
        self.assertEqual(shapes["transition.W_z"], (3, 1 + 3 + 2))
        self.assertEqual(shapes["fusion.W"], (3, 4))

    def test_multiplicative_has_no_fusion_weights(self):
        shapes = parameter_shapes(tiny_model_config(tiny_config(fusion="multiplicative")))
        self.assertFalse(any(k.startswith("fusion.") for k in shapes))


class ModelParametersTest(unittest.TestCase):
    def test_initialize_is_seeded(self):
        cfg = tiny_model_config()
        a = ModelParameters.initialize(cfg, RngStream(4))
        b = ModelParameters.initialize(cfg, RngStream(4))
        self.assertEqual(a.digest(), b.digest())
        self.assertNotEqual(a.digest(), ModelParameters.initialize(cfg, RngStream(5)).digest())

    def test_shared_groups_match_across_fusion_variants(self):
        concat = ModelParameters.initialize(tiny_model_config(), RngStream(4))
        mult = ModelParameters.initialize(
            tiny_model_config(tiny_config(fusion="multiplicative")), RngStream(4)
        )
        self.assertEqual(
            concat.digest(exclude_prefixes=("fusion.",)),
            mult.digest(exclude_prefixes=("fusion.",)),
        )

    def test_concat_projection_starts_as_identity(self):
        params = ModelParameters.initialize(tiny_model_config(), RngStream(0))
        np.testing.assert_array_equal(params["fusion.W"], np.eye(3, 4))
        np.testing.assert_array_equal(params["fusion.b"], np.zeros(3))

    def test_reinitialize_group_touches_only_that_group(self):
        params = ModelParameters.initialize(tiny_model_config(), RngStream(0))
        before = params.copy()
        names = params.reinitialize_group("transition", RngStream(99))
        self.assertEqual(names, params.group_names("transition"))
        self.assertFalse(np.array_equal(params["transition.U_h"], before["transition.U_h"]))
        for name in params:
            if name not in names:
                np.testing.assert_array_equal(params[name], before[name])

    def test_setitem_checks_shape(self):
        params = ModelParameters.initialize(tiny_model_config(), RngStream(0))
        with self.assertRaises(DimensionError):
            params["init.b"] = np.zeros(7)
        with self.assertRaises(DimensionError):
            params["nope.W"] = np.zeros(1)


class LossTest(unittest.TestCase):
    def setUp(self):
        self.dataset = tiny_panel()
        self.config = tiny_model_config(descriptor_dim=self.dataset.encoder.dim)
        self.sched = build_schedule(5, 1e-4, 0.1)
        self.batch = make_batch(self.dataset, self.config)

    def test_zero_network_loss_is_noise_energy(self):
        params = random_params(self.config)
        for name in params.group_names("score"):
            params[name] = np.zeros_like(params[name])
        loss, _ = loss_and_grads(params, self.batch, self.sched, self.config)
        expected = np.mean([float(i.noise @ i.noise) for i in self.batch])
        self.assertAlmostEqual(loss, expected)

    def test_exact_noise_prediction_has_zero_loss_and_gradient(self):
        noises = iter([i.noise for i in self.batch])

        def predict_noise(*args):
            _, cache = dilated_causal_conv_forward(*args)
            return next(noises), cache

        params = random_params(self.config, seed=2, scale=0.3)
        with patch("cdlf.model.dilated_causal_conv_forward", side_effect=predict_noise):
            loss, grads = loss_and_grads(params, self.batch, self.sched, self.config)
        self.assertEqual(loss, 0.0)
        for name in grads:
            self.assertFalse(np.any(grads[name]), msg=name)

    def test_duplicated_instance_keeps_single_loss(self):
        params = random_params(self.config, seed=2, scale=0.3)
        instance = self.batch[1]
        single, single_grads = loss_and_grads(params, [instance], self.sched, self.config)
        double, double_grads = loss_and_grads(params, [instance, instance], self.sched, self.config)
        self.assertAlmostEqual(double, single, places=12)
        self.assertAlmostEqual(single, instance_loss(params, instance, self.sched, self.config))
        for name in single_grads:
            np.testing.assert_allclose(double_grads[name], single_grads[name], atol=1e-12)

    def test_t0_outside_series(self):
        params = random_params(self.config)
        bad = self.batch[0]._replace(t0=100)
        with self.assertRaises(DimensionError):
            instance_loss(params, bad, self.sched, self.config)

    def test_empty_batch(self):
        with self.assertRaises(DimensionError):
            loss_and_grads(random_params(self.config), [], self.sched, self.config)

    def _check_gradients(self, config):
        params = random_params(config, seed=1, scale=0.3)
        loss, grads = loss_and_grads(params, self.batch, self.sched, config)
        self.assertEqual(set(grads), set(params.keys()))

        def batch_loss(p):
            return loss_and_grads(p, self.batch, self.sched, config)[0]

        step = 1e-6
        for name in params:
            value = params[name]
            for idx in np.ndindex(value.shape):
                bumped = params.copy()
                bumped.tensors[name][idx] += step
                plus = batch_loss(bumped)
                bumped.tensors[name][idx] -= 2 * step
                minus = batch_loss(bumped)
                fd = (plus - minus) / (2 * step)
                g = grads[name][idx]
                self.assertLessEqual(
                    abs(g - fd), 1e-4 * max(abs(g), abs(fd)) + 1e-7, msg="{}{}".format(name, idx)
                )

    def test_gradients_concat(self):
        self._check_gradients(self.config)

    def test_gradients_multiplicative(self):
        self._check_gradients(
            tiny_model_config(
                tiny_config(fusion="multiplicative"), descriptor_dim=self.dataset.encoder.dim
            )
        )
