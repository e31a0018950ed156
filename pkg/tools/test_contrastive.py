#!/usr/bin/env python3
"""Tests for SimSiam augmentation, loss, and pre-training."""

from __future__ import annotations

import datetime as dt
import math
import unittest
from unittest import mock

import numpy as np
import torch
from torch import nn
from torch.autograd import gradcheck
from torch.func import functional_call

import contrastive
from backbone import Backbone, BackboneSpec, build_backbone, trainable_parameter_names
from contrastive import (
    ContrastiveError,
    SimSiamNetwork,
    SimSiamSpec,
    ViewPairs,
    augment_view,
    build_predictor,
    build_projector,
    cosine_lr,
    representation_spread,
    sample_crop,
    simsiam_loss,
    train_simsiam,
)
from records import PATCH_SIZE, ScenePatch


def normalized_scenes(n: int, seed: int = 0) -> list[ScenePatch]:
    rng = np.random.default_rng(seed)
    return [
        ScenePatch("S1", dt.date(2019, 1, 1 + i),
                   rng.normal(0.0, 1.0, (PATCH_SIZE, PATCH_SIZE, 3)).astype(np.float32), "RGB", normalized=True)
        for i in range(n)
    ]


class ScheduleTests(unittest.TestCase):
    def test_cosine_schedule(self) -> None:
        self.assertAlmostEqual(cosine_lr(0), 0.005)
        self.assertAlmostEqual(cosine_lr(50), 0.0025)
        self.assertAlmostEqual(cosine_lr(100), 0.0)
        values = [cosine_lr(epoch) for epoch in range(101)]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))

    def test_spec_validation(self) -> None:
        with self.assertRaises(ContrastiveError):
            SimSiamSpec(crop_scale=(0.0, 1.0))
        with self.assertRaises(ContrastiveError):
            SimSiamSpec(crop_scale=(0.5, 0.4))
        with self.assertRaises(ContrastiveError):
            SimSiamSpec(corpus="test")
        with self.assertRaises(ContrastiveError):
            SimSiamSpec(batch_size=1)


class AugmentationTests(unittest.TestCase):
    def test_crop_area_and_flip_rate(self) -> None:
        rng = np.random.default_rng(0)
        boxes = [sample_crop(PATCH_SIZE, PATCH_SIZE, rng) for _ in range(2000)]
        fractions = [box.side ** 2 / PATCH_SIZE ** 2 for box in boxes]
        self.assertGreaterEqual(min(fractions), 0.2)
        self.assertLessEqual(max(fractions), 1.0)
        self.assertGreater(max(fractions), 0.95)
        self.assertLess(min(fractions), 0.25)
        for box in boxes:
            self.assertGreaterEqual(box.top, 0)
            self.assertLessEqual(box.top + box.side, PATCH_SIZE)
            self.assertLessEqual(box.left + box.side, PATCH_SIZE)
        flip_rate = np.mean([box.flipped for box in boxes])
        self.assertGreater(flip_rate, 0.45)
        self.assertLess(flip_rate, 0.55)

    def test_view_shape_and_shared_geometry(self) -> None:
        base = torch.rand(1, PATCH_SIZE, PATCH_SIZE, generator=torch.Generator().manual_seed(0))
        image = torch.cat([base * (k + 1) for k in range(4)])
        view = augment_view(image, np.random.default_rng(3))
        self.assertEqual(tuple(view.shape), (4, 96, 96))
        for k in range(4):
            torch.testing.assert_close(view[k], view[0] * (k + 1), rtol=1e-4, atol=1e-5)

    def test_values_are_not_recoloured(self) -> None:
        image = torch.full((3, PATCH_SIZE, PATCH_SIZE), 0.7)
        view = augment_view(image, np.random.default_rng(1))
        torch.testing.assert_close(view, torch.full_like(view, 0.7))

    def test_flip_mirrors_columns(self) -> None:
        image = torch.arange(PATCH_SIZE, dtype=torch.float32).expand(3, PATCH_SIZE, PATCH_SIZE).contiguous()
        spec = SimSiamSpec(crop_scale=(1.0, 1.0), view_size=PATCH_SIZE, hflip_p=1.0)
        view = augment_view(image, np.random.default_rng(0), spec)
        torch.testing.assert_close(view[0, 0], torch.flip(image[0, 0], dims=[0]))

    def test_view_pairs_are_reproducible(self) -> None:
        scenes = normalized_scenes(2)
        pairs = ViewPairs(scenes, SimSiamSpec(), seed=5)
        first = pairs[1]
        again = pairs[1]
        self.assertTrue(torch.equal(first[0], again[0]))
        self.assertFalse(torch.equal(first[0], first[1]))
        pairs.epoch = 1
        self.assertFalse(torch.equal(first[0], pairs[1][0]))


class LossTests(unittest.TestCase):
    def setUp(self) -> None:
        generator = torch.Generator().manual_seed(0)
        self.z = torch.randn(8, 16, generator=generator)
        self.other = torch.randn(8, 16, generator=generator)

    def test_extremes(self) -> None:
        self.assertAlmostEqual(float(simsiam_loss(self.z, self.z, self.z, self.z)), -1.0, places=6)
        self.assertAlmostEqual(float(simsiam_loss(-self.z, self.z, -self.z, self.z)), 1.0, places=6)
        e1 = torch.zeros(4, 2)
        e1[:, 0] = 1.0
        e2 = torch.zeros(4, 2)
        e2[:, 1] = 1.0
        self.assertAlmostEqual(float(simsiam_loss(e1, e1, e2, e2)), 0.0, places=6)

    def test_bounds(self) -> None:
        loss = float(simsiam_loss(self.z, self.other, self.other, self.z))
        self.assertGreaterEqual(loss, -1.0)
        self.assertLessEqual(loss, 1.0)

    def test_targets_receive_no_gradient(self) -> None:
        p1 = self.z.clone().requires_grad_(True)
        p2 = self.other.clone().requires_grad_(True)
        z1 = self.other.clone().requires_grad_(True)
        z2 = self.z.clone().requires_grad_(True)
        simsiam_loss(p1, z1, p2, z2).backward()
        self.assertIsNotNone(p1.grad)
        self.assertIsNotNone(p2.grad)
        self.assertIsNone(z1.grad)
        self.assertIsNone(z2.grad)

    def test_target_branch_parameters_receive_no_gradient(self) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(0)
            online = nn.Sequential(nn.Linear(5, 6), nn.Tanh(), nn.Linear(6, 4))
            target = nn.Sequential(nn.Linear(5, 6), nn.Tanh(), nn.Linear(6, 4))
        generator = torch.Generator().manual_seed(1)
        x1 = torch.randn(10, 5, generator=generator)
        x2 = torch.randn(10, 5, generator=generator)
        loss = simsiam_loss(online(x1), target(x1), online(x2), target(x2))
        grads = torch.autograd.grad(loss, [*online.parameters(), *target.parameters()], allow_unused=True)
        online_grads = grads[:len(list(online.parameters()))]
        target_grads = grads[len(online_grads):]
        self.assertTrue(all(grad is None for grad in target_grads))
        self.assertTrue(all(grad is not None and bool(grad.abs().sum() > 0) for grad in online_grads))

    def test_miniature_stack_gradients_match_finite_differences(self) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(0)
            network = SimSiamNetwork(nn.Linear(5, 4), build_projector(4, 6), build_predictor(6, 3))
        network = network.double().train()
        generator = torch.Generator().manual_seed(2)
        x1 = torch.randn(10, 5, dtype=torch.float64, generator=generator)
        x2 = torch.randn(10, 5, dtype=torch.float64, generator=generator)
        with torch.no_grad():
            _, _, z1, z2 = network(x1, x2)
        names = [name for name, _ in network.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_(True) for p in network.parameters())

        # targets are frozen at the current parameters, matching the stop-gradient
        def loss_of(*tensors):
            p1, p2, _, _ = functional_call(network, dict(zip(names, tensors)), (x1, x2))
            return simsiam_loss(p1, z1, p2, z2)

        self.assertTrue(gradcheck(loss_of, params, eps=1e-6, atol=1e-8, rtol=1e-4))

    def test_degenerate_inputs(self) -> None:
        with self.assertRaises(ContrastiveError):
            simsiam_loss(torch.zeros(2, 3), torch.ones(2, 3), torch.ones(2, 3), torch.ones(2, 3))
        with self.assertRaises(ContrastiveError):
            simsiam_loss(torch.ones(2, 3), torch.ones(2, 4), torch.ones(2, 3), torch.ones(2, 3))

    def test_spread(self) -> None:
        self.assertAlmostEqual(representation_spread(torch.ones(5, 4)), 0.0)
        self.assertGreater(representation_spread(self.z), 0.05)


class PretrainTests(unittest.TestCase):
    def test_short_run(self) -> None:
        backbone = build_backbone(BackboneSpec(freeze_policy="all_trainable"), seed=0)
        before = backbone.layer4[2].conv3.weight.detach().clone()
        spec = SimSiamSpec(epochs=2, batch_size=2, view_size=32, projector_dim=64, predictor_hidden=16)
        trained, history = train_simsiam(backbone, normalized_scenes(4), spec, seed=1, device="cpu")
        self.assertIsInstance(trained, Backbone)
        self.assertEqual(len(history.loss), 2)
        np.testing.assert_allclose(history.learning_rate, [0.005, 0.005 * (1 + math.cos(math.pi / 2)) / 2])
        self.assertTrue(all(-1.0 <= loss <= 1.0 for loss in history.loss))
        self.assertFalse(torch.equal(before, trained.layer4[2].conv3.weight.detach()))
        self.assertEqual(len(trainable_parameter_names(trained)), len(list(trained.parameters())))

    def test_collapse_is_reported(self) -> None:
        backbone = build_backbone(BackboneSpec(freeze_policy="all_trainable"), seed=0)
        spec = SimSiamSpec(epochs=1, batch_size=2, view_size=32, projector_dim=64, predictor_hidden=16)
        with mock.patch.object(contrastive, "COLLAPSE_GRACE_EPOCHS", 0), \
                mock.patch.object(contrastive, "representation_spread", return_value=0.0):
            with self.assertLogs("contrastive", level="WARNING") as logs:
                _, history = train_simsiam(backbone, normalized_scenes(4), spec, seed=1, device="cpu")
        self.assertEqual(history.spread, [0.0])
        self.assertTrue(any("possible collapse" in line for line in logs.output))

    def test_needs_two_scenes(self) -> None:
        backbone = build_backbone(BackboneSpec(), seed=0)
        with self.assertRaises(ContrastiveError):
            train_simsiam(backbone, normalized_scenes(1), SimSiamSpec(epochs=1), seed=0, device="cpu")


if __name__ == "__main__":
    unittest.main()
