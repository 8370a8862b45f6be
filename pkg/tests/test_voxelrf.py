# -*- coding: utf-8 -*-
from .context import pyrfdeblur, SLOW

import os
import unittest
import tempfile

import numpy as np

from pyrfdeblur.core import CheckpointError
from pyrfdeblur.geometry import Camera, Ray, lookAt
from pyrfdeblur.voxelrf import (EMPTY_DENSITY, TrainConfig, VoxelGrid, evalSh, gradRay, loadGrid, prune,
                                quadratureWeights, rayBoxIntersect, renderRay, renderRays, renderView,
                                sampleTrilinear, saveGrid, snapToCheckpointPrecision, softplus, softplusInverse,
                                totalVariation, trainRF, upsample)
from pyrfdeblur.metrics import psnr
from pyrfdeblur.voxelrf.grid import SH_C0

UNIT_BOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def randomGrid(seed, resolution=(3, 3, 3), shDegree=1):
    """ A grid with moderate densities and strictly positive colours """
    rng = np.random.default_rng(seed)
    grid = VoxelGrid.empty(resolution, UNIT_BOX, shDegree)
    grid.densityRaw[...] = rng.uniform(-1.0, 1.0, size=resolution)
    grid.shCoeffs[..., 0] = rng.uniform(0.5, 1.5, size=tuple(resolution) + (3,)) / SH_C0
    if shDegree == 1:
        grid.shCoeffs[..., 1:] = rng.uniform(-0.1, 0.1, size=tuple(resolution) + (3, 3))
    return grid


def uniformGrid(sigma, color, resolution=(3, 3, 3)):
    grid = VoxelGrid.empty(resolution, UNIT_BOX, 0)
    grid.densityRaw[...] = softplusInverse(sigma)
    grid.shCoeffs[..., 0] = np.asarray(color) / SH_C0
    return grid


def randomRay(rng, spread=0.5):
    """ A ray from outside the unit box through a random point at most spread from the centre """
    origin = rng.normal(size=3)
    origin *= 3.0 / np.linalg.norm(origin)
    return Ray(origin, rng.uniform(-spread, spread, size=3) - origin)


def boxInterval(grid, ray):
    tNear, tFar = rayBoxIntersect(ray.origin[None], ray.direction[None], grid.aabb)
    return float(tNear[0]), float(tFar[0])


class GridTestSuite(unittest.TestCase):

    def test_softplus_inverse(self):
        y = np.array([1e-6, 0.1, 1.0, 5.0, 50.0])
        np.testing.assert_allclose(softplus(softplusInverse(y)), y, rtol=1e-10)
        self.assertEqual(float(softplusInverse(0.0)), EMPTY_DENSITY)
        self.assertEqual(float(softplus(EMPTY_DENSITY)), 0.0)

    def test_invalid_grid(self):
        with self.assertRaises(ValueError):
            VoxelGrid.empty((1, 3, 3), UNIT_BOX)
        with self.assertRaises(ValueError):
            VoxelGrid.empty((3, 3, 3), [[0.0, 0.0, 0.0], [1.0, -1.0, 1.0]])

    def test_trilinear_at_nodes(self):
        grid = randomGrid(0)
        for i, j, k in [(0, 0, 0), (1, 2, 0), (2, 2, 2)]:
            sigma, coeffs = sampleTrilinear(grid, grid.nodePosition(i, j, k))
            self.assertAlmostEqual(sigma, float(softplus(grid.densityRaw[i, j, k])), places=12)
            np.testing.assert_allclose(coeffs, grid.shCoeffs[i, j, k], atol=1e-12)

    def test_outside_is_empty(self):
        sigma, coeffs = sampleTrilinear(randomGrid(1), [1.5, 0.0, 0.0])
        self.assertEqual(sigma, 0.0)
        self.assertTrue(np.all(coeffs == 0.0))

    def test_sh_constant_term(self):
        coeffs = np.zeros((3, 4))
        coeffs[:, 0] = np.array([0.2, 0.4, 0.6]) / SH_C0
        for d in ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]):
            np.testing.assert_allclose(evalSh(coeffs, np.array(d)), [0.2, 0.4, 0.6], atol=1e-12)

    def test_trilinear_midpoint(self):
        grid = VoxelGrid.empty((2, 2, 2), UNIT_BOX, 0)
        grid.densityRaw[0] = softplusInverse(1.0)
        grid.densityRaw[1] = softplusInverse(3.0)

        sigma, _ = sampleTrilinear(grid, [0.0, 0.3, -0.6])
        self.assertAlmostEqual(sigma, 2.0, places=10)

    def test_sh_z_band(self):
        coeffs = np.zeros((3, 4))
        coeffs[:, 2] = [1.0, 0.5, 2.0]

        for z in (1.0, 0.6, 0.1):
            d = np.array([np.sqrt(1.0 - z * z), 0.0, z])
            np.testing.assert_allclose(evalSh(coeffs, d), 0.4886025 * z * coeffs[:, 2], atol=1e-7)

        np.testing.assert_array_equal(evalSh(coeffs, np.array([0.0, 0.0, -1.0])), np.zeros(3))

    def test_upsample_preserves_field(self):
        grid = randomGrid(2)
        up = upsample(grid)

        self.assertEqual(up.resolution, (5, 5, 5))
        np.testing.assert_array_equal(up.densityRaw[::2, ::2, ::2], grid.densityRaw)

        pts = np.random.default_rng(3).uniform(-1.0, 1.0, size=(200, 3))
        s0, c0 = grid.sample(pts)
        s1, c1 = up.sample(pts)
        np.testing.assert_allclose(s1, s0, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(c1, c0, atol=1e-9)

    def test_prune(self):
        grid = randomGrid(4)
        pruned = prune(grid, 0.5)

        low = grid.density() < 0.5
        self.assertTrue(np.all(pruned.densityRaw[low] == EMPTY_DENSITY))
        np.testing.assert_array_equal(pruned.densityRaw[~low], grid.densityRaw[~low])
        self.assertFalse(np.all(grid.densityRaw == pruned.densityRaw))

    def test_total_variation_constant(self):
        value, grad = totalVariation(uniformGrid(0.7, [0.5, 0.5, 0.5]))
        self.assertAlmostEqual(value, 0.0, places=20)
        self.assertTrue(np.all(np.abs(grad) < 1e-15))

    def test_total_variation_gradient(self):
        grid = randomGrid(5)
        _, grad = totalVariation(grid)
        h = 1e-6

        for idx in [(0, 0, 0), (1, 1, 1), (2, 0, 1)]:
            plus, minus = grid.copy(), grid.copy()
            plus.densityRaw[idx] += h
            minus.densityRaw[idx] -= h
            fd = (totalVariation(plus)[0] - totalVariation(minus)[0]) / (2.0 * h)
            self.assertAlmostEqual(grad[idx], fd, delta=1e-6 * max(1.0, abs(fd)))


class RenderTestSuite(unittest.TestCase):

    def test_box_intersection(self):
        origins = np.array([[0.0, 0.0, 3.0], [0.0, 5.0, 3.0], [0.0, 0.0, 0.0]])
        dirs = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        tNear, tFar = rayBoxIntersect(origins, dirs, UNIT_BOX)

        np.testing.assert_allclose(tNear, [2.0, 0.0, 0.0])
        np.testing.assert_allclose(tFar, [4.0, 0.0, 1.0])

    def test_homogeneous_medium(self):
        sigma, color, background = 0.7, np.array([0.9, 0.5, 0.2]), np.array([0.1, 0.2, 0.3])
        grid = uniformGrid(sigma, color)

        out = renderRay(grid, Ray([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]), 2.0, 4.0, 1024, background)
        T = np.exp(-sigma * 2.0)
        np.testing.assert_allclose(out, color * (1.0 - T) + background * T, atol=1e-10)

    def test_homogeneous_media(self):
        rng = np.random.default_rng(30)

        for n in range(20):
            sigma = rng.uniform(0.1, 3.0)
            color, background = rng.uniform(0.0, 1.0, size=3), rng.uniform(0.0, 1.0, size=3)
            grid = uniformGrid(sigma, color)
            ray = randomRay(rng)
            tNear, tFar = boxInterval(grid, ray)

            T = np.exp(-sigma * (tFar - tNear))
            out = renderRay(grid, ray, tNear, tFar, 1024, background)
            np.testing.assert_allclose(out, color * (1.0 - T) + background * T, atol=1e-4, err_msg=str(n))

    def test_empty_grid_shows_background(self):
        grid = VoxelGrid.empty((3, 3, 3), UNIT_BOX)
        img = renderView(grid, Camera.fromFov(8, 6, 50.0), lookAt([0.0, 0.0, 3.0], [0.0, 0.0, 0.0]),
                         [0.2, 0.3, 0.4], 16)
        self.assertEqual(img.shape, (6, 8, 3))
        np.testing.assert_array_equal(img, np.broadcast_to([0.2, 0.3, 0.4], img.shape))

    def test_missed_ray(self):
        out = renderRays(randomGrid(6), [[0.0, 5.0, 3.0]], [[0.0, 0.0, -1.0]], 0.0, 0.0, 8, [0.3, 0.3, 0.3])
        np.testing.assert_allclose(out[0], [0.3, 0.3, 0.3])

    def test_partition_of_unity(self):
        grid = randomGrid(7)
        ray = Ray([-3.0, 0.2, 0.1], [1.0, 0.05, -0.02])

        for n in (1, 7, 64):
            weights, tFinal = quadratureWeights(grid, ray, 2.0, 4.0, n)
            self.assertEqual(len(weights), n)
            self.assertTrue(np.all(weights >= 0.0))
            self.assertAlmostEqual(weights.sum() + tFinal, 1.0, places=12)

    def test_partition_of_unity_random_rays(self):
        rng = np.random.default_rng(31)
        grid = randomGrid(14, (6, 6, 6))

        for n in range(1000):
            ray = randomRay(rng, spread=0.9)
            tNear, tFar = boxInterval(grid, ray)
            weights, tFinal = quadratureWeights(grid, ray, tNear, tFar, int(rng.integers(1, 129)))

            self.assertTrue(np.all(weights >= 0.0))
            self.assertAlmostEqual(weights.sum() + tFinal, 1.0, delta=1e-6, msg=str(n))

    def test_invalid_interval(self):
        with self.assertRaises(ValueError):
            renderRay(randomGrid(8), Ray([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]), 2.0, 2.0, 8, np.zeros(3))

    def test_gradient_matches_finite_differences(self):
        grid = randomGrid(9)
        ray = Ray([-3.0, 0.3, -0.2], [1.0, -0.1, 0.05])
        tNear, tFar = (float(t[0]) for t in rayBoxIntersect(ray.origin[None], ray.direction[None], grid.aabb))
        target = np.array([0.4, 0.6, 0.8])
        background = np.array([0.1, 0.0, 0.2])

        def loss(g):
            r = renderRay(g, ray, tNear, tFar, 16, background) - target
            return float(np.sum(r * r))

        value, grad = gradRay(grid, ray, target, tNear, tFar, 16, background)
        self.assertAlmostEqual(value, loss(grid), places=12)
        h = 1e-6

        for idx in np.ndindex(*grid.resolution):
            plus, minus = grid.copy(), grid.copy()
            plus.densityRaw[idx] += h
            minus.densityRaw[idx] -= h
            fd = (loss(plus) - loss(minus)) / (2.0 * h)
            self.assertAlmostEqual(grad.density[idx], fd, delta=1e-6 * max(1.0, abs(fd)))

        for idx in [(1, 1, 1, 0, 0), (1, 2, 0, 1, 2), (0, 1, 1, 2, 3)]:
            plus, minus = grid.copy(), grid.copy()
            plus.shCoeffs[idx] += h
            minus.shCoeffs[idx] -= h
            fd = (loss(plus) - loss(minus)) / (2.0 * h)
            self.assertAlmostEqual(grad.sh[idx], fd, delta=1e-6 * max(1.0, abs(fd)))

    def test_gradient_random_configurations(self):
        rng = np.random.default_rng(32)
        h = 1e-6

        for n in range(100):
            resolution = tuple(int(r) for r in rng.integers(2, 9, size=3))
            grid = randomGrid(1000 + n, resolution, int(rng.integers(0, 2)))
            ray = randomRay(rng, spread=0.9)
            tNear, tFar = boxInterval(grid, ray)
            target = rng.uniform(0.0, 1.0, size=3)
            background = rng.uniform(0.0, 0.3, size=3)
            steps = int(rng.integers(4, 33))

            def loss(g):
                r = renderRay(g, ray, tNear, tFar, steps, background) - target
                return float(np.sum(r * r))

            _, grad = gradRay(grid, ray, target, tNear, tFar, steps, background)
            nodes = np.argwhere(grad.touched())
            self.assertTrue(len(nodes))

            for node in nodes[rng.choice(len(nodes), size=min(3, len(nodes)), replace=False)]:
                idx = tuple(node)
                plus, minus = grid.copy(), grid.copy()
                plus.densityRaw[idx] += h
                minus.densityRaw[idx] -= h
                fd = (loss(plus) - loss(minus)) / (2.0 * h)
                self.assertAlmostEqual(grad.density[idx], fd, delta=1e-3 * max(1e-3, abs(fd)), msg=str(n))

                shIdx = idx + (int(rng.integers(0, 3)), int(rng.integers(0, grid.numCoeffs)))
                plus, minus = grid.copy(), grid.copy()
                plus.shCoeffs[shIdx] += h
                minus.shCoeffs[shIdx] -= h
                fd = (loss(plus) - loss(minus)) / (2.0 * h)
                self.assertAlmostEqual(grad.sh[shIdx], fd, delta=1e-3 * max(1e-3, abs(fd)), msg=str(n))

    def test_untouched_nodes_have_zero_gradient(self):
        grid = randomGrid(10, (5, 5, 5))
        ray = Ray([0.9, 0.9, 3.0], [0.0, 0.0, -1.0])
        _, grad = gradRay(grid, ray, np.zeros(3), 2.0, 4.0, 16, np.zeros(3))

        touched = grad.touched()
        self.assertTrue(touched[4, 4].any())
        self.assertFalse(touched[:3].any())


class CheckpointTestSuite(unittest.TestCase):

    def test_save_load(self):
        grid = snapToCheckpointPrecision(randomGrid(11))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'grid.ckpt')
            saveGrid(grid, path)
            loaded = loadGrid(path)

        np.testing.assert_array_equal(loaded.densityRaw, grid.densityRaw)
        np.testing.assert_array_equal(loaded.shCoeffs, grid.shCoeffs)
        np.testing.assert_array_equal(loaded.aabb, grid.aabb)

    def test_snapped_render_is_reproduced(self):
        grid = snapToCheckpointPrecision(randomGrid(12))
        camera = Camera.fromFov(6, 6, 50.0)
        pose = lookAt([0.5, 0.4, 3.0], [0.0, 0.0, 0.0])

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'grid.ckpt')
            saveGrid(grid, path)
            np.testing.assert_array_equal(renderView(loadGrid(path), camera, pose, np.zeros(3), 16),
                                          renderView(grid, camera, pose, np.zeros(3), 16))

    def test_corrupt_checkpoints(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'grid.ckpt')
            saveGrid(randomGrid(13), path)
            with open(path, 'rb') as f:
                content = f.read()

            variants = {'magic': b'XXXX' + content[4:],
                        'version': content[:4] + (99).to_bytes(4, 'little') + content[8:],
                        'truncated': content[:-4],
                        'header': content[:10]}

            for name, data in variants.items():
                bad = os.path.join(tmp, name + '.ckpt')
                with open(bad, 'wb') as f:
                    f.write(data)
                with self.assertRaises(CheckpointError, msg=name):
                    loadGrid(bad)

            with self.assertRaises(CheckpointError):
                loadGrid(os.path.join(tmp, 'missing.ckpt'))


def tinyConfig(**kwargs):
    values = dict(iterations=30, prune_upsample_every=10, initial_resolution=2, max_resolution=4,
                  rays_per_batch=64, rays_per_chunk=32, n_steps_per_ray=16)
    values.update(kwargs)
    return TrainConfig(**values)


class TrainTestSuite(unittest.TestCase):

    def setUp(self):
        self.camera = Camera.fromFov(8, 8, 50.0)
        self.poses = [lookAt([0.0, 0.0, 3.0], [0.0, 0.0, 0.0]), lookAt([3.0, 0.0, 0.0], [0.0, 0.0, 0.0])]
        self.views = [np.full((8, 8, 3), 0.3), np.full((8, 8, 3), 0.3)]

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            TrainConfig(iterations=10, prune_upsample_every=20)
        with self.assertRaises(ValueError):
            TrainConfig(sh_degree=2)
        with self.assertRaises(ValueError):
            TrainConfig(initial_resolution=64, max_resolution=32)

    def test_learning_rate_decay(self):
        cfg = tinyConfig()
        self.assertAlmostEqual(cfg.learningRate(2.0, 0), 2.0)
        self.assertAlmostEqual(cfg.learningRate(2.0, cfg.iterations - 1), 2.0 * cfg.lr_final_ratio)

    def test_requires_two_views(self):
        with self.assertRaises(ValueError):
            trainRF(self.views[:1], self.poses[:1], self.camera, tinyConfig())
        with self.assertRaises(ValueError):
            trainRF(self.views, self.poses[:1], self.camera, tinyConfig())

    def test_schedule(self):
        calls = []
        result = trainRF(self.views, self.poses, self.camera, tinyConfig(), seed=1,
                         callback=lambda it, g: calls.append((it, g.resolution)))

        self.assertEqual(calls, [(10, (5, 5, 5)), (20, (5, 5, 5))])
        self.assertEqual(result.grid.resolution, (5, 5, 5))
        self.assertEqual(len(result.losses), 30)
        self.assertTrue(np.all(np.isfinite(result.losses)))

    def test_deterministic(self):
        a = trainRF(self.views, self.poses, self.camera, tinyConfig(), seed=(4, 2))
        b = trainRF(self.views, self.poses, self.camera, tinyConfig(), seed=(4, 2))
        np.testing.assert_array_equal(a.grid.densityRaw, b.grid.densityRaw)
        np.testing.assert_array_equal(a.grid.shCoeffs, b.grid.shCoeffs)
        np.testing.assert_array_equal(a.losses, b.losses)

    @unittest.skipUnless(SLOW, 'set RFDEBLUR_SLOW=1 to run')
    def test_fit_reduces_loss(self):
        views = [np.full((8, 8, 3), [0.8, 0.4, 0.1]) for _ in self.poses]
        cfg = tinyConfig(iterations=300, prune_upsample_every=100, init_density=0.0)
        result = trainRF(views, self.poses, self.camera, cfg, seed=0)
        self.assertLess(result.finalLoss, 0.5 * result.losses[:10].mean())

    @unittest.skipUnless(SLOW, 'set RFDEBLUR_SLOW=1 to run')
    def test_reproduces_rendered_grid(self):
        reference = randomGrid(15, (5, 5, 5), 0)
        camera = Camera.fromFov(16, 16, 50.0)
        angles = np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
        poses = [lookAt([3.0 * np.cos(a), 1.0 + 0.5 * np.sin(2.0 * a), 3.0 * np.sin(a)], [0.0, 0.0, 0.0])
                 for a in angles]
        views = [renderView(reference, camera, p, np.zeros(3), 32) for p in poses]

        cfg = tinyConfig(iterations=1500, prune_upsample_every=1500, initial_resolution=4, max_resolution=4,
                         rays_per_batch=512, rays_per_chunk=256, n_steps_per_ray=32, sh_degree=0, tv_weight=0.0,
                         prune_threshold=1e-6)
        result = trainRF(views, poses, camera, cfg, seed=0)

        renders = [renderView(result.grid, camera, p, np.zeros(3), 32) for p in poses]
        self.assertTrue(result.finalLoss < 1e-4 or np.mean([psnr(r, v) for r, v in zip(renders, views)]) >= 30.0)


if __name__ == '__main__':
    unittest.main()
