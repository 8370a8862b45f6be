# -*- coding: utf-8 -*-
from .context import pyrfdeblur

import os
import unittest
import tempfile

import numpy as np
from pydantic import ValidationError

from pyrfdeblur.core import BlurType, DatasetError
from pyrfdeblur.geometry import Camera, Pose, Trajectory, identity, lookAt
from pyrfdeblur.scene import Box, LensConfig, Scene, proceduralScene
from pyrfdeblur.blursynth import (DegradationParams, SynthConfig, addNoise, applyDegradation, averageFrames,
                                  centralFrameIndex, decodeSrgbImage, generateDataset, loadManifest, planViews,
                                  quantize, srgbDecode, srgbEncode, synthDefocus, synthMotionBlur)
from pyrfdeblur import fileformats

NOISE_FREE = DegradationParams(shot_alpha=0.0, read_sigma=0.0)


def translationRenderer(scene, camera, pose):
    """ Frames whose value is the x translation of the pose """
    return np.full((2, 2, 3), pose.translation[0])


class TransferTestSuite(unittest.TestCase):

    def test_fixed_points(self):
        self.assertEqual(float(srgbEncode(0.0)), 0.0)
        self.assertAlmostEqual(float(srgbEncode(1.0)), 1.0, places=12)

    def test_round_trip(self):
        x = np.random.default_rng(0).uniform(0.0, 1.0, size=1000)
        np.testing.assert_allclose(srgbDecode(srgbEncode(x)), x, atol=1e-7)

    def test_mid_grey(self):
        self.assertAlmostEqual(float(srgbEncode(0.5)), 0.73536, places=5)
        self.assertEqual(int(quantize(srgbEncode(0.5))), 188)

    def test_round_half_up(self):
        self.assertEqual(int(quantize(0.5 / 255.0)), 1)
        self.assertEqual(int(quantize(1.49 / 255.0)), 1)

    def test_quantisation_error(self):
        x = np.random.default_rng(1).uniform(-0.2, 1.2, size=10000)
        err = np.abs(quantize(srgbEncode(np.clip(x, 0.0, 1.0))) / 255.0 - srgbEncode(np.clip(x, 0.0, 1.0)))
        self.assertLessEqual(err.max(), 0.5 / 255.0 + 1e-12)

    def test_decode_image(self):
        img = np.array([[[0, 128, 255]]], dtype=np.uint8)
        np.testing.assert_allclose(decodeSrgbImage(img)[0, 0], srgbDecode(np.array([0.0, 128 / 255.0, 1.0])))


class DegradationTestSuite(unittest.TestCase):

    def test_noise_free_encoding(self):
        out = applyDegradation(np.full((4, 4, 3), 0.5), NOISE_FREE)
        self.assertEqual(out.dtype, np.uint8)
        self.assertTrue(np.all(out == 188))

    def test_zeros(self):
        out = applyDegradation(np.zeros((4, 4, 3)), NOISE_FREE)
        self.assertTrue(np.all(out == 0))

    def test_saturation(self):
        img = np.full((4, 4, 3), 0.2)
        img[1, 1] = [3.0, 1.5, 1.0]
        out = applyDegradation(img, NOISE_FREE)
        np.testing.assert_array_equal(out[1, 1], [255, 255, 255])

    def test_noise_variance(self):
        p = DegradationParams()
        rng = np.random.default_rng(42)

        for level in (0.05, 0.1, 0.25, 0.5, 0.9):
            raw = np.full(1000000, level)
            variance = np.var(addNoise(raw, p, rng) - raw)
            expected = p.shot_alpha * level + p.read_sigma ** 2
            self.assertLess(abs(variance - expected) / expected, 0.05)

    def test_deterministic(self):
        img = np.random.default_rng(3).uniform(0.0, 1.0, size=(8, 8, 3))
        p = DegradationParams(rng_seed=9)
        np.testing.assert_array_equal(applyDegradation(img, p, (1,)), applyDegradation(img, p, (1,)))
        self.assertFalse(np.array_equal(applyDegradation(img, p, (1,)), applyDegradation(img, p, (2,))))

    def test_colour_pipeline_is_transparent(self):
        img = np.random.default_rng(4).uniform(0.0, 1.0, size=(8, 8, 3))
        p = DegradationParams(shot_alpha=0.0, read_sigma=0.0, ccm=[[1.2, -0.1, -0.1], [-0.2, 1.3, -0.1],
                                                                   [0.0, -0.3, 1.3]], wb_gains=[2.0, 1.0, 1.6])
        np.testing.assert_array_equal(applyDegradation(img, p), applyDegradation(img, NOISE_FREE))

    def test_invalid_params(self):
        with self.assertRaises(ValidationError):
            DegradationParams(ccm=[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        with self.assertRaises(ValidationError):
            DegradationParams(shot_alpha=-1.0)
        with self.assertRaises(ValidationError):
            DegradationParams(wb_gains=[1.0, 0.0, 1.0])


class MotionBlurTestSuite(unittest.TestCase):

    def test_central_frame(self):
        self.assertEqual(centralFrameIndex(51), 25)
        self.assertEqual(centralFrameIndex(1), 0)

    def test_ground_truth_frame(self):
        traj = Trajectory([identity(), Pose(translation=[1.0, 0.0, 0.0])])
        blurred, sharp = synthMotionBlur(None, None, traj, 51, renderer=translationRenderer)

        # The 26th of 51 frames sits at t = 25 / 50
        np.testing.assert_allclose(sharp, 0.5, atol=1e-15)
        np.testing.assert_allclose(blurred, 0.5, atol=1e-12)

    def test_constant_trajectory(self):
        scene = proceduralScene(2)
        camera = Camera.fromFov(16, 16, 50.0)
        traj = Trajectory.constant(lookAt([0.0, 0.5, 3.0], [0.0, -0.3, 0.0]))

        blurred, sharp = synthMotionBlur(scene, camera, traj, 51)
        np.testing.assert_array_equal(blurred, sharp)

    def test_two_frames(self):
        f1 = np.array([[0.1, 0.2], [0.3, 0.4]])
        f2 = np.array([[0.5, 0.0], [1.0, 0.25]])
        frames = {0.0: f1, 1.0: f2}

        traj = Trajectory([identity(), Pose(translation=[1.0, 0.0, 0.0])])
        blurred, sharp = synthMotionBlur(None, None, traj, 2,
                                         renderer=lambda s, c, p: frames[float(p.translation[0])])
        np.testing.assert_array_equal(blurred, (f1 + f2) / 2.0)
        np.testing.assert_array_equal(sharp, f1)

    def test_mean_preservation(self):
        rng = np.random.default_rng(5)
        frames = [rng.uniform(0.0, 2.0, size=(6, 6, 3)) for _ in range(7)]
        self.assertAlmostEqual(averageFrames(frames).mean(), np.mean([f.mean() for f in frames]), places=12)


class DefocusTestSuite(unittest.TestCase):

    def setUp(self):
        self.camera = Camera.fromFov(32, 16, 50.0)
        self.scene = Scene(primitives=[
            Box(min=[-10.0, -10.0, -3.0], max=[0.0, 10.0, -2.0], albedo=[0.2, 0.2, 0.2]),
            Box(min=[0.0, -10.0, -3.0], max=[10.0, 10.0, -2.0], albedo=[0.8, 0.7, 0.6])],
            light_direction=[0.0, 0.0, 1.0])

    def test_zero_aperture(self):
        blurred, sharp = synthDefocus(self.scene, self.camera, identity(),
                                      LensConfig(aperture_radius=0.0, focal_distance=1.0), 4, 0)
        np.testing.assert_array_equal(blurred, sharp)

    def test_energy_preservation(self):
        lens = LensConfig(aperture_radius=0.1, blade_count=8, focal_distance=1.2)
        blurred, sharp = synthDefocus(self.scene, self.camera, identity(), lens, 64, (1, 2))

        self.assertGreater(np.abs(blurred - sharp).max(), 0.01)
        self.assertLess(abs(blurred.mean() - sharp.mean()) / sharp.mean(), 0.01)


class DatasetTestSuite(unittest.TestCase):

    def smallConfig(self, **kwargs):
        values = dict(seed=3, n_train=3, n_test=1, width=24, height=24, n_frames=5, samples_per_pixel=4)
        values.update(kwargs)
        return SynthConfig(**values)

    def test_default_views(self):
        train, test = planViews(proceduralScene(0), SynthConfig())
        self.assertEqual(len(train), 29)
        self.assertEqual(len(test), 5)

    def test_motion_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generateDataset(proceduralScene(0), tmp, self.smallConfig())

            self.assertEqual(len(manifest.train), 3)
            self.assertEqual(len(manifest.test), 1)
            self.assertEqual(manifest.blur_type, BlurType.MOTION)

            for name in ('manifest.json', 'poses.json', 'config.json'):
                self.assertTrue(os.path.isfile(os.path.join(tmp, name)))

            for v in manifest.train:
                self.assertEqual(fileformats.readPng(os.path.join(tmp, v.blurred)).shape, (24, 24, 3))
                self.assertEqual(fileformats.readPfm(os.path.join(tmp, v.sharp_pfm)).shape, (24, 24, 3))
                self.assertIsNotNone(v.trajectory)

            self.assertEqual(loadManifest(tmp), manifest)

    def test_deterministic_tree(self):
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            generateDataset(proceduralScene(0), a, self.smallConfig())
            generateDataset(proceduralScene(0), b, self.smallConfig())

            for root, _, files in os.walk(a):
                for f in files:
                    rel = os.path.relpath(os.path.join(root, f), a)
                    with open(os.path.join(a, rel), 'rb') as fa, open(os.path.join(b, rel), 'rb') as fb:
                        self.assertEqual(fa.read(), fb.read(), rel)

    def test_degenerate_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generateDataset(proceduralScene(0), tmp, self.smallConfig(magnitude=0.0, noise=False))

            for v in manifest.train:
                np.testing.assert_array_equal(fileformats.readPng(os.path.join(tmp, v.blurred)),
                                              fileformats.readPng(os.path.join(tmp, v.sharp_png)))

    def test_same_direction_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generateDataset(proceduralScene(0), tmp, self.smallConfig(same_blur_direction=True))
            self.assertEqual(len(manifest.train), 3)

    def test_defocus_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generateDataset(proceduralScene(0), tmp, self.smallConfig(n_train=2), BlurType.DEFOCUS)

            for v in manifest.train:
                self.assertIn(v.lens.blade_count, (7, 8, 9))
                self.assertGreater(v.lens.focal_distance, 0.0)

    def test_missing_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generateDataset(proceduralScene(0), tmp, self.smallConfig())
            os.remove(os.path.join(tmp, manifest.train[0].blurred))

            with self.assertRaises(DatasetError):
                loadManifest(tmp)


if __name__ == '__main__':
    unittest.main()
