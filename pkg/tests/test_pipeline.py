# -*- coding: utf-8 -*-
from .context import pyrfdeblur, SLOW

import os
import json
import shutil
import unittest
import tempfile
from unittest import mock

import numpy as np
from pydantic import ValidationError

from pyrfdeblur.core import CheckpointError
from pyrfdeblur.geometry import Camera, identity, lookAt, rotationError
from pyrfdeblur.scene import proceduralScene
from pyrfdeblur.blursynth import SynthConfig, decodeSrgbImage, generateDataset, loadManifest
from pyrfdeblur.deblur import DeblurConfig
from pyrfdeblur.voxelrf import TrainConfig
from pyrfdeblur.metrics import IterationMetrics, iterationReport, summariseReports
from pyrfdeblur import fileformats
from pyrfdeblur.pipeline import (Pipeline, PipelineConfig, PoseConfig, PoseMode, checkpoint, poseProvider, resume,
                                 runPipeline)

TINY_TRAIN = TrainConfig(iterations=20, prune_upsample_every=10, initial_resolution=4, max_resolution=8,
                         rays_per_batch=128, rays_per_chunk=64, n_steps_per_ray=16)


def tinyConfig(workdir, **kwargs):
    values = dict(n_iterations=2, train=TINY_TRAIN, rf_iterations_first=10, rf_iterations_step=5,
                  deblur=DeblurConfig(kernel_size=5, search_crop=24, rl_iterations=5, search_rl_iterations=3),
                  workdir=workdir, seed=7)
    values.update(kwargs)
    return PipelineConfig(**values)


def treeContents(root, skip=('timings.json', 'run.json')):
    """ Maps every relative file path under root to its bytes """
    out = {}
    for folder, _, files in os.walk(root):
        for f in files:
            if f not in skip:
                path = os.path.join(folder, f)
                with open(path, 'rb') as fh:
                    out[os.path.relpath(path, root)] = fh.read()
    return out


class ConfigTestSuite(unittest.TestCase):

    def test_escalation(self):
        cfg = PipelineConfig()
        self.assertEqual([cfg.trainConfigFor(i).iterations for i in range(1, 7)],
                         [2000, 3000, 4000, 5000, 6000, 6000])
        self.assertEqual(cfg.trainConfigFor(1).prune_upsample_every, 667)
        self.assertEqual(cfg.trainConfigFor(5).prune_upsample_every, 2000)

    def test_escalation_independent_of_length(self):
        a = PipelineConfig(n_iterations=2)
        b = PipelineConfig(n_iterations=5)
        self.assertEqual(a.trainConfigFor(2), b.trainConfigFor(2))

    def test_fixed_budget(self):
        cfg = PipelineConfig(rf_iterations_first=None)
        self.assertEqual(cfg.trainConfigFor(3), cfg.train)

    def test_validation(self):
        with self.assertRaises(ValidationError):
            PipelineConfig(n_iterations=0)
        with self.assertRaises(ValidationError):
            PipelineConfig(rf_iterations_first=10000)
        with self.assertRaises(ValidationError):
            PoseConfig(sigma_t=-0.1)
        with self.assertRaises(ValidationError):
            PipelineConfig(unknown=1)


class PoseProviderTestSuite(unittest.TestCase):

    def setUp(self):
        self.poses = [lookAt([np.cos(a), 0.5, np.sin(a)], [0.0, 0.0, 0.0]) for a in np.linspace(0.0, 1.0, 5)]

    def test_ground_truth(self):
        out = poseProvider(self.poses, PoseConfig(sigma_t=0.1, sigma_r=0.1), 3, 1)
        self.assertTrue(all(a == b for a, b in zip(out, self.poses)))

    def test_zero_noise(self):
        out = poseProvider(self.poses, PoseConfig(mode=PoseMode.PERTURBED), 3, 1)
        self.assertTrue(all(a == b for a, b in zip(out, self.poses)))

    def test_perturbed_is_keyed(self):
        cfg = PoseConfig(mode=PoseMode.PERTURBED, sigma_t=0.01, sigma_r=0.01)
        a = poseProvider(self.poses, cfg, 3, 1)
        b = poseProvider(self.poses, cfg, 3, 1)
        c = poseProvider(self.poses, cfg, 3, 2)

        self.assertTrue(all(p == q for p, q in zip(a, b)))
        self.assertFalse(any(p == q for p, q in zip(a, c)))
        self.assertFalse(any(p == q for p, q in zip(a, self.poses)))

    def test_noise_statistics(self):
        sigma = 0.01
        poses = [identity()] * 2000

        shifted = poseProvider(poses, PoseConfig(mode=PoseMode.PERTURBED, sigma_t=sigma), 0, 1)
        dt = np.abs(np.array([p.translation for p in shifted]))
        self.assertLess(abs(dt.mean() / (sigma * np.sqrt(2.0 / np.pi)) - 1.0), 0.05)
        self.assertTrue(all(np.array_equal(p.rotation, identity().rotation) for p in shifted))

        rotated = poseProvider(poses, PoseConfig(mode=PoseMode.PERTURBED, sigma_r=sigma), 0, 1)
        angles = np.array([rotationError(p, identity()) for p in rotated])
        self.assertLess(abs(angles.mean() / (2.0 * sigma * np.sqrt(2.0 / np.pi)) - 1.0), 0.05)


class PipelineTestSuite(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.data = os.path.join(cls.tmp, 'data')
        generateDataset(proceduralScene(0), cls.data, SynthConfig(seed=2, n_train=3, n_test=1, width=24, height=24,
                                                                  n_frames=5, samples_per_pixel=4))

        # Reference run shared by the tests below
        cls.reference = os.path.join(cls.tmp, 'reference')
        cls.referenceGrid = Pipeline.fromDataset(cls.data, tinyConfig(cls.reference)).run()

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    def workdir(self, name):
        return os.path.join(self.tmp, name)

    def test_structure(self):
        ref = self.reference

        for f in ('run.json', 'report.txt', 'report.csv', 'report.json', 'iter_00/state.json'):
            self.assertTrue(os.path.isfile(os.path.join(ref, f)), f)

        for vid in range(3):
            self.assertTrue(os.path.isfile(os.path.join(ref, 'iter_00', 'deblurred', 'view_{:04d}.pfm'.format(vid))))

        for i in (1, 2):
            folder = os.path.join(ref, 'iter_{:02d}'.format(i))
            for f in ('grid.ckpt', 'metrics.json', 'timings.json', 'state.json', 'rendered/view_0000.pfm'):
                self.assertTrue(os.path.isfile(os.path.join(folder, f)), f)
            self.assertEqual(len(os.listdir(os.path.join(folder, 'heldout'))), 1)

        # The last iteration only constructs the radiance field
        self.assertTrue(os.path.isfile(os.path.join(ref, 'iter_01', 'deblurred', 'view_0001.pfm')))
        self.assertFalse([f for f in os.listdir(os.path.join(ref, 'iter_02', 'deblurred')) if f.endswith('.pfm')])

        with open(os.path.join(ref, 'iter_02', 'metrics.json')) as f:
            metrics = json.load(f)
        self.assertEqual(metrics['iteration'], 2)
        self.assertIsNotNone(metrics['heldout_psnr'])

    def test_single_iteration_grid_matches(self):
        workdir = self.workdir('single')
        Pipeline.fromDataset(self.data, tinyConfig(workdir, n_iterations=1)).run()

        with open(os.path.join(workdir, 'iter_01', 'grid.ckpt'), 'rb') as a, \
                open(os.path.join(self.reference, 'iter_01', 'grid.ckpt'), 'rb') as b:
            self.assertEqual(a.read(), b.read())

        self.assertFalse(os.path.isdir(os.path.join(workdir, 'iter_02')))

    def test_resume_is_bit_identical(self):
        workdir = self.workdir('resumed')
        Pipeline.fromDataset(self.data, tinyConfig(workdir)).run()
        shutil.rmtree(os.path.join(workdir, 'iter_02'))

        pipeline = Pipeline.fromDataset(self.data, tinyConfig(workdir))
        grid = pipeline.run()

        self.assertTrue(pipeline.isCompleted())
        self.assertEqual(pipeline.state.iteration, 2)
        np.testing.assert_array_equal(grid.densityRaw, self.referenceGrid.densityRaw)
        self.assertEqual(treeContents(workdir), treeContents(self.reference))

    def test_extend_completed_run(self):
        workdir = self.workdir('extended')
        shutil.copytree(self.reference, workdir)
        grid = Pipeline.fromDataset(self.data, tinyConfig(workdir, n_iterations=3)).run()

        fresh = self.workdir('three')
        freshGrid = Pipeline.fromDataset(self.data, tinyConfig(fresh, n_iterations=3)).run()

        # Iteration 2 gains the guided round it skipped as the last iteration of the shorter run
        self.assertTrue([f for f in os.listdir(os.path.join(workdir, 'iter_02', 'deblurred')) if f.endswith('.pfm')])
        self.assertEqual(resume(os.path.join(workdir, 'iter_02')).deblurredIteration, 2)

        np.testing.assert_array_equal(grid.densityRaw, freshGrid.densityRaw)
        self.assertEqual(treeContents(workdir), treeContents(fresh))

    def test_completed_run_does_no_work(self):
        pipeline = Pipeline.fromDataset(self.data, tinyConfig(self.reference))

        with mock.patch('pyrfdeblur.pipeline.trainRF', side_effect=AssertionError('trained again')):
            grid = pipeline.run()

        self.assertTrue(pipeline.isCompleted())
        np.testing.assert_array_equal(grid.shCoeffs, self.referenceGrid.shCoeffs)

    def test_fresh_run_refuses_previous_state(self):
        with self.assertRaises(CheckpointError):
            Pipeline.fromDataset(self.data, tinyConfig(self.reference)).run(resume=False)

    def test_changed_settings(self):
        with self.assertRaises(CheckpointError):
            Pipeline.fromDataset(self.data, tinyConfig(self.reference, seed=8)).run()

    def test_state_version_mismatch(self):
        workdir = self.workdir('version')
        shutil.copytree(self.reference, workdir)

        path = os.path.join(workdir, 'iter_01', 'state.json')
        with open(path) as f:
            record = json.load(f)
        record['format_version'] = 99
        with open(path, 'w') as f:
            json.dump(record, f)

        with self.assertRaises(CheckpointError):
            resume(path)

        self.assertEqual(resume(workdir).iteration, 2)

    def test_corrupt_grid(self):
        workdir = self.workdir('corrupt')
        shutil.copytree(self.reference, workdir)

        with open(os.path.join(workdir, 'iter_02', 'grid.ckpt'), 'wb') as f:
            f.write(b'not a grid')

        with self.assertRaises(CheckpointError):
            resume(workdir)

    def test_checkpoint_round_trip(self):
        state = resume(os.path.join(self.reference, 'iter_01'))
        self.assertEqual(state.iteration, 1)
        self.assertEqual(state.deblurredIteration, 1)
        self.assertEqual(len(state.metrics), 1)

        workdir = self.workdir('copy')
        path = checkpoint(state, workdir)
        restored = resume(path)

        self.assertEqual(restored.iteration, 1)
        for a, b in zip(restored.deblurred, state.deblurred):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(restored.grid.densityRaw, state.grid.densityRaw)

    def test_missing_state(self):
        with self.assertRaises(CheckpointError):
            resume(tempfile.mkdtemp(dir=self.tmp))

    def test_identity_operator(self):
        workdir = self.workdir('identity')
        cfg = tinyConfig(workdir, n_iterations=1, deblur=DeblurConfig(method='none'))
        Pipeline.fromDataset(self.data, cfg).run()

        manifest = loadManifest(self.data)
        blurred = fileformats.readPng(os.path.join(self.data, manifest.train[0].blurred))
        deblurred = fileformats.readPfm(os.path.join(workdir, 'iter_00', 'deblurred', 'view_0000.pfm'))
        np.testing.assert_allclose(deblurred, decodeSrgbImage(blurred), atol=1e-6)


class IterationTrendTestSuite(unittest.TestCase):

    @unittest.skipUnless(SLOW, 'set RFDEBLUR_SLOW=1 to run')
    def test_quality_grows_with_iterations(self):
        tmp = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, tmp)

        reports = []
        rendered = []
        for k in range(3):
            data = os.path.join(tmp, 'data_{:d}'.format(k))
            generateDataset(proceduralScene(k), data, SynthConfig(seed=k))

            workdir = os.path.join(tmp, 'run_{:d}'.format(k))
            Pipeline.fromDataset(data, PipelineConfig(n_iterations=5, workdir=workdir, seed=k)).run()
            report = iterationReport(workdir, write=False)
            reports.append(report)

            rendered.append([fileformats.readModel(os.path.join(workdir, 'iter_{:02d}'.format(i), 'metrics.json'),
                                                   IterationMetrics).rendered_psnr for i in range(1, 6)])

        # One N=5 run holds the grids V^1 .. V^5 of every shorter run
        series = summariseReports(reports)
        self.assertEqual(sorted(series), [1, 2, 3, 4, 5])
        self.assertGreaterEqual(series[5] - series[1], 0.5)

        values = list(series.values())
        for a, b in zip(values, values[1:]):
            self.assertGreaterEqual(b, a - 0.1)

        guidance = np.mean(rendered, axis=0)
        for a, b in zip(guidance, guidance[1:]):
            self.assertGreaterEqual(b, a - 0.1)


class RunPipelineTestSuite(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        self.camera = Camera.fromFov(12, 12, 50.0)
        self.poses = [lookAt([0.0, 0.0, 3.0], [0.0, 0.0, 0.0]), lookAt([3.0, 0.0, 0.0], [0.0, 0.0, 0.0])]
        self.views = [rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8) for _ in self.poses]

    def test_invalid_inputs(self):
        with self.assertRaises(ValueError):
            Pipeline(self.views[:1], self.poses[:1], self.camera)
        with self.assertRaises(ValueError):
            Pipeline(self.views, self.poses[:1], self.camera)

    def test_without_heldout_views(self):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = tinyConfig(tmp, n_iterations=1)
            grid, state = runPipeline(self.views, self.poses, self.camera, cfg)

            self.assertEqual(state.iteration, 1)
            self.assertTrue(grid.isFinite())
            self.assertFalse(os.path.isfile(os.path.join(tmp, 'report.txt')))

    def test_working_directory(self):
        pipeline = Pipeline(self.views, self.poses, self.camera)
        with tempfile.TemporaryDirectory() as tmp:
            target = os.path.join(tmp, 'nested', 'run')
            pipeline.setWorkingDirectory(target)
            self.assertEqual(pipeline.workdir, target)
            self.assertTrue(os.path.isdir(target))


if __name__ == '__main__':
    unittest.main()
