# -*- coding: utf-8 -*-
"""
Command line entry points. Every command resolves a :class:`RunConfig` from the model defaults, an optional
``--config`` file and the command line flags (in that order of precedence) and writes the resolved
configuration into its output tree.
"""

import argparse
import copy
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .core import (SCHEMA_VERSION, VERSION, BlurType, ColorSpace, ConfigError, DatasetError, ExitCode, RFDeblurError,
                   Settings, setupLogging)
from .geometry import Pose
from .scene import proceduralScene, saveScene
from .blursynth import PoseFile, SynthConfig, generateDataset, quantize, srgbEncode
from .metrics import EvalConfig, MetricReport, evaluateImages, iterationReport, ssimWindow, summariseReports
from .pipeline import Pipeline, PipelineConfig, PoseMode
from .voxelrf import loadGrid, renderView
from . import fileformats

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """
    The fully resolved configuration of a command
    """
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    scene: Optional[str] = None
    dataset: Optional[str] = None
    workdir: str = 'run'
    synth: SynthConfig = SynthConfig()
    pipeline: PipelineConfig = PipelineConfig()
    eval: EvalConfig = EvalConfig()

    def resolved(self) -> 'RunConfig':
        """
        Propagates the universal seed and working directory into the module settings
        """
        return self.model_copy(update={
            'synth': self.synth.model_copy(update={'seed': self.seed}),
            'pipeline': self.pipeline.model_copy(update={'seed': self.seed, 'workdir': self.workdir,
                                                         'eval': self.eval})})


def _setPath(d: Dict[str, Any], path: str, value: Any) -> None:

    keys = path.split('.')
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:

    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# Command line flags and the configuration fields they override
FLAG_FIELDS = {
    'seed': 'seed',
    'workdir': 'workdir',
    'scene': 'scene',
    'dataset': 'dataset',
    'blur': 'synth.blur_type',
    'magnitude': 'synth.magnitude',
    'noise': 'synth.noise',
    'same_direction': 'synth.same_blur_direction',
    'n_train': 'synth.n_train',
    'n_test': 'synth.n_test',
    'size': None,
    'iterations': 'pipeline.n_iterations',
    'rf_iterations': 'pipeline.train.iterations',
    'rf_iterations_first': 'pipeline.rf_iterations_first',
    'deblur_method': 'pipeline.deblur.method',
    'pose_mode': 'pipeline.pose.mode',
    'sigma_t': 'pipeline.pose.sigma_t',
    'sigma_r': 'pipeline.pose.sigma_r',
    'color_space': 'eval.color_space',
}


def loadRunConfig(args: argparse.Namespace) -> RunConfig:
    """
    Resolves the configuration of a command: defaults < ``--config`` file < flags

    :raise: ConfigError: for unknown keys or invalid values
    """
    values: Dict[str, Any] = {}

    if getattr(args, 'config', None):
        if not os.path.isfile(args.config):
            raise ConfigError(args.config, 'Configuration file ({:s}) was not found'.format(args.config))
        cfg = fileformats.readModel(args.config, RunConfig)
        values = cfg.model_dump(mode='json', exclude_unset=True)

    overrides: Dict[str, Any] = {}
    for flag, path in FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is None:
            continue

        if flag == 'size':
            _setPath(overrides, 'synth.width', v)
            _setPath(overrides, 'synth.height', v)
        elif flag == 'noise':
            _setPath(overrides, path, v == 'on')
        else:
            _setPath(overrides, path, v)

    try:
        return RunConfig.model_validate(_merge(values, overrides)).resolved()
    except ValidationError as e:
        raise ConfigError(overrides, 'Invalid configuration:\n{:s}'.format(str(e)))


def writeRunConfig(cfg: RunConfig, outDir: str) -> None:
    os.makedirs(outDir, exist_ok=True)
    fileformats.writeModel(os.path.join(outDir, 'run_config.json'), cfg)


def cmdSynth(args: argparse.Namespace) -> int:
    """
    Generates a blurred dataset from a scene file
    """
    cfg = loadRunConfig(args)
    out = args.out if args.out else cfg.dataset

    if cfg.scene is None:
        raise ConfigError('scene', 'A scene file is required (--scene)')

    if out is None:
        raise ConfigError('out', 'An output directory is required (--out)')

    if not os.path.isfile(cfg.scene):
        raise DatasetError(cfg.scene, 'Scene file ({:s}) was not found'.format(cfg.scene))

    manifest = generateDataset(cfg.scene, out, cfg.synth)
    writeRunConfig(cfg, out)

    print('Dataset {:s}: {:d} training views, {:d} novel views, {:s} blur, seed {:d}'.format(
        out, len(manifest.train), len(manifest.test), manifest.blur_type.value, manifest.seed))

    return ExitCode.SUCCESS.value


def cmdRun(args: argparse.Namespace) -> int:
    """
    Runs the iterative deblurring pipeline on a dataset
    """
    if isinstance(args.resume, str):
        args.workdir = args.resume

    if args.resume and args.config is None:
        previous = os.path.join(args.workdir or RunConfig().workdir, 'run_config.json')
        if os.path.isfile(previous):
            args.config = previous

    cfg = loadRunConfig(args)

    if cfg.dataset is None:
        raise ConfigError('dataset', 'A dataset directory is required (--dataset)')

    pipeline = Pipeline.fromDataset(cfg.dataset, cfg.pipeline)
    writeRunConfig(cfg, cfg.workdir)
    pipeline.run(resume=bool(args.resume))

    if pipeline.state.metrics:
        print(iterationReport(cfg.workdir, write=False).table())

    return ExitCode.SUCCESS.value


def cmdRender(args: argparse.Namespace) -> int:
    """
    Renders a grid checkpoint at the poses of a pose file
    """
    cfg = loadRunConfig(args)
    grid = loadGrid(args.grid)
    poseFile = fileformats.readModel(args.poses, PoseFile)

    camera = poseFile.camera.toCamera()
    background = np.asarray(poseFile.background if args.background is None else args.background, dtype=np.float64)
    steps = cfg.pipeline.train.n_steps_per_ray if args.steps is None else args.steps

    if steps < 1:
        raise ConfigError('--steps', 'At least one sample per ray is required (got {:d})'.format(steps))

    records = [p for p in poseFile.poses if args.split is None or p.split == args.split]
    if not records:
        raise DatasetError(args.poses, 'Pose file ({:s}) lists no poses to render'.format(args.poses))

    os.makedirs(args.out, exist_ok=True)

    images = Settings.map(lambda r: renderView(grid, camera, Pose.fromMatrix(r.matrix), background, steps), records)

    for r, img in zip(records, images):
        stem = os.path.join(args.out, 'view_{:04d}'.format(r.view_id))
        fileformats.writePfm(stem + '.pfm', img)
        fileformats.writePng(stem + '.png', quantize(srgbEncode(np.clip(img, 0.0, 1.0))))

    writeRunConfig(cfg, args.out)
    print('Rendered {:d} views to {:s}'.format(len(records), args.out))

    return ExitCode.SUCCESS.value


def _groundTruthFile(gtDir: str, name: str) -> Optional[str]:

    for candidate in (name + '.pfm', name + '.sharp.pfm'):
        path = os.path.join(gtDir, candidate)
        if os.path.isfile(path):
            return path
    return None


def cmdEval(args: argparse.Namespace) -> int:
    """
    Computes PSNR and SSIM of a directory of renders against ground truth images of the same names
    """
    cfg = loadRunConfig(args)

    if not os.path.isdir(args.renders):
        raise DatasetError(args.renders, 'Render directory ({:s}) was not found'.format(args.renders))

    names = sorted(f[:-4] for f in os.listdir(args.renders) if f.endswith('.pfm'))
    if not names:
        raise DatasetError(args.renders, 'Render directory ({:s}) holds no PFM images'.format(args.renders))

    gtFiles = {n: _groundTruthFile(args.gt, n) for n in names}
    missing = [n for n, f in gtFiles.items() if f is None]

    if missing:
        raise DatasetError(args.gt, 'Ground truth is missing for:\n  {:s}'.format(
            '\n  '.join(os.path.join(args.gt, n + '.pfm') for n in missing)))

    renders = [fileformats.readPfm(os.path.join(args.renders, n + '.pfm')) for n in names]
    gts = [fileformats.readPfm(gtFiles[n]) for n in names]

    window = ssimWindow().shape[0]
    for n, r, g in zip(names, renders, gts):
        if r.shape != g.shape:
            raise DatasetError(n, 'Render {:s} has shape {:s} but its ground truth {:s}'.format(
                n, str(r.shape), str(g.shape)))

        if min(r.shape[:2]) < window:
            raise DatasetError(n, 'Render {:s} is smaller than the {:d} pixel SSIM window'.format(n, window))

    report = evaluateImages(renders, gts, cfg.eval.color_space, names, cfg.eval.peak)

    out = args.renders if args.out is None else args.out
    report.write(out, 'eval')
    writeRunConfig(cfg, out)
    print(report.table())

    return ExitCode.SUCCESS.value


def cmdReport(args: argparse.Namespace) -> int:
    """
    Tabulates the held-out metrics of every iteration of a run
    """
    cfg = loadRunConfig(args)
    print(iterationReport(cfg.workdir).table())
    return ExitCode.SUCCESS.value


def cmdScene(args: argparse.Namespace) -> int:
    """
    Writes a procedural scene file
    """
    cfg = loadRunConfig(args)
    saveScene(proceduralScene(cfg.seed, args.objects, args.emissive), args.out)
    print('Scene {:s} written (seed {:d})'.format(args.out, cfg.seed))
    return ExitCode.SUCCESS.value


def cmdBench(args: argparse.Namespace) -> int:
    """
    Toy benchmark: procedural scenes are synthesised, deblurred by the pipeline and the held-out PSNR of every
    iteration is averaged across the scenes
    """
    cfg = loadRunConfig(args)
    root = cfg.workdir
    os.makedirs(root, exist_ok=True)
    writeRunConfig(cfg, root)

    reports: List[MetricReport] = []

    for k in range(args.scenes):
        seed = cfg.seed + k
        sceneDir = os.path.join(root, 'scene_{:02d}'.format(k))
        os.makedirs(sceneDir, exist_ok=True)

        logger.info('{:=^60}'.format(' BENCHMARK SCENE {:d} / {:d} '.format(k + 1, args.scenes)))

        scenePath = os.path.join(sceneDir, 'scene.json')
        saveScene(proceduralScene(seed), scenePath)

        dataDir = os.path.join(sceneDir, 'data')
        generateDataset(scenePath, dataDir, cfg.synth.model_copy(update={'seed': seed}))

        pipelineCfg = cfg.pipeline.model_copy(update={'seed': seed, 'workdir': os.path.join(sceneDir, 'run')})
        Pipeline.fromDataset(dataDir, pipelineCfg).run(resume=True)
        reports.append(iterationReport(pipelineCfg.workdir))

    series = summariseReports(reports)
    first = series[min(series)]

    lines = ['{:>5s} {:>14s} {:>10s}'.format('Iter', 'mean PSNR (dB)', 'gain')]
    lines += ['{:>5d} {:>14.3f} {:>+10.3f}'.format(i, v, v - first) for i, v in series.items()]
    table = '\n'.join(lines) + '\n'

    with open(os.path.join(root, 'bench.txt'), 'w') as f:
        f.write(table)

    with open(os.path.join(root, 'bench.csv'), 'w') as f:
        f.write('iteration,mean_psnr\n' + ''.join('{:d},{:.6f}\n'.format(i, v) for i, v in series.items()))

    print(table)
    return ExitCode.SUCCESS.value


def _universal(parser: argparse.ArgumentParser) -> None:

    parser.add_argument('--config', type=str, default=None, help='JSON run configuration')
    parser.add_argument('--seed', type=int, default=None, help='Seed of every random stream')
    parser.add_argument('--workdir', type=str, default=None, help='Run directory')
    parser.add_argument('--log-level', type=str, default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Logging level')
    parser.add_argument('--threads', type=int, default=None,
                        help='Worker threads (defaults to $RFDEBLUR_NUM_THREADS or 1)')


def buildParser() -> argparse.ArgumentParser:

    parser = argparse.ArgumentParser(prog='rfdeblur',
                                     description='Iterative deblurring of multi-view images with radiance fields')
    parser.add_argument('--version', action='version', version='%(prog)s ' + VERSION)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', help='Synthesise a blurred multi-view dataset')
    _universal(p)
    p.add_argument('--scene', type=str, default=None, help='Scene file')
    p.add_argument('--out', type=str, default=None, help='Dataset directory')
    p.add_argument('--blur', type=str, default=None, choices=[b.value for b in BlurType])
    p.add_argument('--magnitude', type=float, default=None, help='Scale of the camera-shake trajectories')
    p.add_argument('--noise', type=str, default=None, choices=['on', 'off'])
    p.add_argument('--same-direction', dest='same_direction', action='store_const', const=True, default=None,
                   help='Blur every view along the same direction')
    p.add_argument('--n-train', dest='n_train', type=int, default=None)
    p.add_argument('--n-test', dest='n_test', type=int, default=None)
    p.add_argument('--size', type=int, default=None, help='Image width and height')
    p.set_defaults(func=cmdSynth)

    p = sub.add_parser('run', help='Run the iterative deblurring pipeline')
    _universal(p)
    p.add_argument('--dataset', type=str, default=None, help='Dataset directory')
    p.add_argument('--iterations', type=int, default=None, help='Number of pipeline iterations')
    p.add_argument('--rf-iterations', dest='rf_iterations', type=int, default=None,
                   help='Optimiser iterations of the final radiance field')
    p.add_argument('--rf-iterations-first', dest='rf_iterations_first', type=int, default=None,
                   help='Optimiser iterations of the first radiance field')
    p.add_argument('--deblur', dest='deblur_method', type=str, default=None, choices=['model', 'none'])
    p.add_argument('--pose-mode', dest='pose_mode', type=str, default=None, choices=[m.value for m in PoseMode])
    p.add_argument('--sigma-t', dest='sigma_t', type=float, default=None, help='Pose translation noise')
    p.add_argument('--sigma-r', dest='sigma_r', type=float, default=None, help='Pose rotation noise (radians)')
    p.add_argument('--color-space', dest='color_space', type=str, default=None,
                   choices=[c.value for c in ColorSpace])
    p.add_argument('--resume', nargs='?', const=True, default=False, metavar='WORKDIR',
                   help='Continue the run in the working directory')
    p.set_defaults(func=cmdRun)

    p = sub.add_parser('render', help='Render a grid checkpoint at the poses of a pose file')
    _universal(p)
    p.add_argument('--grid', type=str, required=True, help='Grid checkpoint')
    p.add_argument('--poses', type=str, required=True, help='Pose file')
    p.add_argument('--out', type=str, required=True, help='Output directory')
    p.add_argument('--split', type=str, default=None, choices=['train', 'test'])
    p.add_argument('--steps', type=int, default=None, help='Samples per ray')
    p.add_argument('--background', type=float, nargs=3, default=None, metavar=('R', 'G', 'B'))
    p.set_defaults(func=cmdRender)

    p = sub.add_parser('eval', help='Compute PSNR and SSIM of renders against ground truth')
    _universal(p)
    p.add_argument('--renders', type=str, required=True, help='Directory of rendered PFM images')
    p.add_argument('--gt', type=str, required=True, help='Directory of ground truth PFM images')
    p.add_argument('--out', type=str, default=None, help='Report directory')
    p.add_argument('--color-space', dest='color_space', type=str, default=None,
                   choices=[c.value for c in ColorSpace])
    p.set_defaults(func=cmdEval)

    p = sub.add_parser('report', help='Tabulate the metrics of every iteration of a run')
    _universal(p)
    p.set_defaults(func=cmdReport)

    p = sub.add_parser('scene', help='Write a procedural scene file')
    _universal(p)
    p.add_argument('--out', type=str, required=True, help='Scene file')
    p.add_argument('--objects', type=int, default=6)
    p.add_argument('--emissive', type=int, default=1, help='Number of emissive objects')
    p.set_defaults(func=cmdScene)

    p = sub.add_parser('bench', help='Toy benchmark of the iteration trend over procedural scenes')
    _universal(p)
    p.add_argument('--scenes', type=int, default=3)
    p.add_argument('--iterations', type=int, default=None)
    p.add_argument('--same-direction', dest='same_direction', action='store_const', const=True, default=None)
    p.add_argument('--blur', type=str, default=None, choices=[b.value for b in BlurType])
    p.set_defaults(func=cmdBench)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point of the ``rfdeblur`` command

    :return: Exit status: 0 on success, 2 for configuration errors, 3 for runtime failures (including invalid
        data that reaches a library pre-condition)
    """
    parser = buildParser()

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return ExitCode.SUCCESS.value if e.code == 0 else ExitCode.CONFIG_ERROR.value

    setupLogging(getattr(logging, args.log_level))

    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError('--threads', 'Number of threads ({:d}) must be positive'.format(args.threads))
            Settings.setNumThreads(args.threads)
        return args.func(args)
    except (ConfigError, ValidationError) as e:
        logger.error(str(e))
        return ExitCode.CONFIG_ERROR.value
    except (RFDeblurError, OSError, ValueError) as e:
        logger.error(str(e))
        return ExitCode.RUNTIME_ERROR.value


if __name__ == '__main__':
    sys.exit(main())
