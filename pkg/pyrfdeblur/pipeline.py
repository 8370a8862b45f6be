# -*- coding: utf-8 -*-
"""
The iterative deblurring pipeline: initial deblurring of every view, then N alternations of radiance field
construction and deblurring guided by renders of the field. The last iteration only constructs the field.
"""

import os
import re
import time
import logging
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial.transform import Rotation

from .core import (SCHEMA_VERSION, VERSION, CheckpointError, ConfigError, DatasetError, LinearImage, Settings,
                   SrgbImage, rngFor)
from .geometry import Camera, Pose
from .blursynth import DatasetManifest, loadManifest
from .deblur import DeblurConfig, DeblurOperator, Kernel, createDeblurOperator
from .metrics import EvalConfig, IterationMetrics, evaluateImages, iterationReport, psnr, toColorSpace
from .voxelrf import TrainConfig, VoxelGrid, loadGrid, renderView, saveGrid, snapToCheckpointPrecision, trainRF
from . import fileformats

logger = logging.getLogger(__name__)

STREAM_TRAIN = 0
STREAM_POSES = 1

STATE_FORMAT = 'rfdeblur-state'
STATE_FORMAT_VERSION = 1

FIXED_POSE_NOTE = ('Poses are taken from the dataset (optionally perturbed) and are not re-estimated from the '
                   'deblurred views each iteration; the effect on the per-iteration gain is not measured.')


class PoseMode(Enum):
    """
    Source of the camera poses used to construct the radiance field
    """
    GROUND_TRUTH = 'ground_truth'
    """ The dataset poses """
    PERTURBED = 'perturbed'
    """ Dataset poses with seeded Gaussian noise """


class PoseConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    mode: PoseMode = PoseMode.GROUND_TRUTH
    sigma_t: float = 0.0
    sigma_r: float = 0.0

    @model_validator(mode='after')
    def valid(self):
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise ValueError('Pose noise levels must be non-negative')
        return self


class PipelineConfig(BaseModel):
    """
    Settings of an iterative deblurring run. When ``rf_iterations_first`` is set, the optimiser budget
    escalates from that value at the first iteration by ``rf_iterations_step`` per iteration, capped at
    ``train.iterations``. The schedule does not depend on ``n_iterations`` so the grid of iteration i equals
    the final grid of an i-iteration run.
    """
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    n_iterations: int = 5
    train: TrainConfig = TrainConfig()
    rf_iterations_first: Optional[int] = 2000
    rf_iterations_step: int = 1000
    deblur: DeblurConfig = DeblurConfig()
    pose: PoseConfig = PoseConfig()
    eval: EvalConfig = EvalConfig()
    workdir: str = 'run'
    seed: int = 0

    @model_validator(mode='after')
    def valid(self):
        if self.n_iterations < 1:
            raise ValueError('At least one iteration is required')
        if self.rf_iterations_first is not None and not 0 < self.rf_iterations_first <= self.train.iterations:
            raise ValueError('rf_iterations_first must lie in (0, train.iterations]')
        if self.rf_iterations_step < 0:
            raise ValueError('rf_iterations_step must be non-negative')
        return self

    def trainConfigFor(self, iteration: int) -> TrainConfig:
        """
        Radiance field settings of a given iteration (1-based)
        """
        if self.rf_iterations_first is None:
            return self.train

        last = self.train.iterations
        iters = min(last, self.rf_iterations_first + (iteration - 1) * self.rf_iterations_step)
        every = max(1, min(iters, int(round(self.train.prune_upsample_every * iters / last))))

        return self.train.model_copy(update={'iterations': iters, 'prune_upsample_every': every})


class RunRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    version: str = VERSION
    seed: int
    dataset: Optional[str] = None
    n_views: int
    config: PipelineConfig
    notes: List[str] = [FIXED_POSE_NOTE]


class IterationTimings(BaseModel):
    """
    Wall-clock seconds spent in each phase of an iteration
    """
    model_config = ConfigDict(extra='forbid')

    rf_construction: float
    render: float
    guided_deblurring: Optional[float] = None
    evaluation: float


class StateRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    format: str = STATE_FORMAT
    format_version: int = STATE_FORMAT_VERSION
    iteration: int
    n_views: int
    deblurred_iteration: int
    has_grid: bool


class PipelineState:
    """
    Progress of a run: the number of completed iterations i, the current deblurred views D^i, the latest
    radiance field V^i and the metrics of every completed iteration. Random streams are keyed by
    (seed, iteration) so no generator state needs to be stored.
    """

    def __init__(self, iteration: int, deblurred: List[LinearImage], deblurredIteration: int,
                 grid: Optional[VoxelGrid] = None, metrics: Optional[List[IterationMetrics]] = None):
        self.iteration = iteration
        self.deblurred = deblurred
        self.deblurredIteration = deblurredIteration
        self.grid = grid
        self.metrics = [] if metrics is None else metrics

    @property
    def numViews(self) -> int:
        return len(self.deblurred)


def iterationDir(workdir: str, iteration: int) -> str:
    return os.path.join(workdir, 'iter_{:02d}'.format(iteration))


def checkpoint(state: PipelineState, workdir: str, viewIds: Optional[Sequence[int]] = None) -> str:
    """
    Stores the state of a completed iteration. Deblurred views are kept as exact float64 arrays so a resumed
    run continues bit-identically. The state file is written last and marks the iteration as complete.

    :return: Path of the state file
    """
    viewIds = range(state.numViews) if viewIds is None else viewIds
    folder = iterationDir(workdir, state.iteration)
    os.makedirs(os.path.join(folder, 'deblurred'), exist_ok=True)

    if state.deblurredIteration == state.iteration:
        for vid, d in zip(viewIds, state.deblurred):
            np.save(os.path.join(folder, 'deblurred', 'view_{:04d}.npy'.format(vid)), d)

    if state.grid is not None and not os.path.isfile(os.path.join(folder, 'grid.ckpt')):
        saveGrid(state.grid, os.path.join(folder, 'grid.ckpt'))

    path = os.path.join(folder, 'state.json')
    fileformats.writeModel(path, StateRecord(iteration=state.iteration, n_views=state.numViews,
                                             deblurred_iteration=state.deblurredIteration,
                                             has_grid=state.grid is not None))
    return path


def resume(path: str, viewIds: Optional[Sequence[int]] = None) -> PipelineState:
    """
    Restores a state written by :func:`checkpoint`

    :param path: State file, iteration directory or run directory (the latest completed iteration is used)
    :raise: CheckpointError: if no state exists, the format is unknown or files are corrupt
    """
    if os.path.isdir(path) and not os.path.isfile(os.path.join(path, 'state.json')):
        path = _latestState(path)
    elif os.path.isdir(path):
        path = os.path.join(path, 'state.json')

    if path is None or not os.path.isfile(path):
        raise CheckpointError(path, 'No pipeline state was found')

    try:
        record = fileformats.readModel(path, StateRecord)
    except (ConfigError, DatasetError) as e:
        raise CheckpointError(path, 'Pipeline state ({:s}) is corrupt: {:s}'.format(path, str(e)))

    if record.format != STATE_FORMAT or record.format_version != STATE_FORMAT_VERSION:
        raise CheckpointError(path, 'Pipeline state ({:s}) has format {:s} v{:d}, expected {:s} v{:d}'.format(
            path, record.format, record.format_version, STATE_FORMAT, STATE_FORMAT_VERSION))

    workdir = os.path.dirname(os.path.dirname(os.path.abspath(path)))
    viewIds = range(record.n_views) if viewIds is None else viewIds

    deblurred = []
    for vid in viewIds:
        f = os.path.join(iterationDir(workdir, record.deblurred_iteration), 'deblurred', 'view_{:04d}.npy'.format(vid))
        try:
            deblurred.append(np.load(f))
        except (OSError, ValueError) as e:
            raise CheckpointError(f, 'Deblurred view ({:s}) cannot be restored: {:s}'.format(f, str(e)))

    if len(deblurred) != record.n_views:
        raise CheckpointError(path, 'Pipeline state holds {:d} views, expected {:d}'.format(record.n_views,
                                                                                          len(deblurred)))

    grid = loadGrid(os.path.join(iterationDir(workdir, record.iteration), 'grid.ckpt')) if record.has_grid else None

    metrics = []
    for i in range(1, record.iteration + 1):
        f = os.path.join(iterationDir(workdir, i), 'metrics.json')
        if os.path.isfile(f):
            metrics.append(fileformats.readModel(f, IterationMetrics))

    return PipelineState(record.iteration, deblurred, record.deblurred_iteration, grid, metrics)


_restore = resume


def _latestState(workdir: str) -> Optional[str]:

    done = []
    for d in os.listdir(workdir):
        m = re.match(r'^iter_(\d+)$', d)
        if m and os.path.isfile(os.path.join(workdir, d, 'state.json')):
            done.append(int(m.group(1)))

    return os.path.join(iterationDir(workdir, max(done)), 'state.json') if done else None


def poseProvider(poses: Union[DatasetManifest, Sequence[Pose]], cfg: Optional[PoseConfig] = None, seed: int = 0,
                 iteration: int = 0) -> List[Pose]:
    """
    Returns the poses used to construct the radiance field. Ground-truth mode returns the dataset poses;
    perturbed mode adds Gaussian noise to every translation component (sigma_t) and a Gaussian rotation
    vector (sigma_r), keyed by (seed, iteration).

    :param poses: Dataset manifest or its training poses
    :param cfg: Pose settings
    :param seed: Run seed
    :param iteration: Pipeline iteration
    """
    cfg = PoseConfig() if cfg is None else cfg

    if isinstance(poses, DatasetManifest):
        poses = [v.pose() for v in poses.train]

    poses = list(poses)

    if cfg.mode == PoseMode.GROUND_TRUTH or (cfg.sigma_t == 0.0 and cfg.sigma_r == 0.0):
        return poses

    rng = rngFor(seed, iteration, STREAM_POSES)
    out = []

    for p in poses:
        dt = rng.normal(0.0, cfg.sigma_t, size=3) if cfg.sigma_t > 0 else np.zeros(3)
        dr = rng.normal(0.0, cfg.sigma_r, size=3) if cfg.sigma_r > 0 else np.zeros(3)

        q = p.rotation if cfg.sigma_r == 0.0 else (Rotation.from_rotvec(dr) * p.asRotation()).as_quat()
        out.append(Pose(q, p.translation + dt))

    return out


class Pipeline:
    """
    Runs the iterative deblurring pipeline on a set of blurred views and writes every intermediate result to
    the working directory::

        run.json
        iter_00/{deblurred,kernels,state.json}
        iter_##/{grid.ckpt,rendered,deblurred,kernels,heldout,metrics.json,timings.json,state.json}

    ``timings.json`` holds wall-clock durations and is the only file that differs between identical runs.
    """

    def __init__(self, blurred: Sequence[SrgbImage], poses: Sequence[Pose], camera: Camera,
                 cfg: Optional[PipelineConfig] = None, aabb=None, background=(0.0, 0.0, 0.0),
                 groundTruth: Optional[Sequence[LinearImage]] = None,
                 heldoutPoses: Optional[Sequence[Pose]] = None, heldoutImages: Optional[Sequence[LinearImage]] = None,
                 viewIds: Optional[Sequence[int]] = None, heldoutIds: Optional[Sequence[int]] = None,
                 operator: Optional[DeblurOperator] = None, dataset: Optional[str] = None):

        if len(blurred) != len(poses):
            raise ValueError('{:d} views but {:d} poses'.format(len(blurred), len(poses)))

        if len(blurred) < 2:
            raise ValueError('At least two views are required')

        self._cfg = PipelineConfig() if cfg is None else cfg
        self._blurred = list(blurred)
        self._poses = list(poses)
        self._camera = camera
        self._aabb = None if aabb is None else np.asarray(aabb, dtype=np.float64)
        self._background = np.asarray(background, dtype=np.float64)
        self._groundTruth = None if groundTruth is None else list(groundTruth)
        self._heldoutPoses = [] if heldoutPoses is None else list(heldoutPoses)
        self._heldoutImages = [] if heldoutImages is None else list(heldoutImages)
        self._viewIds = list(range(len(blurred))) if viewIds is None else list(viewIds)
        self._heldoutIds = list(range(len(self._heldoutPoses))) if heldoutIds is None else list(heldoutIds)
        self._operator = createDeblurOperator(self._cfg.deblur) if operator is None else operator
        self._dataset = dataset

        self._workdir = self._cfg.workdir
        self._state: Optional[PipelineState] = None
        self._completed = False

    @classmethod
    def fromDataset(cls, root: str, cfg: Optional[PipelineConfig] = None,
                    operator: Optional[DeblurOperator] = None) -> 'Pipeline':
        """
        Creates a pipeline for a dataset written by :func:`pyrfdeblur.blursynth.generateDataset`
        """
        manifest = loadManifest(root)

        return cls(blurred=[fileformats.readPng(os.path.join(root, v.blurred)) for v in manifest.train],
                   poses=[v.pose() for v in manifest.train],
                   camera=manifest.camera.toCamera(), cfg=cfg, aabb=manifest.aabb, background=manifest.background,
                   groundTruth=[fileformats.readPfm(os.path.join(root, v.sharp_pfm)) for v in manifest.train],
                   heldoutPoses=[v.pose() for v in manifest.test],
                   heldoutImages=[fileformats.readPfm(os.path.join(root, v.sharp_pfm)) for v in manifest.test],
                   viewIds=[v.view_id for v in manifest.train], heldoutIds=[v.view_id for v in manifest.test],
                   operator=operator, dataset=os.path.abspath(root))

    @property
    def config(self) -> PipelineConfig:
        return self._cfg

    @property
    def workdir(self) -> str:
        return self._workdir

    def setWorkingDirectory(self, workdir: str) -> None:
        """
        Sets the run directory, creating it when it does not exist

        :raise: ValueError: if the directory is not writable
        """
        try:
            os.makedirs(workdir, exist_ok=True)
        except OSError:
            pass

        if os.path.isdir(workdir) and os.access(workdir, os.W_OK):
            self._workdir = workdir
        else:
            raise ValueError('Working directory ({:s}) is not accessible or writable'.format(workdir))

    @property
    def state(self) -> Optional[PipelineState]:
        return self._state

    def isCompleted(self) -> bool:
        """ Returns if all iterations of the run were completed """
        return self._completed

    def _writeViews(self, iteration: int, sub: str, images: Sequence[LinearImage], ids: Sequence[int]) -> None:

        folder = os.path.join(iterationDir(self._workdir, iteration), sub)
        os.makedirs(folder, exist_ok=True)

        for vid, img in zip(ids, images):
            fileformats.writePfm(os.path.join(folder, 'view_{:04d}.pfm'.format(vid)), img)

    def _writeKernels(self, iteration: int, kernels: Sequence[Optional[Kernel]]) -> None:

        folder = os.path.join(iterationDir(self._workdir, iteration), 'kernels')
        os.makedirs(folder, exist_ok=True)

        for vid, k in zip(self._viewIds, kernels):
            if k is not None:
                k.save(os.path.join(folder, 'view_{:04d}.txt'.format(vid)))

    def _meanPsnr(self, images: Sequence[LinearImage]) -> Optional[float]:

        if self._groundTruth is None:
            return None

        cs = self._cfg.eval.color_space
        return float(np.mean([psnr(toColorSpace(a, cs), toColorSpace(b, cs), self._cfg.eval.peak)
                              for a, b in zip(images, self._groundTruth)]))

    def _evaluate(self, iteration: int, grid: VoxelGrid, rendered: Sequence[LinearImage],
                  deblurred: Sequence[LinearImage], finalLoss: float) -> IterationMetrics:

        metrics = IterationMetrics(iteration=iteration, color_space=self._cfg.eval.color_space,
                                   rendered_psnr=self._meanPsnr(rendered), deblurred_psnr=self._meanPsnr(deblurred),
                                   final_loss=finalLoss)

        if self._heldoutPoses:
            steps = self._cfg.trainConfigFor(iteration).n_steps_per_ray
            renders = Settings.map(lambda p: renderView(grid, self._camera, p, self._background, steps),
                                   self._heldoutPoses)
            self._writeViews(iteration, 'heldout', renders, self._heldoutIds)

            report = evaluateImages(renders, self._heldoutImages, self._cfg.eval.color_space,
                                    ['view_{:04d}'.format(v) for v in self._heldoutIds], self._cfg.eval.peak)
            metrics = metrics.model_copy(update={'heldout': report.views, 'heldout_psnr': report.mean_psnr,
                                                 'heldout_ssim': report.mean_ssim})

        return metrics

    def _initial(self) -> PipelineState:

        logger.info('{:=^60}'.format(' INITIAL DEBLURRING '))

        results = Settings.map(self._operator.initial, self._blurred)
        deblurred = [r[0] for r in results]

        self._writeViews(0, 'deblurred', deblurred, self._viewIds)
        self._writeKernels(0, [r[1] for r in results])

        state = PipelineState(0, deblurred, 0)
        checkpoint(state, self._workdir, self._viewIds)
        return state

    def _render(self, iteration: int, grid: VoxelGrid, poses: Sequence[Pose]) -> List[LinearImage]:

        steps = self._cfg.trainConfigFor(iteration).n_steps_per_ray
        rendered = Settings.map(lambda p: renderView(grid, self._camera, p, self._background, steps), poses)
        self._writeViews(iteration, 'rendered', rendered, self._viewIds)
        return rendered

    def _guided(self, iteration: int, rendered: Sequence[LinearImage]) -> List[LinearImage]:

        results = Settings.map(lambda m: self._operator.guided(self._blurred[m], rendered[m]),
                               range(len(self._blurred)))
        deblurred = [r[0] for r in results]

        self._writeViews(iteration, 'deblurred', deblurred, self._viewIds)
        self._writeKernels(iteration, [r[1] for r in results])
        return deblurred

    def _completeGuidedRound(self, state: PipelineState) -> PipelineState:
        """
        An iteration that ended a shorter run skipped its guided deblurring. When the run is extended the round
        is added from the stored grid so that the next iteration trains on D^i as in an uninterrupted run.
        """
        i = state.iteration
        logger.info('Iteration {:d} ended a shorter run; adding its guided deblurring'.format(i))

        poses = poseProvider(self._poses, self._cfg.pose, self._cfg.seed, i)
        deblurred = self._guided(i, self._render(i, state.grid, poses))

        newState = PipelineState(i, deblurred, i, state.grid, state.metrics)
        checkpoint(newState, self._workdir, self._viewIds)
        return newState

    def _iterate(self, state: PipelineState) -> PipelineState:

        i = state.iteration + 1
        N = self._cfg.n_iterations
        timings: Dict[str, float] = {}

        logger.info('{:=^60}'.format(' ITERATION {:d} / {:d} '.format(i, N)))

        tic = time.perf_counter()
        poses = poseProvider(self._poses, self._cfg.pose, self._cfg.seed, i)
        trainCfg = self._cfg.trainConfigFor(i)
        result = trainRF(state.deblurred, poses, self._camera, trainCfg, seed=(self._cfg.seed, i, STREAM_TRAIN),
                         aabb=self._aabb, background=self._background)
        grid = snapToCheckpointPrecision(result.grid)
        timings['rf_construction'] = time.perf_counter() - tic

        folder = iterationDir(self._workdir, i)
        os.makedirs(folder, exist_ok=True)
        saveGrid(grid, os.path.join(folder, 'grid.ckpt'))

        tic = time.perf_counter()
        rendered = self._render(i, grid, poses)
        timings['render'] = time.perf_counter() - tic

        deblurred, deblurredIteration = state.deblurred, state.deblurredIteration

        # The last iteration only constructs the radiance field
        if i < N:
            tic = time.perf_counter()
            deblurred = self._guided(i, rendered)
            deblurredIteration = i
            timings['guided_deblurring'] = time.perf_counter() - tic

        tic = time.perf_counter()
        metrics = self._evaluate(i, grid, rendered, state.deblurred, result.finalLoss)
        timings['evaluation'] = time.perf_counter() - tic

        fileformats.writeModel(os.path.join(folder, 'metrics.json'), metrics)
        fileformats.writeModel(os.path.join(folder, 'timings.json'), IterationTimings(**timings))

        if metrics.heldout_psnr is not None:
            logger.info('iteration {:d}: held-out PSNR {:.3f} dB, SSIM {:.4f}'.format(i, metrics.heldout_psnr,
                                                                                      metrics.heldout_ssim))

        newState = PipelineState(i, deblurred, deblurredIteration, grid, state.metrics + [metrics])
        checkpoint(newState, self._workdir, self._viewIds)
        return newState

    def run(self, resume: bool = True) -> VoxelGrid:
        """
        Runs the pipeline. With resume enabled a run continues from the last completed iteration in the
        working directory; a completed run returns its final grid without further work.

        :param resume: Continue a previous run found in the working directory
        :raise: CheckpointError: if the working directory holds a run that cannot be continued
        :return: The final radiance field V^N
        """
        self._completed = False
        os.makedirs(self._workdir, exist_ok=True)

        runFile = os.path.join(self._workdir, 'run.json')
        latest = _latestState(self._workdir)

        if latest is not None and not resume:
            raise CheckpointError(self._workdir, 'Working directory ({:s}) holds a previous run'.format(self._workdir))

        if latest is not None and os.path.isfile(runFile):
            previous = fileformats.readModel(runFile, RunRecord)
            ignored = {'workdir', 'n_iterations'}
            if previous.config.model_dump(exclude=ignored) != self._cfg.model_dump(exclude=ignored):
                raise CheckpointError(runFile, 'Run ({:s}) was made with other settings'.format(self._workdir))

        record = RunRecord(seed=self._cfg.seed, dataset=self._dataset, n_views=len(self._blurred), config=self._cfg)
        fileformats.writeModel(runFile, record)

        if latest is not None:
            state = _restore(latest, self._viewIds)
            logger.info('Resuming after iteration {:d}'.format(state.iteration))

            if state.iteration > self._cfg.n_iterations:
                raise CheckpointError(self._workdir, 'Run holds more iterations than configured')

            if state.deblurredIteration < state.iteration < self._cfg.n_iterations:
                state = self._completeGuidedRound(state)
        else:
            state = self._initial()

        while state.iteration < self._cfg.n_iterations:
            state = self._iterate(state)
            self._state = state

        self._state = state
        self._completed = True

        if self._heldoutPoses:
            iterationReport(self._workdir)

        return state.grid


def runPipeline(blurredViews: Sequence[SrgbImage], poses: Sequence[Pose], camera: Camera,
                cfg: Optional[PipelineConfig] = None, **kwargs) -> Tuple[VoxelGrid, PipelineState]:
    """
    Runs the iterative pipeline and returns the final radiance field and the final state

    :param blurredViews: 8-bit blurred views
    :param poses: Their camera poses
    :param camera: Shared intrinsics
    :param cfg: Pipeline settings
    :param kwargs: Further :class:`Pipeline` arguments (bounds, background, ground truth, held-out views)
    """
    pipeline = Pipeline(blurredViews, poses, camera, cfg, **kwargs)
    grid = pipeline.run()
    return grid, pipeline.state
