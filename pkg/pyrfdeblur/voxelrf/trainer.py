# -*- coding: utf-8 -*-

import logging
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from tqdm import tqdm

from ..core import LinearImage, Settings, TrainingDivergenceError, rngFor
from ..geometry import Camera, Pose, generateRays
from .grid import VoxelGrid, prune, totalVariation, upsample
from .render import GridGradient, gradRays, rayBoxIntersect

logger = logging.getLogger(__name__)


class LearningRates(BaseModel):
    """
    Step sizes of the two parameter groups
    """
    model_config = ConfigDict(extra='forbid')

    density: float = 1.0
    sh: float = 0.05


class TrainConfig(BaseModel):
    """
    Radiance field optimisation settings. Resolutions count cells per axis; the grid stores one more node than
    cells along each axis.
    """
    model_config = ConfigDict(extra='forbid')

    iterations: int = 6000
    learning_rate: LearningRates = LearningRates()
    lr_final_ratio: float = 0.05
    rmsprop_beta: float = 0.95
    tv_weight: float = 1e-4
    prune_threshold: float = 0.05
    prune_upsample_every: int = 2000
    initial_resolution: int = 32
    max_resolution: int = 128
    sh_degree: int = 1
    rays_per_batch: int = 4096
    rays_per_chunk: int = 512
    n_steps_per_ray: int = 128
    init_density: float = -2.0
    init_grey: float = 0.5

    @model_validator(mode='after')
    def valid(self):
        positive = [self.iterations, self.learning_rate.density, self.learning_rate.sh, self.lr_final_ratio,
                    self.prune_threshold, self.prune_upsample_every, self.initial_resolution,
                    self.rays_per_batch, self.rays_per_chunk, self.n_steps_per_ray]

        if min(positive) <= 0 or self.tv_weight < 0:
            raise ValueError('Training settings must be positive')
        if self.prune_upsample_every > self.iterations:
            raise ValueError('prune_upsample_every ({:d}) exceeds iterations ({:d})'.format(
                self.prune_upsample_every, self.iterations))
        if self.sh_degree not in (0, 1):
            raise ValueError('Spherical harmonic degree must be 0 or 1')
        if not 0.0 <= self.rmsprop_beta < 1.0:
            raise ValueError('RMSprop decay must lie in [0, 1)')
        if self.max_resolution < self.initial_resolution:
            raise ValueError('max_resolution must not be smaller than initial_resolution')
        return self

    def learningRate(self, base: float, it: int) -> float:
        """
        Exponentially decays a step size from base to base * lr_final_ratio over the run
        """
        frac = it / max(self.iterations - 1, 1)
        return base * self.lr_final_ratio ** frac


class TrainResult:
    """
    The optimised grid together with the per-iteration mean squared error of the ray batches
    """

    def __init__(self, grid: VoxelGrid, losses: np.ndarray):
        self._grid = grid
        self._losses = losses

    @property
    def grid(self) -> VoxelGrid:
        return self._grid

    @property
    def losses(self) -> np.ndarray:
        return self._losses

    @property
    def finalLoss(self) -> float:
        return float(np.mean(self._losses[-min(50, len(self._losses)):]))


class RMSprop:
    """
    Per-parameter adaptive steps: v = beta * v + (1 - beta) * g^2, p -= lr * g / (sqrt(v) + eps)
    """

    def __init__(self, grid: VoxelGrid, beta: float, eps: float = 1e-8):
        self.beta = beta
        self.eps = eps
        self.reset(grid)

    def reset(self, grid: VoxelGrid) -> None:
        self._vDensity = np.zeros_like(grid.densityRaw)
        self._vSh = np.zeros_like(grid.shCoeffs)

    def step(self, grid: VoxelGrid, grad: GridGradient, lrDensity: float, lrSh: float) -> None:

        self._vDensity *= self.beta
        self._vDensity += (1.0 - self.beta) * grad.density ** 2
        self._vSh *= self.beta
        self._vSh += (1.0 - self.beta) * grad.sh ** 2

        grid.densityRaw -= lrDensity * grad.density / (np.sqrt(self._vDensity) + self.eps)
        grid.shCoeffs -= lrSh * grad.sh / (np.sqrt(self._vSh) + self.eps)


class RayBundle:
    """
    Every training pixel as a ray clipped to the bounding box, with its target colour
    """

    def __init__(self, views: Sequence[LinearImage], poses: Sequence[Pose], camera: Camera, aabb: np.ndarray):

        origins, dirs, targets = [], [], []

        for img, pose in zip(views, poses):
            if img.shape != (camera.height, camera.width, 3):
                raise ValueError('View of shape {:s} does not match the camera'.format(str(img.shape)))

            o, d = generateRays(camera, pose)
            origins.append(o.reshape(-1, 3))
            dirs.append(d.reshape(-1, 3))
            targets.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))

        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.targets = np.concatenate(targets)
        self.tNear, self.tFar = rayBoxIntersect(self.origins, self.dirs, aabb)

    def __len__(self):
        return len(self.origins)


def _batchGradient(grid: VoxelGrid, rays: RayBundle, sel: np.ndarray, cfg: TrainConfig, background):

    scale = 1.0 / (3 * len(sel))
    chunks = [sel[i:i + cfg.rays_per_chunk] for i in range(0, len(sel), cfg.rays_per_chunk)]

    results = Settings.map(lambda c: gradRays(grid, rays.origins[c], rays.dirs[c], rays.targets[c],
                                              rays.tNear[c], rays.tFar[c], cfg.n_steps_per_ray, background,
                                              scale), chunks)

    # Summed in chunk order so the result is independent of the thread schedule
    loss = 0.0
    gDensity = np.zeros_like(grid.densityRaw)
    gSh = np.zeros_like(grid.shCoeffs)

    for l, g in results:
        loss += l
        gDensity += g.density
        gSh += g.sh

    return loss, GridGradient(gDensity, gSh)


def trainRF(views: Sequence[LinearImage], poses: Sequence[Pose], camera: Camera, cfg: Optional[TrainConfig] = None,
            seed=0, aabb=None, background=(0.0, 0.0, 0.0),
            callback: Optional[Callable[[int, VoxelGrid], None]] = None) -> TrainResult:
    """
    Fits a voxel grid radiance field to posed linear images with RMSprop on random ray batches. Density is
    regularised by total variation. At every schedule point low-density nodes are pruned and the grid is
    upsampled until the maximum resolution is reached. The run is fully determined by the seed.

    :param views: Training images (linear)
    :param poses: Camera-to-world pose of each view
    :param camera: Shared intrinsics
    :param cfg: Training settings
    :param seed: Integer seed or tuple of integer keys of the ray batches
    :param aabb: 2 x 3 bounds of the grid (defaults to the cube [-1, 1]^3)
    :param background: Radiance seen by rays that leave the grid
    :param callback: Optional callable(iteration, grid) invoked after each schedule point
    :return: TrainResult
    """
    cfg = TrainConfig() if cfg is None else cfg

    if len(views) != len(poses):
        raise ValueError('Number of views ({:d}) and poses ({:d}) differ'.format(len(views), len(poses)))

    if len(views) < 2:
        raise ValueError('At least two views are required to construct a radiance field')

    aabb = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]) if aabb is None else np.asarray(aabb, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)

    rays = RayBundle(views, poses, camera, aabb)
    rng = rngFor(*(seed if isinstance(seed, tuple) else (seed,)))

    res = cfg.initial_resolution
    grid = VoxelGrid.initial((res + 1,) * 3, aabb, cfg.sh_degree, cfg.init_density, cfg.init_grey)
    optimiser = RMSprop(grid, cfg.rmsprop_beta)
    losses = np.empty(cfg.iterations)

    logger.debug('Training on {:d} rays, grid {:d}^3 cells'.format(len(rays), res))

    for it in tqdm(range(cfg.iterations), desc='RF construction', disable=not Settings.VERBOSE_OUTPUT):

        sel = rng.integers(0, len(rays), size=min(cfg.rays_per_batch, len(rays)))
        loss, grad = _batchGradient(grid, rays, sel, cfg, background)

        if not np.isfinite(loss):
            raise TrainingDivergenceError(it, 'Radiance field loss became non-finite at iteration {:d}'.format(it))

        if cfg.tv_weight > 0:
            _, tvGrad = totalVariation(grid)
            grad = GridGradient(grad.density + cfg.tv_weight * tvGrad, grad.sh)

        optimiser.step(grid, grad, cfg.learningRate(cfg.learning_rate.density, it),
                       cfg.learningRate(cfg.learning_rate.sh, it))
        losses[it] = loss

        if not grid.isFinite():
            raise TrainingDivergenceError(it, 'Radiance field parameters became non-finite at iteration {:d}'.format(it))

        if (it + 1) % cfg.prune_upsample_every == 0 and it + 1 < cfg.iterations:
            grid = prune(grid, cfg.prune_threshold)

            if 2 * res <= cfg.max_resolution:
                res *= 2
                grid = upsample(grid)
                optimiser.reset(grid)
                logger.debug('Upsampled grid to {:d}^3 cells at iteration {:d}'.format(res, it + 1))

            if callback is not None:
                callback(it + 1, grid)

        if it % 100 == 0:
            logger.debug('iteration {:d} loss {:.6e}'.format(it, loss))

    return TrainResult(grid, losses)
