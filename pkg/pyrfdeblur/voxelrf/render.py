# -*- coding: utf-8 -*-
"""
Emission-absorption volume rendering of a voxel grid and the analytic gradient of the squared colour error.

Each ray segment [t_near, t_far] is split into n uniform steps sampled at their midpoints. With
s_i = sigma_i * delta the quadrature weights are w_i = T_i * (1 - exp(-s_i)) and T_i = exp(-sum_{j<i} s_j);
the colour is sum_i w_i c_i + T_final * background.
"""

import logging
from typing import NamedTuple, Tuple

import numpy as np
from scipy.special import expit

from ..core import LinearImage, Settings
from ..geometry import Camera, Pose, Ray, generateRays
from .grid import VoxelGrid, shBasis, softplus

logger = logging.getLogger(__name__)

RAYS_PER_CHUNK = 4096


class GridGradient(NamedTuple):
    """
    Gradient of a loss with respect to the grid parameters
    """
    density: np.ndarray
    sh: np.ndarray

    def touched(self) -> np.ndarray:
        """ Mask of nodes with a non-zero gradient """
        return (self.density != 0.0) | np.any(self.sh != 0.0, axis=(3, 4))


class _Forward(NamedTuple):
    idx: np.ndarray
    trilin: np.ndarray
    delta: np.ndarray
    transmittance: np.ndarray
    weights: np.ndarray
    transmittanceFinal: np.ndarray
    segColors: np.ndarray
    colorMask: np.ndarray
    basis: np.ndarray
    color: np.ndarray


def rayBoxIntersect(origins: np.ndarray, dirs: np.ndarray, aabb: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Intersects rays with an axis-aligned box

    :param origins: N x 3 ray origins
    :param dirs: N x 3 ray directions
    :param aabb: 2 x 3 bounds
    :return: t_near (clamped at 0), t_far. Rays missing the box get t_near = t_far = 0.
    """
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / dirs
        t1 = (aabb[0] - origins) * inv
        t2 = (aabb[1] - origins) * inv

    parallel = dirs == 0.0
    inside = (origins >= aabb[0]) & (origins <= aabb[1])
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.inf, t2)

    tNear = np.maximum(np.minimum(t1, t2).max(axis=-1), 0.0)
    tFar = np.maximum(t1, t2).min(axis=-1)

    miss = ~(tFar > tNear)
    return np.where(miss, 0.0, tNear), np.where(miss, 0.0, tFar)


def _forward(grid: VoxelGrid, origins, dirs, tNear, tFar, nSteps: int, background) -> _Forward:

    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(origins)
    tNear = np.broadcast_to(np.asarray(tNear, dtype=np.float64), (n,))
    tFar = np.broadcast_to(np.asarray(tFar, dtype=np.float64), (n,))

    if nSteps < 1:
        raise ValueError('At least one step per ray is required')

    delta = np.maximum(tFar - tNear, 0.0) / nSteps
    t = tNear[:, None] + (np.arange(nSteps) + 0.5)[None, :] * delta[:, None]
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]

    idx, trilin = grid.lookup(pts)
    sigma = np.einsum('rsc,rsc->rs', softplus(grid.densityRaw.reshape(-1)[idx]), trilin)
    coeffs = np.einsum('rscjk,rsc->rsjk', grid.shCoeffs.reshape(-1, 3, grid.numCoeffs)[idx], trilin)

    basis = shBasis(dirs, grid.shDegree)
    rawColors = np.einsum('rsjk,rk->rsj', coeffs, basis)
    colorMask = rawColors > 0.0
    segColors = np.where(colorMask, rawColors, 0.0)

    s = sigma * delta[:, None]
    cum = np.cumsum(s, axis=1)
    transmittance = np.exp(-(cum - s))
    weights = transmittance * -np.expm1(-s)
    tFinal = np.exp(-cum[:, -1])

    color = np.einsum('rs,rsj->rj', weights, segColors) + tFinal[:, None] * np.asarray(background, dtype=np.float64)

    return _Forward(idx, trilin, delta, transmittance, weights, tFinal, segColors, colorMask, basis, color)


def renderRays(grid: VoxelGrid, origins, dirs, tNear, tFar, nSteps: int, background) -> np.ndarray:
    """
    Renders a batch of rays

    :param grid: Voxel grid
    :param origins: N x 3 origins
    :param dirs: N x 3 unit directions
    :param tNear: Scalar or per-ray start distance
    :param tFar: Scalar or per-ray end distance
    :param nSteps: Number of uniform steps per ray
    :param background: Linear RGB background radiance
    :return: N x 3 linear RGB
    """
    return _forward(grid, origins, dirs, tNear, tFar, nSteps, background).color


def renderRay(grid: VoxelGrid, ray: Ray, tNear: float, tFar: float, nSteps: int, background) -> np.ndarray:
    """
    Renders a single ray. Requires t_near < t_far.
    """
    if not tNear < tFar:
        raise ValueError('t_near must be smaller than t_far')

    return renderRays(grid, ray.origin, ray.direction, tNear, tFar, nSteps, background)[0]


def quadratureWeights(grid: VoxelGrid, ray: Ray, tNear: float, tFar: float, nSteps: int) -> Tuple[np.ndarray, float]:
    """
    Returns the per-step weights T_i * alpha_i and the final transmittance of a ray. Together they sum to one.
    """
    fwd = _forward(grid, ray.origin, ray.direction, tNear, tFar, nSteps, np.zeros(3))
    return fwd.weights[0], float(fwd.transmittanceFinal[0])


def gradRays(grid: VoxelGrid, origins, dirs, targets, tNear, tFar, nSteps: int, background,
             scale: float = 1.0) -> Tuple[float, GridGradient]:
    """
    Computes the summed squared colour error of a batch of rays against their targets and its gradient with
    respect to the raw density and the colour coefficients of every node.

    :param targets: N x 3 target colours
    :param scale: Factor applied to the loss and the gradient (e.g. one over the batch size)
    :return: loss, gradient
    """
    fwd = _forward(grid, origins, dirs, tNear, tFar, nSteps, background)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))

    residual = fwd.color - targets
    loss = scale * float(np.sum(residual * residual))
    g = 2.0 * scale * residual

    # Radiance behind each step: sum_{i > k} w_i c_i + T_final * background
    contrib = fwd.weights[..., None] * fwd.segColors
    tail = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    tail += (fwd.transmittanceFinal[:, None] * np.asarray(background, dtype=np.float64))[:, None, :]

    # T_{k+1} = T_k * exp(-s_k) = T_k - w_k
    nextT = fwd.transmittance - fwd.weights

    dColorDs = nextT[..., None] * fwd.segColors - tail
    dSigma = np.einsum('rsj,rj->rs', dColorDs, g) * fwd.delta[:, None]

    # Accumulate over the touched nodes only, then scatter into dense arrays
    touched, inverse = np.unique(fwd.idx, return_inverse=True)
    inverse = inverse.reshape(fwd.idx.shape)
    nTouched = len(touched)

    rawAtIdx = grid.densityRaw.reshape(-1)[fwd.idx]
    dRaw = dSigma[..., None] * fwd.trilin * expit(rawAtIdx)
    gradDensity = np.zeros(grid.densityRaw.size)
    gradDensity[touched] = np.bincount(inverse.reshape(-1), weights=dRaw.reshape(-1), minlength=nTouched)

    dCoeff = (g[:, None, :] * fwd.weights[..., None] * fwd.colorMask)[..., None] * fwd.basis[:, None, None, :]
    K3 = 3 * grid.numCoeffs
    offsets = np.arange(K3)
    compactSh = np.zeros(nTouched * K3)

    for c in range(8):
        flatIdx = inverse[..., c, None] * K3 + offsets
        nodeContrib = fwd.trilin[..., c, None, None] * dCoeff
        compactSh += np.bincount(flatIdx.reshape(-1), weights=nodeContrib.reshape(-1), minlength=nTouched * K3)

    gradSh = np.zeros((grid.densityRaw.size, K3))
    gradSh[touched] = compactSh.reshape(nTouched, K3)

    return loss, GridGradient(gradDensity.reshape(grid.resolution), gradSh.reshape(grid.shCoeffs.shape))


def gradRay(grid: VoxelGrid, ray: Ray, target, tNear: float, tFar: float, nSteps: int,
            background) -> Tuple[float, GridGradient]:
    """
    Gradient of ||render_ray - target||^2 with respect to every grid parameter. Nodes not touched by the ray
    have a zero gradient.
    """
    return gradRays(grid, ray.origin, ray.direction, np.asarray(target)[None], tNear, tFar, nSteps, background)


def renderView(grid: VoxelGrid, camera: Camera, pose: Pose, background, nSteps: int = 128) -> LinearImage:
    """
    Renders an image of the grid. Pixels whose rays miss the bounding box show the background.

    :param grid: Voxel grid
    :param camera: Camera intrinsics
    :param pose: Camera-to-world pose
    :param background: Linear RGB background
    :param nSteps: Number of steps per ray
    :return: H x W x 3 linear image
    """
    origins, dirs = generateRays(camera, pose)
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    tNear, tFar = rayBoxIntersect(origins, dirs, grid.aabb)

    chunks = [slice(i, min(i + RAYS_PER_CHUNK, len(origins))) for i in range(0, len(origins), RAYS_PER_CHUNK)]
    colors = Settings.map(lambda c: renderRays(grid, origins[c], dirs[c], tNear[c], tFar[c], nSteps, background),
                          chunks)

    return np.concatenate(colors).reshape(camera.height, camera.width, 3)
