# -*- coding: utf-8 -*-

import struct
import logging
from typing import Tuple

import numpy as np
from scipy.special import expit

from ..core import CheckpointError

logger = logging.getLogger(__name__)

EMPTY_DENSITY = -1000.0
""" Raw density of empty voxels. Its activated density is exactly zero in double precision. """

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

CHECKPOINT_MAGIC = b'RFVG'
CHECKPOINT_VERSION = 1


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplusInverse(y: np.ndarray) -> np.ndarray:
    """
    Inverse of the softplus activation. Zero density maps to :data:`EMPTY_DENSITY`.
    """
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide='ignore'):
        x = y + np.log(-np.expm1(-np.maximum(y, 1e-300)))
    return np.maximum(np.where(y > 0, x, EMPTY_DENSITY), EMPTY_DENSITY)


def shBasis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """
    Evaluates the real spherical harmonic basis up to the given degree

    :param dirs: ... x 3 unit directions
    :param degree: 0 or 1
    :return: ... x K basis values with K = (degree + 1)^2
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    out = np.empty(dirs.shape[:-1] + ((degree + 1) ** 2,))
    out[..., 0] = SH_C0

    if degree >= 1:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x

    return out


def evalSh(coeffs: np.ndarray, viewDir: np.ndarray) -> np.ndarray:
    """
    Evaluates view-dependent colour from spherical harmonic coefficients

    :param coeffs: ... x 3 x K coefficients
    :param viewDir: unit direction (... x 3)
    :return: ... x 3 linear RGB, clamped at 0
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    degree = int(round(np.sqrt(coeffs.shape[-1]))) - 1
    basis = shBasis(viewDir, degree)
    return np.maximum(np.einsum('...ck,...k->...c', coeffs, basis), 0.0)


def _upsampleAxis(a: np.ndarray, axis: int) -> np.ndarray:

    a = np.moveaxis(a, axis, 0)
    out = np.empty((2 * a.shape[0] - 1,) + a.shape[1:])
    out[0::2] = a
    out[1::2] = 0.5 * (a[:-1] + a[1:])
    return np.moveaxis(out, 0, axis)


class VoxelGrid:
    """
    A bounded radiance field stored at the nodes of a regular lattice spanning the bounding box. Each node
    holds a raw (pre-softplus) density and spherical harmonic colour coefficients per RGB channel. Values
    between nodes are trilinearly interpolated.
    """

    def __init__(self, densityRaw: np.ndarray, shCoeffs: np.ndarray, aabb):

        densityRaw = np.asarray(densityRaw, dtype=np.float64)
        shCoeffs = np.asarray(shCoeffs, dtype=np.float64)
        aabb = np.asarray(aabb, dtype=np.float64)

        if densityRaw.ndim != 3 or min(densityRaw.shape) < 2:
            raise ValueError('Grid resolution components must be at least 2')

        if shCoeffs.shape[:4] != densityRaw.shape + (3,) or shCoeffs.shape[4] not in (1, 4):
            raise ValueError('Spherical harmonic coefficients must have shape (nx, ny, nz, 3, 1 or 4)')

        if aabb.shape != (2, 3) or not np.all(aabb[1] > aabb[0]):
            raise ValueError('Invalid bounding box')

        self.densityRaw = densityRaw
        self.shCoeffs = shCoeffs
        self._aabb = aabb

    @classmethod
    def empty(cls, resolution, aabb, shDegree: int = 1) -> 'VoxelGrid':
        """
        Creates a grid with zero density and zero colour everywhere

        :param resolution: (nx, ny, nz) node counts
        :param aabb: 2 x 3 bounds
        :param shDegree: 0 or 1
        """
        resolution = tuple(int(n) for n in resolution)
        return cls(np.full(resolution, EMPTY_DENSITY), np.zeros(resolution + (3, (shDegree + 1) ** 2)), aabb)

    @classmethod
    def initial(cls, resolution, aabb, shDegree: int = 1, densityRaw: float = -2.0,
                grey: float = 0.5) -> 'VoxelGrid':
        """
        Creates the starting point of an optimisation: a thin uniform medium with grey colour
        """
        grid = cls.empty(resolution, aabb, shDegree)
        grid.densityRaw[...] = densityRaw
        grid.shCoeffs[..., 0] = grey / SH_C0
        return grid

    def copy(self) -> 'VoxelGrid':
        return VoxelGrid(self.densityRaw.copy(), self.shCoeffs.copy(), self._aabb.copy())

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return self.densityRaw.shape

    @property
    def aabb(self) -> np.ndarray:
        return self._aabb

    @property
    def shDegree(self) -> int:
        return 0 if self.shCoeffs.shape[4] == 1 else 1

    @property
    def numCoeffs(self) -> int:
        return self.shCoeffs.shape[4]

    @property
    def cellSize(self) -> np.ndarray:
        return (self._aabb[1] - self._aabb[0]) / (np.asarray(self.resolution) - 1)

    def density(self) -> np.ndarray:
        """
        Activated density at the nodes
        """
        return softplus(self.densityRaw)

    def nodePosition(self, i: int, j: int, k: int) -> np.ndarray:
        return self._aabb[0] + np.array([i, j, k]) * self.cellSize

    def isFinite(self) -> bool:
        return bool(np.all(np.isfinite(self.densityRaw)) and np.all(np.isfinite(self.shCoeffs)))

    def lookup(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Finds the 8 nodes surrounding each point and their trilinear weights. Points outside the bounding box
        get zero weights.

        :param points: ... x 3 points
        :return: flat node indices (... x 8), weights (... x 8)
        """
        points = np.asarray(points, dtype=np.float64)
        res = np.asarray(self.resolution)

        u = (points - self._aabb[0]) / self.cellSize
        inside = np.all((points >= self._aabb[0]) & (points <= self._aabb[1]), axis=-1)

        i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
        f = np.clip(u - i0, 0.0, 1.0)

        idx = np.empty(points.shape[:-1] + (8,), dtype=np.int64)
        w = np.empty(points.shape[:-1] + (8,))

        for c in range(8):
            dx, dy, dz = (c >> 2) & 1, (c >> 1) & 1, c & 1
            ii = i0[..., 0] + dx
            jj = i0[..., 1] + dy
            kk = i0[..., 2] + dz
            idx[..., c] = (ii * res[1] + jj) * res[2] + kk
            w[..., c] = (np.where(dx, f[..., 0], 1.0 - f[..., 0]) *
                         np.where(dy, f[..., 1], 1.0 - f[..., 1]) *
                         np.where(dz, f[..., 2], 1.0 - f[..., 2]))

        w *= inside[..., None]
        idx *= inside[..., None]
        return idx, w

    def sample(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Trilinearly interpolates the activated density and the colour coefficients

        :param points: ... x 3 points
        :return: density (...), coefficients (... x 3 x K)
        """
        idx, w = self.lookup(points)
        sigma = np.einsum('...c,...c->...', softplus(self.densityRaw.reshape(-1)[idx]), w)
        coeffs = np.einsum('...cjk,...c->...jk', self.shCoeffs.reshape(-1, 3, self.numCoeffs)[idx], w)
        return sigma, coeffs


def sampleTrilinear(grid: VoxelGrid, p) -> Tuple[float, np.ndarray]:
    """
    Samples density and colour coefficients at a single point. Points outside the bounding box return zeros.

    :param grid: Voxel grid
    :param p: 3-point
    :return: density, 3 x K coefficients
    """
    sigma, coeffs = grid.sample(np.asarray(p, dtype=np.float64)[None])
    return float(sigma[0]), coeffs[0]


def upsample(grid: VoxelGrid) -> VoxelGrid:
    """
    Doubles the number of cells along each axis (n nodes become 2n - 1). Existing nodes keep their values and
    new nodes take the trilinearly interpolated field, so the represented field is unchanged.
    """
    sigma = grid.density()
    coeffs = grid.shCoeffs

    for axis in range(3):
        sigma = _upsampleAxis(sigma, axis)
        coeffs = _upsampleAxis(coeffs, axis)

    raw = softplusInverse(sigma)
    raw[::2, ::2, ::2] = grid.densityRaw

    return VoxelGrid(raw, coeffs, grid.aabb.copy())


def prune(grid: VoxelGrid, threshold: float) -> VoxelGrid:
    """
    Empties nodes whose activated density is below the threshold
    """
    out = grid.copy()
    mask = out.density() < threshold
    out.densityRaw[mask] = EMPTY_DENSITY

    logger.debug('Pruned {:d} / {:d} nodes'.format(int(mask.sum()), mask.size))
    return out


def totalVariation(grid: VoxelGrid) -> Tuple[float, np.ndarray]:
    """
    Total variation of the activated density: the sum of squared differences between neighbouring nodes,
    divided by the node count

    :return: value, gradient with respect to the raw density
    """
    sigma = grid.density()
    grad = np.zeros_like(sigma)
    value = 0.0

    for axis in range(3):
        d = np.diff(sigma, axis=axis)
        value += float(np.sum(d * d))

        g = np.zeros_like(sigma)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        g[tuple(lo)] -= 2.0 * d
        g[tuple(hi)] += 2.0 * d
        grad += g

    n = sigma.size
    return value / n, grad * expit(grid.densityRaw) / n


def saveGrid(grid: VoxelGrid, filename: str) -> None:
    """
    Writes a binary grid checkpoint: magic, version, resolution, bounds, SH degree, then the raw density and
    the coefficients as little-endian 32-bit floats
    """
    header = struct.pack('<4sI3I6dI', CHECKPOINT_MAGIC, CHECKPOINT_VERSION, *grid.resolution,
                         *grid.aabb.reshape(-1), grid.shDegree)

    with open(filename, 'wb') as f:
        f.write(header)
        f.write(grid.densityRaw.astype('<f4').tobytes())
        f.write(grid.shCoeffs.astype('<f4').tobytes())


def loadGrid(filename: str) -> VoxelGrid:
    """
    Reads a grid checkpoint written by :func:`saveGrid`

    :raise: CheckpointError: if the file is not a checkpoint, has another version or is truncated
    """
    headerSize = struct.calcsize('<4sI3I6dI')

    try:
        with open(filename, 'rb') as f:
            content = f.read()
    except OSError as e:
        raise CheckpointError(filename, 'Cannot read grid checkpoint ({:s}): {:s}'.format(filename, str(e)))

    if len(content) < headerSize:
        raise CheckpointError(filename, 'Grid checkpoint ({:s}) is truncated'.format(filename))

    fields = struct.unpack('<4sI3I6dI', content[:headerSize])
    magic, version = fields[0], fields[1]

    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(filename, 'File ({:s}) is not a grid checkpoint'.format(filename))

    if version != CHECKPOINT_VERSION:
        raise CheckpointError(filename, 'Grid checkpoint version {:d} is not supported (expected {:d})'.format(
            version, CHECKPOINT_VERSION))

    res = tuple(fields[2:5])
    aabb = np.array(fields[5:11]).reshape(2, 3)
    degree = fields[11]

    if degree not in (0, 1) or min(res) < 2:
        raise CheckpointError(filename, 'Grid checkpoint ({:s}) has an invalid header'.format(filename))

    nNodes = res[0] * res[1] * res[2]
    nCoeffs = nNodes * 3 * (degree + 1) ** 2
    expected = headerSize + 4 * (nNodes + nCoeffs)

    if len(content) != expected:
        raise CheckpointError(filename, 'Grid checkpoint ({:s}) payload is {:d} bytes, expected {:d}'.format(
            filename, len(content), expected))

    payload = np.frombuffer(content, dtype='<f4', offset=headerSize).astype(np.float64)
    density = payload[:nNodes].reshape(res)
    coeffs = payload[nNodes:].reshape(res + (3, (degree + 1) ** 2))

    grid = VoxelGrid(density, coeffs, aabb)
    if not grid.isFinite():
        raise CheckpointError(filename, 'Grid checkpoint ({:s}) contains non-finite values'.format(filename))

    return grid


def snapToCheckpointPrecision(grid: VoxelGrid) -> VoxelGrid:
    """
    Rounds the parameters to the precision stored in checkpoints, so a grid renders identically before and
    after a save/load cycle
    """
    return VoxelGrid(grid.densityRaw.astype(np.float32).astype(np.float64),
                     grid.shCoeffs.astype(np.float32).astype(np.float64), grid.aabb.copy())
