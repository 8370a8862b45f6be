# -*- coding: utf-8 -*-
"""
Model-based deblurring operators: kernel families and estimation, Richardson-Lucy deconvolution, and
deconvolution guided by a rendered image. Blur is modelled as a spatially uniform kernel applied by 2D
correlation.
"""

import abc
import logging
from typing import List, Literal, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import fft, ndimage

from .core import KernelEstimationError, LinearImage, SrgbImage
from .blursynth import decodeSrgbImage
from .metrics import luma
from . import fileformats

logger = logging.getLogger(__name__)

RL_EPSILON = 1e-8
""" Added to the reblurred estimate before division in Richardson-Lucy updates """

MU_FLOOR = 1e-8


class Kernel:
    """
    A normalised, non-negative, odd-sized square point-spread function centred on its middle element
    """

    def __init__(self, weights):

        w = np.array(weights, dtype=np.float64)

        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError('Kernel must be an odd-sized square matrix')

        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError('Kernel weights must be finite and non-negative')

        if abs(w.sum() - 1.0) > 1e-6:
            raise ValueError('Kernel weights must sum to one (sum = {:.8f})'.format(w.sum()))

        w.flags.writeable = False
        self._weights = w

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def size(self) -> int:
        return self._weights.shape[0]

    @property
    def radius(self) -> int:
        return self.size // 2

    def isDelta(self) -> bool:
        c = self.radius
        return self._weights[c, c] == 1.0 and np.count_nonzero(self._weights) == 1

    def flipped(self) -> 'Kernel':
        return Kernel(self._weights[::-1, ::-1])

    def save(self, filename: str) -> None:
        fileformats.writeMatrix(filename, self._weights)

    @classmethod
    def load(cls, filename: str) -> 'Kernel':
        return cls(fileformats.readMatrix(filename))

    @classmethod
    def project(cls, weights) -> 'Kernel':
        """
        Projects raw weights onto valid kernels by clamping negatives and renormalising. Projecting a valid
        kernel leaves it unchanged.

        :raise: KernelEstimationError: if no positive weight remains
        """
        w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
        total = w.sum()

        if not total > 0:
            raise KernelEstimationError(weights, 'Kernel has no positive weight')

        if abs(total - 1.0) > 1e-12:
            w = w / total

        return cls(w)

    @classmethod
    def delta(cls, size: int = 1) -> 'Kernel':
        w = np.zeros((size, size))
        w[size // 2, size // 2] = 1.0
        return cls(w)

    @classmethod
    def box(cls, size: int) -> 'Kernel':
        return cls(np.full((size, size), 1.0 / (size * size)))

    @classmethod
    def gaussian(cls, size: int, sigma: float) -> 'Kernel':
        r = np.arange(size) - size // 2
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
        return cls.project(g)

    @classmethod
    def disc(cls, size: int, radius: float) -> 'Kernel':
        r = np.arange(size) - size // 2
        dist = np.sqrt(r[:, None] ** 2 + r[None, :] ** 2)
        return cls.project(np.clip(radius + 0.5 - dist, 0.0, 1.0))

    @classmethod
    def motion(cls, size: int, length: float, angleDegrees: float) -> 'Kernel':
        """
        Anti-aliased linear motion kernel centred in the support. The angle is counter-clockwise from the
        image x axis with y pointing up.
        """
        r = np.arange(size) - size // 2
        x = r[None, :].astype(np.float64)
        y = -r[:, None].astype(np.float64)

        a = np.radians(angleDegrees)
        d = np.array([np.cos(a), np.sin(a)])
        half = max(length - 1.0, 0.0) / 2.0

        s = np.clip(x * d[0] + y * d[1], -half, half)
        dist = np.hypot(x - s * d[0], y - s * d[1])
        return cls.project(np.clip(1.0 - dist, 0.0, 1.0))

    def __repr__(self):
        return 'Kernel(size={:d})'.format(self.size)


class BlindSearchGrid(BaseModel):
    """
    Candidate kernel families tried by the initial deblurring search
    """
    model_config = ConfigDict(extra='forbid')

    motion_lengths: List[float] = [3, 5, 7, 9, 11]
    motion_angles: List[float] = [15.0 * i for i in range(12)]
    gaussian_sigmas: List[float] = [0.5, 1.0, 1.5, 2.0]
    disc_radii: List[float] = [1.0, 2.0, 3.0]


class DeblurConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    method: Literal['model', 'none'] = 'model'
    kernel_size: int = 15
    ridge_lambda: float = 0.1
    guidance_mu: float = 0.05
    rl_iterations: int = 30
    search_rl_iterations: int = 15
    search_crop: int = 64
    isotropy_weight: float = 0.25
    sparsity_weight: float = 0.02
    search_margin: float = 0.02
    edge_taper: bool = True
    blind_search_grid: BlindSearchGrid = BlindSearchGrid()

    @model_validator(mode='after')
    def valid(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError('kernel_size must be a positive odd number')
        if min(self.ridge_lambda, self.guidance_mu, self.isotropy_weight, self.sparsity_weight,
               self.search_margin) < 0:
            raise ValueError('Deblurring weights must be non-negative')
        if self.rl_iterations < 0 or self.search_rl_iterations < 0:
            raise ValueError('Iteration counts must be non-negative')
        return self

    def candidates(self) -> List[Kernel]:
        """
        Delta kernel first, then every family of the search grid that fits in the kernel support
        """
        size = self.kernel_size
        grid = self.blind_search_grid
        out = [Kernel.delta(size)]

        out += [Kernel.motion(size, l, a) for l in grid.motion_lengths if l <= size for a in grid.motion_angles]
        out += [Kernel.gaussian(size, s) for s in grid.gaussian_sigmas]
        out += [Kernel.disc(size, r) for r in grid.disc_radii if 2 * r + 1 <= size]
        return out


def convolve(img: np.ndarray, k: Kernel) -> np.ndarray:
    """
    Blurs an image by 2D correlation with the kernel centred on each pixel and replicated edges

    :param img: H x W or H x W x C image
    :param k: Kernel
    """
    img = np.asarray(img, dtype=np.float64)
    w = k.weights if img.ndim == 2 else k.weights[..., None]
    return ndimage.correlate(img, w, mode='nearest')


def _channels(img: np.ndarray) -> np.ndarray:
    return img[..., None] if img.ndim == 2 else img


def estimateKernel(blurred: LinearImage, guide: LinearImage, cfg: Optional['DeblurConfig'] = None) -> Kernel:
    """
    Estimates the kernel that blurs the guide into the blurred image, minimising
    ||k * guide - blurred||^2 + ridge_lambda ||k||^2 summed over all pixels and channels. The normal equations
    are solved directly and the result is projected onto valid kernels. The ridge weight is not scaled by the
    image size.

    :param blurred: Blurred linear image
    :param guide: Sharp linear guide of the same size
    :param cfg: Deblurring settings (kernel size, ridge weight)
    :raise: KernelEstimationError: if the guide carries no gradient energy
    """
    cfg = DeblurConfig() if cfg is None else cfg
    blurred = _channels(np.asarray(blurred, dtype=np.float64))
    guide = _channels(np.asarray(guide, dtype=np.float64))

    if blurred.shape != guide.shape:
        raise ValueError('Blurred image {:s} and guide {:s} differ in size'.format(str(blurred.shape),
                                                                                 str(guide.shape)))

    energy = sum(float(np.sum(np.diff(guide, axis=a) ** 2)) for a in (0, 1))
    if energy < 1e-12:
        raise KernelEstimationError('guide', 'The guide has no gradient energy; the kernel is not identifiable')

    ks = cfg.kernel_size
    r = ks // 2
    H, W, C = guide.shape

    ata = np.zeros((ks * ks, ks * ks))
    atb = np.zeros(ks * ks)

    for c in range(C):
        padded = np.pad(guide[..., c], r, mode='edge')
        for r0 in range(0, H, 32):
            r1 = min(r0 + 32, H)
            A = sliding_window_view(padded[r0:r1 + 2 * r], (ks, ks)).reshape(-1, ks * ks)
            b = blurred[r0:r1, :, c].reshape(-1)
            ata += A.T @ A
            atb += A.T @ b

    k = np.linalg.solve(ata + cfg.ridge_lambda * np.eye(ks * ks), atb)

    return Kernel.project(k.reshape(ks, ks))


def deconvRL(blurred: LinearImage, k: Kernel, iterations: int) -> LinearImage:
    """
    Richardson-Lucy deconvolution started from the blurred image. A delta kernel is a fixed point.

    :param blurred: Non-negative blurred image
    :param k: Kernel
    :param iterations: Number of multiplicative updates
    """
    b = np.maximum(np.asarray(blurred, dtype=np.float64), 0.0)

    if k.isDelta():
        return b.copy()

    kFlip = k.flipped()
    d = b.copy()

    for i in range(iterations):
        ratio = b / (convolve(d, k) + RL_EPSILON)
        d = d * convolve(ratio, kFlip)

    return d


def _taperedPad(img: np.ndarray, pad: int) -> np.ndarray:
    """
    Replicates the edges outward and fades them toward the image mean so the padded image is continuous
    when wrapped around
    """
    padded = np.pad(img, pad, mode='edge')
    if pad == 0:
        return padded

    ramp = np.arange(1, pad + 1) / pad
    ry = np.zeros(padded.shape[0])
    rx = np.zeros(padded.shape[1])
    ry[:pad] = ramp[::-1]
    ry[-pad:] = ramp
    rx[:pad] = ramp[::-1]
    rx[-pad:] = ramp

    w = np.maximum(ry[:, None], rx[None, :])
    return padded * (1.0 - w) + img.mean() * w


def _otf(k: Kernel, shape: Tuple[int, int]) -> np.ndarray:
    """
    Transfer function of circular correlation with k
    """
    psf = np.zeros(shape)
    flipped = k.weights[::-1, ::-1]
    psf[:k.size, :k.size] = flipped
    psf = np.roll(psf, (-k.radius, -k.radius), axis=(0, 1))
    return fft.fft2(psf)


def deconvGuided(blurred: LinearImage, k: Kernel, guide: LinearImage, mu: float,
                 cfg: Optional[DeblurConfig] = None, clamp: bool = True) -> LinearImage:
    """
    Minimises ||k * D - B||^2 + mu ||D - G||^2 per channel in closed form in the frequency domain:
    D = (conj(K) B + mu G) / (|K|^2 + mu). Boundaries are circular after edge-tapered padding (disabled with
    ``cfg.edge_taper = False``).

    :param blurred: Blurred linear image B
    :param k: Kernel
    :param guide: Guide image G
    :param mu: Weight of the guidance term
    :param cfg: Deblurring settings
    :param clamp: Clamp the result at zero
    """
    cfg = DeblurConfig() if cfg is None else cfg
    blurred = np.asarray(blurred, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)

    if blurred.shape != guide.shape:
        raise ValueError('Blurred image and guide differ in size')

    b3 = _channels(blurred)
    g3 = _channels(guide)
    pad = k.size if cfg.edge_taper else 0
    H, W = b3.shape[:2]

    shape = (H + 2 * pad, W + 2 * pad)
    K = _otf(k, shape)
    denom = np.abs(K) ** 2 + mu

    if np.any(denom < MU_FLOOR):
        logger.warning('Guided deconvolution is singular (mu = {:g}); regularisation floor {:g} applied'.format(
            mu, MU_FLOOR))
        denom = np.maximum(denom, MU_FLOOR)

    out = np.empty_like(b3)
    for c in range(b3.shape[2]):
        B = fft.fft2(_taperedPad(b3[..., c], pad))
        G = fft.fft2(_taperedPad(g3[..., c], pad))
        D = fft.ifft2((np.conj(K) * B + mu * G) / denom).real
        out[..., c] = D[pad:pad + H, pad:pad + W]

    out = out.reshape(blurred.shape)
    return np.maximum(out, 0.0) if clamp else out


def guidedObjective(D: np.ndarray, B: np.ndarray, k: Kernel, G: np.ndarray, mu: float) -> float:
    """
    The circular quadratic objective minimised by :func:`deconvGuided` without edge tapering
    """
    D3, B3, G3 = _channels(np.asarray(D)), _channels(np.asarray(B)), _channels(np.asarray(G))
    K = _otf(k, D3.shape[:2])

    value = 0.0
    for c in range(D3.shape[2]):
        reblur = fft.ifft2(K * fft.fft2(D3[..., c])).real
        value += float(np.sum((reblur - B3[..., c]) ** 2) + mu * np.sum((D3[..., c] - G3[..., c]) ** 2))

    return value


def _centralCrop(img: np.ndarray, size: int) -> np.ndarray:

    H, W = img.shape[:2]
    h, w = min(size, H), min(size, W)
    y0, x0 = (H - h) // 2, (W - w) // 2
    return img[y0:y0 + h, x0:x0 + w]


def _gradientStatistics(img: np.ndarray, margin: int) -> Tuple[float, float]:
    """
    Directional imbalance and normalised sparsity of the gradients of a single-channel image. The imbalance is
    (l1 - l2) / (l1 + l2) for the eigenvalues of the gradient structure tensor and vanishes for isotropic
    gradients. The sparsity mean(|g|^0.8) / mean(|g|^2)^0.4 is unchanged when the image is scaled.
    """
    gx = ndimage.sobel(img, axis=1, mode='nearest') / 8.0
    gy = ndimage.sobel(img, axis=0, mode='nearest') / 8.0

    if margin > 0 and min(img.shape) > 4 * margin:
        gx = gx[margin:-margin, margin:-margin]
        gy = gy[margin:-margin, margin:-margin]

    sxx, syy, sxy = float(np.mean(gx * gx)), float(np.mean(gy * gy)), float(np.mean(gx * gy))
    energy = sxx + syy

    if not energy > 1e-20:
        return 0.0, 0.0

    imbalance = np.sqrt((sxx - syy) ** 2 + 4.0 * sxy ** 2) / energy
    mag2 = gx * gx + gy * gy
    sparsity = float(np.mean(mag2 ** 0.4)) / float(np.mean(mag2)) ** 0.4

    return float(imbalance), sparsity


def searchKernel(linear: LinearImage, cfg: Optional[DeblurConfig] = None) -> Tuple[Kernel, float]:
    """
    Blind kernel search. Every candidate deconvolves the luma of a central crop with a few Richardson-Lucy
    iterations and is scored by its reblur error relative to the crop variance, plus two gradient priors on
    the deconvolved crop: the directional imbalance of the gradient energy, which motion blur raises, and
    the normalised hyper-Laplacian sparsity. Neither prior can be lowered by leaving the image blurred.
    The delta kernel is kept unless another candidate improves on its score by ``search_margin``.

    :return: best kernel, its score
    """
    cfg = DeblurConfig() if cfg is None else cfg
    y = _centralCrop(luma(linear), cfg.search_crop)

    variance = float(np.var(y))
    scale = variance if variance > 1e-12 else 1.0
    margin = cfg.kernel_size // 2

    candidates = cfg.candidates()
    scores = []

    for k in candidates:
        d = deconvRL(y, k, cfg.search_rl_iterations)
        reblur = float(np.mean((convolve(d, k) - y) ** 2)) / scale
        imbalance, sparsity = _gradientStatistics(d, margin)
        scores.append(reblur + cfg.isotropy_weight * imbalance + cfg.sparsity_weight * sparsity)

    best = 0
    if len(candidates) > 1:
        other = 1 + int(np.argmin(scores[1:]))
        if scores[other] < scores[0] - cfg.search_margin:
            best = other

    return candidates[best], scores[best]


def initialDeblurWithKernel(blurred: SrgbImage, cfg: Optional[DeblurConfig] = None) -> Tuple[LinearImage, Kernel]:

    cfg = DeblurConfig() if cfg is None else cfg
    linear = decodeSrgbImage(blurred)
    k, score = searchKernel(linear, cfg)

    logger.debug('Initial deblurring selected {:s} (score {:.4e})'.format(repr(k), score))
    return deconvRL(linear, k, cfg.rl_iterations), k


def initialDeblur(blurred: SrgbImage, cfg: Optional[DeblurConfig] = None) -> LinearImage:
    """
    Deblurs a single view without guidance: blind kernel search followed by Richardson-Lucy deconvolution of
    the full image with the selected kernel

    :param blurred: 8-bit display-encoded view
    :param cfg: Deblurring settings
    :return: Linear deblurred image
    """
    return initialDeblurWithKernel(blurred, cfg)[0]


def guidedDeblurWithKernel(blurred: SrgbImage, guide: LinearImage,
                           cfg: Optional[DeblurConfig] = None) -> Tuple[LinearImage, Optional[Kernel]]:

    cfg = DeblurConfig() if cfg is None else cfg
    linear = decodeSrgbImage(blurred)

    try:
        k = estimateKernel(linear, guide, cfg)
    except KernelEstimationError as e:
        logger.warning('Kernel estimation failed ({:s}); using the rendered guide'.format(e.message))
        return np.asarray(guide, dtype=np.float64).copy(), None

    return deconvGuided(linear, k, guide, cfg.guidance_mu, cfg), k


def rfGuidedDeblur(blurred: SrgbImage, renderedGuide: LinearImage, cfg: Optional[DeblurConfig] = None) -> LinearImage:
    """
    Deblurs a view using an image rendered from the radiance field: the kernel is estimated between the guide
    and the decoded view, then the view is deconvolved with the guide as a quadratic prior. When the kernel
    cannot be estimated the guide is returned.

    :param blurred: 8-bit display-encoded view
    :param renderedGuide: Linear rendering at the same pose
    :param cfg: Deblurring settings
    """
    return guidedDeblurWithKernel(blurred, renderedGuide, cfg)[0]


class DeblurOperator(abc.ABC):
    """
    Interface of the two deblurring steps used by the pipeline. Implementations return the deblurred linear
    image and the kernel they used, if any.
    """

    @abc.abstractmethod
    def initial(self, blurred: SrgbImage) -> Tuple[LinearImage, Optional[Kernel]]:
        raise NotImplementedError()

    @abc.abstractmethod
    def guided(self, blurred: SrgbImage, rendered: LinearImage) -> Tuple[LinearImage, Optional[Kernel]]:
        raise NotImplementedError()


class ModelBasedDeblurOperator(DeblurOperator):

    def __init__(self, cfg: Optional[DeblurConfig] = None):
        self._cfg = DeblurConfig() if cfg is None else cfg

    @property
    def config(self) -> DeblurConfig:
        return self._cfg

    def initial(self, blurred: SrgbImage) -> Tuple[LinearImage, Optional[Kernel]]:
        return initialDeblurWithKernel(blurred, self._cfg)

    def guided(self, blurred: SrgbImage, rendered: LinearImage) -> Tuple[LinearImage, Optional[Kernel]]:
        return guidedDeblurWithKernel(blurred, rendered, self._cfg)


class IdentityDeblurOperator(DeblurOperator):
    """
    Passes the decoded blurred views through unchanged, i.e. the radiance field is trained on the blurred views
    """

    def initial(self, blurred: SrgbImage) -> Tuple[LinearImage, Optional[Kernel]]:
        return decodeSrgbImage(blurred), None

    def guided(self, blurred: SrgbImage, rendered: LinearImage) -> Tuple[LinearImage, Optional[Kernel]]:
        return decodeSrgbImage(blurred), None


def createDeblurOperator(cfg: DeblurConfig) -> DeblurOperator:

    if cfg.method == 'none':
        return IdentityDeblurOperator()

    return ModelBasedDeblurOperator(cfg)
