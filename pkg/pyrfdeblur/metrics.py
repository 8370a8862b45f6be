# -*- coding: utf-8 -*-

import os
import re
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from .core import SCHEMA_VERSION, ColorSpace, DatasetError, LinearImage
from .blursynth import srgbEncode
from . import fileformats

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
""" PSNR reported for identical images """

OMITTED_METRICS_NOTE = 'LPIPS, NIQE and ARNIQA are not computed (they require learned networks).'

ITERATION_DIR = re.compile(r'^iter_(\d+)$')


def luma(rgb: np.ndarray) -> np.ndarray:
    """
    Rec. 601 luma of an RGB image. Single channel images are returned unchanged.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return rgb
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def toColorSpace(img: LinearImage, colorSpace: ColorSpace) -> np.ndarray:
    """
    Converts a linear image to the space metrics are computed in
    """
    img = np.asarray(img, dtype=np.float64)
    if colorSpace == ColorSpace.DISPLAY:
        return srgbEncode(np.clip(img, 0.0, 1.0))
    return img


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """
    Peak signal to noise ratio in dB, capped at :data:`PSNR_CAP`

    :param a: Image
    :param b: Image of the same dimensions
    :param peak: Peak signal value
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    if a.shape != b.shape:
        raise ValueError('Image dimensions differ: {:s} vs {:s}'.format(str(a.shape), str(b.shape)))

    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP

    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP)


def ssimWindow(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """
    Normalised 2D Gaussian window
    """
    r = np.arange(size) - size // 2
    g = np.exp(-r ** 2 / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: Optional[np.ndarray] = None, K1: float = 0.01, K2: float = 0.03,
         dataRange: float = 1.0) -> float:
    """
    Mean structural similarity over all fully contained windows, computed on the luma of the inputs

    :param a: Image
    :param b: Image of the same dimensions (sides of at least the window size)
    :param window: Weighting window (11 x 11 Gaussian, sigma 1.5 by default)
    :param K1: Luminance stabiliser
    :param K2: Contrast stabiliser
    :param dataRange: Dynamic range of the values
    """
    window = ssimWindow() if window is None else window
    x = luma(a)
    y = luma(b)

    if x.shape != y.shape:
        raise ValueError('Image dimensions differ: {:s} vs {:s}'.format(str(x.shape), str(y.shape)))

    if min(x.shape) < window.shape[0]:
        raise ValueError('Images must be at least {:d} pixels on each side for SSIM'.format(window.shape[0]))

    C1 = (K1 * dataRange) ** 2
    C2 = (K2 * dataRange) ** 2
    r = window.shape[0] // 2

    def filt(z):
        return ndimage.correlate(z, window, mode='reflect')[r:z.shape[0] - r, r:z.shape[1] - r]

    muX = filt(x)
    muY = filt(y)
    sXX = filt(x * x) - muX ** 2
    sYY = filt(y * y) - muY ** 2
    sXY = filt(x * y) - muX * muY

    num = (2.0 * muX * muY + C1) * (2.0 * sXY + C2)
    den = (muX ** 2 + muY ** 2 + C1) * (sXX + sYY + C2)
    return float(np.mean(num / den))


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    color_space: ColorSpace = ColorSpace.DISPLAY
    peak: float = 1.0


class ViewMetric(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str
    psnr: float
    ssim: float


class IterationMetrics(BaseModel):
    """
    Metrics recorded by the pipeline after each radiance field construction
    """
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    iteration: int
    color_space: ColorSpace
    heldout: List[ViewMetric] = []
    heldout_psnr: Optional[float] = None
    heldout_ssim: Optional[float] = None
    rendered_psnr: Optional[float] = None
    deblurred_psnr: Optional[float] = None
    final_loss: Optional[float] = None


class IterationRow(BaseModel):
    model_config = ConfigDict(extra='forbid')

    iteration: int
    psnr: float
    ssim: float
    delta_psnr: float
    delta_ssim: float
    rendered_psnr: Optional[float] = None
    deblurred_psnr: Optional[float] = None


class MetricReport(BaseModel):
    """
    Per-view metrics with their means, and the per-iteration series of a pipeline run
    """
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    color_space: ColorSpace = ColorSpace.DISPLAY
    views: List[ViewMetric] = []
    mean_psnr: Optional[float] = None
    mean_ssim: Optional[float] = None
    iterations: List[IterationRow] = []
    notes: List[str] = [OMITTED_METRICS_NOTE]

    def table(self) -> str:
        """
        Formats the report as a text table
        """
        lines = []

        if self.views:
            lines.append('{:<24s} {:>10s} {:>8s}'.format('View', 'PSNR (dB)', 'SSIM'))
            for v in self.views:
                lines.append('{:<24s} {:>10.3f} {:>8.4f}'.format(v.name, v.psnr, v.ssim))
            lines.append('{:<24s} {:>10.3f} {:>8.4f}'.format('mean', self.mean_psnr, self.mean_ssim))

        if self.iterations:
            if lines:
                lines.append('')
            lines.append('{:>5s} {:>10s} {:>8s} {:>8s} {:>8s} {:>10s} {:>10s}'.format(
                'Iter', 'PSNR (dB)', 'SSIM', 'dPSNR', 'dSSIM', 'R PSNR', 'D PSNR'))
            for r in self.iterations:
                lines.append('{:>5d} {:>10.3f} {:>8.4f} {:>+8.3f} {:>+8.4f} {:>10s} {:>10s}'.format(
                    r.iteration, r.psnr, r.ssim, r.delta_psnr, r.delta_ssim,
                    _optional(r.rendered_psnr), _optional(r.deblurred_psnr)))

        lines += ['', *self.notes]
        return '\n'.join(lines) + '\n'

    def csv(self) -> str:
        """
        Columnar plot data of the iteration series (or of the views when there is no series)
        """
        if self.iterations:
            rows = ['iteration,psnr,ssim,delta_psnr,delta_ssim,rendered_psnr,deblurred_psnr']
            rows += ['{:d},{:.6f},{:.6f},{:.6f},{:.6f},{:s},{:s}'.format(
                r.iteration, r.psnr, r.ssim, r.delta_psnr, r.delta_ssim,
                '' if r.rendered_psnr is None else '{:.6f}'.format(r.rendered_psnr),
                '' if r.deblurred_psnr is None else '{:.6f}'.format(r.deblurred_psnr)) for r in self.iterations]
        else:
            rows = ['view,psnr,ssim'] + ['{:s},{:.6f},{:.6f}'.format(v.name, v.psnr, v.ssim) for v in self.views]

        return '\n'.join(rows) + '\n'

    def write(self, outDir: str, stem: str = 'report') -> None:
        """
        Writes ``<stem>.json``, ``<stem>.txt`` and ``<stem>.csv`` to the directory
        """
        os.makedirs(outDir, exist_ok=True)
        fileformats.writeModel(os.path.join(outDir, stem + '.json'), self)

        with open(os.path.join(outDir, stem + '.txt'), 'w') as f:
            f.write(self.table())

        with open(os.path.join(outDir, stem + '.csv'), 'w') as f:
            f.write(self.csv())


def _optional(v: Optional[float]) -> str:
    return '-' if v is None else '{:.3f}'.format(v)


def evaluateImages(renders: Sequence[LinearImage], gts: Sequence[LinearImage],
                   colorSpace: ColorSpace = ColorSpace.DISPLAY, names: Optional[Sequence[str]] = None,
                   peak: float = 1.0) -> MetricReport:
    """
    Computes PSNR and SSIM of each rendering against its ground truth

    :param renders: Linear images
    :param gts: Linear ground truth images
    :param colorSpace: Space the metrics are computed in
    :param names: Optional view names
    :return: MetricReport with per-view values and means
    """
    if len(renders) != len(gts):
        raise ValueError('{:d} renders but {:d} ground truth images'.format(len(renders), len(gts)))

    if len(renders) == 0:
        raise ValueError('No images to evaluate')

    names = ['view_{:04d}'.format(i) for i in range(len(renders))] if names is None else list(names)

    views = []
    for name, r, g in zip(names, renders, gts):
        a = toColorSpace(r, colorSpace)
        b = toColorSpace(g, colorSpace)
        views.append(ViewMetric(name=name, psnr=psnr(a, b, peak), ssim=ssim(a, b, dataRange=peak)))

    return MetricReport(color_space=colorSpace, views=views,
                        mean_psnr=float(np.mean([v.psnr for v in views])),
                        mean_ssim=float(np.mean([v.ssim for v in views])))


def iterationReport(workdir: str, write: bool = True) -> MetricReport:
    """
    Collects the held-out metrics of every completed iteration of a run into a table with deltas to the
    previous iteration. Written to the run directory as text, CSV plot data and JSON.

    :param workdir: Run directory
    :param write: Write the report files
    :raise: DatasetError: if the run has no completed iteration or an iteration lacks its metrics
    """
    if not os.path.isdir(workdir):
        raise DatasetError(workdir, 'Run directory ({:s}) does not exist'.format(workdir))

    iters = sorted(int(m.group(1)) for m in (ITERATION_DIR.match(d) for d in os.listdir(workdir)) if m)
    iters = [i for i in iters if i >= 1]

    metrics: List[IterationMetrics] = []
    missing = []

    for i in iters:
        path = os.path.join(workdir, 'iter_{:02d}'.format(i), 'metrics.json')
        if os.path.isfile(path):
            metrics.append(fileformats.readModel(path, IterationMetrics))
        elif i != iters[-1]:
            # Only the iteration in progress may lack its metrics
            missing.append(path)

    if missing:
        raise DatasetError(workdir, 'Iteration metrics are missing:\n  {:s}'.format('\n  '.join(missing)))

    if not metrics:
        raise DatasetError(workdir, 'Run directory ({:s}) has no completed iteration'.format(workdir))

    if any(m.heldout_psnr is None for m in metrics):
        raise DatasetError(workdir, 'Run ({:s}) was made without held-out views'.format(workdir))

    rows = []
    for k, m in enumerate(metrics):
        prev = metrics[k - 1] if k > 0 else m
        rows.append(IterationRow(iteration=m.iteration, psnr=m.heldout_psnr, ssim=m.heldout_ssim,
                                 delta_psnr=m.heldout_psnr - prev.heldout_psnr,
                                 delta_ssim=m.heldout_ssim - prev.heldout_ssim,
                                 rendered_psnr=m.rendered_psnr, deblurred_psnr=m.deblurred_psnr))

    report = MetricReport(color_space=metrics[0].color_space, iterations=rows)

    if write:
        report.write(workdir)

    return report


def summariseReports(reports: Sequence[MetricReport]) -> Dict[int, float]:
    """
    Mean held-out PSNR per iteration across several runs (e.g. the scenes of a benchmark)
    """
    series: Dict[int, List[float]] = {}
    for r in reports:
        for row in r.iterations:
            series.setdefault(row.iteration, []).append(row.psnr)

    return {i: float(np.mean(v)) for i, v in sorted(series.items())}
