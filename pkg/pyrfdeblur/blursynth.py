# -*- coding: utf-8 -*-
"""
Synthesis of blurred multi-view datasets: camera-shake blur by averaging renders along a trajectory, defocus
blur by thin-lens rendering, and a camera degradation model (saturation, RAW-space shot and read noise,
display encoding and 8-bit quantisation).
"""

import os
import logging
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .core import SCHEMA_VERSION, BlurType, DatasetError, LinearImage, Settings, SrgbImage, rngFor
from .geometry import (Camera, Pose, Trajectory, bezierPose, lookAt, randomTrajectory, sameDirectionTrajectory,
                       sampleTrajectory)
from .scene import LensConfig, Scene, loadScene, renderDepth, renderPinhole, renderThinLens
from . import fileformats

logger = logging.getLogger(__name__)

# Independent random streams of a dataset view
STREAM_TRAJECTORY = 0
STREAM_LENS = 1
STREAM_NOISE = 2


def srgbEncode(x):
    """
    Applies the sRGB transfer function to linear values in [0, 1]

    :param x: Linear value or array
    :return: Display-encoded value in [0, 1]
    """
    x = np.asarray(x, dtype=np.float64)
    lo = 12.92 * x
    hi = 1.055 * np.power(np.maximum(x, 0.0031308), 1.0 / 2.4) - 0.055
    return np.where(x <= 0.0031308, lo, hi)


def srgbDecode(y):
    """
    Inverse of :func:`srgbEncode`
    """
    y = np.asarray(y, dtype=np.float64)
    lo = y / 12.92
    hi = np.power((np.maximum(y, 0.04045) + 0.055) / 1.055, 2.4)
    return np.where(y <= 0.04045, lo, hi)


def quantize(display) -> np.ndarray:
    """
    Quantises display values in [0, 1] to 8 bits rounding halves up
    """
    v = np.floor(np.clip(np.asarray(display, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    return v.astype(np.uint8)


def decodeSrgbImage(img: SrgbImage) -> LinearImage:
    """
    Converts an 8-bit display-encoded image to linear radiance
    """
    return srgbDecode(np.asarray(img, dtype=np.float64) / 255.0)


class DegradationParams(BaseModel):
    """
    Camera model used to degrade rendered linear images. Noise parameters are expressed in linear RAW units.
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    shot_alpha: float = 4e-4
    read_sigma: float = 1e-3
    ccm: List[List[float]] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    wb_gains: List[float] = [1.0, 1.0, 1.0]
    saturation_clip: float = 1.0
    rng_seed: int = 0

    @field_validator('ccm')
    @classmethod
    def invertibleCcm(cls, v):
        m = np.asarray(v, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError('Colour correction matrix must be 3x3')
        if not np.isfinite(np.linalg.cond(m)) or np.linalg.cond(m) >= 1e6:
            raise ValueError('Colour correction matrix is not invertible (condition number >= 1e6)')
        return v

    @model_validator(mode='after')
    def valid(self):
        if self.shot_alpha < 0 or self.read_sigma < 0:
            raise ValueError('Noise parameters must be non-negative')
        if len(self.wb_gains) != 3 or min(self.wb_gains) <= 0:
            raise ValueError('White balance gains must be three positive values')
        if not self.saturation_clip > 0:
            raise ValueError('Saturation clip must be positive')
        return self

    @property
    def noiseFree(self) -> bool:
        return self.shot_alpha == 0.0 and self.read_sigma == 0.0


def toRaw(img: LinearImage, p: DegradationParams) -> np.ndarray:
    """
    Maps linear sRGB to camera RAW through the inverse colour correction and inverse white balance
    """
    ccmInv = np.linalg.inv(np.asarray(p.ccm))
    return (img @ ccmInv.T) / np.asarray(p.wb_gains)


def fromRaw(raw: np.ndarray, p: DegradationParams) -> LinearImage:
    return (raw * np.asarray(p.wb_gains)) @ np.asarray(p.ccm).T


def addNoise(raw: np.ndarray, p: DegradationParams, rng: np.random.Generator) -> np.ndarray:
    """
    Adds heteroscedastic Gaussian noise with variance shot_alpha * x + read_sigma^2, the Gaussian approximation
    of Poisson-Gaussian sensor noise

    :param raw: RAW-space values
    :param p: Degradation parameters
    :param rng: Random generator
    """
    variance = p.shot_alpha * np.maximum(raw, 0.0) + p.read_sigma ** 2
    return raw + rng.standard_normal(raw.shape) * np.sqrt(variance)


def applyDegradation(img: LinearImage, p: DegradationParams, streamKey: Tuple = ()) -> SrgbImage:
    """
    Degrades a linear image into an 8-bit display-encoded image:
    saturation clip, inverse camera colour pipeline, sensor noise, forward colour pipeline, display encoding
    and quantisation. The noise stream is keyed by the parameter seed and the optional stream key.

    :param img: H x W x 3 linear image
    :param p: Degradation parameters
    :param streamKey: Additional integer keys of the noise stream (e.g. the view id)
    :return: H x W x 3 uint8 image
    """
    x = np.minimum(np.asarray(img, dtype=np.float64), p.saturation_clip)

    if not p.noiseFree:
        raw = addNoise(toRaw(x, p), p, rngFor(p.rng_seed, *streamKey))
        x = fromRaw(raw, p)

    return quantize(srgbEncode(np.clip(x, 0.0, 1.0)))


def centralFrameIndex(nFrames: int) -> int:
    """
    0-based index of the temporally central frame (the 26th of 51)
    """
    return (nFrames + 1) // 2 - 1


def averageFrames(frames: Sequence[LinearImage], counts: Optional[Sequence[int]] = None) -> LinearImage:
    """
    Averages frames with integer multiplicities. A single distinct frame is returned bit-exactly.

    :param frames: Images of equal shape
    :param counts: Multiplicity of each frame (defaults to one each)
    """
    if len(frames) == 0:
        raise ValueError('At least one frame is required')

    counts = np.ones(len(frames)) if counts is None else np.asarray(counts, dtype=np.float64)
    weights = counts / counts.sum()

    acc = np.zeros_like(frames[0], dtype=np.float64)
    for f, w in zip(frames, weights):
        acc += f * w

    return acc


def synthMotionBlur(scene: Scene, camera: Camera, traj: Trajectory, nFrames: int = 51,
                    renderer: Callable = renderPinhole) -> Tuple[LinearImage, LinearImage]:
    """
    Synthesises camera-shake blur by averaging pinhole renders at poses sampled uniformly along the trajectory.
    Each distinct pose is rendered once and weighted by its multiplicity.

    :param scene: Scene
    :param camera: Camera intrinsics
    :param traj: Intra-exposure trajectory
    :param nFrames: Number of sampled poses (51 by default)
    :param renderer: Callable(scene, camera, pose) returning a linear image
    :return: (blurred, sharp ground truth at the central frame)
    """
    if nFrames < 1:
        raise ValueError('At least one frame is required')

    poses = sampleTrajectory(traj, nFrames) if nFrames >= 2 else [bezierPose(traj, 0.0)]

    distinct = {}
    order = []
    for p in poses:
        if p not in distinct:
            distinct[p] = 0
            order.append(p)
        distinct[p] += 1

    renders = {p: renderer(scene, camera, p) for p in order}
    blurred = averageFrames([renders[p] for p in order], [distinct[p] for p in order])

    return blurred, renders[poses[centralFrameIndex(nFrames)]].copy()


def synthDefocus(scene: Scene, camera: Camera, pose: Pose, lens: LensConfig, samplesPerPixel: int,
                 seed) -> Tuple[LinearImage, LinearImage]:
    """
    Synthesises defocus blur with the thin-lens renderer. The ground truth is the pinhole render.
    """
    keys = seed if isinstance(seed, tuple) else (seed,)
    sharp = renderPinhole(scene, camera, pose)

    if lens.aperture_radius == 0.0:
        return sharp.copy(), sharp

    return renderThinLens(scene, camera, pose, lens, samplesPerPixel, keys), sharp


class SynthConfig(BaseModel):
    """
    Dataset generation settings
    """
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    blur_type: BlurType = BlurType.MOTION
    n_train: int = 29
    n_test: int = 5
    width: int = 96
    height: int = 96
    fov_degrees: float = 50.0

    orbit_radius: float = 3.0
    arc_degrees: float = 60.0
    elevation: float = 0.6

    n_frames: int = 51
    n_controls: int = 4
    translation_mag: float = 0.08
    rotation_mag: float = 0.04
    magnitude: float = 1.0
    same_blur_direction: bool = False
    blur_direction: List[float] = [1.0, 0.0, 0.0]

    aperture_radius: float = 0.08
    focal_interval: Tuple[float, float] = (0.5, 1.5)
    blade_counts: List[int] = [7, 8, 9]
    samples_per_pixel: int = 32

    noise: bool = True
    degradation: DegradationParams = DegradationParams()

    @model_validator(mode='after')
    def valid(self):
        if self.n_train < 2 or self.n_test < 0:
            raise ValueError('At least two training views are required')
        if self.width < 1 or self.height < 1 or not 0 < self.fov_degrees < 180:
            raise ValueError('Invalid image size or field of view')
        if self.n_frames < 1 or not 2 <= self.n_controls <= 4:
            raise ValueError('Invalid trajectory sampling settings')
        if min(self.translation_mag, self.rotation_mag, self.magnitude, self.aperture_radius) < 0:
            raise ValueError('Blur magnitudes must be non-negative')
        if not 0 < self.focal_interval[0] <= self.focal_interval[1]:
            raise ValueError('Invalid focal distance interval')
        if len(self.blade_counts) == 0 or min(self.blade_counts) < 3:
            raise ValueError('Blade counts must be at least 3')
        return self

    def effectiveDegradation(self) -> DegradationParams:
        p = self.degradation.model_copy(update={'rng_seed': self.seed})
        if not self.noise:
            p = p.model_copy(update={'shot_alpha': 0.0, 'read_sigma': 0.0})
        return p


class Intrinsics(BaseModel):
    model_config = ConfigDict(extra='forbid')

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def fromCamera(cls, camera: Camera) -> 'Intrinsics':
        return cls(**camera.toDict())

    def toCamera(self) -> Camera:
        return Camera.fromDict(self.model_dump())


class ViewRecord(BaseModel):
    """
    One dataset view. Paths are relative to the dataset root.
    """
    model_config = ConfigDict(extra='forbid')

    view_id: int
    split: Literal['train', 'test']
    matrix: List[List[float]]
    sharp_png: str
    sharp_pfm: str
    blurred: Optional[str] = None
    trajectory: Optional[Dict[str, List[List[List[float]]]]] = None
    lens: Optional[LensConfig] = None
    degradation: Optional[DegradationParams] = None

    def pose(self) -> Pose:
        return Pose.fromMatrix(self.matrix)


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    scene_id: str
    blur_type: BlurType
    seed: int
    camera: Intrinsics
    aabb: List[List[float]]
    background: List[float]
    train: List[ViewRecord]
    test: List[ViewRecord]

    @model_validator(mode='after')
    def gtForEveryView(self):
        for v in self.train:
            if v.blurred is None:
                raise ValueError('Training view {:d} has no blurred image'.format(v.view_id))
        return self


class PoseRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    view_id: int
    split: str = 'train'
    matrix: List[List[float]]


class PoseFile(BaseModel):
    """
    Camera poses with shared intrinsics, as consumed by the render command
    """
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    camera: Intrinsics
    background: List[float] = [0.0, 0.0, 0.0]
    poses: List[PoseRecord]


def planViews(scene: Scene, cfg: SynthConfig) -> Tuple[List[Pose], List[Pose]]:
    """
    Places the training and novel views on a forward-facing arc around the scene centre. Novel views are
    interleaved between training views.

    :return: (training poses, novel poses)
    """
    bounds = scene.bounds()
    centre = np.zeros(3) if bounds is None else bounds.mean(axis=0)

    total = cfg.n_train + cfg.n_test
    half = np.radians(cfg.arc_degrees) / 2.0
    angles = np.linspace(-half, half, total)

    testIdx = set(int(round((k + 0.5) * total / cfg.n_test - 0.5)) for k in range(cfg.n_test)) if cfg.n_test else set()

    train, test = [], []
    for i, a in enumerate(angles):
        # Alternating heights avoid a degenerate single-plane arc
        h = cfg.elevation * (1.0 + 0.25 * (-1) ** i)
        eye = centre + np.array([cfg.orbit_radius * np.sin(a), h, cfg.orbit_radius * np.cos(a)])
        (test if i in testIdx else train).append(lookAt(eye, centre))

    return train, test


def medianDepth(scene: Scene, camera: Camera, pose: Pose) -> float:
    d = renderDepth(scene, camera, pose)
    d = d[np.isfinite(d)]
    if d.size == 0:
        raise DatasetError('depth', 'The scene is not visible from the view')
    return float(np.median(d))


def paddedBounds(scene: Scene, pad: float = 0.05) -> np.ndarray:
    """
    Returns the scene bounds padded by a fraction of the extent on each side
    """
    bounds = scene.bounds()
    if bounds is None:
        raise DatasetError('bounds', 'The scene has no bounded primitives')

    ext = bounds[1] - bounds[0]
    return np.stack([bounds[0] - pad * ext, bounds[1] + pad * ext])


def _trainView(viewId: int, pose: Pose, scene: Scene, camera: Camera, cfg: SynthConfig,
               outDir: str) -> ViewRecord:

    keys = (cfg.seed, viewId)
    record = dict(view_id=viewId, split='train', matrix=pose.matrix().tolist())

    if cfg.blur_type == BlurType.MOTION:
        if cfg.same_blur_direction:
            length = cfg.translation_mag * cfg.magnitude * rngFor(*keys, STREAM_TRAJECTORY).uniform(0.5, 1.0)
            traj = sameDirectionTrajectory(keys + (STREAM_TRAJECTORY,), pose, cfg.blur_direction, length,
                                           cfg.rotation_mag * cfg.magnitude, cfg.n_controls)
        else:
            traj = randomTrajectory(keys + (STREAM_TRAJECTORY,), pose, cfg.translation_mag * cfg.magnitude,
                                    cfg.rotation_mag * cfg.magnitude, cfg.n_controls)

        blurred, sharp = synthMotionBlur(scene, camera, traj, cfg.n_frames)
        record['trajectory'] = traj.toDict()
    else:
        rng = rngFor(*keys, STREAM_LENS)
        lo, hi = cfg.focal_interval
        focal = rng.uniform(lo, hi) * medianDepth(scene, camera, pose)
        blades = int(rng.choice(cfg.blade_counts))
        lens = LensConfig(aperture_radius=cfg.aperture_radius * cfg.magnitude, blade_count=blades,
                          focal_distance=focal)

        blurred, sharp = synthDefocus(scene, camera, pose, lens, cfg.samples_per_pixel, keys + (STREAM_LENS,))
        record['lens'] = lens

    degradation = cfg.effectiveDegradation()
    blurredImg = applyDegradation(blurred, degradation, (viewId, STREAM_NOISE))

    stem = os.path.join('train', 'view_{:04d}'.format(viewId))
    fileformats.writePng(os.path.join(outDir, stem + '.blur.png'), blurredImg)
    fileformats.writePfm(os.path.join(outDir, stem + '.sharp.pfm'), sharp)
    fileformats.writePng(os.path.join(outDir, stem + '.sharp.png'), quantize(srgbEncode(np.clip(sharp, 0.0, 1.0))))

    record.update(blurred=stem + '.blur.png', sharp_pfm=stem + '.sharp.pfm', sharp_png=stem + '.sharp.png',
                  degradation=degradation)
    return ViewRecord(**record)


def _testView(viewId: int, pose: Pose, scene: Scene, camera: Camera, outDir: str) -> ViewRecord:

    sharp = renderPinhole(scene, camera, pose)
    stem = os.path.join('test', 'view_{:04d}'.format(viewId))
    fileformats.writePfm(os.path.join(outDir, stem + '.sharp.pfm'), sharp)
    fileformats.writePng(os.path.join(outDir, stem + '.sharp.png'), quantize(srgbEncode(np.clip(sharp, 0.0, 1.0))))

    return ViewRecord(view_id=viewId, split='test', matrix=pose.matrix().tolist(),
                      sharp_pfm=stem + '.sharp.pfm', sharp_png=stem + '.sharp.png')


def generateDataset(scene: Union[Scene, str], outDir: str, cfg: Optional[SynthConfig] = None,
                    blurType: Optional[BlurType] = None) -> DatasetManifest:
    """
    Generates a blurred multi-view dataset. Training views receive a blurred, degraded image and a sharp
    ground truth; novel views receive a sharp image only. The output is fully determined by the seed.

    :param scene: Scene or path of a scene file
    :param outDir: Output directory
    :param cfg: Synthesis settings
    :param blurType: Overrides the blur type of the settings
    :return: The dataset manifest (also written to ``manifest.json``)
    """
    cfg = SynthConfig() if cfg is None else cfg
    if blurType is not None:
        cfg = cfg.model_copy(update={'blur_type': blurType})

    sceneId = 'procedural'
    if isinstance(scene, str):
        sceneId = os.path.splitext(os.path.basename(scene))[0]
        scene = loadScene(scene)

    try:
        os.makedirs(os.path.join(outDir, 'train'), exist_ok=True)
        os.makedirs(os.path.join(outDir, 'test'), exist_ok=True)
    except OSError as e:
        raise DatasetError(outDir, 'Output directory ({:s}) is not writable: {:s}'.format(outDir, str(e)))

    camera = Camera.fromFov(cfg.width, cfg.height, cfg.fov_degrees)
    trainPoses, testPoses = planViews(scene, cfg)

    logger.info('{:=^60}'.format(' SYNTHESISING DATASET '))
    logger.info('{:d} training views, {:d} novel views, {:s} blur, seed {:d}'.format(
        len(trainPoses), len(testPoses), cfg.blur_type.value, cfg.seed))

    trainRecords = Settings.map(lambda it: _trainView(it[0], it[1], scene, camera, cfg, outDir),
                                enumerate(trainPoses))
    offset = len(trainPoses)
    testRecords = Settings.map(lambda it: _testView(offset + it[0], it[1], scene, camera, outDir),
                               enumerate(testPoses))

    manifest = DatasetManifest(scene_id=sceneId, blur_type=cfg.blur_type, seed=cfg.seed,
                               camera=Intrinsics.fromCamera(camera), aabb=paddedBounds(scene).tolist(),
                               background=list(scene.background), train=trainRecords, test=testRecords)

    poses = PoseFile(camera=manifest.camera, background=manifest.background,
                     poses=[PoseRecord(view_id=v.view_id, split=v.split, matrix=v.matrix)
                            for v in trainRecords + testRecords])

    fileformats.writeModel(os.path.join(outDir, 'manifest.json'), manifest)
    fileformats.writeModel(os.path.join(outDir, 'poses.json'), poses)
    fileformats.writeModel(os.path.join(outDir, 'config.json'), cfg)

    return manifest


def loadManifest(root: str) -> DatasetManifest:
    """
    Reads and validates the manifest of a dataset, checking that every referenced image exists
    """
    manifest = fileformats.readModel(os.path.join(root, 'manifest.json'), DatasetManifest)

    missing = []
    for v in manifest.train + manifest.test:
        for path in (v.blurred, v.sharp_pfm):
            if path is not None and not os.path.isfile(os.path.join(root, path)):
                missing.append(path)

    if missing:
        raise DatasetError(root, 'Dataset ({:s}) is missing files:\n  {:s}'.format(root, '\n  '.join(missing)))

    return manifest
