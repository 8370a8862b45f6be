# -*- coding: utf-8 -*-
"""
Procedural scenes and a deterministic reference ray tracer with pinhole and thin-lens cameras.

Shading is single-bounce Lambertian with a directional light: ``emission + albedo * max(0, n . l)``. All
renders are in linear radiance.
"""

import logging
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .core import SCHEMA_VERSION, ConfigError, LinearImage, Settings, rngFor
from .geometry import Camera, Pose, Ray

logger = logging.getLogger(__name__)

EPSILON = 1e-6
""" Minimum hit distance along a ray """

ROWS_PER_CHUNK = 32


def _checkColor(v: List[float]) -> List[float]:
    if len(v) != 3:
        raise ValueError('Colours require three components')
    if not all(np.isfinite(x) and x >= 0 for x in v):
        raise ValueError('Colours must be finite and non-negative')
    return [float(x) for x in v]


def _unit(v: np.ndarray) -> List[float]:
    # Unit vectors are kept bit-exact so scene files load back unchanged
    norm = np.linalg.norm(v)
    return (v if abs(norm - 1.0) <= 1e-12 else v / norm).tolist()


class Primitive(BaseModel):
    """
    Base class for all scene primitives
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    albedo: List[float] = [0.5, 0.5, 0.5]
    emission: List[float] = [0.0, 0.0, 0.0]

    checkColors = field_validator('albedo', 'emission')(_checkColor)


class Sphere(Primitive):
    type: Literal['sphere'] = 'sphere'
    center: List[float]
    radius: float

    @field_validator('radius')
    @classmethod
    def positiveRadius(cls, v):
        if not v > 0:
            raise ValueError('Sphere radius must be positive')
        return v

    def bounds(self) -> np.ndarray:
        c = np.asarray(self.center)
        return np.stack([c - self.radius, c + self.radius])


class Box(Primitive):
    type: Literal['box'] = 'box'
    min: List[float]
    max: List[float]

    @model_validator(mode='after')
    def ordered(self):
        if not all(a < b for a, b in zip(self.min, self.max)):
            raise ValueError('Box min must be smaller than max componentwise')
        return self

    def bounds(self) -> np.ndarray:
        return np.stack([np.asarray(self.min, dtype=np.float64), np.asarray(self.max, dtype=np.float64)])


class Plane(Primitive):
    type: Literal['plane'] = 'plane'
    point: List[float]
    normal: List[float]

    @field_validator('normal')
    @classmethod
    def unitNormal(cls, v):
        n = np.asarray(v, dtype=np.float64)
        if n.shape != (3,) or np.linalg.norm(n) < 1e-12:
            raise ValueError('Plane normal must be a non-zero 3-vector')
        return _unit(n)


PrimitiveType = Annotated[Union[Sphere, Box, Plane], Field(discriminator='type')]


class Scene(BaseModel):
    """
    An immutable collection of primitives, a background radiance and a directional light
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    schema_version: int = SCHEMA_VERSION
    primitives: List[PrimitiveType] = []
    background: List[float] = [0.0, 0.0, 0.0]
    light_direction: List[float] = [0.0, 1.0, 0.0]

    checkBackground = field_validator('background')(_checkColor)

    @field_validator('light_direction')
    @classmethod
    def unitLight(cls, v):
        d = np.asarray(v, dtype=np.float64)
        if d.shape != (3,) or np.linalg.norm(d) < 1e-12:
            raise ValueError('Light direction must be a non-zero 3-vector')
        return _unit(d)

    def bounds(self) -> Optional[np.ndarray]:
        """
        Returns the 2 x 3 axis-aligned box enclosing every bounded primitive (planes are unbounded and ignored)
        """
        boxes = [p.bounds() for p in self.primitives if not isinstance(p, Plane)]

        if len(boxes) == 0:
            return None

        boxes = np.stack(boxes)
        return np.stack([boxes[:, 0].min(axis=0), boxes[:, 1].max(axis=0)])

    def maxRadiance(self) -> float:
        """
        Upper bound of any radiance produced by the shading model
        """
        values = [max(self.background)]
        if self.primitives:
            values.append(max(max(p.emission) for p in self.primitives) + max(max(p.albedo) for p in self.primitives))
        return float(max(values))


class LensConfig(BaseModel):
    """
    Thin-lens parameters. An aperture radius of zero yields a pinhole camera.
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    aperture_radius: float = 0.0
    blade_count: int = 8
    focal_distance: float = 1.0

    @model_validator(mode='after')
    def valid(self):
        if self.aperture_radius < 0:
            raise ValueError('Aperture radius must be non-negative')
        if self.aperture_radius > 0 and self.blade_count < 3:
            raise ValueError('A finite aperture requires at least 3 blades')
        if not self.focal_distance > 0:
            raise ValueError('Focal distance must be positive')
        return self


def loadScene(filename: str) -> Scene:
    """
    Loads a scene description file

    :param filename: Path of the JSON scene file
    """
    with open(filename, 'r') as f:
        content = f.read()

    try:
        return Scene.model_validate_json(content)
    except ValueError as e:
        raise ConfigError(filename, 'Invalid scene file ({:s}): {:s}'.format(filename, str(e)))


def saveScene(scene: Scene, filename: str) -> None:
    with open(filename, 'w') as f:
        f.write(scene.model_dump_json(indent=2))


def _intersectSphere(s: Sphere, o: np.ndarray, d: np.ndarray):

    oc = o - np.asarray(s.center)
    b = np.einsum('ij,ij->i', oc, d)
    c = np.einsum('ij,ij->i', oc, oc) - s.radius ** 2
    disc = b * b - c

    t = np.full(len(o), np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))

    t0 = -b - sq
    t1 = -b + sq
    near = np.where(t0 > EPSILON, t0, t1)
    valid = hit & (near > EPSILON)
    t[valid] = near[valid]

    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    n = (p - np.asarray(s.center)) / s.radius
    return t, n


def _intersectBox(b: Box, o: np.ndarray, d: np.ndarray):

    lo = np.asarray(b.min)
    hi = np.asarray(b.max)

    with np.errstate(divide='ignore', invalid='ignore'):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv

    # Rays parallel to a slab either always or never overlap it
    parallel = d == 0.0
    inside = (o >= lo) & (o <= hi)
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)

    tLow = np.minimum(t1, t2)
    tHigh = np.maximum(t1, t2)
    tEnter = tLow.max(axis=1)
    tExit = tHigh.min(axis=1)

    entering = tEnter > EPSILON
    t = np.where(entering, tEnter, tExit)
    valid = (tExit >= tEnter) & (t > EPSILON)
    t = np.where(valid, t, np.inf)

    rows = np.arange(len(o))
    axisEnter = tLow.argmax(axis=1)
    axisExit = tHigh.argmin(axis=1)
    axis = np.where(entering, axisEnter, axisExit)

    n = np.zeros_like(d)
    sign = np.where(entering, -np.sign(d[rows, axis]), np.sign(d[rows, axis]))
    n[rows, axis] = sign
    return t, n


def _intersectPlane(p: Plane, o: np.ndarray, d: np.ndarray):

    normal = np.asarray(p.normal)
    denom = d @ normal

    with np.errstate(divide='ignore', invalid='ignore'):
        t = ((np.asarray(p.point) - o) @ normal) / denom

    valid = (np.abs(denom) > 1e-12) & (t > EPSILON)
    t = np.where(valid, t, np.inf)

    # Two-sided: shade the face seen by the ray
    n = np.where((denom < 0)[:, None], normal, -normal)
    return t, n


_INTERSECTORS = {'sphere': _intersectSphere, 'box': _intersectBox, 'plane': _intersectPlane}


def traceRays(scene: Scene, origins: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Traces a batch of rays against the scene

    :param scene: Scene
    :param origins: N x 3 ray origins
    :param dirs: N x 3 unit ray directions
    :return: radiance (N x 3), depth (N,) with +inf for misses
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)

    depth = np.full(len(o), np.inf)
    radiance = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (len(o), 3)).copy()
    light = np.asarray(scene.light_direction)

    for prim in scene.primitives:
        t, n = _INTERSECTORS[prim.type](prim, o, d)
        closer = t < depth

        if not np.any(closer):
            continue

        depth[closer] = t[closer]
        shade = np.maximum(0.0, n[closer] @ light)
        radiance[closer] = np.asarray(prim.emission) + np.asarray(prim.albedo) * shade[:, None]

    return radiance, depth


def traceRay(scene: Scene, ray: Ray) -> Tuple[np.ndarray, float]:
    """
    Traces a single ray and returns the radiance of the nearest hit and its distance

    :param scene: Scene
    :param ray: Ray
    :return: (linear RGB, depth) - misses return (background, +inf)
    """
    radiance, depth = traceRays(scene, ray.origin[None], ray.direction[None])
    return radiance[0], float(depth[0])


def _renderRows(camera: Camera, rowFn) -> np.ndarray:
    """
    Renders blocks of image rows with rowFn(r0, r1, dirsCam) -> (r1 - r0) x W x ... and stacks them. Blocks are
    independent and run on the configured worker threads.
    """
    dirsCam = camera.pixelDirections()
    blocks = [(r0, min(r0 + ROWS_PER_CHUNK, camera.height)) for r0 in range(0, camera.height, ROWS_PER_CHUNK)]
    return np.concatenate(Settings.map(lambda b: rowFn(b[0], b[1], dirsCam[b[0]:b[1]]), blocks), axis=0)


def _worldRays(pose: Pose, dirsCam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:

    d = dirsCam.reshape(-1, 3) @ pose.rotationMatrix().T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.broadcast_to(pose.translation, d.shape), d


def renderPinhole(scene: Scene, camera: Camera, pose: Pose) -> LinearImage:
    """
    Renders the scene with one ray through each pixel centre

    :param scene: Scene
    :param camera: Camera intrinsics
    :param pose: Camera-to-world pose
    :return: H x W x 3 linear image
    """
    def rows(r0, r1, dirsCam):
        radiance, _ = traceRays(scene, *_worldRays(pose, dirsCam))
        return radiance.reshape(r1 - r0, camera.width, 3)

    return _renderRows(camera, rows)


def renderDepth(scene: Scene, camera: Camera, pose: Pose) -> np.ndarray:
    """
    Renders the distance along each pixel ray to the nearest surface (+inf for misses)
    """
    def rows(r0, r1, dirsCam):
        _, t = traceRays(scene, *_worldRays(pose, dirsCam))
        return t.reshape(r1 - r0, camera.width)

    return _renderRows(camera, rows)


def polygonVertices(radius: float, bladeCount: int) -> np.ndarray:
    """
    Returns the vertices of the regular aperture polygon with one vertex pointing up
    """
    angles = np.pi / 2.0 + 2.0 * np.pi * np.arange(bladeCount) / bladeCount
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sampleAperture(rng: np.random.Generator, n: int, radius: float, bladeCount: int) -> np.ndarray:
    """
    Samples points uniformly inside the regular blade polygon by picking one of its equal-area triangles and a
    uniform point inside it

    :param rng: Random generator
    :param n: Number of samples
    :param radius: Circumradius of the polygon
    :param bladeCount: Number of polygon sides
    :return: n x 2 lens-plane points
    """
    verts = polygonVertices(radius, bladeCount)
    tri = rng.integers(0, bladeCount, size=n)
    r1 = rng.random(n)
    r2 = rng.random(n)

    flip = r1 + r2 > 1.0
    r1 = np.where(flip, 1.0 - r1, r1)
    r2 = np.where(flip, 1.0 - r2, r2)

    return r1[:, None] * verts[tri] + r2[:, None] * verts[(tri + 1) % bladeCount]


def renderThinLens(scene: Scene, camera: Camera, pose: Pose, lens: LensConfig, samplesPerPixel: int,
                   rngSeed) -> LinearImage:
    """
    Renders depth of field with distributed ray tracing. Each sample ray leaves a point sampled uniformly on
    the polygonal aperture and passes through the in-focus point of its pixel at the focal distance. Random
    streams are keyed by (seed, row) so the image does not depend on how rows are scheduled.

    :param scene: Scene
    :param camera: Camera intrinsics
    :param pose: Camera-to-world pose
    :param lens: Thin lens configuration
    :param samplesPerPixel: Number of aperture samples per pixel (>= 1)
    :param rngSeed: Integer seed or tuple of integer keys of the render
    :return: H x W x 3 linear image
    """
    if samplesPerPixel < 1:
        raise ValueError('At least one sample per pixel is required')

    if lens.aperture_radius == 0.0:
        return renderPinhole(scene, camera, pose)

    rot = pose.rotationMatrix()
    dirsCam = camera.pixelDirections()
    W = camera.width

    keys = rngSeed if isinstance(rngSeed, tuple) else (rngSeed,)

    def renderRow(row):
        rng = rngFor(*keys, row)
        lensPts = sampleAperture(rng, W * samplesPerPixel, lens.aperture_radius, lens.blade_count)

        # dirsCam has z = -1, so scaling by the focal distance lands on the focal plane
        focus = np.repeat(dirsCam[row] * lens.focal_distance, samplesPerPixel, axis=0)
        originsCam = np.zeros((W * samplesPerPixel, 3))
        originsCam[:, :2] = lensPts

        d = focus - originsCam
        d /= np.linalg.norm(d, axis=1, keepdims=True)

        radiance, _ = traceRays(scene, originsCam @ rot.T + pose.translation, d @ rot.T)
        return radiance.reshape(W, samplesPerPixel, 3).mean(axis=1)

    return np.stack(Settings.map(renderRow, range(camera.height)), axis=0)


def proceduralScene(seed: int, nObjects: int = 6, emissiveObjects: int = 1) -> Scene:
    """
    Generates a random bounded scene: a floor slab with coloured tiles, a back wall, and random spheres and boxes.
    Emissive objects radiate more than unit radiance so that saturated highlights appear after blurring.

    :param seed: Random seed
    :param nObjects: Number of random spheres and boxes
    :param emissiveObjects: Number of small emissive spheres
    """
    rng = rngFor(seed)
    prims = []

    def albedo():
        return rng.uniform(0.1, 0.9, size=3).round(4).tolist()

    prims.append(Box(min=[-1.0, -1.0, -1.0], max=[1.0, -0.9, 1.0], albedo=[0.6, 0.6, 0.6]))
    prims.append(Box(min=[-1.0, -0.9, -1.0], max=[1.0, 1.0, -0.9], albedo=[0.45, 0.45, 0.5]))

    # Tiles give the floor and wall texture for deblurring and fitting
    for i in range(4):
        for j in range(4):
            x0 = -1.0 + 0.5 * i
            z0 = -1.0 + 0.5 * j
            prims.append(Box(min=[x0 + 0.05, -0.9, z0 + 0.05], max=[x0 + 0.45, -0.88, z0 + 0.45], albedo=albedo()))

            y0 = -0.9 + 0.475 * j
            prims.append(Box(min=[x0 + 0.05, y0 + 0.05, -0.9], max=[x0 + 0.45, y0 + 0.425, -0.88], albedo=albedo()))

    for k in range(nObjects):
        cx, cz = rng.uniform(-0.6, 0.6, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.12, 0.3)
            prims.append(Sphere(center=[cx, -0.88 + r, cz], radius=r, albedo=albedo()))
        else:
            h = rng.uniform(0.2, 0.6)
            w = rng.uniform(0.1, 0.25)
            prims.append(Box(min=[cx - w, -0.88, cz - w], max=[cx + w, -0.88 + h, cz + w], albedo=albedo()))

    for k in range(emissiveObjects):
        c = [rng.uniform(-0.6, 0.6), rng.uniform(-0.2, 0.5), rng.uniform(-0.6, 0.2)]
        e = rng.uniform(1.5, 3.0)
        prims.append(Sphere(center=c, radius=0.06, albedo=[0.0, 0.0, 0.0], emission=[e, e, 0.8 * e]))

    light = np.array([0.4, 0.8, 0.5]) + rng.uniform(-0.1, 0.1, size=3)

    return Scene(primitives=prims, background=[0.05, 0.05, 0.08], light_direction=light.tolist())
