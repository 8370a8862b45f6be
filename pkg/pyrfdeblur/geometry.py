# -*- coding: utf-8 -*-
"""
Rigid-body poses, pinhole cameras, rays and Bezier camera trajectories.

Poses are camera-to-world, right-handed, with the camera looking down its -z axis. Quaternions follow the
scipy ``[x, y, z, w]`` ordering.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .core import GeometryError, rngFor

logger = logging.getLogger(__name__)


class Pose:
    """
    A rigid transform in SE(3) stored as a unit quaternion and a translation. Instances are immutable values.
    """

    def __init__(self, rotation=None, translation=None):

        q = np.array([0.0, 0.0, 0.0, 1.0]) if rotation is None else np.asarray(rotation, dtype=np.float64).copy()
        t = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64).copy()

        if q.shape != (4,) or t.shape != (3,):
            raise ValueError('Pose requires a 4-vector quaternion and a 3-vector translation')

        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError('Pose parameters must be finite')

        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise ValueError('Quaternion has zero norm')

        # Re-normalising an already unit quaternion would perturb its bits
        if abs(norm - 1.0) > 1e-12:
            q = q / norm

        q.flags.writeable = False
        t.flags.writeable = False

        self._q = q
        self._t = t

    @classmethod
    def identity(cls) -> 'Pose':
        return cls()

    @classmethod
    def fromRotation(cls, rotation: Rotation, translation=None) -> 'Pose':
        return cls(rotation.as_quat(), translation)

    @classmethod
    def fromMatrix(cls, matrix) -> 'Pose':
        """
        Creates a pose from a 4x4 camera-to-world matrix

        :param matrix: 4x4 homogeneous matrix
        """
        m = np.asarray(matrix, dtype=np.float64)

        if m.shape != (4, 4):
            raise ValueError('Pose matrix must be 4x4')

        return cls(Rotation.from_matrix(m[:3, :3]).as_quat(), m[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        """ Unit quaternion [x, y, z, w] """
        return self._q

    @property
    def translation(self) -> np.ndarray:
        """ Translation (scene units) """
        return self._t

    def asRotation(self) -> Rotation:
        return Rotation.from_quat(self._q)

    def rotationMatrix(self) -> np.ndarray:
        return self.asRotation().as_matrix()

    def matrix(self) -> np.ndarray:
        """
        Returns the 4x4 homogeneous camera-to-world matrix
        """
        m = np.eye(4)
        m[:3, :3] = self.rotationMatrix()
        m[:3, 3] = self._t
        return m

    def transformPoints(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotationMatrix().T + self._t

    def transformDirections(self, dirs: np.ndarray) -> np.ndarray:
        return dirs @ self.rotationMatrix().T

    def isClose(self, other: 'Pose', tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=tol))

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented

        return np.array_equal(self._q, other._q) and np.array_equal(self._t, other._t)

    def __hash__(self):
        return hash((self._q.tobytes(), self._t.tobytes()))

    def __repr__(self):
        return 'Pose(rotation={:s}, translation={:s})'.format(np.array2string(self._q, precision=6),
                                                             np.array2string(self._t, precision=6))


class Camera:
    """
    Pinhole intrinsics in pixel units
    """

    def __init__(self, fx: float, fy: float, cx: float, cy: float, width: int, height: int):

        if fx <= 0 or fy <= 0:
            raise ValueError('Focal lengths must be positive')

        if width < 1 or height < 1:
            raise ValueError('Camera resolution must be positive')

        if not (0 <= cx < width and 0 <= cy < height):
            raise ValueError('Principal point ({:.2f}, {:.2f}) lies outside the image'.format(cx, cy))

        self._fx = float(fx)
        self._fy = float(fy)
        self._cx = float(cx)
        self._cy = float(cy)
        self._width = int(width)
        self._height = int(height)

    @classmethod
    def fromFov(cls, width: int, height: int, fovDegrees: float) -> 'Camera':
        """
        Creates a centred camera from a horizontal field of view

        :param width: Image width (pixels)
        :param height: Image height (pixels)
        :param fovDegrees: Horizontal field of view in degrees
        """
        f = 0.5 * width / np.tan(np.deg2rad(fovDegrees) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    @property
    def fx(self) -> float:
        return self._fx

    @property
    def fy(self) -> float:
        return self._fy

    @property
    def cx(self) -> float:
        return self._cx

    @property
    def cy(self) -> float:
        return self._cy

    @property
    def width(self) -> int:
        return self._width

    @property
    def height(self) -> int:
        return self._height

    def toDict(self) -> dict:
        return {'fx': self._fx, 'fy': self._fy, 'cx': self._cx, 'cy': self._cy,
                'width': self._width, 'height': self._height}

    @classmethod
    def fromDict(cls, d: dict) -> 'Camera':
        return cls(d['fx'], d['fy'], d['cx'], d['cy'], d['width'], d['height'])

    def pixelDirections(self) -> np.ndarray:
        """
        Returns H x W x 3 un-normalised camera-frame directions through the pixel centres (z = -1)
        """
        u = np.arange(self._width, dtype=np.float64) + 0.5
        v = np.arange(self._height, dtype=np.float64) + 0.5
        uu, vv = np.meshgrid(u, v)

        dirs = np.empty((self._height, self._width, 3))
        dirs[..., 0] = (uu - self._cx) / self._fx
        dirs[..., 1] = -(vv - self._cy) / self._fy
        dirs[..., 2] = -1.0
        return dirs

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return self.toDict() == other.toDict()


class Ray:
    """
    A ray with a unit direction
    """

    def __init__(self, origin, direction):

        o = np.asarray(origin, dtype=np.float64).copy()
        d = np.asarray(direction, dtype=np.float64).copy()

        norm = np.linalg.norm(d)
        if norm < 1e-15:
            raise ValueError('Ray direction must be non-zero')

        if abs(norm - 1.0) > 1e-15:
            d = d / norm

        o.flags.writeable = False
        d.flags.writeable = False

        self._origin = o
        self._direction = d

    @property
    def origin(self) -> np.ndarray:
        return self._origin

    @property
    def direction(self) -> np.ndarray:
        return self._direction

    def at(self, t: float) -> np.ndarray:
        return self._origin + t * self._direction


class Trajectory:
    """
    Bezier control poses describing intra-exposure camera motion. The exposure is normalised to t in [0, 1].
    """

    def __init__(self, controlPoses: Sequence[Pose]):

        controlPoses = list(controlPoses)

        if not 2 <= len(controlPoses) <= 4:
            raise GeometryError(len(controlPoses),
                                'A trajectory requires between 2 and 4 control poses ({:d} given)'.format(len(controlPoses)))

        self._controlPoses = tuple(controlPoses)

    @classmethod
    def constant(cls, pose: Pose, nControls: int = 4) -> 'Trajectory':
        return cls([pose] * nControls)

    @property
    def controlPoses(self) -> Tuple[Pose, ...]:
        return self._controlPoses

    @property
    def degree(self) -> int:
        return len(self._controlPoses) - 1

    def toDict(self) -> dict:
        return {'control_poses': [p.matrix().tolist() for p in self._controlPoses]}

    @classmethod
    def fromDict(cls, d: dict) -> 'Trajectory':
        return cls([Pose.fromMatrix(m) for m in d['control_poses']])


def identity() -> Pose:
    return Pose()


def compose(a: Pose, b: Pose) -> Pose:
    """
    Composes two poses; the result applies b then a

    :param a: Outer pose
    :param b: Inner pose
    :return: a o b
    """
    rotation = a.asRotation() * b.asRotation()
    translation = a.rotationMatrix() @ b.translation + a.translation
    return Pose(rotation.as_quat(), translation)


def invert(p: Pose) -> Pose:
    inv = p.asRotation().inv()
    return Pose(inv.as_quat(), -(inv.as_matrix() @ p.translation))


def lookAt(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """
    Builds a camera-to-world pose positioned at eye whose -z axis points at target

    :param eye: Camera centre
    :param target: Point the camera looks at
    :param up: Approximate world up vector
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye

    if np.linalg.norm(forward) < 1e-12:
        raise GeometryError(eye, 'Camera eye and target coincide')

    z = -forward / np.linalg.norm(forward)
    x = np.cross(np.asarray(up, dtype=np.float64), z)

    if np.linalg.norm(x) < 1e-12:
        raise GeometryError(up, 'Up vector is parallel to the viewing direction')

    x /= np.linalg.norm(x)
    y = np.cross(z, x)

    return Pose.fromRotation(Rotation.from_matrix(np.stack([x, y, z], axis=1)), eye)


def _lerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    # Exact when a == b
    return a + t * (b - a)


def _slerp(q0: np.ndarray, q1: np.ndarray, t: float) -> np.ndarray:

    if np.array_equal(q0, q1):
        return q0

    slerp = Slerp([0.0, 1.0], Rotation.from_quat(np.stack([q0, q1])))
    return slerp([t]).as_quat()[0]


def bezierPose(traj: Trajectory, t: float) -> Pose:
    """
    Evaluates the Bezier trajectory at exposure time t. Translations follow de Casteljau on 3-vectors and
    rotations follow de Casteljau with spherical linear interpolation between quaternions.

    :param traj: Trajectory
    :param t: Normalised exposure time in [0, 1]
    :return: Pose at time t
    """
    if not 0.0 <= t <= 1.0:
        raise GeometryError(t, 'Trajectory time ({:f}) must lie in [0, 1]'.format(t))

    translations = [p.translation for p in traj.controlPoses]
    quats = [p.rotation for p in traj.controlPoses]

    while len(translations) > 1:
        translations = [_lerp(translations[i], translations[i + 1], t) for i in range(len(translations) - 1)]
        quats = [_slerp(quats[i], quats[i + 1], t) for i in range(len(quats) - 1)]

    return Pose(quats[0], translations[0])


def sampleTrajectory(traj: Trajectory, n: int) -> List[Pose]:
    """
    Samples n poses at t = i / (n - 1)

    :param traj: Trajectory
    :param n: Number of samples (>= 2)
    """
    if n < 2:
        raise GeometryError(n, 'At least two trajectory samples are required ({:d} given)'.format(n))

    return [bezierPose(traj, i / (n - 1)) for i in range(n)]


def _randomUnitVector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    while np.linalg.norm(v) < 1e-9:
        v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _offsetPose(rotVec: np.ndarray, translation: np.ndarray) -> Pose:

    if not np.any(rotVec):
        return Pose(translation=translation)

    return Pose(Rotation.from_rotvec(rotVec).as_quat(), translation)


def randomTrajectory(rngSeed, nominal: Pose, translationMag: float, rotationMag: float,
                     nControls: int = 4) -> Trajectory:
    """
    Samples a random camera-shake trajectory around a nominal pose. The first control pose is the nominal pose;
    the remaining controls are perturbed by offsets (in the camera frame) whose translation length is uniform
    in [0, translationMag] and whose rotation angle is uniform in [0, rotationMag] about a random axis.

    :param rngSeed: Integer seed or tuple of integer keys
    :param nominal: Pose at the start of the exposure
    :param translationMag: Maximum translation offset (scene units)
    :param rotationMag: Maximum rotation offset (radians)
    :param nControls: Number of Bezier control poses (2 - 4, cubic by default)
    """
    if translationMag < 0 or rotationMag < 0:
        raise GeometryError((translationMag, rotationMag), 'Trajectory magnitudes must be non-negative')

    if not 2 <= nControls <= 4:
        raise GeometryError(nControls, 'Number of control poses must lie in [2, 4]')

    keys = rngSeed if isinstance(rngSeed, tuple) else (rngSeed,)
    rng = rngFor(*keys)

    controls = [nominal]

    for i in range(1, nControls):
        translation = _randomUnitVector(rng) * rng.uniform(0.0, translationMag)
        rotVec = _randomUnitVector(rng) * rng.uniform(0.0, rotationMag)

        offset = _offsetPose(rotVec, translation)
        controls.append(nominal if offset == Pose.identity() else compose(nominal, offset))

    return Trajectory(controls)


def sameDirectionTrajectory(rngSeed, nominal: Pose, direction, length: float, rotationMag: float,
                            nControls: int = 4) -> Trajectory:
    """
    Builds a trajectory whose translation moves along a fixed camera-frame direction. Used to synthesise
    datasets where all views share the same blur direction and only the blur length differs.

    :param rngSeed: Integer seed or tuple of integer keys
    :param nominal: Pose at the start of the exposure
    :param direction: Camera-frame direction of the motion
    :param length: Total translation length (scene units)
    :param rotationMag: Rotation about the axis perpendicular to the motion, in radians, at the trajectory end
    :param nControls: Number of Bezier control poses
    """
    if length < 0 or rotationMag < 0:
        raise GeometryError((length, rotationMag), 'Trajectory magnitudes must be non-negative')

    if not 2 <= nControls <= 4:
        raise GeometryError(nControls, 'Number of control poses must lie in [2, 4]')

    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)

    # Rotating about the axis perpendicular to both motion and view direction keeps the image blur aligned
    axis = np.cross(d, np.array([0.0, 0.0, -1.0]))
    axis = axis / np.linalg.norm(axis) if np.linalg.norm(axis) > 1e-9 else np.array([0.0, 1.0, 0.0])

    keys = rngSeed if isinstance(rngSeed, tuple) else (rngSeed,)
    rng = rngFor(*keys)
    jitter = rng.uniform(0.9, 1.1, size=nControls)

    controls = [nominal]
    for i in range(1, nControls):
        s = i / (nControls - 1) * jitter[i]
        offset = _offsetPose(axis * rotationMag * s, d * length * s)
        controls.append(nominal if offset == Pose.identity() else compose(nominal, offset))

    return Trajectory(controls)


def generateRays(camera: Camera, pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generates world-space rays through every pixel centre

    :param camera: Camera intrinsics
    :param pose: Camera-to-world pose
    :return: origins (H x W x 3), unit directions (H x W x 3)
    """
    dirs = pose.transformDirections(camera.pixelDirections())
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def translationError(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def rotationError(a: Pose, b: Pose) -> float:
    return float((a.asRotation().inv() * b.asRotation()).magnitude())
