# -*- coding: utf-8 -*-

import os
import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import Callable, Iterable, List

import numpy as np

VERSION = '0.1.0'

SCHEMA_VERSION = 1
""" Version written into every structured-text file produced by the package """

LinearImage = np.ndarray
""" H x W x 3 float64 array of non-negative linear radiance """

SrgbImage = np.ndarray
""" H x W x 3 uint8 array of display-encoded values """


class RFDeblurError(Exception):
    """
    Base exception raised for errors generated by the package

    Attributes:
        expression -- input expression in which the error occurred
        message -- explanation of the error
    """

    def __init__(self, expression, message=None):

        if message is None:
            message = expression

        self.expression = expression
        self.message = message

        super().__init__(message)


class ConfigError(RFDeblurError):
    """ Invalid or unknown configuration values """


class GeometryError(RFDeblurError):
    """ Invalid poses, cameras or trajectories """


class KernelEstimationError(RFDeblurError):
    """ The blur kernel could not be estimated because the system is rank deficient """


class TrainingDivergenceError(RFDeblurError):
    """ The radiance field optimisation produced a non-finite loss """


class CheckpointError(RFDeblurError):
    """ A checkpoint file is corrupt or was written by an incompatible version """


class DatasetError(RFDeblurError):
    """ Dataset files are missing or do not match the manifest """


class BlurType(Enum):
    """
    The type of blur synthesised for a dataset
    """
    MOTION = 'motion'
    """ Camera shake averaged along a 6-DOF trajectory """
    DEFOCUS = 'defocus'
    """ Thin-lens depth of field """


class ColorSpace(Enum):
    """
    Colour space in which full-reference metrics are computed
    """
    DISPLAY = 'display'
    """ sRGB display-encoded values """
    LINEAR = 'linear'
    """ Linear radiance values """


class ExitCode(Enum):
    """
    Exit status of the command line tool
    """
    SUCCESS = 0
    CONFIG_ERROR = 2
    """ Invalid configuration, unknown keys or command line usage """
    RUNTIME_ERROR = 3
    """ Missing or corrupt files, and failures while processing """


class Settings:
    """
    Provides process wide settings shared by every module
    """

    NUMTHREADS = int(os.environ.get('RFDEBLUR_NUM_THREADS', '1'))
    """ Number of worker threads used for per-view work """

    VERBOSE_OUTPUT = True
    """ When enabled, progress bars are shown for the long running optimisations """

    @classmethod
    def setNumThreads(cls, numThreads: int) -> None:
        """
        Sets the number of worker threads used for per-view processing

        :param numThreads: Number of threads (>= 1)
        """
        if numThreads < 1:
            raise ValueError('Number of threads ({:d}) must be positive'.format(numThreads))

        cls.NUMTHREADS = numThreads

    @classmethod
    def getNumThreads(cls) -> int:
        """
        Returns the number of threads used

        :return: int:
        """
        return cls.NUMTHREADS

    @classmethod
    def setVerboseOutput(cls, state: bool) -> None:
        cls.VERBOSE_OUTPUT = state

    @classmethod
    def map(cls, fn: Callable, items: Iterable) -> List:
        """
        Applies fn to each item, concurrently when more than one thread is configured. Results are returned in
        the order of the inputs so the schedule never changes the outputs.

        :param fn: Callable applied to each item
        :param items: Iterable of items
        :return: List of results
        """
        items = list(items)

        if cls.NUMTHREADS <= 1 or len(items) <= 1:
            return [fn(item) for item in items]

        with ThreadPoolExecutor(max_workers=cls.NUMTHREADS) as executor:
            return list(executor.map(fn, items))


def setupLogging(level=logging.INFO) -> logging.Logger:
    """
    Installs a coloured console handler on the package logger. Falls back to a plain formatter when colorlog
    is not installed.

    :param level: Logging level
    :return: The package logger
    """
    logger = logging.getLogger('pyrfdeblur')
    logger.setLevel(level)

    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    handler = logging.StreamHandler()

    try:
        import colorlog
        handler.setFormatter(colorlog.ColoredFormatter(
            '%(log_color)s%(levelname)-8s%(reset)s %(blue)s%(name)s%(reset)s %(message)s'))
    except ImportError:
        handler.setFormatter(logging.Formatter('%(levelname)-8s %(name)s %(message)s'))

    logger.addHandler(handler)
    logger.propagate = False

    return logger


def seedSequence(*keys) -> np.random.SeedSequence:
    """
    Builds a seed sequence keyed by a tuple of non-negative integers (e.g. dataset seed, view id)
    """
    return np.random.SeedSequence([int(k) for k in keys])


def rngFor(*keys) -> np.random.Generator:
    """
    Returns an independent random generator for the stream identified by keys
    """
    return np.random.default_rng(seedSequence(*keys))
