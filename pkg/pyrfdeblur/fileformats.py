# -*- coding: utf-8 -*-

import os
import logging
from typing import Type, TypeVar

import numpy as np
from PIL import Image
from pydantic import BaseModel, ValidationError

from .core import ConfigError, DatasetError

logger = logging.getLogger(__name__)

ModelT = TypeVar('ModelT', bound=BaseModel)


def writePng(filename: str, img: np.ndarray) -> None:
    """
    Writes an 8-bit RGB image

    :param filename: Output path
    :param img: H x W x 3 uint8 array
    """
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError('PNG output requires an H x W x 3 uint8 array')

    Image.fromarray(img, mode='RGB').save(filename, format='PNG')


def readPng(filename: str) -> np.ndarray:

    if not os.path.isfile(filename):
        raise DatasetError(filename, 'Image file ({:s}) was not found'.format(filename))

    with Image.open(filename) as im:
        return np.array(im.convert('RGB'), dtype=np.uint8)


def writePfm(filename: str, img: np.ndarray) -> None:
    """
    Writes a linear image as a little-endian 32-bit float colour PFM

    :param filename: Output path
    :param img: H x W x 3 float array
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError('PFM output requires an H x W x 3 array')

    h, w = img.shape[:2]
    data = np.flipud(img).astype('<f4')

    with open(filename, 'wb') as f:
        f.write('PF\n{:d} {:d}\n-1.0\n'.format(w, h).encode('ascii'))
        f.write(data.tobytes())


def readPfm(filename: str) -> np.ndarray:
    """
    Reads a colour PFM file into an H x W x 3 float64 array
    """
    if not os.path.isfile(filename):
        raise DatasetError(filename, 'Image file ({:s}) was not found'.format(filename))

    with open(filename, 'rb') as f:
        header = f.readline().strip()
        dims = f.readline().split()
        scale = float(f.readline().strip())
        payload = f.read()

    if header != b'PF' or len(dims) != 2:
        raise DatasetError(filename, 'File ({:s}) is not a colour PFM image'.format(filename))

    w, h = int(dims[0]), int(dims[1])
    dtype = '<f4' if scale < 0 else '>f4'
    data = np.frombuffer(payload, dtype=dtype)

    if data.size != w * h * 3:
        raise DatasetError(filename, 'PFM payload of ({:s}) is truncated'.format(filename))

    return np.flipud(data.reshape(h, w, 3)).astype(np.float64)


def writeModel(filename: str, model: BaseModel) -> None:
    with open(filename, 'w') as f:
        f.write(model.model_dump_json(indent=2))


def readModel(filename: str, cls: Type[ModelT]) -> ModelT:
    """
    Reads a structured-text file into a validated model

    :param filename: Path of the JSON document
    :param cls: Model class
    :raise: ConfigError: if the document does not match the schema
    """
    if not os.path.isfile(filename):
        raise DatasetError(filename, 'File ({:s}) was not found'.format(filename))

    with open(filename, 'r') as f:
        content = f.read()

    try:
        return cls.model_validate_json(content)
    except ValidationError as e:
        raise ConfigError(filename, 'File ({:s}) does not match the {:s} schema:\n{:s}'.format(filename, cls.__name__, str(e)))


def writeMatrix(filename: str, m: np.ndarray) -> None:
    np.savetxt(filename, m, fmt='%.9e')


def readMatrix(filename: str) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(filename))
