"""
Voxel grid radiance fields: storage, differentiable volume rendering and optimisation
"""

from .grid import (EMPTY_DENSITY, VoxelGrid, evalSh, loadGrid, prune, sampleTrilinear, saveGrid, shBasis,
                   snapToCheckpointPrecision, softplus, softplusInverse, totalVariation, upsample)
from .render import (GridGradient, gradRay, gradRays, quadratureWeights, rayBoxIntersect, renderRay, renderRays,
                     renderView)
from .trainer import LearningRates, RMSprop, TrainConfig, TrainResult, trainRF
