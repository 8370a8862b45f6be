from . import geometry
from . import scene
from . import blursynth
from . import voxelrf
from . import deblur
from . import metrics

from .core import (VERSION, BlurType, CheckpointError, ColorSpace, ConfigError, DatasetError, GeometryError,
                   KernelEstimationError, RFDeblurError, Settings, TrainingDivergenceError, setupLogging)
from .geometry import Camera, Pose, Trajectory
from .scene import LensConfig, Scene
from .blursynth import DegradationParams, SynthConfig, generateDataset
from .deblur import DeblurConfig, Kernel, initialDeblur, rfGuidedDeblur
from .metrics import EvalConfig, MetricReport, psnr, ssim
from .pipeline import Pipeline, PipelineConfig, PipelineState, runPipeline

__version__ = VERSION
