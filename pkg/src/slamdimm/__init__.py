"""Missing-modality brain MRI synthesis with a shared-latent diffusion
bottleneck and a volumetric coherence refiner."""

__version__ = "0.1.0"

from .core import MODALITY_ORDER, ModalityId, MultiModalVolume, SliceSample, Volume, validate_case
from .diffusion import NoiseSchedule, build_linear_schedule
from .losses import LossWeights
from .networks import CenArchConfig, MmgArchConfig
from .phantom import PhantomSpec, generate_phantom_case
from .preprocessing import PreprocessConfig

__all__ = [
    "__version__",
    "MODALITY_ORDER",
    "ModalityId",
    "MultiModalVolume",
    "SliceSample",
    "Volume",
    "validate_case",
    "NoiseSchedule",
    "build_linear_schedule",
    "LossWeights",
    "MmgArchConfig",
    "CenArchConfig",
    "PhantomSpec",
    "generate_phantom_case",
    "PreprocessConfig",
]
