from .config import ExperimentConfig
from .core import VolterraLab
from .experiments import ExperimentResult
from .kernels import HurstParam, KernelMatrix, KernelMode, TimeGrid, fbm_kernel_matrix
from .sde_sim import DriftSpec

__version__ = "1.0.0"
__all__ = [
    "DriftSpec",
    "ExperimentConfig",
    "ExperimentResult",
    "HurstParam",
    "KernelMatrix",
    "KernelMode",
    "TimeGrid",
    "VolterraLab",
    "fbm_kernel_matrix",
]
