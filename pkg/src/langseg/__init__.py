"""Desk-scale language-guided semantic segmentation in pure numpy."""
import os as _os

# LANGSEG_THREADS caps BLAS threads (default 1, which keeps runs bitwise reproducible);
# it only takes effect if numpy has not been imported yet
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _os.environ.get("LANGSEG_THREADS", "1"))

from .model import ModelConfig, forward, init_params
from .synth import generate_dataset, generate_scene
from .tensor import ParamStore, Tensor

__version__ = "0.1.0"
__all__ = ["ModelConfig", "ParamStore", "Tensor", "forward", "generate_dataset", "generate_scene",
           "init_params"]
