"""DSSP: a full-history-conditioned diffusion policy on selective state-space
backbones, with toy observation-aliased environments, a trajectory-wise
training pipeline, robustness and efficiency benchmarks, and an exact
tabular oracle for the history-conditioning propositions."""

from .autodiff import Tensor, no_grad
from .numcore import DsspError, ParamSpec, ParamStore, init_params

__all__ = ["Tensor", "no_grad", "DsspError", "ParamSpec", "ParamStore", "init_params"]
__version__ = "0.1.0"
