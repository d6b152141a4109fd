"""Fine-grained batch normalization with exact inference-time fusion."""
from .autograd import Tape, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, preset
from .finet import build_finet, count_flops, count_params, describe
from .fusion import fuse_model, verify_fusion
from .norm import GroupSpec, NormState
from .tensor import Rng, Tensor, tensor_create

__all__ = [
    "GroupSpec", "NormState", "Rng", "RunConfig", "Tape", "Tensor", "backward", "build_finet",
    "count_flops", "count_params", "describe", "fuse_model", "load_checkpoint", "preset",
    "save_checkpoint", "tensor_create", "verify_fusion",
]
