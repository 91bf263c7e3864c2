"""Cross attention transformer backbone on a small numpy autodiff engine."""

from .analysis import count_params, flops_cpsa, flops_ipsa, flops_msa, model_flops, param_count
from .backbone import FeaturePyramid, Model, build, forward_classify, forward_features
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, CatConfig, preset
from .tensor import Tape, Tensor, backward, finite_diff_check

__all__ = [
    "CatConfig", "FeaturePyramid", "Model", "PRESETS", "Tape", "Tensor", "backward", "build",
    "count_params", "finite_diff_check", "flops_cpsa", "flops_ipsa", "flops_msa", "forward_classify",
    "forward_features", "load_checkpoint", "model_flops", "param_count", "preset", "save_checkpoint",
]
