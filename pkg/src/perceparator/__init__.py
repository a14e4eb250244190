"""Perceiver-style latent-bottleneck speech separation on a small numpy autodiff core."""

from .attention import MacCounter, complexity_probe, multi_head_attention, perceparator_block
from .model import ModelConfig, ModelParams, count_params, forward, init_params, separate
from .objectives import si_snr, si_snr_improvement, upit_loss
from .tensor import Tape, Tensor, backward, grad_check

__all__ = [
    "MacCounter", "ModelConfig", "ModelParams", "Tape", "Tensor", "backward",
    "complexity_probe", "count_params", "forward", "grad_check", "init_params",
    "multi_head_attention", "perceparator_block", "separate", "si_snr",
    "si_snr_improvement", "upit_loss",
]
__version__ = "0.1.0"
