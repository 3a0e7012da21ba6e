"""Test-time latent steering of visual-token attention in a toy multimodal decoder."""
from .autodiff import NonFiniteError, Tape, Tensor, grad_check
from .edit import AttentionBias, SequenceLayout, build_bias, forward_with_bias
from .geometry import RegionMask, VisualPrompt, distance_transform, rasterize_prompt, soft_weights
from .harness import METHODS, gen_scenario, pretrain_toy, run_roc
from .model import (DecoderWeights, ModelConfig, SyntheticImage, forward_with_attention, generate,
                    init_weights, load_default_weights, load_weights, save_weights)
from .relevancy import relevancy_map, relevancy_score
from .steering import SteeringConfig, early_stop, ema_update, hard_energy, soft_energy, steer

__version__ = "0.1.0"

__all__ = [
    "NonFiniteError", "Tape", "Tensor", "grad_check",
    "AttentionBias", "SequenceLayout", "build_bias", "forward_with_bias",
    "RegionMask", "VisualPrompt", "distance_transform", "rasterize_prompt", "soft_weights",
    "METHODS", "gen_scenario", "pretrain_toy", "run_roc",
    "DecoderWeights", "ModelConfig", "SyntheticImage", "forward_with_attention", "generate",
    "init_weights", "load_default_weights", "load_weights", "save_weights",
    "relevancy_map", "relevancy_score",
    "SteeringConfig", "early_stop", "ema_update", "hard_energy", "soft_energy", "steer",
]
