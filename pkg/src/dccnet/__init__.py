"""Dense semantic matching with context-aware correlation and dynamic fusion.

Float64 numpy implementation with hand-written gradients: self-similarity
context features, 4D neighborhood consensus, attention-based fusion of the
local and context correlation volumes, weak pair-level losses, and PCK.
"""
from .features import FeatureMap, GroundTruthMap, SynthPairSpec, load_fmap, save_fmap, synth_pair
from .matching import KeypointSet, LossConfig, hard_assign, multi_aux_loss, pck, soft_scores, transfer_keypoints
from .model import ModelConfig, ModelParams, forward, init_params, load_params, loss_and_grad, save_params
from .trainer import TrainConfig, gradcheck_all, train_toy

__version__ = "0.1.0"

__all__ = [
    "FeatureMap", "GroundTruthMap", "SynthPairSpec", "load_fmap", "save_fmap", "synth_pair",
    "KeypointSet", "LossConfig", "hard_assign", "multi_aux_loss", "pck", "soft_scores",
    "transfer_keypoints", "ModelConfig", "ModelParams", "forward", "init_params", "load_params",
    "loss_and_grad", "save_params", "TrainConfig", "gradcheck_all", "train_toy",
]
