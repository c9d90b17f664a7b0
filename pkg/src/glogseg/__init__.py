"""Differentiable Gabor/LoG filter banks feeding a small window-attention U-Net."""
from .backbone import BankConfig, ModelConfig, ModelWeights, load_checkpoint, model_forward, model_init, save_checkpoint
from .data import SegmentationSample, SynthConfig, synth_generate
from .filters import FilterBank, GaborParams, LoGParams, bank_apply, init_bank, learnable_param_count
from .metrics import MetricsReport, dice, evaluate_dataset, hd95
from .tensor import Tape, Tensor, backward
from .train import TrainConfig, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "BankConfig", "ModelConfig", "ModelWeights", "load_checkpoint", "model_forward", "model_init",
    "save_checkpoint", "SegmentationSample", "SynthConfig", "synth_generate", "FilterBank",
    "GaborParams", "LoGParams", "bank_apply", "init_bank", "learnable_param_count", "MetricsReport",
    "dice", "evaluate_dataset", "hd95", "Tape", "Tensor", "backward", "TrainConfig", "run_ablation",
    "train",
]
