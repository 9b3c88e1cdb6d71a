"""MPCM-Net cloud segmentation on a small numpy autodiff core."""

from .data import SceneConfig, generate_scene
from .decoder import M2B, SSHD, HybridAttention, MPCMNet, UpFuse
from .encoder import MEL, MPA, MPC, SLA, Encoder, ParAM, ParCM, ParSM, sla
from .losses import LossConfig, dice_loss, focal_loss, joint_loss
from .metrics import ConfusionMatrix, confusion_accumulate, metrics
from .scan import ScanParams, selective_scan_1d, selective_scan_2d
from .tensor import ShapeError, Tape, TapeError, Tensor, precision
from .train import TrainConfig, build_model, checkpoint_load, checkpoint_save, evaluate, train_loop

__all__ = [
    "SceneConfig", "generate_scene",
    "M2B", "SSHD", "HybridAttention", "MPCMNet", "UpFuse",
    "MEL", "MPA", "MPC", "SLA", "Encoder", "ParAM", "ParCM", "ParSM", "sla",
    "LossConfig", "dice_loss", "focal_loss", "joint_loss",
    "ConfusionMatrix", "confusion_accumulate", "metrics",
    "ScanParams", "selective_scan_1d", "selective_scan_2d",
    "ShapeError", "Tape", "TapeError", "Tensor", "precision",
    "TrainConfig", "build_model", "checkpoint_load", "checkpoint_save", "evaluate", "train_loop",
]
