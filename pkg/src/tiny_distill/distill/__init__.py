"""Layer-aligned distillation: configs, losses, student init, LoRA, training."""

from .config import DistillConfig, LayerMap, LoraConfig, TrainConfig, layer_map_apply
from .init import prune_init
from .lora import LoraModel, lora_attach, lora_merge
from .losses import align_loss, lm_loss, output_loss, total_loss
from .train import Adam, TrainingReport, as_sequences, distill_train, sample_batch, teacher_correct, train_lm

__all__ = [
    "Adam",
    "DistillConfig",
    "LayerMap",
    "LoraConfig",
    "LoraModel",
    "TrainConfig",
    "TrainingReport",
    "align_loss",
    "as_sequences",
    "distill_train",
    "layer_map_apply",
    "lm_loss",
    "lora_attach",
    "lora_merge",
    "output_loss",
    "prune_init",
    "sample_batch",
    "teacher_correct",
    "total_loss",
    "train_lm",
]
