from .diagnostics import (backward_check, export_norm_stats, layer_gradient_check,
                          write_stats_csv)
from .net import (FULL_SCALE_CHANNELS, NetConfig, UNet, binarize, forward, load_checkpoint,
                  read_checkpoint_header, save_checkpoint)
from .norm import InvalidConditionError, NormPolicy, normalize
from .train import (Adam, TrainConfig, Trainer, UnsampleableError, contrast_dropout,
                    sample_kept_mask, train)

__all__ = [
    "Adam", "InvalidConditionError", "NetConfig", "NormPolicy", "FULL_SCALE_CHANNELS", "TrainConfig",
    "Trainer", "UNet", "UnsampleableError", "backward_check", "binarize", "contrast_dropout",
    "export_norm_stats", "forward", "layer_gradient_check", "load_checkpoint", "normalize",
    "read_checkpoint_header", "sample_kept_mask", "save_checkpoint", "train", "write_stats_csv",
]
