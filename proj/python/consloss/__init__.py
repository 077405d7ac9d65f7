"""Conservative loss for segmentation adaptation: loss family, metrics and a toy training harness."""

from ._consloss import (
    E,
    HISTORY_HEADER,
    INV_E,
    ConfigError,
    DataError,
    DomainError,
    IoError,
    LossKind,
    LossSpec,
    NumericError,
    StructuralError,
    config_hash,
    eval_grad,
    eval_loss,
    eval_update_grad,
    gradcheck,
    iou_per_class,
    label_topology,
    mean_iou,
    resolve_config,
    train,
    zero_point,
)

__all__ = [
    "E",
    "HISTORY_HEADER",
    "INV_E",
    "ConfigError",
    "DataError",
    "DomainError",
    "IoError",
    "LossKind",
    "LossSpec",
    "NumericError",
    "StructuralError",
    "config_hash",
    "eval_grad",
    "eval_loss",
    "eval_update_grad",
    "gradcheck",
    "iou_per_class",
    "label_topology",
    "mean_iou",
    "resolve_config",
    "train",
    "zero_point",
]
