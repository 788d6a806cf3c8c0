"""FedMEMA desk-scale federated segmentation simulator."""

from ._core import (
    ConfigError,
    DataError,
    DimensionError,
    NumericError,
    ProtocolError,
    ablate,
    calibrate,
    crc32,
    dice_ce_loss,
    dsc,
    export_attention,
    generate_dataset,
    kmeans,
    load_config,
    run,
    sweep,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "NumericError",
    "ProtocolError",
    "ablate",
    "calibrate",
    "crc32",
    "dice_ce_loss",
    "dsc",
    "export_attention",
    "generate_dataset",
    "kmeans",
    "load_config",
    "run",
    "sweep",
]
