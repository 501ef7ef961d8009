"""WiFi CSI activity recognition: synthetic data, features, model, training and benchmark."""

from ._core import (
    Checkpoint,
    ModelConfig,
    SynthSpec,
    TrainConfig,
    WiflexError,
    amplitude,
    bench,
    dfs,
    load_checkpoint,
    param_count,
    predict,
    subcarrier_indices,
    synth_windows,
    train,
)

__all__ = [
    "Checkpoint",
    "ModelConfig",
    "SynthSpec",
    "TrainConfig",
    "WiflexError",
    "amplitude",
    "bench",
    "dfs",
    "load_checkpoint",
    "param_count",
    "predict",
    "subcarrier_indices",
    "synth_windows",
    "train",
]
