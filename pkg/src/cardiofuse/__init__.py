"""Early-fusion ECG+PCG heart-sound classification with a tiny 1-D CNN.

Pure numpy: recording I/O, preprocessing, a trainable network with int8
quantization, cross-validation, streaming majority vote and an energy model.
"""

__version__ = "0.1.0"

from .errors import CardiofuseError, InputError
from .model import Model, ModelConfig, build_model, count_flops, count_params
from .preprocess import FusedWindow, PreprocessConfig, preprocess_corpus, preprocess_record
from .signal_io import Label, Modality, PairedRecord, Signal, load_corpus
from .train import TrainConfig, cross_validate, train_model

__all__ = [
    "CardiofuseError", "InputError", "Model", "ModelConfig", "build_model", "count_flops",
    "count_params", "FusedWindow", "PreprocessConfig", "preprocess_corpus", "preprocess_record",
    "Label", "Modality", "PairedRecord", "Signal", "load_corpus", "TrainConfig",
    "cross_validate", "train_model",
]
