"""Crosswise-sparse convolutional autoencoder for unsupervised nucleus detection.

A small numpy-only deep learning stack (reverse-mode autodiff, convolution
and batch-norm layers, SGD with momentum) with a convolutional autoencoder
that splits an image into a sparsely gated foreground and a low-capacity
background.  The gate is a single-channel detection map whose active cells
mark detected nuclei.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import LabeledImage, SynthConfig, augment, read_dataset, synth_generate, write_dataset
from .model import CaeClassifier, CaeConfig, CaeModel, build_cae, build_classifier_from_cae, cae_forward, reconstruction_loss
from .sparsity import (
    Detection,
    SparsityGateConfig,
    conventional_sparsity_rate,
    crosswise_sparsity_rate,
    extract_detections,
    upper_percentile,
)
from .tensor import GraphError, NonFiniteError, ShapeError, Tensor, default_dtype, no_grad
from .train import EvalReport, TrainConfig, TrainingDiverged, evaluate, finetune_classifier, train

__version__ = "0.1.0"
