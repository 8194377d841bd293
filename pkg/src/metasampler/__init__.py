"""Learned data-sampling policies for small embedding models.

A sampler network scores training samples; its softmax defines selection
probabilities for single-image and triplet batches.  The sampler is trained
by differentiating the evaluation loss of the model through an
expectation-relaxed SGD step, so that selected samples are the ones whose
updates help the model on data outside the batch.
"""

from .autodiff import AutodiffError, NumericalError, ShapeError, Tensor, backward
from .data import Dataset, SynthSpec, generate_synthetic, load_dataset, save_dataset
from .models import ModelConfig, ModelParams, SamplerParams
from .metagrad import ExpectedUpdate, MetaBatch, TripletDraw, sampler_meta_step
from .policy import SamplingPolicy, softmax_policy
from .trainer import TrainConfig, run

__all__ = [
    "AutodiffError",
    "Dataset",
    "ExpectedUpdate",
    "MetaBatch",
    "ModelConfig",
    "ModelParams",
    "NumericalError",
    "SamplerParams",
    "SamplingPolicy",
    "ShapeError",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "TripletDraw",
    "backward",
    "generate_synthetic",
    "load_dataset",
    "run",
    "save_dataset",
    "softmax_policy",
]

__version__ = "0.1.0"
